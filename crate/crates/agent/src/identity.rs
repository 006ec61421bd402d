use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{AgentError, Result};

/// Platform identity to local account, loaded from a
/// `platform_identity local_account` per-line file with `#` comments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdentityMap {
    entries: BTreeMap<String, String>,
}

/// Local account names are used as directory names, so they are restricted
/// to the portable POSIX user-name alphabet.
fn valid_account(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase() || c == '_')
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
        && name.len() <= 32
}

impl IdentityMap {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| AgentError::config(origin, format!("line {}: {m}", n + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [identity, account] = fields[..] else {
                return Err(err(format!("expected `identity account`, got `{line}`")));
            };
            if !valid_account(account) {
                return Err(err(format!("`{account}` is not a valid local account name")));
            }
            if entries.insert(identity.to_string(), account.to_string()).is_some() {
                return Err(err(format!("duplicate identity `{identity}`")));
            }
        }
        Ok(IdentityMap { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AgentError::config(path, e.to_string()))?;
        Self::parse(&text, path)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let text: String = pairs
            .into_iter()
            .map(|(i, a)| format!("{i} {a}\n"))
            .collect();
        Self::parse(&text, Path::new("<inline>"))
    }

    pub fn map_identity(&self, platform_identity: &str) -> Result<&str> {
        self.entries
            .get(platform_identity)
            .map(String::as_str)
            .ok_or_else(|| AgentError::UnmappedIdentity(platform_identity.to_string()))
    }

    /// Distinct local accounts, sorted.
    pub fn accounts(&self) -> Vec<&str> {
        let mut accounts: Vec<&str> = self.entries.values().map(String::as_str).collect();
        accounts.sort_unstable();
        accounts.dedup();
        accounts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

use std::path::{Component, Path, PathBuf};

use base64::Engine;
use ci_protocol::api::ArtifactContent;
use ci_protocol::{encode, ArtifactBundle};
use sha2::{Digest, Sha256};

use crate::error::{AdapterError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BUNDLE_DIR: &str = "bundle";

/// What the broker handed back for an artifact id.
#[derive(Debug, Clone)]
pub enum Fetched {
    Content(ArtifactContent),
    /// Retention removed the content; only metadata is left.
    Purged(ArtifactBundle),
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

fn safe_relative(path: &str) -> Option<PathBuf> {
    let p = Path::new(path);
    let ok = !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)));
    ok.then(|| p.to_path_buf())
}

/// Writes the bundle files below `dir/bundle` and the bundle metadata to
/// `dir/manifest.json`, returning the manifest path. Every file is checked
/// against the size and digest in the metadata before anything is written.
/// A purged bundle yields the manifest alone, with `purged: true`.
pub fn publish_artifacts(dir: &Path, fetched: &Fetched) -> Result<PathBuf> {
    let bundle = match fetched {
        Fetched::Purged(bundle) => bundle,
        Fetched::Content(content) => {
            let mut verified = Vec::with_capacity(content.files.len());
            for upload in &content.files {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(&upload.content_b64)
                    .map_err(|e| AdapterError::InvalidInput(format!("{}: bad base64: {e}", upload.relative_path)))?;
                let actual = sha256_hex(&bytes);
                let meta = content.bundle.files.iter().find(|f| f.relative_path == upload.relative_path);
                match meta {
                    Some(m) if m.digest == actual && m.byte_size == bytes.len() as u64 => {}
                    _ => {
                        return Err(AdapterError::DigestMismatch {
                            path: upload.relative_path.clone(),
                            expected: meta.map_or_else(|| "(not in bundle)".into(), |m| m.digest.clone()),
                            actual,
                        })
                    }
                }
                let rel = safe_relative(&upload.relative_path).ok_or_else(|| {
                    AdapterError::InvalidInput(format!("unsafe artifact path `{}`", upload.relative_path))
                })?;
                verified.push((rel, bytes));
            }
            let root = dir.join(BUNDLE_DIR);
            for (rel, bytes) in verified {
                let path = root.join(rel);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(AdapterError::io(parent))?;
                }
                std::fs::write(&path, bytes).map_err(AdapterError::io(&path))?;
            }
            &content.bundle
        }
    };
    std::fs::create_dir_all(dir).map_err(AdapterError::io(dir))?;
    let manifest = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest, encode(bundle)).map_err(AdapterError::io(&manifest))?;
    Ok(manifest)
}

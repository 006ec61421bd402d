//! Domain types, run lifecycle and wire schemas shared by the broker, agents and CLI.

pub mod api;
pub mod codec;
pub mod ids;
pub mod policy;
pub mod state;
pub mod types;

pub use codec::{decode, decode_str, encode, encode_string, SchemaError, WireMessage};
pub use ids::{ArtifactId, EndpointId, FunctionId, RunId, Timestamp, MILLIS_PER_DAY};
pub use state::{replay_path, validate_transition, PathError, RunState, Transition};
pub use types::*;

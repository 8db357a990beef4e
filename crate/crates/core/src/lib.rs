pub mod agent;
pub mod checkpoint;
pub mod critic;
pub mod data;
pub mod diagnostics;
pub mod env;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod finetune;
pub mod nn;
pub mod sac;
pub mod td3;

pub use agent::{Agent, AgentKind, AnyAgent};
pub use error::{Error, Result};

pub mod error;
pub mod key;
pub mod pager;
pub mod params;
pub mod core_tree;
pub mod page;
pub mod leaf_store;
pub mod reader;
pub(crate) mod engine;
pub mod maintenance;
pub mod query;
pub mod rebuild;
pub mod tree;
pub mod baseline;
pub use baseline::{AmortizedTree, BaselineParams, BaselineStats};
pub use core_tree::{Update, UpdateKind};
pub use engine::{LoopStats, Phase, YieldEvent};
pub use error::{Error, Result};
pub use maintenance::OpBudgetMeter;
pub use params::{Constants, Params};
pub use query::QueryCost;
pub use tree::{AuditLevel, DeamoTree, Tree32, Tree64, TreeConfig, TreeI64, TreeStats};

//! Lock-free k-ary leaf-oriented search tree, with a history checker and a
//! deterministic schedule explorer to check it. The guide in `book/` walks
//! through all of it.

pub mod config;
pub mod harness;
pub mod keyspace;
pub(crate) mod node;
pub mod ops;
pub mod rebalance;
pub mod shared;
pub mod sim;
pub mod tree;
pub mod verification;

pub use config::{ConfigError, TreeConfig};
pub use keyspace::{KeyError, KeyWord, PackedEntry, MAX_KEY};
pub use node::{node_search, Step, StatusView};
pub use ops::{OpKind, OpResult};
pub use tree::{AccessPath, Layout, ReclaimMode, Restart, StatsSnapshot, Tree, TreeError, TreeOptions, Violation};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/keys.md")]
    mod keys {}
    #[doc = include_str!("../../../book/src/operations.md")]
    mod operations {}
    #[doc = include_str!("../../../book/src/rebalancing.md")]
    mod rebalancing {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/schedules.md")]
    mod schedules {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

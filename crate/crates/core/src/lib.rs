//! Deterministic simulator of an asynchronous GPU-centric SSD I/O stack.
//!
//! Simulated GPU threads issue NVMe commands through shared submission
//! queues, a background service warp polls completion queues and clears
//! per-command barriers, and a block-granular software cache with an
//! optional share table sits in front of the simulated devices. Everything
//! runs on the single-threaded virtual-clock executor in [`sim`].
//!
//! ```
//! use agile_sim::{AgileConfig, AgileHost};
//!
//! let host = AgileHost::new(AgileConfig::small()).unwrap();
//! let report = host
//!     .run_kernel(32, |mut t| async move {
//!         let v: u32 = t.array_get(0, t.index() as u64).await?;
//!         assert_eq!(v, 0);
//!         t.finish()
//!     })
//!     .unwrap();
//! assert_eq!(report.kernel_errors, 0);
//! ```

use std::fmt;

pub mod api;
pub mod audit;
pub mod bench;
pub mod cache;
pub mod config;
pub mod ctrl;
pub mod host;
pub mod lock_chain;
pub mod nvme;
pub mod service;
pub mod share_table;
pub mod sim;
pub mod ssd;
pub mod stress;

pub use api::{AgileBuf, ApiError, Element, GpuThread};
pub use config::{AgileConfig, ConfigError};
pub use ctrl::AgileCtrl;
pub use host::{AgileHost, HostError, RunReport};

/// A device block address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub dev: u16,
    pub blk: u64,
}

impl BlockKey {
    pub fn new(dev: u16, blk: u64) -> Self {
        BlockKey { dev, blk }
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.dev, self.blk)
    }
}

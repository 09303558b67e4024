//! Sequenced execution of selectively hosted services.
pub mod dma;
pub mod fco_log;
pub mod fixtures;
pub mod ids;
pub mod node;
pub mod oracle;
pub mod runtime;
pub mod scenario;
pub mod simnet;
pub mod upc;
pub mod value;

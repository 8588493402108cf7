pub mod format;
pub mod mvcc;
pub mod logging;
pub mod pipeline;
pub mod engine;
pub mod checkpoint;
pub mod recovery;

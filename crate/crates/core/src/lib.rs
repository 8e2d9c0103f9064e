//! Chunked parallel file transfer.
//!
//! Large files are split into disjoint chunks that several source/destination
//! session pairs move concurrently, each chunk checked by comparing the
//! digest taken while the source read it with a digest of the bytes re-read
//! from destination storage. Chunk state is journaled so an interrupted
//! transfer resumes without resending verified chunks.

pub mod agent;
pub mod harness;
pub mod integrity;
pub mod journal;
pub mod orchestrator;
pub mod planner;
pub mod protocol;

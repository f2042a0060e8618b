//! Agent embeddings, communication and the gated shared memory.

pub mod agent;
pub mod memory;

pub use agent::{Agent, AgentState, Encoder};
pub use memory::{memory_regularizer, memory_update, AgentId, MemoryGate, SharedMemory};

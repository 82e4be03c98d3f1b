pub mod curriculum;
pub mod dialogue;
pub mod embeddings;
pub mod metrics;
pub mod pipeline;
pub mod rewards;

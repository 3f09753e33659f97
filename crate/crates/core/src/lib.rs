//! Demonstration selection for cross-domain text-to-SQL with a frozen
//! completion model: out-of-domain examples from other databases plus
//! synthetic in-domain examples from the target database.

pub mod bm25;
pub mod corpus;
pub mod executor;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod sql;
pub mod synthesis;

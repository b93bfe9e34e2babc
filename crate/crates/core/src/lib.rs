pub mod analysis;
pub mod corpus;
pub mod ir;
pub mod metadata;
pub mod pipeline;
pub mod runtime;
pub mod sweeper;

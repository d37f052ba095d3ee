pub mod assets;
pub mod corpus;
pub mod dsl;
pub mod eval;
pub mod interface;
pub mod log;
pub mod pipeline;
pub mod registry;
pub mod sim;
pub mod stats;
pub mod translator;

pub mod cli;
pub mod corpus;
pub mod model;
pub mod schedule;
pub mod taskbuilder;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;
pub mod decoder;
pub mod metrics;

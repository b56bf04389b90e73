pub mod cli;
pub mod corpus;
pub mod evaluation;
pub mod gateway;
pub mod oracle;
pub mod pipeline;
pub mod prompt;
pub mod scoring;

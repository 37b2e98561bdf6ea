pub mod annotate;
pub mod client;
pub mod dataset;
pub mod images;
pub mod metaeval;
pub mod oracle;
pub mod parser;
pub mod pipeline;
pub mod prompts;
pub mod record;

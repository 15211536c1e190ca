pub mod cli;
pub mod corpus;
pub mod eval;
pub mod examples;
pub mod fixtures;
pub mod lexicon;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod tokenizer;
pub mod train;

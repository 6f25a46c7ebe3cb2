//! Knowledge-intensive program generation for domain calculations.
//!
//! A model reads a knowledge document and writes a short Python program
//! whose header declares the source, the inputs and the outputs. At query
//! time an extractor fills the inputs from the question, the program runs in
//! a sandbox, and a concluder turns the outcome into a final answer.
//!
//! Programs sampled for the same document are scored on training queries and
//! turned into preference pairs, which feed the next round of generation.
//!
//! ```
//! use kipg::program::parse_metadata;
//!
//! let source = "# Source: Article 7\n# Inputs:\n# amount (decimal, yuan): the claimed sum\n# Outputs:\n# fee (decimal, yuan): the fee\nfee = amount * 0.01\n";
//! let meta = parse_metadata(source).unwrap();
//! assert_eq!(meta.inputs[0].name, "amount");
//! ```

pub mod evaluation;
pub mod executor;
pub mod gateway;
pub mod jsonl;
pub mod pipeline;
pub mod preference;
pub mod program;
pub mod retrieval;
pub mod store;

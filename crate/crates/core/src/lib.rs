//! Deductive qualitative coding with language models.
//!
//! A [`codebook::Codebook`] defines the codes; [`corpus`] turns documents
//! into passages and loads gold labels; [`prompting`] renders the chat
//! requests; [`llm_client`] sends them with caching and retries;
//! [`parser`] reads the decisions back; [`reliability`] scores them; and
//! [`experiment`] ties a full run together.

pub mod codebook;
pub mod corpus;
pub mod experiment;
pub mod fixtures;
pub mod llm_client;
pub mod parser;
pub mod prompting;
pub mod reliability;

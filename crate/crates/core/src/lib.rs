//! Zero-shot extraction of entities, attributes and values from domain text.
//!
//! The crate is organised along the processing path: [`corpus`] ingests and
//! segments documents, [`vector_index`] embeds chunks and answers exact kNN
//! queries, [`ebr_filter`] trims a ranked hit list to its relevant prefix,
//! [`llm_gateway`] talks to chat models, [`pipeline`] runs the four
//! extraction stages, and [`evaluation`] scores outputs against gold data.

pub mod corpus;
pub mod ebr_filter;
pub mod evaluation;
pub mod fsutil;
pub mod http;
pub mod vector_index;
pub mod llm_gateway;
pub mod pipeline;

//! Curation pipeline for domain-specific image-text training corpora.

pub mod assembly;
pub mod caption;
pub mod clients;
pub mod config;
pub mod ingest;
pub mod instruct;
pub mod knowledge;
pub mod mock;
pub mod quality;
pub mod service;
pub mod store;
pub mod text;

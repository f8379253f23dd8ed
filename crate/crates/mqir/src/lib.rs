//! File formats, run configuration, command pipeline and HTTP service around `mqir-core`.

pub mod config;
pub mod engine;
pub mod formats;
pub mod pipeline;
pub mod render;
pub mod service;

/// JSON schema for the query service's request and response bodies.
pub const QUERY_SCHEMA: &str = include_str!("../schema/query-service.schema.json");

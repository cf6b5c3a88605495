//! Mental-health meme symptom classification.
//!
//! The pipeline turns a corpus of memes (OCR text plus optional image
//! references) into symptom predictions: an LLM backend produces
//! figurative-commonsense reasoning for each meme, an embedding store
//! retrieves similar training memes as few-shot exemplars, and a small
//! trainable text encoder classifies the assembled input under either a
//! multiclass (anxiety) or multilabel (depression) decision rule. An
//! evaluation harness computes macro/weighted/micro F1 and drives the
//! eight-configuration ablation matrix.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`corpus`]: manifest ingestion, label schemas, split statistics
//! - [`reasoner`]: prompt templates, backend abstraction, parsing, cache
//! - [`fusion`]: embedding providers, the fusion index, cosine retrieval
//! - [`classifier`]: input assembly, training, prediction, thresholds
//! - [`evalsuite`]: metrics, confusion matrices, the ablation runner
//! - [`pipeline`]: run configuration and the stage orchestrator

pub mod classifier;
pub mod corpus;
pub mod evalsuite;
pub mod fusion;
pub mod pipeline;
pub mod reasoner;
pub mod synthetic;
pub mod text;

//! Multimodal sensing pipeline for in-home monitoring.
//!
//! Simulated phones and watches record samples into durable buffers and
//! forward them (directly or via a BLE relay) to an idempotent ingest store;
//! connectors pull motion and sleep data from mock vendor clouds; the merger
//! writes one CSV per modality per time segment plus a coverage report.

pub mod connectors;
pub mod edge;
pub mod geofence;
pub mod model;
pub mod netsim;
pub mod protocol;
pub mod ingest;
pub mod server;
pub mod merger;
pub mod scenario;
pub mod sim;

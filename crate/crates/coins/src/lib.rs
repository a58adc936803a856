//! Testbed automation service: repository store, device registry, device
//! daemons, the run pipeline and the HTTP API that fronts them.

pub mod app;
pub mod client;
pub mod clock;
pub mod controller;
pub mod daemon;
pub mod fleet;
pub mod pipeline;
pub mod registry_service;
pub mod repostore;
pub mod server;
pub mod testbed;

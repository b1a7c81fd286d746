//! Command-line and HTTP front ends for sensa campaigns.

pub mod api;
pub mod export;
pub mod server;

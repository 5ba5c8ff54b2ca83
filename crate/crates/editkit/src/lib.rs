//! Edit service and command-line front end for the `sketchmod` model.

pub mod api;
pub mod cli;
pub mod service;

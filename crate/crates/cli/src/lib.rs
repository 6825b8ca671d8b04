pub mod checkpoint;
pub mod commands;
pub mod config;

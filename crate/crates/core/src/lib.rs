pub mod action;
pub mod cli;
pub mod config;
pub mod dsl;
pub mod engine;
pub mod export;
pub mod inner;
pub mod outer;
pub mod review;
pub mod sim;
pub mod store;

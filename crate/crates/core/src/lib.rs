//! Core of an AI teammate for multi-party text conversations.

pub mod adapter;
pub mod clock;
pub mod embedding;
pub mod experiment;
pub mod gateway;
pub mod memory;
pub mod orchestrator;
pub mod persistence;
pub mod persona;
pub mod simulation;

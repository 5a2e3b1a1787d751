//! Reconstruct a linked digital model of an automated plant from PLC
//! exports, process-signal traces and RTLS position traces.

pub mod classifier;
pub mod fusion;
pub mod geom;
pub mod graph;
pub mod ingestion;
pub mod pipeline;
pub mod plc;
pub mod segmentation;
pub mod simulator;

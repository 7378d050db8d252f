pub mod eval;
pub mod gateway;
pub mod manifest;
pub mod output;
pub mod par;
pub mod sandbox;
pub mod workflow;

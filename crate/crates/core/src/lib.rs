pub mod adapters;
pub mod numerics;
pub mod rac1;
pub mod stream;
pub mod objectives;
pub mod mapk;
pub mod engine;
pub mod theory;
pub mod persist;
pub mod cli;

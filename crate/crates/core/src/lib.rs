pub mod alignment;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geom;
pub mod globalbranch;
pub mod grad;
pub mod model;
pub mod parttransfer;
pub mod pointset;
pub mod selftest;
pub mod tokenize2d;
pub mod tokenize3d;
pub mod trainer;

pub use error::{Error, Result};

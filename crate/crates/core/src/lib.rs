#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod geometry;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod train;

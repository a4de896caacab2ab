#![allow(dead_code)]

pub mod formulas;
pub mod gradcases;
pub mod gradcheck;
pub mod reference;
pub mod slicer;

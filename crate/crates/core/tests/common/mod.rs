#![allow(dead_code)]

pub mod algebra;
pub mod artifacts;
pub mod gradcheck;
pub mod pca_oracle;
pub mod symmetry;

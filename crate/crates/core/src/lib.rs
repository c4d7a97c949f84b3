pub mod boundary_supervision;
pub mod inference;
pub mod merge_tools;
pub mod model;
pub mod numerics;
pub mod tokenization;
pub mod training;

pub mod model;
pub mod genfun;
pub mod green;
pub mod series;
pub mod asym;
pub mod cli;

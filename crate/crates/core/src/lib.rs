pub mod bspline;
pub mod data;
pub mod design;
pub mod error;
pub mod measurement;
pub mod params;
pub mod spec;
pub mod structural;
pub mod likelihood;
pub mod numdiff;
pub mod optimizer;
pub mod sim;
pub mod prediction;
pub mod io;
pub mod cli;

//! File formats, a parallel replication runner and the `smt2d` command-line
//! front end over `smt2d-core`.

pub mod cli;
pub mod io;
pub mod runner;

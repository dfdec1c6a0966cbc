pub mod driver;
pub mod network;
pub mod powerflow;
pub mod restore;
pub mod schedule;
pub mod socp;
pub mod scd;

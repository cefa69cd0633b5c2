//! Task suites: constellation counting and Hamiltonian spring dynamics.

pub mod constellation;
pub mod hamiltonian;
pub mod integrate;
pub mod io;
pub mod spring;
pub mod train;

pub use integrate::{hamilton_rhs, integrate, Method};
pub use spring::{generate_spring_dataset, spring_hamiltonian, SpringSystem, TrajectoryBatch};

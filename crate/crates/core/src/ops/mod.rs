//! Forward/backward kernels used by the tape.

pub mod activation;
pub mod conv;
pub mod norm;
pub mod pool;

//! Feature shifting module (FSM) with correlation attention, a small pose
//! network built from it, a desk-scale trainer and diagnostic analyses.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod fsm;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod posenet;
pub mod selfcheck;
pub mod trainer;
pub mod param;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Shape4, Tensor4};

//! Distributed training of Nyström-approximated kernel machines.
//!
//! Each worker holds a shard of the training data and the corresponding rows
//! of the kernel matrix between its examples and the basis points. A trust
//! region Newton solver runs on worker 0 and asks all workers for partial
//! objective, gradient and Hessian-vector sums, which are combined over a
//! tree-shaped AllReduce.

pub mod allreduce;
pub mod basis;
pub mod data;
pub mod driver;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod objective;
pub mod reference;
pub mod rng;
pub mod synth;
pub mod tron;

pub use driver::{evaluate, predict, train_files, train_local, BasisChoice, TrainConfig, TrainReport};
pub use error::{Error, Result};
pub use kernel::{BasisSet, HyperParams};
pub use objective::{Loss, ModelState};
pub use tron::{TronConfig, TronTrace};

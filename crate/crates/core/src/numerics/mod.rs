//! Dense tensors, reverse-mode gradients, losses, SGD and the symmetric
//! eigensolver.

mod eigen;
pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use eigen::{sym_eig_max, sym_eig_min, sym_eigvals, JACOBI_MAX_SWEEPS, JACOBI_TOL};
pub use optim::sgd_step;
pub use tape::{
    softmax_rows, BnMode, OpKind, RunningStats, Tape, Var, BN_EPS, BN_MOMENTUM,
};
pub use tensor::Tensor;

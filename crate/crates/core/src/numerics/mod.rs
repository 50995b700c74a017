//! Dense/sparse linear algebra and a reverse-mode differentiation tape.

mod adam;
mod checkpoint;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use sparse::CsrMatrix;
pub use tape::{logistic_term, Gradients, Tape, Var, LOGIT_CLAMP};
pub use tensor::{matmul, row_softmax, Tensor};

use rand::Rng;

/// Glorot-uniform initialisation on `[-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))]`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(vec![rows, cols], data).expect("consistent shape")
}

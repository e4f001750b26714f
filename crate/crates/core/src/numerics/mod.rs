//! Reverse-mode automatic differentiation over dense tensors, Adam, and
//! learning-rate schedules.
//!
//! Every model in the crate builds its forward pass on a [`Tape`]. Ops store
//! whatever their backward needs; [`Tape::backward`] walks nodes in reverse
//! and returns [`Gradients`] for trainable parameters, which callers fold
//! into the [`ParamStore`] with [`ParamStore::accumulate`]. Reductions
//! accumulate in `f64` regardless of the storage type.

mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub(crate) use tape::softmax_inplace;

pub use optim::{adam_step, schedule_lr, Adam, AdamState, LrSchedule, ScheduleKind};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use scalar::{matmul_into, Real};
pub use tape::{gelu, softmax_rows, NodeGrads, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Label-smoothed cross-entropy of a constant logit matrix, without a tape.
pub fn label_smoothed_xent<T: Real>(
    logits: &Tensor<T>,
    targets: &[u32],
    include: Option<&[bool]>,
    eps: f64,
) -> Result<f64> {
    let store = ParamStore::<T>::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(logits.clone());
    let loss = tape.label_smoothed_xent(l, targets, include, eps)?;
    Ok(tape.value(loss).item().as_f64())
}

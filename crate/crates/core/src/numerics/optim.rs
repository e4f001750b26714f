use super::params::ParamStore;
use super::Real;
use crate::error::{Error, Result};

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.first_moment.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!("learning rate {lr}")));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            op: format!("adam gradient[{i}]"),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let g = g.as_f64();
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        if lr > 0.0 {
            *p = T::lit(p.as_f64() - lr * mhat / (vhat.sqrt() + state.epsilon));
        }
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`]; one [`AdamState`] per parameter.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    states: Vec<Option<AdamState>>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_clip(clip: f64) -> Self {
        Self {
            states: Vec::new(),
            clip_norm: Some(clip),
        }
    }

    pub fn state(&self, index: usize) -> Option<&AdamState> {
        self.states.get(index).and_then(|s| s.as_ref())
    }

    /// Applies the accumulated gradients of every trainable parameter that
    /// has one, then clears all gradients.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), None);
        }
        let mut factor = 1.0;
        if let Some(clip) = self.clip_norm {
            let norm: f64 = store
                .iter()
                .filter(|(_, p)| p.trainable)
                .filter_map(|(_, p)| p.grad.as_ref())
                .flat_map(|g| g.iter())
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                factor = clip / norm;
            }
        }
        for (id, p) in store.params_mut() {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let state = self.states[id.index()].get_or_insert_with(|| AdamState::new(grad.len()));
            let scaled: Vec<T>;
            let g = if factor != 1.0 {
                let f = T::lit(factor);
                scaled = grad.iter().map(|&v| v * f).collect();
                &scaled
            } else {
                &grad
            };
            adam_step(p.value.data_mut(), g, state, lr).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite {
                    op: format!("gradient of {}", p.name),
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    InverseSqrt,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            peak_lr: lr,
            warmup_steps: 1,
            kind: ScheduleKind::Constant,
        }
    }

    pub fn inverse_sqrt(peak_lr: f64, warmup_steps: u64) -> Self {
        Self {
            peak_lr,
            warmup_steps,
            kind: ScheduleKind::InverseSqrt,
        }
    }
}

/// Learning rate at 1-based `step`.
///
/// `InverseSqrt` is `peak·min(step/warmup, sqrt(warmup/step))`: linear warmup
/// then decay with the inverse square root of the step.
pub fn schedule_lr(s: &LrSchedule, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::InvalidArgument("schedule step must be >= 1".into()));
    }
    if !(s.peak_lr > 0.0) || s.warmup_steps == 0 {
        return Err(Error::InvalidArgument(format!(
            "schedule needs peak_lr > 0 and warmup >= 1, got {} / {}",
            s.peak_lr, s.warmup_steps
        )));
    }
    Ok(match s.kind {
        ScheduleKind::Constant => s.peak_lr,
        ScheduleKind::InverseSqrt => {
            let t = step as f64;
            let w = s.warmup_steps as f64;
            s.peak_lr * (t / w).min((w / t).sqrt())
        }
    })
}

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{ParamGrads, ParamStore};
use crate::autodiff::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers, created zeroed on the first step.
#[derive(Debug, Clone, Default)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr * wd * p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(params: &mut ParamStore, grads: &ParamGrads, state: &mut AdamWState, cfg: &AdamWConfig) -> StepOutcome {
    if !grads.all_finite() {
        log::warn!("non-finite gradient at optimizer step {}; skipping", state.step + 1);
        return StepOutcome::SkippedNonFinite;
    }
    if state.m.len() != params.len() {
        state.m = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = params.get_mut(id);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        match grads.get(id) {
            Some(g) => {
                let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                for i in 0..pd.len() {
                    let gi = g.data()[i];
                    md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
                    vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
                    let mh = md[i] / bc1;
                    let vh = vd[i] / bc2;
                    pd[i] = pd[i] * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
            None => {
                // Untouched parameter: zero gradient still decays the moments.
                let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                for i in 0..pd.len() {
                    md[i] *= cfg.beta1;
                    vd[i] *= cfg.beta2;
                    let mh = md[i] / bc1;
                    let vh = vd[i] / bc2;
                    pd[i] = pd[i] * decay - cfg.lr * mh / (vh.sqrt() + cfg.eps);
                }
            }
        }
    }
    StepOutcome::Applied
}

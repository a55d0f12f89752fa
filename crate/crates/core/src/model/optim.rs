//! AdamW with decoupled weight decay, plus the linear-warmup /
//! cosine-annealing learning-rate schedule.

use ndarray::Array2;

use super::net::Params;
use super::TrainConfig;

/// Learning-rate schedule: linear warmup to `lr`, then cosine decay to
/// `lr_min` over the remaining steps.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn from_config(cfg: &TrainConfig, total_steps: usize) -> LrSchedule {
        let total_steps = total_steps.max(1);
        LrSchedule {
            lr: cfg.lr,
            lr_min: cfg.lr_min,
            warmup_steps: ((total_steps as f64) * cfg.warmup_frac).floor() as usize,
            total_steps,
        }
    }

    /// Learning rate applied at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_steps = (self.total_steps - self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / decay_steps as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr_min + (self.lr - self.lr_min) * cos
    }
}

/// AdamW: Adam moments plus weight decay applied directly to the weights,
/// not through the gradient.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Params,
    v: Params,
    t: usize,
}

impl AdamW {
    pub fn new(params: &Params, weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// One update. `frozen(name)` exempts a tensor entirely: no moment
    /// update, no decay. Bias and norm tensors (single-row) skip decay.
    pub fn step<F: Fn(&str) -> bool>(
        &mut self,
        params: &mut Params,
        grads: &Params,
        lr: f64,
        frozen: F,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        let g_all = grads.tensors();
        for (((name, p), (_, g)), ((_, m), (_, v))) in params
            .tensors_mut()
            .into_iter()
            .zip(g_all)
            .zip(m_all.iter_mut().zip(v_all.iter_mut()))
        {
            if frozen(&name) {
                continue;
            }
            let decay = if p.nrows() > 1 { self.weight_decay } else { 0.0 };
            update_tensor(
                p, g, m, v, lr, self.beta1, self.beta2, bc1, bc2, self.eps, decay,
            );
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_tensor(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    m: &mut Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    decay: f64,
) {
    ndarray::Zip::from(&mut *p)
        .and(g)
        .and(&mut *m)
        .and(&mut *v)
        .for_each(|pv, &gv, mv, vv| {
            *mv = beta1 * *mv + (1.0 - beta1) * gv;
            *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * (mhat / (vhat.sqrt() + eps) + decay * *pv);
        });
}

/// Scale gradients in place so the global L2 norm is at most `clip_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Params, clip_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, g) in grads.tensors() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, g) in grads.tensors_mut() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadSpec, Model, ModelConfig};

    fn small_params() -> Params {
        Model::new(
            ModelConfig {
                n_layers: 1,
                n_heads: 1,
                d_model: 4,
                d_ff: 8,
                context_len: 4,
                input_width: 3,
                dropout: 0.0,
                seed: 7,
            },
            HeadSpec::Binary { width: 3 },
        )
        .unwrap()
        .params
    }

    #[test]
    fn schedule_warms_up_then_decays_to_floor() {
        let s = LrSchedule {
            lr: 1.0,
            lr_min: 0.1,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert!((s.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((s.lr_at(9) - 1.0).abs() < 1e-12);
        for step in 10..99 {
            assert!(s.lr_at(step) >= s.lr_at(step + 1) - 1e-12);
        }
        assert!((s.lr_at(100) - 0.1).abs() < 1e-9);
        assert!((s.lr_at(10_000) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn schedule_midpoint_is_cosine() {
        let s = LrSchedule {
            lr: 2.0,
            lr_min: 0.0,
            warmup_steps: 0,
            total_steps: 100,
        };
        assert!((s.lr_at(50) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn adamw_first_step_moves_against_gradient() {
        let mut p = small_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(1.0);
        }
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &g, 0.01, |_| false);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b.iter()) {
                // unit gradient, zero decay: every entry moves by ~lr
                assert!((x - (y - 0.01)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn frozen_tensors_do_not_move() {
        let mut p = small_params();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(0.5);
        }
        let mut opt = AdamW::new(&p, 0.01);
        for _ in 0..5 {
            opt.step(&mut p, &g, 0.01, |name| !name.starts_with("head."));
        }
        for ((name, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            if name.starts_with("head.") {
                assert_ne!(a, b, "{name} should train");
            } else {
                assert_eq!(a, b, "{name} should stay frozen");
            }
        }
    }

    #[test]
    fn clip_rescales_only_large_gradients() {
        let mut g = small_params().zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(1.0);
        }
        let norm = clip_global_norm(&mut g, 1.0);
        assert!(norm > 1.0);
        let mut sq = 0.0;
        for (_, t) in g.tensors() {
            sq += t.iter().map(|v| v * v).sum::<f64>();
        }
        assert!((sq.sqrt() - 1.0).abs() < 1e-9);
        let before = g.clone();
        let n2 = clip_global_norm(&mut g, 10.0);
        assert!((n2 - 1.0).abs() < 1e-9);
        assert_eq!(g, before);
    }
}

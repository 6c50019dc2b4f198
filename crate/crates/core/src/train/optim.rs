//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::vit::ParamTable;

/// First and second moments of every parameter plus the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f32> {
    pub step: u64,
    pub m: ParamTable<F>,
    pub v: ParamTable<F>,
}

impl<F: Real> Default for AdamState<F> {
    fn default() -> Self {
        Self {
            step: 0,
            m: ParamTable::new(),
            v: ParamTable::new(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamW {
    pub const EPS: f64 = 1e-8;

    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            lr,
            betas,
            weight_decay,
            eps: Self::EPS,
        }
    }
}

/// Per-tensor multipliers on the learning rate and on the weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_scale: f64,
    pub decay_scale: f64,
}

impl ParamGroup {
    pub const UNIFORM: ParamGroup = ParamGroup {
        lr_scale: 1.0,
        decay_scale: 1.0,
    };
}

/// One AdamW update with the same settings for every tensor.
pub fn adamw_step<F: Real>(
    params: &mut ParamTable<F>,
    grads: &ParamTable<F>,
    state: &mut AdamState<F>,
    opt: &AdamW,
) -> Result<()> {
    adamw_step_grouped(params, grads, state, opt, |_, _| ParamGroup::UNIFORM)
}

/// One AdamW update; `group` picks per-tensor lr / decay multipliers.
///
/// For each element: `w ← w·(1 − lr·λ)`, then the bias-corrected Adam delta
/// `w ← w − lr·m̂/(√v̂ + ε)`. Nothing is modified if any gradient is
/// missing, misshapen or non-finite.
pub fn adamw_step_grouped<F: Real>(
    params: &mut ParamTable<F>,
    grads: &ParamTable<F>,
    state: &mut AdamState<F>,
    opt: &AdamW,
    group: impl Fn(&str, &Tensor<F>) -> ParamGroup,
) -> Result<()> {
    let (b1, b2) = opt.betas;
    if !(opt.lr >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
        return Err(Error::invalid(format!(
            "adamw: lr {} must be >= 0 and betas ({b1}, {b2}) in [0, 1)",
            opt.lr
        )));
    }
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .map_err(|_| Error::invalid(format!("adamw: no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(
                "adamw",
                format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape()),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "adamw gradient" });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, p) in params.iter_mut() {
        let ParamGroup {
            lr_scale,
            decay_scale,
        } = group(name, p);
        let lr = opt.lr * lr_scale;
        let shrink = 1.0 - lr * opt.weight_decay * decay_scale;
        let g = grads.get(name)?.data();
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(p.shape().to_vec()));
            state.v.insert(name, Tensor::zeros(p.shape().to_vec()));
        }
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            let gi = g[i].as_f64();
            let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
            m[i] = F::lit(mi);
            v[i] = F::lit(vi);
            let mhat = mi / c1;
            let vhat = vi / c2;
            let decayed = w.as_f64() * shrink;
            *w = F::lit(decayed - lr * mhat / (vhat.sqrt() + opt.eps));
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base` over `warmup` steps, then half-cosine
/// decay to exactly 0 at `total`. Steps past `total` stay at 0.
pub fn cosine_lr(step: u64, total: u64, base: f64, warmup: u64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let t = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn table(name: &str, vals: &[f64]) -> ParamTable<f64> {
        let mut t = ParamTable::new();
        t.insert(name, Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        t
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = table("w", &[1.5, -2.0]);
        let g = table("w", &[0.0, 0.0]);
        let mut s = AdamState::default();
        adamw_step(&mut p, &g, &mut s, &AdamW::new(0.1, (0.9, 0.95), 0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.5, -2.0]);
        assert_eq!(s.m.get("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(s.v.get("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_grad_decay_is_multiplicative() {
        let mut p = table("w", &[2.0]);
        let g = table("w", &[0.0]);
        let mut s = AdamState::default();
        adamw_step(&mut p, &g, &mut s, &AdamW::new(0.1, (0.9, 0.999), 0.05)).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0 * (1.0 - 0.1 * 0.05));
    }

    #[test]
    fn first_step_hand_oracle() {
        let mut p = table("w", &[0.0]);
        let g = table("w", &[1.0]);
        let mut s = AdamState::default();
        let lr = 1e-3;
        adamw_step(&mut p, &g, &mut s, &AdamW::new(lr, (0.9, 0.95), 0.0)).unwrap();
        let expect = -lr / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().data()[0] - expect).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_gradients_without_side_effects() {
        let mut p = table("w", &[1.0]);
        let mut s = AdamState::default();
        let opt = AdamW::new(0.1, (0.9, 0.95), 0.0);
        assert!(adamw_step(&mut p, &table("w", &[f64::NAN]), &mut s, &opt).is_err());
        assert!(adamw_step(&mut p, &table("w", &[1.0, 2.0]), &mut s, &opt).is_err());
        assert!(adamw_step(&mut p, &table("x", &[1.0]), &mut s, &opt).is_err());
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    /// Independent textbook AdamW on a single scalar.
    struct ScalarAdamW {
        w: f64,
        m: f64,
        v: f64,
        t: i32,
    }

    impl ScalarAdamW {
        fn step(&mut self, g: f64, lr: f64, b1: f64, b2: f64, wd: f64) {
            self.t += 1;
            self.w -= lr * wd * self.w;
            self.m = b1 * self.m + (1.0 - b1) * g;
            self.v = b2 * self.v + (1.0 - b2) * g * g;
            let mhat = self.m / (1.0 - b1.powi(self.t));
            let vhat = self.v / (1.0 - b2.powi(self.t));
            self.w -= lr * mhat / (vhat.sqrt() + 1e-8);
        }
    }

    #[test]
    fn matches_scalar_reference_over_100_steps() {
        let mut rng = Rng::new(42);
        let init: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let mut p = table("w", &init);
        let mut refs: Vec<ScalarAdamW> = init
            .iter()
            .map(|&w| ScalarAdamW { w, m: 0.0, v: 0.0, t: 0 })
            .collect();
        let mut s = AdamState::default();
        for step in 0..100 {
            let g: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let lr = cosine_lr(step, 100, 1e-2, 10);
            adamw_step(&mut p, &table("w", &g), &mut s, &AdamW::new(lr, (0.9, 0.95), 0.05)).unwrap();
            for (r, &gi) in refs.iter_mut().zip(&g) {
                r.step(gi, lr, 0.9, 0.95, 0.05);
            }
        }
        for (w, r) in p.get("w").unwrap().data().iter().zip(&refs) {
            assert!((w - r.w).abs() <= 1e-6 * r.w.abs().max(1e-12), "{w} vs {}", r.w);
        }
    }

    #[test]
    fn grouped_scales_apply() {
        let mut p = table("w", &[1.0]);
        p.insert("b", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut g = table("w", &[0.0]);
        g.insert("b", Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut s = AdamState::default();
        adamw_step_grouped(&mut p, &g, &mut s, &AdamW::new(0.5, (0.9, 0.9), 0.2), |n, _| {
            ParamGroup {
                lr_scale: 1.0,
                decay_scale: if n == "b" { 0.0 } else { 1.0 },
            }
        })
        .unwrap();
        assert_eq!(p.get("b").unwrap().data()[0], 1.0);
        assert_eq!(p.get("w").unwrap().data()[0], 0.9);
    }

    #[test]
    fn schedule_landmarks() {
        let base = 3e-4;
        assert_eq!(cosine_lr(0, 100, base, 10), 0.0);
        assert_eq!(cosine_lr(10, 100, base, 10), base);
        assert_eq!(cosine_lr(100, 100, base, 10), 0.0);
        assert!((cosine_lr(55, 100, base, 10) - base / 2.0).abs() < 1e-18);
        assert_eq!(cosine_lr(5, 100, base, 10), base / 2.0);
        assert_eq!(cosine_lr(0, 10, base, 0), base);
    }

    proptest! {
        #[test]
        fn non_increasing_after_warmup(total in 2u64..500, frac in 0.0f64..1.0) {
            let warmup = ((total - 1) as f64 * frac) as u64;
            let mut prev = f64::INFINITY;
            for s in warmup..=total {
                let lr = cosine_lr(s, total, 1.0, warmup);
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
            prop_assert_eq!(cosine_lr(warmup, total, 1.0, warmup), 1.0);
            prop_assert_eq!(cosine_lr(total, total, 1.0, warmup), 0.0);
        }
    }
}

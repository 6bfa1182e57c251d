//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One update. A non-finite gradient aborts before any state changes.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} moments, got {} params and {} gradient entries",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                step: self.t as usize,
                index,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Cosine,
    Linear,
    Constant,
}

impl std::str::FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(SchedulerKind::Cosine),
            "linear" => Ok(SchedulerKind::Linear),
            "constant" => Ok(SchedulerKind::Constant),
            other => Err(Error::Config(format!("unknown scheduler {other:?}"))),
        }
    }
}

/// Linear warmup from zero over `warmup` steps, then decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub kind: SchedulerKind,
    pub base_lr: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(kind: SchedulerKind, base_lr: f64, warmup_ratio: f64, total: usize) -> Self {
        let warmup = (warmup_ratio * total as f64).ceil() as usize;
        LrSchedule {
            kind,
            base_lr,
            warmup,
            total,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.base_lr * step as f64 / self.warmup.max(1) as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        match self.kind {
            SchedulerKind::Constant => self.base_lr,
            SchedulerKind::Linear => self.base_lr * (1.0 - progress),
            SchedulerKind::Cosine => self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut opt = AdamW::new(3, 0.0);
        let mut p = vec![1.0, -2.0, 0.5];
        opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut opt = AdamW::new(3, 0.0);
        let g = [0.3, -4.0, 1e-3];
        let mut p = vec![0.0; 3];
        opt.step(&mut p, &g, 0.01).unwrap();
        for i in 0..3 {
            let expect = -0.01 * g[i] / (g[i].abs() + 1e-8);
            assert!((p[i] - expect).abs() < 1e-15, "{i}: {} vs {expect}", p[i]);
        }
    }

    #[test]
    fn two_step_hand_trace() {
        // θ0 = (1, -1), g = (0.5, 2) twice, lr 0.1, wd 0.01.
        // step 1: m̂ = g, v̂ = g² → Δ = −0.1·(sign(g)·g/(|g|+ε) + 0.01·θ0)
        // step 2: m = 0.19·g/ (1−0.81) = g, v = 0.001999·g² / (1−0.998001) = g²
        let mut opt = AdamW::new(2, 0.01);
        let mut p = vec![1.0, -1.0];
        let g = [0.5, 2.0];
        opt.step(&mut p, &g, 0.1).unwrap();
        opt.step(&mut p, &g, 0.1).unwrap();
        let mut expect = [1.0f64, -1.0];
        for _ in 0..2 {
            for i in 0..2 {
                expect[i] -= 0.1 * (g[i] / (g[i] + 1e-8) + 0.01 * expect[i]);
            }
        }
        assert!((p[0] - expect[0]).abs() < 1e-12);
        assert!((p[1] - expect[1]).abs() < 1e-12);
        assert!((expect[0] - 0.798_101_004).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut opt = AdamW::new(2, 0.0);
        let mut p = vec![1.0, 1.0];
        let err = opt.step(&mut p, &[0.0, f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { step: 0, index: 1 }));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(SchedulerKind::Cosine, 1.0, 0.1, 100);
        assert_eq!(s.warmup, 10);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(5) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr_at(10), 1.0);
        assert!((s.lr_at(55) - 0.5).abs() < 1e-12);
        assert!(s.lr_at(100).abs() < 1e-15);
        let c = LrSchedule::new(SchedulerKind::Constant, 0.3, 0.0, 10);
        assert_eq!(c.lr_at(0), 0.3);
    }
}

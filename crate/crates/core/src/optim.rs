//! AdamW with decoupled weight decay and the warmup/cosine learning-rate
//! schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then cosine
/// decay to 0 at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak learning rate {peak_lr}")));
        }
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup {warmup_steps} must be shorter than the {total_steps} total steps"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step > t {
            return Err(Error::Range(format!("step {step} beyond {t} total steps")));
        }
        if step < w {
            return Ok(self.peak_lr * step as f64 / w as f64);
        }
        let progress = (step - w) as f64 / (t - w) as f64;
        Ok(self.peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    #[serde(default = "AdamWConfig::default_beta1")]
    pub beta1: f64,
    #[serde(default = "AdamWConfig::default_beta2")]
    pub beta2: f64,
    #[serde(default = "AdamWConfig::default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl AdamWConfig {
    fn default_beta1() -> f64 {
        0.9
    }
    fn default_beta2() -> f64 {
        0.999
    }
    fn default_eps() -> f64 {
        1e-8
    }

    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings {self:?}")))
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T: Real = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(config: AdamWConfig, params: &[&Tensor<T>]) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// One update. `decay[i]` says whether parameter `i` takes weight decay.
    ///
    /// ```text
    /// m ← β1·m + (1−β1)·g        v ← β2·v + (1−β2)·g²
    /// θ ← θ − lr·( m̂/(√v̂ + ε) + λ·θ )
    /// ```
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        decay: &[bool],
        lr: f64,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return Err(Error::Shape(format!(
                "optimizer tracks {n} parameters, got {} params, {} grads, {} decay flags",
                params.len(),
                grads.len(),
                decay.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Range(format!("learning rate {lr}")));
        }
        for (i, ((p, g), m)) in params.iter().zip(grads).zip(&self.m).enumerate() {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: value {:?}, gradient {:?}, state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            g.check_finite(&format!("gradient of parameter {i}"))?;
        }

        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lambda = if decay[i] { weight_decay } else { 0.0 };
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            for (((theta, mk), vk), &gk) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gk = gk.as_f64();
                let mn = beta1 * mk.as_f64() + (1.0 - beta1) * gk;
                let vn = beta2 * vk.as_f64() + (1.0 - beta2) * gk * gk;
                *mk = T::lit(mn);
                *vk = T::lit(vn);
                let m_hat = mn / bc1;
                let v_hat = vn / bc2;
                let th = theta.as_f64();
                *theta = T::lit(th - lr * (m_hat / (v_hat.sqrt() + eps) + lambda * th));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        let s = Schedule::new(3e-4, 100, 1100).unwrap();
        assert_eq!(s.lr_at(0).unwrap(), 0.0);
        assert_eq!(s.lr_at(100).unwrap(), 3e-4);
        assert!((s.lr_at(600).unwrap() - 1.5e-4).abs() <= 1e-12 * 1.5e-4);
        assert_eq!(s.lr_at(1100).unwrap(), 0.0);
        assert!(matches!(s.lr_at(1101), Err(Error::Range(_))));
    }

    #[test]
    fn schedule_continuous_at_warmup_end() {
        let s = Schedule::new(1.0, 1000, 5000).unwrap();
        let before = s.lr_at(999).unwrap();
        let at = s.lr_at(1000).unwrap();
        let after = s.lr_at(1001).unwrap();
        assert!((at - before).abs() < 2e-3 && (at - after).abs() < 2e-3);
    }

    #[test]
    fn schedule_rejects_warmup_past_total() {
        assert!(Schedule::new(1.0, 10, 10).is_err());
        assert!(Schedule::new(1.0, 0, 1).is_ok());
    }

    fn one_param_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut p = Tensor::<f64>::scalar(theta);
        let mut st = AdamWState::new(AdamWConfig::with_weight_decay(wd), &[&p]).unwrap();
        st.step(&mut [&mut p], &[Tensor::scalar(g)], &[true], lr).unwrap();
        p.data()[0]
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = v̂ = 1 after bias correction, update = -0.1 / (1 + 1e-8)
        let theta = one_param_step(1.0, 1.0, 0.1, 0.0);
        assert!((theta - 0.9).abs() < 1e-8, "{theta}");
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        assert_eq!(one_param_step(1.0, 0.0, 0.1, 0.0), 1.0);
    }

    #[test]
    fn pure_decoupled_decay() {
        let theta = one_param_step(1.0, 0.0, 0.1, 0.01);
        assert!((theta - 0.999).abs() < 1e-15, "{theta}");
    }

    #[test]
    fn log_scale_is_exempt_from_decay() {
        let mut a = Tensor::<f64>::scalar(2.0);
        let mut b = Tensor::<f64>::scalar(2.0);
        let mut st = AdamWState::new(AdamWConfig::with_weight_decay(0.5), &[&a, &b]).unwrap();
        let g = [Tensor::scalar(0.0), Tensor::scalar(0.0)];
        st.step(&mut [&mut a, &mut b], &g, &[true, false], 0.1).unwrap();
        assert_eq!(b.data()[0], 2.0);
        assert!((a.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_rejected_before_update() {
        let mut p = Tensor::<f32>::scalar(1.0);
        let mut st = AdamWState::new(AdamWConfig::default(), &[&p]).unwrap();
        let err = st
            .step(&mut [&mut p], &[Tensor::scalar(f32::INFINITY)], &[true], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p.data()[0], 1.0);
    }
}

use std::collections::BTreeMap;

use aesvl_autograd::{Real, Tensor};

use crate::container::{Entries, Stored};
use crate::error::CheckpointError;
use crate::model::OPTIM_PREFIX;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr0 * (1 - step / steps)`.
pub fn linear_decay(lr0: f64, step: usize, steps: usize) -> f64 {
    lr0 * (1.0 - step as f64 / steps as f64)
}

/// Global L2 norm of a gradient set.
pub fn global_norm<T: Real>(grads: &[&Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(&grads.iter().collect::<Vec<_>>());
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Moments are kept per tensor name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T: Real> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    /// Completed updates.
    pub t: u64,
}

impl<T: Real> Default for AdamW<T> {
    fn default() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }
}

impl<T: Real> AdamW<T> {
    /// Starts an update; call once before the per-tensor `update`s.
    pub fn begin(&mut self) {
        self.t += 1;
    }

    /// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn update(&mut self, name: &str, p: &mut Tensor<T>, grad: &Tensor<T>, lr: f64, weight_decay: f64) {
        assert!(self.t > 0, "AdamW::begin must precede update");
        assert_eq!(p.shape(), grad.shape(), "gradient shape of {name}");
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
        let c1 = T::lit(1.0 - BETA1.powi(self.t as i32));
        let c2 = T::lit(1.0 - BETA2.powi(self.t as i32));
        let (lr, wd, eps) = (T::lit(lr), T::lit(weight_decay), T::lit(ADAM_EPS));
        let one = T::one();
        for (((x, &g), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (one - b1) * g;
            *vi = b2 * *vi + (one - b2) * g * g;
            let step = (*mi / c1) / ((*vi / c2).sqrt() + eps);
            *x = *x - lr * (step + wd * *x);
        }
    }

    /// Entries `optim/m/<name>`, `optim/v/<name>` and `optim/t`.
    pub fn to_entries(&self) -> Entries {
        let mut out: Entries = Vec::new();
        for (n, t) in &self.m {
            out.push((format!("{OPTIM_PREFIX}m/{n}"), Stored::from_tensor(t)));
        }
        for (n, t) in &self.v {
            out.push((format!("{OPTIM_PREFIX}v/{n}"), Stored::from_tensor(t)));
        }
        let t = Tensor::<f64>::scalar(self.t as f64);
        out.push((format!("{OPTIM_PREFIX}t"), Stored::from_tensor(&t)));
        out
    }

    /// Reads the optimizer entries back; `None` when there are none.
    pub fn from_entries(entries: &Entries) -> Result<Option<Self>, CheckpointError> {
        let mut s = Self::default();
        let mut found = false;
        for (name, st) in entries {
            let Some(rest) = name.strip_prefix(OPTIM_PREFIX) else {
                continue;
            };
            found = true;
            if rest == "t" {
                let t: Tensor<f64> = st.to_tensor(name)?;
                s.t = t.item() as u64;
            } else if let Some(n) = rest.strip_prefix("m/") {
                s.m.insert(n.to_string(), st.to_tensor(name)?);
            } else if let Some(n) = rest.strip_prefix("v/") {
                s.v.insert(n.to_string(), st.to_tensor(name)?);
            } else {
                return Err(CheckpointError::UnknownTensor(name.clone()));
            }
        }
        Ok(found.then_some(s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_reaches_zero() {
        assert_eq!(linear_decay(0.1, 0, 10), 0.1);
        assert!((linear_decay(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert_eq!(linear_decay(0.1, 10, 10), 0.0);
    }

    #[test]
    fn first_adam_step_is_sign_times_lr() {
        let mut opt = AdamW::<f64>::default();
        let mut p = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(&[3], vec![0.3, -4.0, 0.0]).unwrap();
        opt.begin();
        opt.update("w", &mut p, &g, 0.01, 0.0);
        // m_hat = g, v_hat = g^2, so the step is g / (|g| + eps)
        assert!((p.data()[0] - 0.99).abs() < 1e-9);
        assert!((p.data()[1] + 1.99).abs() < 1e-9);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut opt = AdamW::<f64>::default();
        let mut p = Tensor::new(&[1], vec![2.0]).unwrap();
        opt.begin();
        opt.update("w", &mut p, &Tensor::zeros(&[1]), 0.1, 0.5);
        assert!((p.data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![
            Tensor::new(&[2], vec![3.0f64, 0.0]).unwrap(),
            Tensor::new(&[1], vec![4.0]).unwrap(),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g.iter().collect::<Vec<_>>()) - 1.0).abs() < 1e-15);
        assert_eq!(
            clip_global_norm(&mut g, 10.0),
            global_norm(&g.iter().collect::<Vec<_>>())
        );
    }

    #[test]
    fn entries_round_trip() {
        let mut opt = AdamW::<f32>::default();
        let mut p = Tensor::new(&[2], vec![1.0f32, 2.0]).unwrap();
        opt.begin();
        opt.update("a.b", &mut p, &Tensor::new(&[2], vec![0.5, -0.5]).unwrap(), 0.1, 0.0);
        let back = AdamW::<f32>::from_entries(&opt.to_entries()).unwrap().unwrap();
        assert_eq!(back, opt);
        assert!(AdamW::<f32>::from_entries(&Vec::new()).unwrap().is_none());
    }
}

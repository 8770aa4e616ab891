//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

fn default_lr() -> f64 {
    1e-5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global L2 gradient-norm ceiling; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl OptimConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Layer-norm parameters, biases and dropout belief scalars are not decayed.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains(".ln.") || name.starts_with("dropout."))
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamW {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. `grads` is in store order, one flat array per tensor.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>]) -> Result<()> {
        let all = vec![true; params.len()];
        self.step_masked(params, grads, &all)
    }

    /// Like [`AdamW::step`], but tensors with `trainable[k] == false` are left
    /// untouched, weight decay included.
    pub fn step_masked(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], trainable: &[bool]) -> Result<()> {
        if grads.len() != params.len() || trainable.len() != params.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!("non-finite gradient for {name}")));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.t += 1;
        let c = &self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, (name, p)) in params.iter_mut().enumerate() {
            if !trainable[k] {
                continue;
            }
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, theta) in p.data_mut().iter_mut().enumerate() {
                let g = grads[k][i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta -= c.lr * m_hat / (v_hat.sqrt() + c.eps) + c.lr * wd * *theta;
            }
        }
        Ok(())
    }
}

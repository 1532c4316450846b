use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, betas: [f64; 2]) -> Self {
        Self {
            lr,
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

/// Adam with bias correction. Moments are kept per trainable parameter in the
/// module's visiting order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    names: Vec<String>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, module: &dyn Module) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        module.visit(&mut |p| {
            if !p.buffer {
                names.push(p.name.clone());
                m.push(vec![0.0f32; p.value.numel()]);
            }
        });
        Self {
            cfg,
            step: 0,
            names,
            v: m.clone(),
            m,
        }
    }

    /// Update one slot from its gradient; a missing gradient counts as zero.
    fn update(&mut self, slot: usize, param: &mut Param, grad: Option<&[f32]>, bc1: f64, bc2: f64) -> Result<()> {
        let n = param.value.numel();
        if let Some(gr) = grad {
            if gr.len() != n {
                return Err(Error::shape("adam_step", &[gr.len()], param.value.shape()));
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        let w = param.value.data_mut();
        for i in 0..n {
            let gi = grad.map_or(0.0, |g| g[i]) as f64;
            let mi = beta1 * m[i] as f64 + (1.0 - beta1) * gi;
            let vi = beta2 * v[i] as f64 + (1.0 - beta2) * gi * gi;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let upd = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            w[i] = (w[i] as f64 - upd) as f32;
        }
        Ok(())
    }

    /// One step using the gradients accumulated on `g`.
    pub fn step(&mut self, module: &mut dyn Module, g: &Graph) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let bc1 = if bc1 > 0.0 { bc1 } else { 1.0 };
        let mut slot = 0;
        let mut result = Ok(());
        module.visit_mut(&mut |p| {
            if p.buffer || result.is_err() {
                return;
            }
            if self.names.get(slot) != Some(&p.name) {
                result = Err(Error::invalid(
                    "adam_step",
                    format!("parameter {} does not match optimizer slot {slot}", p.name),
                ));
                return;
            }
            let grad = p.grad(g).map(|s| s.to_vec());
            result = self.update(slot, p, grad.as_deref(), bc1, bc2);
            slot += 1;
        });
        result?;
        if slot != self.names.len() {
            return Err(Error::invalid("adam_step", "module has fewer parameters than the optimizer"));
        }
        Ok(())
    }

    /// Moment tensors named `{prefix}.m.{param}` and `{prefix}.v.{param}`.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.names.len());
        for (which, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, data) in self.names.iter().zip(moments) {
                out.push((
                    format!("{prefix}.{which}.{name}"),
                    Tensor::new([data.len()], data.clone()).expect("flat moment"),
                ));
            }
        }
        out
    }

    /// Restore moments written by [`Adam::state_tensors`].
    pub fn load_state(&mut self, prefix: &str, step: u64, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        for (which, moments) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, data) in self.names.iter().zip(moments.iter_mut()) {
                let key = format!("{prefix}.{which}.{name}");
                let t = lookup(&key).ok_or_else(|| crate::error::CheckpointError::Parameter {
                    name: key.clone(),
                    msg: "missing from checkpoint".into(),
                })?;
                if t.numel() != data.len() {
                    return Err(crate::error::CheckpointError::Parameter {
                        name: key,
                        msg: format!("expected {} values, found {}", data.len(), t.numel()),
                    }
                    .into());
                }
                data.copy_from_slice(t.data());
            }
        }
        self.step = step;
        Ok(())
    }
}

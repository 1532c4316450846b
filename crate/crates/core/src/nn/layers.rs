use rand::Rng;

use super::{join, Mode, Param};
use crate::error::Result;
use crate::tensor::{BatchNormStats, Graph, Tensor, Var};

fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound))
}

/// Affine map over the last axis. Weight is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(prefix: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Self {
            weight: Param::new(join(prefix, "weight"), uniform(&[fan_in, fan_out], bound, rng)),
            bias: Param::new(join(prefix, "bias"), Tensor::zeros([fan_out])),
        }
    }

    /// `x: [R, in]` to `[R, out]`.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let w = self.weight.bind(g, mode.grads);
        let b = self.bias.bind(g, mode.grads);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// 2-D convolution with square kernels.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// He-uniform weights for a following leaky ReLU of slope `slope`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        slope: f32,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f32;
        let bound = (6.0 / ((1.0 + slope * slope) * fan_in)).sqrt();
        Self {
            weight: Param::new(
                join(prefix, "weight"),
                uniform(&[cout, cin, kernel, kernel], bound, rng),
            ),
            bias: bias.then(|| Param::new(join(prefix, "bias"), Tensor::zeros([cout]))),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let w = self.weight.bind(g, mode.grads);
        let b = self.bias.as_ref().map(|b| b.bind(g, mode.grads));
        g.conv2d(x, w, b, self.stride, self.padding)
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f32,
}

impl LayerNorm {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            gamma: Param::new(join(prefix, "gamma"), Tensor::ones([dim])),
            beta: Param::new(join(prefix, "beta"), Tensor::zeros([dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.bind(g, mode.grads);
        let beta = self.beta.bind(g, mode.grads);
        g.layer_norm(x, gamma, beta, self.eps)
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-channel batch normalization with running statistics held as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(join(prefix, "gamma"), Tensor::ones([channels])),
            beta: Param::new(join(prefix, "beta"), Tensor::zeros([channels])),
            running_mean: Param::buffer(join(prefix, "running_mean"), Tensor::zeros([channels])),
            running_var: Param::buffer(join(prefix, "running_var"), Tensor::ones([channels])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchNormStats<f32>>)> {
        let gamma = self.gamma.bind(g, mode.grads);
        let beta = self.beta.bind(g, mode.grads);
        g.batch_norm2d(
            x,
            gamma,
            beta,
            self.running_mean.value.data(),
            self.running_var.value.data(),
            mode.train,
            self.eps,
        )
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_running(&mut self, stats: &BatchNormStats<f32>) {
        let m = self.momentum;
        for (r, &s) in self.running_mean.value.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, &s) in self
            .running_var
            .value
            .data_mut()
            .iter_mut()
            .zip(&stats.var_unbiased)
        {
            *r = (1.0 - m) * *r + m * s;
        }
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
        f(&self.running_mean);
        f(&self.running_var);
    }

    pub(crate) fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

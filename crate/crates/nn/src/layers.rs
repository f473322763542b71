//! Parameterized building blocks. Each layer owns [`ParamId`]s into a
//! [`ParamStore`] and records its forward pass on a [`Graph`].

use ndarray::Array2;
use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// `k x k` convolution with "same" padding for stride 1.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let fan_in = cin * k * k;
        Self::with_init(store, rng, name, cin, cout, k, stride, Init::FanIn(fan_in))
    }

    /// Convolution whose weight and bias start at exactly zero.
    pub fn zeros(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Init::Zeros.build(&[cout, cin, k, k], &mut NoRng));
        let bias = store.add(format!("{name}.bias"), Init::Zeros.build(&[cout], &mut NoRng));
        Self {
            weight,
            bias: Some(bias),
            stride: 1,
            pad: k / 2,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init.build(&[cout, cin, k, k], rng));
        let bias = store.add(format!("{name}.bias"), init.build(&[cout], rng));
        Self {
            weight,
            bias: Some(bias),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Init::FanIn(fin).build(&[fout, fin], rng));
        let bias = store.add(format!("{name}.bias"), Init::FanIn(fin).build(&[fout], rng));
        Self {
            weight,
            bias: Some(bias),
        }
    }

    pub fn no_bias(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fin: usize, fout: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Init::FanIn(fin).build(&[fout, fin], rng));
        Self { weight, bias: None }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Group normalization; `groups == channels` gives instance normalization.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(channels % groups == 0, "{name}: {channels} channels not divisible by {groups}");
        let gamma = store.add(format!("{name}.gamma"), Init::Ones.build(&[channels], &mut NoRng));
        let beta = store.add(format!("{name}.beta"), Init::Zeros.build(&[channels], &mut NoRng));
        Self {
            gamma,
            beta,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ga = g.param(store, self.gamma);
        let be = g.param(store, self.beta);
        g.group_norm(x, ga, be, self.groups, self.eps)
    }
}

/// Sinusoidal embedding of integer timesteps, `[N, dim]`.
pub fn timestep_embedding(timesteps: &[usize], dim: usize, max_period: f64) -> Array2<f64> {
    let half = dim / 2;
    Array2::from_shape_fn((timesteps.len(), dim), |(i, j)| {
        let t = timesteps[i] as f64;
        let k = j % half.max(1);
        let freq = (-(max_period.ln()) * k as f64 / half.max(1) as f64).exp();
        if j < half {
            (t * freq).cos()
        } else {
            (t * freq).sin()
        }
    })
}

/// One-hot rows for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), classes));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

/// Rng stand-in for deterministic initializers that never draw.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("deterministic initializer drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("deterministic initializer drew a random number")
    }
    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("deterministic initializer drew a random number")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_is_bounded_and_distinct() {
        let e = timestep_embedding(&[1, 500, 1000], 16, 10_000.0);
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(e.row(0), e.row(1));
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let mut store = ParamStore::new();
        let conv = Conv2d::zeros(&mut store, "z", 3, 4, 1);
        let mut g = Graph::new();
        let x = g.input(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[2, 3, 4, 4]), 1.7));
        let y = conv.forward(&mut g, &store, x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
    }
}

//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns a [`Grads`]
//! holding the gradient of a scalar loss with respect to every node that
//! requires one. Image tensors use `[N, C, H, W]` layout throughout.

use std::collections::HashMap;

use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Zip};

use crate::par;
use crate::params::{ParamId, ParamStore};
use crate::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Abs(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Silu(Var),
    Tanh(Var),
    /// `[N, C, H, W] + [N, C]` broadcast over space.
    AddChannel(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        cols: Array2<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    AvgPool2(Var),
    Upsample2(Var),
    Concat1(Var, Var),
    Reshape(Var),
    SpatialMean(Var),
    MeanAll(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Forward tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(u64, ParamId), Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every trainable parameter that took part in the pass,
    /// ordered by parameter id.
    pub fn params(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = self
            .params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].clone().map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn as4(t: &Tensor) -> ndarray::ArrayView4<'_, f64> {
    t.view()
        .into_dimensionality::<Ix4>()
        .expect("expected a rank-4 tensor")
}

fn as2(t: &Tensor) -> ndarray::ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a rank-2 tensor")
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds `x` into a `[N * OH * OW, C * K * K]` patch matrix.
fn im2col(x: &ndarray::ArrayView4<'_, f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let ckk = c * k * k;
    let mut data = vec![0.0; n * oh * ow * ckk];
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    par::for_each_chunk_mut(&mut data, oh * ow * ckk, |ni, chunk| {
        let xn = &xs[ni * c * h * w..(ni + 1) * c * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &mut chunk[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
                let mut r = 0;
                for ci in 0..c {
                    let plane = &xn[ci * h * w..(ci + 1) * h * w];
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            row[r] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                            {
                                plane[iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                            r += 1;
                        }
                    }
                }
            }
        }
    });
    Array2::from_shape_vec((n * oh * ow, ckk), data).expect("shape")
}

/// Folds a patch-matrix gradient back onto the input layout.
fn col2im(
    dcols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, c, h, w) = shape;
    let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(w, k, stride, pad));
    let ckk = c * k * k;
    let dc = dcols.as_standard_layout();
    let ds = dc.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * c * h * w];
    par::for_each_chunk_mut(&mut out, c * h * w, |ni, xn| {
        let block = &ds[ni * oh * ow * ckk..(ni + 1) * oh * ow * ckk];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &block[(oy * ow + ox) * ckk..(oy * ow + ox + 1) * ckk];
                let mut r = 0;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                xn[ci * h * w + iy as usize * w + ix as usize] += row[r];
                            }
                            r += 1;
                        }
                    }
                }
            }
        }
    });
    Array4::from_shape_vec((n, c, h, w), out).expect("shape")
}

/// `[N, OH*OW, O]` rows back to `[N, O, OH, OW]`.
fn rows_to_nchw(rows: Array2<f64>, n: usize, o: usize, oh: usize, ow: usize) -> Tensor {
    let r3 = rows
        .into_shape_with_order((n, oh * ow, o))
        .expect("shape");
    r3.permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(IxDyn(&[n, o, oh, ow]))
        .expect("shape")
}

fn nchw_to_rows(t: &ndarray::ArrayView4<'_, f64>) -> Array2<f64> {
    let (n, o, oh, ow) = t.dim();
    let v = t
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, o, oh * ow))
        .expect("shape");
    v.permuted_axes([0, 2, 1])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n * oh * ow, o))
        .expect("shape")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a zero-dimensional or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.len(), 1, "node is not a scalar");
        *t.iter().next().expect("one element")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that gradients are tracked for.
    pub fn input_with_grad(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let v = self.push(
            store.get(id).clone(),
            if trainable { Op::Param(id) } else { Op::Leaf },
            trainable,
        );
        self.params.insert(key, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self
            .value(a)
            .mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, slope), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Adds a per-sample, per-channel vector `[N, C]` to every pixel of `x`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = as4(self.value(x));
        let vs = as2(self.value(v));
        let (n, c, _, _) = xs.dim();
        assert_eq!(vs.dim(), (n, c), "add_channel: shape mismatch");
        let mut out = xs.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                let b = vs[[ni, ci]];
                out.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|x| x + b);
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out.into_dyn(), Op::AddChannel(x, v), rg)
    }

    /// 2D convolution, weight `[O, C, K, K]`, optional bias `[O]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = as4(self.value(x));
        let ws = as4(self.value(w));
        let (n, c, h, wd) = xs.dim();
        let (o, wc, k, k2) = ws.dim();
        assert_eq!(c, wc, "conv2d: channel mismatch ({c} vs {wc})");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let (oh, ow) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let cols = im2col(&xs, k, stride, pad);
        let w2 = ws
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((o, c * k * k))
            .expect("shape");
        let mut rows = cols.dot(&w2.t());
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), &[o], "conv2d: bias shape");
            rows += &bv.view().into_dimensionality::<Ix1>().expect("rank-1 bias");
        }
        let out = rows_to_nchw(rows, n, o, oh, ow);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let cols = if rg { cols } else { Array2::zeros((0, 0)) };
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    /// Dense layer: `x [N, F] · w[O, F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = as2(self.value(x));
        let ws = as2(self.value(w));
        assert_eq!(xs.ncols(), ws.ncols(), "linear: feature mismatch");
        let mut out = xs.dot(&ws.t());
        if let Some(b) = b {
            let bv = self.value(b);
            out += &bv.view().into_dimensionality::<Ix1>().expect("rank-1 bias");
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(out.into_dyn(), Op::Linear { x, w, b }, rg)
    }

    /// Group normalization over `[N, C, H, W]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = as4(self.value(x));
        let (n, c, h, w) = xs.dim();
        assert!(groups > 0 && c % groups == 0, "group_norm: bad group count");
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        let gam = self.value(gamma);
        let bet = self.value(beta);
        let mut xhat = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = vec![0.0; n * groups];
        for ni in 0..n {
            for gi in 0..groups {
                let blk = xs.slice(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                let mean = blk.sum() / m;
                let var = blk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[ni * groups + gi] = is;
                let mut dst = xhat.slice_mut(s![ni, gi * cg..(gi + 1) * cg, .., ..]);
                Zip::from(&mut dst)
                    .and(&blk)
                    .for_each(|d, &v| *d = (v - mean) * is);
            }
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let (ga, be) = (gam[ci], bet[ci]);
            out.slice_mut(s![.., ci, .., ..])
                .mapv_inplace(|v| v * ga + be);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out.into_dyn(),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat: xhat.into_dyn(),
                inv_std,
            },
            rg,
        )
    }

    /// 2x2 average pooling; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xs = as4(self.value(x));
        let (n, c, h, w) = xs.dim();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size");
        let out = Array4::from_shape_fn((n, c, h / 2, w / 2), |(a, b, y, x)| {
            0.25 * (xs[[a, b, 2 * y, 2 * x]]
                + xs[[a, b, 2 * y + 1, 2 * x]]
                + xs[[a, b, 2 * y, 2 * x + 1]]
                + xs[[a, b, 2 * y + 1, 2 * x + 1]])
        });
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::AvgPool2(x), rg)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xs = as4(self.value(x));
        let (n, c, h, w) = xs.dim();
        let out = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, x)| xs[[a, b, y / 2, x / 2]]);
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::Upsample2(x), rg)
    }

    /// Concatenation along axis 1 (channels or features).
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat1: incompatible shapes");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Concat1(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self
            .value(a)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Global average over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xs = as4(self.value(x));
        let (n, c, h, w) = xs.dim();
        let hw = (h * w) as f64;
        let out = ndarray::Array2::from_shape_fn((n, c), |(a, b)| {
            xs.slice(s![a, b, .., ..]).sum() / hw
        });
        let rg = self.rg(x);
        self.push(out.into_dyn(), Op::SpatialMean(x), rg)
    }

    /// Mean of all elements, as a zero-dimensional tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.sum() / t.len() as f64;
        let rg = self.rg(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(a), rg)
    }

    /// Mean softmax cross-entropy of `logits [N, K]` against class indices.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Var {
        let l = as2(self.value(logits));
        let (n, k) = l.dim();
        assert_eq!(labels.len(), n, "softmax_ce: label count");
        let mut probs = Array2::<f64>::zeros((n, k));
        let mut loss = 0.0;
        for (i, row) in l.rows().into_iter().enumerate() {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..k {
                probs[[i, j]] = (row[j] - mx).exp() / z;
            }
            assert!(labels[i] < k, "softmax_ce: label out of range");
            loss -= row[labels[i]] - mx - z.ln();
        }
        let rg = self.rg(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), loss / n as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean squared difference between `a` and `b`.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Mean absolute difference between `a` and `b`.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ab = self.abs(d);
        self.mean_all(ab)
    }

    /// Mean of `(a - target)^2` for a constant target.
    pub fn mse_to(&mut self, a: Var, target: f64) -> Var {
        let d = self.add_scalar(a, -target);
        let sq = self.square(d);
        self.mean_all(sq)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Grads { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Square(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g * x * 2.0);
            }
            Op::Abs(a) => {
                let mut d = self.value(*a).mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .for_each(|d, &x| {
                        if x <= 0.0 {
                            *d *= slope
                        }
                    });
                self.accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    let s = sigmoid(x);
                    *d *= s * (1.0 + x * (1.0 - s));
                });
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d *= 1.0 - y * y);
                self.accumulate(grads, *a, d);
            }
            Op::AddChannel(x, v) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*v) {
                    let g4 = as4(g);
                    let (n, c, _, _) = g4.dim();
                    let dv = Array2::from_shape_fn((n, c), |(a, b)| g4.slice(s![a, b, .., ..]).sum());
                    self.accumulate(grads, *v, dv.into_dyn());
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                let g4 = as4(g);
                let drows = nchw_to_rows(&g4);
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, drows.sum_axis(Axis(0)).into_dyn());
                    }
                }
                let ws = as4(self.value(*w));
                let (o, c, k, _) = ws.dim();
                if self.rg(*w) {
                    let dw = drows.t().dot(cols);
                    let dw = dw
                        .into_shape_with_order(IxDyn(&[o, c, k, k]))
                        .expect("shape");
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*x) {
                    let w2 = ws
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order((o, c * k * k))
                        .expect("shape");
                    let dcols = drows.dot(&w2);
                    let xd = as4(self.value(*x)).dim();
                    let dx = col2im(&dcols, xd, k, *stride, *pad);
                    self.accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::Linear { x, w, b } => {
                let g2 = as2(g);
                if let Some(b) = b {
                    if self.rg(*b) {
                        self.accumulate(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                if self.rg(*w) {
                    let dw = g2.t().dot(&as2(self.value(*x)));
                    self.accumulate(grads, *w, dw.into_dyn());
                }
                if self.rg(*x) {
                    let dx = g2.dot(&as2(self.value(*w)));
                    self.accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let g4 = as4(g);
                let xh = as4(xhat);
                let (n, c, h, w) = g4.dim();
                let cg = c / groups;
                let m = (cg * h * w) as f64;
                if self.rg(*gamma) {
                    let dg = ndarray::Array1::from_shape_fn(c, |ci| {
                        Zip::from(g4.slice(s![.., ci, .., ..]))
                            .and(xh.slice(s![.., ci, .., ..]))
                            .fold(0.0, |acc, &a, &b| acc + a * b)
                    });
                    self.accumulate(grads, *gamma, dg.into_dyn());
                }
                if self.rg(*beta) {
                    let db = ndarray::Array1::from_shape_fn(c, |ci| g4.slice(s![.., ci, .., ..]).sum());
                    self.accumulate(grads, *beta, db.into_dyn());
                }
                if self.rg(*x) {
                    let gam = self.value(*gamma);
                    let mut dxhat = g4.to_owned();
                    for ci in 0..c {
                        let ga = gam[ci];
                        dxhat.slice_mut(s![.., ci, .., ..]).mapv_inplace(|v| v * ga);
                    }
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for gi in 0..*groups {
                            let sl = s![ni, gi * cg..(gi + 1) * cg, .., ..];
                            let dxh = dxhat.slice(sl);
                            let xhb = xh.slice(sl);
                            let sum_d = dxh.sum();
                            let sum_dx = Zip::from(&dxh)
                                .and(&xhb)
                                .fold(0.0, |acc, &a, &b| acc + a * b);
                            let is = inv_std[ni * groups + gi];
                            Zip::from(dx.slice_mut(sl))
                                .and(&dxh)
                                .and(&xhb)
                                .for_each(|o, &d, &xv| {
                                    *o = is / m * (m * d - sum_d - xv * sum_dx);
                                });
                        }
                    }
                    self.accumulate(grads, *x, dx.into_dyn());
                }
            }
            Op::AvgPool2(x) => {
                let g4 = as4(g);
                let (n, c, h, w) = g4.dim();
                let dx = Array4::from_shape_fn((n, c, 2 * h, 2 * w), |(a, b, y, x)| {
                    0.25 * g4[[a, b, y / 2, x / 2]]
                });
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::Upsample2(x) => {
                let g4 = as4(g);
                let (n, c, h, w) = g4.dim();
                let dx = Array4::from_shape_fn((n, c, h / 2, w / 2), |(a, b, y, x)| {
                    g4[[a, b, 2 * y, 2 * x]]
                        + g4[[a, b, 2 * y + 1, 2 * x]]
                        + g4[[a, b, 2 * y, 2 * x + 1]]
                        + g4[[a, b, 2 * y + 1, 2 * x + 1]]
                });
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::Concat1(a, b) => {
                let ca = self.value(*a).shape()[1];
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.slice_axis(Axis(1), (..ca).into()).to_owned());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.slice_axis(Axis(1), (ca..).into()).to_owned());
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = g
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("shape");
                self.accumulate(grads, *a, d);
            }
            Op::SpatialMean(x) => {
                let g2 = as2(g);
                let xs = self.value(*x).shape();
                let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let hw = (h * w) as f64;
                let dx = Array4::from_shape_fn((n, c, h, w), |(a, b, _, _)| g2[[a, b]] / hw);
                self.accumulate(grads, *x, dx.into_dyn());
            }
            Op::MeanAll(a) => {
                let gv = *g.iter().next().expect("scalar grad");
                let t = self.value(*a);
                let d = ArrayD::from_elem(t.raw_dim(), gv / t.len() as f64);
                self.accumulate(grads, *a, d);
            }
            Op::SoftmaxCe {
                logits,
                labels,
                probs,
            } => {
                let gv = *g.iter().next().expect("scalar grad");
                let n = labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[[i, l]] -= 1.0;
                }
                d *= gv / n;
                self.accumulate(grads, *logits, d.into_dyn());
            }
        }
    }
}

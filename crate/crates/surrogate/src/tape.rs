//! Reverse-mode tape over the handful of ops the U-Nets use.
//!
//! Each op records its inputs and whatever it needs for the adjoint. A
//! backward pass walks the nodes in reverse, seeded with gradients on any
//! set of outputs, and returns gradients for every parameter leaf.

use crate::tensor::{
    conv_backward, conv_forward, convt_backward, convt_forward, maxpool2_forward, sigmoid, upsample2_backward,
    upsample2_forward, ConvGeom, Tensor,
};
use crate::Result;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch statistics of one normalization node: per-channel mean and
/// biased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Input,
    Param(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    ConvT {
        x: usize,
        w: usize,
        b: usize,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    MaxPool {
        x: usize,
        arg: Vec<usize>,
    },
    Upsample(usize),
    Gate {
        x: usize,
        a: usize,
    },
    Concat(usize, usize),
    Add(usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Parameter gradients, indexed like the parameter store.
pub type ParamGrads = Vec<Option<Tensor>>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    /// Leaf for parameter `index` of the store.
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(index))
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let y = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom)?;
        Ok(self.push(
            y,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
        ))
    }

    pub fn conv_transpose2(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = convt_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::ConvT { x: x.0, w: w.0, b: b.0 }))
    }

    /// Per-channel normalization: batch statistics when `running` is
    /// `None`, otherwise the given `(mean, var)`. Returns the batch
    /// statistics that were used in the first case.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4()?;
        let hw = h * w;
        let count = n * hw;
        let (mean, var, batch) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xt.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += xt.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                            .iter()
                            .map(|v| (v - m) * (v - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = q / count as f64;
                }
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut y = vec![0.0; xt.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for p in off..off + hw {
                    let xh = (xt.data()[p] - mean[ch]) * inv_std[ch];
                    xhat[p] = xh;
                    y[p] = g[ch] * xh + bt[ch];
                }
            }
        }
        let shape = xt.shape().to_vec();
        let stats = batch.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            Tensor::new(&shape, y)?,
            Op::Norm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch,
            },
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(y, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(y, Op::Sigmoid(x.0))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = maxpool2_forward(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x: x.0, arg }))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let y = upsample2_forward(self.value(x));
        self.push(y, Op::Upsample(x.0))
    }

    /// `a * x` with a single-channel map `a` broadcast over the channels of `x`.
    pub fn gate(&mut self, x: Var, a: Var) -> Result<Var> {
        let (xt, at) = (self.value(x), self.value(a));
        let (n, c, h, w) = xt.dims4()?;
        if at.dims4()? != (n, 1, h, w) {
            return Err(crate::Error::Shape(format!(
                "gate map {:?} does not match feature {:?}",
                at.shape(),
                xt.shape()
            )));
        }
        let hw = h * w;
        let mut y = xt.clone();
        for b in 0..n {
            let ab = &at.data()[b * hw..(b + 1) * hw];
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                y.data_mut()[off..off + hw].iter_mut().zip(ab).for_each(|(v, s)| *v *= s);
            }
        }
        Ok(self.push(y, Op::Gate { x: x.0, a: a.0 }))
    }

    /// Channel concatenation `[a, b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, ca, h, w) = at.dims4()?;
        let (nb, cb, hb, wb) = bt.dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(crate::Error::Shape(format!(
                "cannot concatenate {:?} and {:?}",
                at.shape(),
                bt.shape()
            )));
        }
        let hw = h * w;
        let mut y = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            y.extend_from_slice(&at.data()[s * ca * hw..(s + 1) * ca * hw]);
            y.extend_from_slice(&bt.data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let y = Tensor::new(&[n, ca + cb, h, w], y)?;
        Ok(self.push(y, Op::Concat(a.0, b.0)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(crate::Error::Shape(format!("cannot add {:?} and {:?}", at.shape(), bt.shape())));
        }
        let mut y = at.clone();
        y.add_assign(bt);
        Ok(self.push(y, Op::Add(a.0, b.0)))
    }

    /// Propagates the seed gradients back to the parameter leaves.
    pub fn backward(&self, seeds: &[(Var, Tensor)], n_params: usize) -> ParamGrads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let acc = |grads: &mut Vec<Option<Tensor>>, k: usize, g: Tensor| match &mut grads[k] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        };
        for (v, g) in seeds {
            acc(&mut grads, v.0, g.clone());
        }
        let mut out: ParamGrads = (0..n_params).map(|_| None).collect();
        for k in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[k].take() else {
                continue;
            };
            let node = &self.nodes[k];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => match &mut out[*p] {
                    Some(t) => t.add_assign(&dy),
                    slot => *slot = Some(dy),
                },
                Op::Conv { x, w, b, geom } => {
                    let want_dx = !matches!(self.nodes[*x].op, Op::Input);
                    let (dx, dw, db) = conv_backward(&self.nodes[*x].value, &self.nodes[*w].value, &dy, *geom, want_dx);
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::ConvT { x, w, b } => {
                    let (dx, dw, db) = convt_backward(&self.nodes[*x].value, &self.nodes[*w].value, &dy);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let (n, c, h, w) = dy.d4();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let g = self.nodes[*gamma].value.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in off..off + hw {
                                dgamma[ch] += dy.data()[p] * xhat[p];
                                dbeta[ch] += dy.data()[p];
                            }
                        }
                    }
                    let mut dx = Tensor::zeros(dy.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for p in off..off + hw {
                                let dxh = dy.data()[p] * g[ch];
                                dx.data_mut()[p] = if *batch {
                                    inv_std[ch] / m * (m * dxh - g[ch] * dbeta[ch] - xhat[p] * g[ch] * dgamma[ch])
                                } else {
                                    dxh * inv_std[ch]
                                };
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, Tensor::new(&[c], dgamma).unwrap());
                    acc(&mut grads, *beta, Tensor::new(&[c], dbeta).unwrap());
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(g, &y)| {
                            if y <= 0.0 {
                                *g = 0.0
                            }
                        });
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    dx.data_mut()
                        .iter_mut()
                        .zip(node.value.data())
                        .for_each(|(g, &y)| *g *= y * (1.0 - y));
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, arg } => {
                    let mut dx = Tensor::zeros(self.nodes[*x].value.shape());
                    for (o, &src) in arg.iter().enumerate() {
                        dx.data_mut()[src] += dy.data()[o];
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample(x) => {
                    let (_, _, h, w) = self.nodes[*x].value.d4();
                    acc(&mut grads, *x, upsample2_backward(&dy, h, w));
                }
                Op::Gate { x, a } => {
                    let (xt, at) = (&self.nodes[*x].value, &self.nodes[*a].value);
                    let (n, c, h, w) = xt.d4();
                    let hw = h * w;
                    let mut dx = dy.clone();
                    let mut da = Tensor::zeros(at.shape());
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            for q in 0..hw {
                                da.data_mut()[s * hw + q] += dy.data()[off + q] * xt.data()[off + q];
                                dx.data_mut()[off + q] *= at.data()[s * hw + q];
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Concat(a, b) => {
                    let (_, ca, _, _) = self.nodes[*a].value.d4();
                    let (_, c, _, _) = dy.d4();
                    acc(&mut grads, *a, dy.channels(0, ca));
                    acc(&mut grads, *b, dy.channels(ca, c));
                }
            }
        }
        out
    }
}

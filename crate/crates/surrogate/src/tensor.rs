//! Dense `f64` tensors and the numeric kernels behind the tape ops.
//!
//! Activations are NCHW. Convolution weights are `[c_out, c_in, kh, kw]`,
//! transposed-convolution weights `[c_in, c_out, 2, 2]`, biases `[c]`.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub(crate) fn d4(&self) -> (usize, usize, usize, usize) {
        self.dims4().expect("rank-4 activation")
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `c0..c1` of a rank-4 tensor.
    pub fn channels(&self, c0: usize, c1: usize) -> Tensor {
        let (n, c, h, w) = self.d4();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (c1 - c0) * hw);
        for b in 0..n {
            out.extend_from_slice(&self.data[(b * c + c0) * hw..(b * c + c1) * hw]);
        }
        Tensor::new(&[n, c1 - c0, h, w], out).unwrap()
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers, with
/// `op(A)` of size `m x k` and `op(B)` of size `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index touched by the given
    // dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [f64]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            x[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let k = g.kernel;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(x: &Tensor, wt: &Tensor, bias: Option<&Tensor>, g: ConvGeom) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = wt.dims4()?;
    if ci != c || kh != g.kernel || kw != g.kernel {
        return Err(Error::Shape(format!(
            "conv weight {:?} does not fit input {:?}",
            wt.shape(),
            x.shape()
        )));
    }
    let (ho, wo) = (g.out_size(h), g.out_size(w));
    let kk = c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    let mut col = vec![0.0; kk * ho * wo];
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let ob = &mut out.data[b * co * ho * wo..(b + 1) * co * ho * wo];
        if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
            gemm(co, kk, ho * wo, &wt.data, false, xb, false, 0.0, ob);
        } else {
            im2col(xb, c, h, w, g, &mut col);
            gemm(co, kk, ho * wo, &wt.data, false, &col, false, 0.0, ob);
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data.iter().enumerate() {
                ob[o * ho * wo..(o + 1) * ho * wo].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution: `(dx, dw, db)`.
pub(crate) fn conv_backward(
    x: &Tensor,
    wt: &Tensor,
    dy: &Tensor,
    g: ConvGeom,
    want_dx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (n, c, h, w) = x.d4();
    let (co, _, _, _) = wt.d4();
    let (_, _, ho, wo) = dy.d4();
    let kk = c * g.kernel * g.kernel;
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let mut dw = Tensor::zeros(wt.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut col = vec![0.0; kk * ho * wo];
    let mut dcol = vec![0.0; kk * ho * wo];
    for b in 0..n {
        let xb = &x.data[b * c * h * w..(b + 1) * c * h * w];
        let dyb = &dy.data[b * co * ho * wo..(b + 1) * co * ho * wo];
        for o in 0..co {
            db.data[o] += dyb[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
        }
        let cols: &[f64] = if pointwise {
            xb
        } else {
            im2col(xb, c, h, w, g, &mut col);
            &col
        };
        gemm(co, ho * wo, kk, dyb, false, cols, true, 1.0, &mut dw.data);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data[b * c * h * w..(b + 1) * c * h * w];
            if pointwise {
                gemm(kk, co, ho * wo, &wt.data, true, dyb, false, 1.0, dxb);
            } else {
                gemm(kk, co, ho * wo, &wt.data, true, dyb, false, 0.0, &mut dcol);
                col2im(&dcol, c, h, w, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 transposed convolution; doubles the spatial size.
pub(crate) fn convt_forward(x: &Tensor, wt: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ci, co, kh, kw) = wt.dims4()?;
    if ci != c || kh != 2 || kw != 2 {
        return Err(Error::Shape(format!(
            "transposed-conv weight {:?} does not fit input {:?}",
            wt.shape(),
            x.shape()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, co, 2 * h, 2 * w]);
    let mut cols = vec![0.0; co * 4 * hw];
    for b in 0..n {
        let xb = &x.data[b * c * hw..(b + 1) * c * hw];
        gemm(co * 4, c, hw, &wt.data, true, xb, false, 0.0, &mut cols);
        let ob = &mut out.data[b * co * 4 * hw..(b + 1) * co * 4 * hw];
        for o in 0..co {
            for a in 0..2 {
                for e in 0..2 {
                    let src = &cols[((o * 2 + a) * 2 + e) * hw..][..hw];
                    for y in 0..h {
                        for xx in 0..w {
                            ob[(o * 2 * h + 2 * y + a) * 2 * w + 2 * xx + e] = src[y * w + xx] + bias.data[o];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn convt_backward(x: &Tensor, wt: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.d4();
    let (_, co, _, _) = wt.d4();
    let hw = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(wt.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut cols = vec![0.0; co * 4 * hw];
    for b in 0..n {
        let dyb = &dy.data[b * co * 4 * hw..(b + 1) * co * 4 * hw];
        for o in 0..co {
            db.data[o] += dyb[o * 4 * hw..(o + 1) * 4 * hw].iter().sum::<f64>();
            for a in 0..2 {
                for e in 0..2 {
                    let dst = &mut cols[((o * 2 + a) * 2 + e) * hw..][..hw];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = dyb[(o * 2 * h + 2 * y + a) * 2 * w + 2 * xx + e];
                        }
                    }
                }
            }
        }
        let xb = &x.data[b * c * hw..(b + 1) * c * hw];
        gemm(c, hw, co * 4, xb, false, &cols, true, 1.0, &mut dw.data);
        gemm(c, co * 4, hw, &wt.data, false, &cols, false, 0.0, &mut dx.data[b * c * hw..(b + 1) * c * hw]);
    }
    (dx, dw, db)
}

pub(crate) fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max-pool needs even spatial dims, got {h} x {w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0; n * c * ho * wo];
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..ho {
            for xx in 0..wo {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x.data[k] > x.data[best] {
                        best = k;
                    }
                }
                let o = (p * ho + y) * wo + xx;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

/// Taps of 2x bilinear upsampling with half-pixel centers and clamped
/// edges: output `2i` mixes inputs `i` and `i-1`, output `2i+1` mixes `i`
/// and `i+1`, with weights 3/4 and 1/4.
fn upsample_taps(n: usize) -> Vec<[(usize, f64); 2]> {
    (0..2 * n)
        .map(|o| {
            let i = o / 2;
            let other = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
            [(i, 0.75), (other, 0.25)]
        })
        .collect()
}

pub(crate) fn upsample2_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.d4();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for p in 0..n * c {
        let src = &x.data[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        acc += wy * wx * src[iy * w + ix];
                    }
                }
                dst[oy * 2 * w + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, _, _) = dy.d4();
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        let g = &dy.data[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut dx.data[p * h * w..(p + 1) * h * w];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let gv = g[oy * 2 * w + ox];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        dst[iy * w + ix] += wy * wx * gv;
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

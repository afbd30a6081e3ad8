//! Layer-by-layer forward pass with a retained trace and the matching
//! analytic backward pass.

use super::config::{LayerSpec, ModelConfig};
use super::params::{Gradients, Parameters};
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor added inside the normalization square root.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    /// im2col matrix of shape (C*k*k, B*Ho*Wo).
    Conv { cols: Vec<T> },
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    /// Flat input index selected for every output element.
    Pool { argmax: Vec<usize> },
}

/// Everything the backward pass needs: the batch, every layer output and
/// per-layer auxiliary state.
#[derive(Debug, Clone)]
pub struct ActivationTrace<T> {
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Real> ActivationTrace<T> {
    /// Output of the last layer (the input itself for an empty stack).
    pub fn output(&self) -> &Tensor<T> {
        self.outputs.last().unwrap_or(&self.input)
    }

    pub fn input(&self) -> &Tensor<T> {
        &self.input
    }

    pub fn layer_output(&self, i: usize) -> &Tensor<T> {
        &self.outputs[i]
    }

    pub fn into_output(mut self) -> Tensor<T> {
        self.outputs.pop().unwrap_or(self.input)
    }

    fn layer_input(&self, i: usize) -> &Tensor<T> {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    /// Checksum of every discrete branch taken (ReLU activity and pooling
    /// winners). Two traces with equal signatures went through the same
    /// piecewise-linear region.
    pub fn branch_signature(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (out, cache) in self.outputs.iter().zip(&self.caches) {
            match cache {
                Cache::Pool { argmax } => {
                    for &a in argmax {
                        h.update(&(a as u64).to_le_bytes());
                    }
                }
                Cache::None => {
                    let mask: Vec<u8> = out.data().iter().map(|&v| (v > T::zero()) as u8).collect();
                    h.update(&mask);
                }
                _ => {}
            }
        }
        h.finalize()
    }
}

fn check_params<T: Real>(params: &Parameters<T>, cfg: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let shapes = cfg.shapes()?;
    if params.num_layers() != cfg.layers.len() {
        return Err(Error::config(format!(
            "parameters cover {} layers, model has {}",
            params.num_layers(),
            cfg.layers.len()
        )));
    }
    for (i, (layer, input)) in cfg.layers.iter().zip(&shapes).enumerate() {
        let expected = layer.param_shapes(input);
        let group = params.layer(i);
        if group.len() != expected.len()
            || group.iter().zip(&expected).any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(Error::config(format!(
                "parameter shapes for layer {i} ({}) do not match the model",
                layer.kind_name()
            )));
        }
    }
    Ok(shapes)
}

/// Runs `batch` (shape `[B, ..input_shape]`) through the stack.
pub fn forward<T: Real>(
    params: &Parameters<T>,
    cfg: &ModelConfig,
    batch: &Tensor<T>,
) -> Result<ActivationTrace<T>> {
    let shapes = check_params(params, cfg)?;
    let b = batch.batch();
    if batch.shape().len() != cfg.input_shape.len() + 1 || batch.shape()[1..] != cfg.input_shape[..] || b == 0
    {
        let mut expected = vec![b.max(1)];
        expected.extend_from_slice(&cfg.input_shape);
        return Err(Error::shape("forward input", &expected, batch.shape()));
    }

    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(cfg.layers.len());
    let mut caches = Vec::with_capacity(cfg.layers.len());
    for (i, layer) in cfg.layers.iter().enumerate() {
        let x = if i == 0 { batch } else { &outputs[i - 1] };
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&shapes[i + 1]);
        let group = params.layer(i);
        let (y, cache) = match *layer {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => conv_forward(x, &group[0], &group[1], kernel, stride, padding, &out_shape),
            LayerSpec::Norm => norm_forward(x, &group[0], &group[1]),
            LayerSpec::Relu => (x.map(|v| if v > T::zero() { v } else { T::zero() }), Cache::None),
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => pool_forward(x, kernel, stride, padding, &out_shape),
            LayerSpec::Flatten => (x.clone().reshape(&out_shape)?, Cache::None),
            LayerSpec::FullyConnected { .. } => (fc_forward(x, &group[0], &group[1], &out_shape), Cache::None),
        };
        outputs.push(y);
        caches.push(cache);
    }
    Ok(ActivationTrace {
        input: batch.clone(),
        outputs,
        caches,
    })
}

/// Back-propagates `grad_output` (cotangent of the final output) through a
/// trace produced by [`forward`] with the same parameters. Returns parameter
/// gradients and the gradient with respect to the input batch.
pub fn backward<T: Real>(
    params: &Parameters<T>,
    cfg: &ModelConfig,
    trace: &ActivationTrace<T>,
    grad_output: &Tensor<T>,
) -> Result<(Gradients<T>, Tensor<T>)> {
    check_params(params, cfg)?;
    if trace.outputs.len() != cfg.layers.len() {
        return Err(Error::Invariant(format!(
            "stale trace: {} layer outputs for a {}-layer model",
            trace.outputs.len(),
            cfg.layers.len()
        )));
    }
    if grad_output.shape() != trace.output().shape() {
        return Err(Error::Invariant(format!(
            "stale trace: output gradient {:?} does not match output {:?}",
            grad_output.shape(),
            trace.output().shape()
        )));
    }

    let mut grads = params.zeros_like();
    let mut g = grad_output.clone();
    for (i, layer) in cfg.layers.iter().enumerate().rev() {
        let x = trace.layer_input(i);
        let y = &trace.outputs[i];
        let group = params.layer(i);
        let dx = match (*layer, &trace.caches[i]) {
            (
                LayerSpec::Conv2d {
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Cache::Conv { cols },
            ) => {
                let (dw, db, dx) = conv_backward(x.shape(), &group[0], cols, &g, kernel, stride, padding);
                let gl = grads.layer_mut(i);
                gl[0] = dw;
                gl[1] = db;
                dx
            }
            (LayerSpec::Norm, Cache::Norm { xhat, inv_std }) => {
                let (dgamma, dbeta, dx) = norm_backward(&group[0], xhat, inv_std, &g);
                let gl = grads.layer_mut(i);
                gl[0] = dgamma;
                gl[1] = dbeta;
                dx
            }
            (LayerSpec::Relu, _) => {
                let mut dx = g.clone();
                for (d, &out) in dx.data_mut().iter_mut().zip(y.data()) {
                    if out <= T::zero() {
                        *d = T::zero();
                    }
                }
                dx
            }
            (LayerSpec::MaxPool { .. }, Cache::Pool { argmax }) => {
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for (&a, &gv) in argmax.iter().zip(g.data()) {
                    d[a] += gv;
                }
                dx
            }
            (LayerSpec::Flatten, _) => g.clone().reshape(x.shape())?,
            (LayerSpec::FullyConnected { .. }, _) => {
                let (dw, db, dx) = fc_backward(x, &group[0], &g);
                let gl = grads.layer_mut(i);
                gl[0] = dw;
                gl[1] = db;
                dx
            }
            _ => {
                return Err(Error::Invariant(format!(
                    "stale trace: cache of layer {i} does not match {}",
                    layer.kind_name()
                )))
            }
        };
        if dx.shape() != x.shape() {
            return Err(Error::Invariant(format!("stale trace at layer {i}")));
        }
        g = dx;
    }
    Ok((grads, g))
}

fn conv_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    k: usize,
    s: usize,
    p: usize,
    out_shape: &[usize],
) -> (Tensor<T>, Cache<T>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
    let plane = ho * wo;
    let bp = b * plane;
    let ckk = c * k * k;
    let xd = x.data();

    let mut cols = vec![T::zero(); ckk * bp];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_buf = &mut cols[row * bp..(row + 1) * bp];
                for bi in 0..b {
                    let src = &xd[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                        let dst = &mut row_buf[bi * plane + oy * wo..bi * plane + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < wd as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut outm = vec![T::zero(); co * bp];
    T::gemm(co, ckk, bp, w.data(), false, &cols, false, &mut outm, false);

    let mut y = vec![T::zero(); b * co * plane];
    let bd = bias.data();
    for bi in 0..b {
        for o in 0..co {
            let src = &outm[o * bp + bi * plane..o * bp + (bi + 1) * plane];
            let dst = &mut y[(bi * co + o) * plane..(bi * co + o + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bd[o];
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), y).expect("conv output shape"),
        Cache::Conv { cols },
    )
}

fn conv_backward<T: Real>(
    in_shape: &[usize],
    w: &Tensor<T>,
    cols: &[T],
    g: &Tensor<T>,
    k: usize,
    s: usize,
    p: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, h, wd) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (co, ho, wo) = (g.shape()[1], g.shape()[2], g.shape()[3]);
    let plane = ho * wo;
    let bp = b * plane;
    let ckk = c * k * k;

    // (B, Co, P) -> (Co, B*P)
    let mut gm = vec![T::zero(); co * bp];
    let gd = g.data();
    for bi in 0..b {
        for o in 0..co {
            gm[o * bp + bi * plane..o * bp + (bi + 1) * plane]
                .copy_from_slice(&gd[(bi * co + o) * plane..(bi * co + o + 1) * plane]);
        }
    }

    let mut dw = vec![T::zero(); co * ckk];
    T::gemm(co, bp, ckk, &gm, false, cols, true, &mut dw, false);
    let db: Vec<T> = (0..co).map(|o| gm[o * bp..(o + 1) * bp].iter().copied().sum()).collect();

    let mut dcols = vec![T::zero(); ckk * bp];
    T::gemm(ckk, co, bp, w.data(), true, &gm, false, &mut dcols, false);

    let mut dx = vec![T::zero(); b * c * h * wd];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let row_buf = &dcols[row * bp..(row + 1) * bp];
                for bi in 0..b {
                    let dst = &mut dx[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row_buf[bi * plane + oy * wo..bi * plane + (oy + 1) * wo];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < wd as isize {
                                dst[iy as usize * wd + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    (
        Tensor::new(w.shape().to_vec(), dw).expect("conv weight grad"),
        Tensor::new(vec![co], db).expect("conv bias grad"),
        Tensor::new(in_shape.to_vec(), dx).expect("conv input grad"),
    )
}

fn norm_forward<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> (Tensor<T>, Cache<T>) {
    let b = x.shape()[0];
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let n = (b * inner) as f64;
    let xd = x.data();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            sum += xd[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / n;
        let mut var = 0.0;
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            var += xd[off..off + inner]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let istd = 1.0 / (var / n + NORM_EPS).sqrt();
        let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
        let (g, sh) = (scale.data()[ch], shift.data()[ch]);
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for j in off..off + inner {
                let xh = (xd[j] - mean_t) * istd_t;
                xhat[j] = xh;
                y[j] = g * xh + sh;
            }
        }
        inv_std.push(istd_t);
    }
    (
        Tensor::new(x.shape().to_vec(), y).expect("norm output"),
        Cache::Norm { xhat, inv_std },
    )
}

fn norm_backward<T: Real>(
    scale: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let b = g.shape()[0];
    let c = g.shape()[1];
    let inner: usize = g.shape()[2..].iter().product();
    let n = T::from_f64((b * inner) as f64);
    let gd = g.data();
    let mut dx = vec![T::zero(); gd.len()];
    let mut dscale = Vec::with_capacity(c);
    let mut dshift = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for j in off..off + inner {
                sum_g += gd[j];
                sum_gx += gd[j] * xhat[j];
            }
        }
        dscale.push(sum_gx);
        dshift.push(sum_g);
        let coef = scale.data()[ch] * inv_std[ch] / n;
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for j in off..off + inner {
                dx[j] = coef * (n * gd[j] - sum_g - xhat[j] * sum_gx);
            }
        }
    }
    (
        Tensor::new(vec![c], dscale).expect("norm scale grad"),
        Tensor::new(vec![c], dshift).expect("norm shift grad"),
        Tensor::new(g.shape().to_vec(), dx).expect("norm input grad"),
    )
}

fn pool_forward<T: Real>(x: &Tensor<T>, k: usize, s: usize, p: usize, out_shape: &[usize]) -> (Tensor<T>, Cache<T>) {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (out_shape[2], out_shape[3]);
    let xd = x.data();
    let mut y = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        // strict comparison keeps the first maximum in scan order
                        if best_idx == usize::MAX || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                y.push(best);
                argmax.push(best_idx);
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), y).expect("pool output"),
        Cache::Pool { argmax },
    )
}

fn fc_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, out_shape: &[usize]) -> Tensor<T> {
    let b = x.shape()[0];
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut y = vec![T::zero(); b * out];
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(b, inp, out, x.data(), false, w.data(), true, &mut y, true);
    Tensor::new(out_shape.to_vec(), y).expect("fc output")
}

fn fc_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let b = x.shape()[0];
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    let mut dw = vec![T::zero(); out * inp];
    T::gemm(out, b, inp, g.data(), true, x.data(), false, &mut dw, false);
    let mut db = vec![T::zero(); out];
    for row in g.data().chunks_exact(out) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    let mut dx = vec![T::zero(); b * inp];
    T::gemm(b, out, inp, g.data(), false, w.data(), false, &mut dx, false);
    (
        Tensor::new(w.shape().to_vec(), dw).expect("fc weight grad"),
        Tensor::new(vec![out], db).expect("fc bias grad"),
        Tensor::new(x.shape().to_vec(), dx).expect("fc input grad"),
    )
}

//! Layer definitions with forward passes that record a tape and backward
//! passes that replay it.
//!
//! Layers never own parameters. They hold indices into the parameter list
//! of the [`crate::Network`] they belong to, so one architecture can be run
//! several times in a single step (each call gets its own [`Tape`]) and the
//! gradients of every call accumulate into one gradient list.

use serde::{Deserialize, Serialize};

use crate::ops::{gemm, ConvGeom};
use crate::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    /// Output size equals input size at stride 1; odd excess goes after.
    pub fn same(k_h: usize, k_w: usize) -> Self {
        let (th, tw) = (k_h - 1, k_w - 1);
        Padding {
            top: th / 2,
            bottom: th - th / 2,
            left: tw / 2,
            right: tw - tw / 2,
        }
    }

    pub fn symmetric_w(p: usize) -> Self {
        Padding {
            top: 0,
            bottom: 0,
            left: p,
            right: p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < self.k_h || pw < self.k_w {
            return Err(NnError::Shape(format!(
                "conv kernel {}x{} larger than padded input {ph}x{pw}",
                self.k_h, self.k_w
            )));
        }
        Ok((
            (ph - self.k_h) / self.stride_h + 1,
            (pw - self.k_w) / self.stride_w + 1,
        ))
    }

    fn geom(&self, x: &Tensor) -> Result<ConvGeom, NnError> {
        let [_, c, h, w] = x.shape();
        if c != self.in_c {
            return Err(NnError::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let (out_h, out_w) = self.output_hw(h, w)?;
        Ok(ConvGeom {
            channels: c,
            in_h: h,
            in_w: w,
            k_h: self.k_h,
            k_w: self.k_w,
            stride_h: self.stride_h,
            stride_w: self.stride_w,
            pad_top: self.padding.top,
            pad_left: self.padding.left,
            out_h,
            out_w,
        })
    }
}

/// Fractionally strided convolution. Weight layout is `[in_c, out_c, k_h, k_w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvTranspose2d {
    pub weight: usize,
    pub bias: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub output_pad_h: usize,
    pub output_pad_w: usize,
}

impl ConvTranspose2d {
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), NnError> {
        let oh = ((h - 1) * self.stride_h + self.k_h + self.output_pad_h) as isize
            - 2 * self.pad_h as isize;
        let ow = ((w - 1) * self.stride_w + self.k_w + self.output_pad_w) as isize
            - 2 * self.pad_w as isize;
        if oh < 1 || ow < 1 {
            return Err(NnError::Shape(format!(
                "transposed conv collapses {h}x{w} to {oh}x{ow}"
            )));
        }
        Ok((oh as usize, ow as usize))
    }

    /// Geometry of the equivalent forward convolution (output image → input grid).
    fn geom(&self, x: &Tensor) -> Result<ConvGeom, NnError> {
        let [_, c, h, w] = x.shape();
        if c != self.in_c {
            return Err(NnError::Shape(format!(
                "transposed conv expects {} input channels, got {c}",
                self.in_c
            )));
        }
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(ConvGeom {
            channels: self.out_c,
            in_h: oh,
            in_w: ow,
            k_h: self.k_h,
            k_w: self.k_w,
            stride_h: self.stride_h,
            stride_w: self.stride_w,
            pad_top: self.pad_h,
            pad_left: self.pad_w,
            out_h: h,
            out_w: w,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: usize,
    pub bias: usize,
    pub in_f: usize,
    pub out_f: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    /// Dense layer; flattens each batch item implicitly.
    Linear(Linear),
    Relu,
    LeakyRelu {
        slope: f32,
    },
    /// Non-overlapping max pooling (stride equals kernel), floor semantics.
    MaxPool2d {
        k_h: usize,
        k_w: usize,
    },
    /// Per-item, per-channel normalization over the spatial axes, no affine.
    InstanceNorm {
        eps: f32,
    },
    /// `x + body(x)`.
    Residual(Sequential),
}

/// Saved activations of one forward call.
#[derive(Debug)]
pub enum Cache {
    Input(Tensor),
    Output(Tensor),
    Pool {
        argmax: Vec<u32>,
        in_shape: [usize; 4],
    },
    Norm {
        y: Tensor,
        inv_std: Vec<f32>,
    },
    Residual(Tape),
}

#[derive(Debug, Default)]
pub struct Tape(Vec<Cache>);

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    /// Forward pass that keeps whatever the backward pass needs.
    pub fn forward(&self, params: &[Tensor], x: &Tensor) -> Result<(Tensor, Tape), NnError> {
        let mut tape = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(params, h, true)?;
            tape.push(cache.expect("training forward always caches"));
            h = y;
        }
        Ok((h, Tape(tape)))
    }

    /// Forward pass without recording.
    pub fn infer(&self, params: &[Tensor], x: &Tensor) -> Result<Tensor, NnError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(params, h, false)?.0;
        }
        Ok(h)
    }

    /// Back-propagates `grad` through the recorded call, accumulating
    /// parameter gradients into `grads`, and returns the input gradient.
    pub fn backward(
        &self,
        params: &[Tensor],
        tape: Tape,
        grad: Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor, NnError> {
        if tape.0.len() != self.layers.len() {
            return Err(NnError::Shape("tape does not match architecture".into()));
        }
        let mut g = grad;
        for (layer, cache) in self.layers.iter().zip(tape.0).rev() {
            g = layer.backward(params, cache, g, grads)?;
        }
        Ok(g)
    }

    /// Output shape for an input shape, without touching any values.
    pub fn output_shape(&self, shape: [usize; 4]) -> Result<[usize; 4], NnError> {
        let mut s = shape;
        for layer in &self.layers {
            s = layer.output_shape(s)?;
        }
        Ok(s)
    }
}

impl Layer {
    pub fn output_shape(&self, s: [usize; 4]) -> Result<[usize; 4], NnError> {
        let [n, c, h, w] = s;
        Ok(match self {
            Layer::Conv2d(l) => {
                if c != l.in_c {
                    return Err(NnError::Shape(format!("conv channels {c} != {}", l.in_c)));
                }
                let (oh, ow) = l.output_hw(h, w)?;
                [n, l.out_c, oh, ow]
            }
            Layer::ConvTranspose2d(l) => {
                if c != l.in_c {
                    return Err(NnError::Shape(format!("convT channels {c} != {}", l.in_c)));
                }
                let (oh, ow) = l.output_hw(h, w)?;
                [n, l.out_c, oh, ow]
            }
            Layer::Linear(l) => {
                if c * h * w != l.in_f {
                    return Err(NnError::Shape(format!(
                        "dense layer expects {} features, got {}",
                        l.in_f,
                        c * h * w
                    )));
                }
                [n, l.out_f, 1, 1]
            }
            Layer::MaxPool2d { k_h, k_w } => {
                if h / k_h == 0 || w / k_w == 0 {
                    return Err(NnError::Shape(format!(
                        "pooling {k_h}x{k_w} empties a {h}x{w} map"
                    )));
                }
                [n, c, h / k_h, w / k_w]
            }
            Layer::Residual(body) => {
                let o = body.output_shape(s)?;
                if o != s {
                    return Err(NnError::Shape("residual body changes shape".into()));
                }
                s
            }
            Layer::Relu | Layer::LeakyRelu { .. } | Layer::InstanceNorm { .. } => s,
        })
    }

    fn forward(
        &self,
        params: &[Tensor],
        x: Tensor,
        record: bool,
    ) -> Result<(Tensor, Option<Cache>), NnError> {
        match self {
            Layer::Conv2d(l) => {
                let y = conv_forward(l, &params[l.weight], &params[l.bias], &x)?;
                Ok((y, record.then_some(Cache::Input(x))))
            }
            Layer::ConvTranspose2d(l) => {
                let y = conv_t_forward(l, &params[l.weight], &params[l.bias], &x)?;
                Ok((y, record.then_some(Cache::Input(x))))
            }
            Layer::Linear(l) => {
                let y = linear_forward(l, &params[l.weight], &params[l.bias], &x)?;
                Ok((y, record.then_some(Cache::Input(x))))
            }
            Layer::Relu => {
                let y = x.map(|v| v.max(0.0));
                let cache = record.then(|| Cache::Output(y.clone()));
                Ok((y, cache))
            }
            Layer::LeakyRelu { slope } => {
                let s = *slope;
                let y = x.map(|v| if v > 0.0 { v } else { s * v });
                Ok((y, record.then_some(Cache::Input(x))))
            }
            Layer::MaxPool2d { k_h, k_w } => {
                let (y, argmax) = maxpool_forward(&x, *k_h, *k_w)?;
                let in_shape = x.shape();
                Ok((y, record.then_some(Cache::Pool { argmax, in_shape })))
            }
            Layer::InstanceNorm { eps } => {
                let (y, inv_std) = instance_norm_forward(&x, *eps);
                let cache = record.then(|| Cache::Norm {
                    y: y.clone(),
                    inv_std,
                });
                Ok((y, cache))
            }
            Layer::Residual(body) => {
                if record {
                    let (mut y, tape) = body.forward(params, &x)?;
                    y.add_assign(&x);
                    Ok((y, Some(Cache::Residual(tape))))
                } else {
                    let mut y = body.infer(params, &x)?;
                    y.add_assign(&x);
                    Ok((y, None))
                }
            }
        }
    }

    fn backward(
        &self,
        params: &[Tensor],
        cache: Cache,
        g: Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor, NnError> {
        match (self, cache) {
            (Layer::Conv2d(l), Cache::Input(x)) => conv_backward(l, params, grads, &x, &g),
            (Layer::ConvTranspose2d(l), Cache::Input(x)) => {
                conv_t_backward(l, params, grads, &x, &g)
            }
            (Layer::Linear(l), Cache::Input(x)) => linear_backward(l, params, grads, &x, &g),
            (Layer::Relu, Cache::Output(y)) => {
                let mut g = g;
                for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok(g)
            }
            (Layer::LeakyRelu { slope }, Cache::Input(x)) => {
                let mut g = g;
                for (gv, &xv) in g.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                Ok(g)
            }
            (Layer::MaxPool2d { .. }, Cache::Pool { argmax, in_shape }) => {
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    d[idx as usize] += gv;
                }
                Ok(dx)
            }
            (Layer::InstanceNorm { .. }, Cache::Norm { y, inv_std }) => {
                Ok(instance_norm_backward(&y, &inv_std, g))
            }
            (Layer::Residual(body), Cache::Residual(tape)) => {
                let mut dx = body.backward(params, tape, g.clone(), grads)?;
                dx.add_assign(&g);
                Ok(dx)
            }
            _ => Err(NnError::Shape("cache kind does not match layer".into())),
        }
    }
}

fn conv_forward(l: &Conv2d, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor, NnError> {
    let g = l.geom(x)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros([x.batch(), l.out_c, g.out_h, g.out_w]);
    let mut cols = vec![0.0; k * p];
    for i in 0..x.batch() {
        g.im2col(x.item(i), &mut cols);
        let o = out.item_mut(i);
        for (oc, row) in o.chunks_mut(p).enumerate() {
            row.fill(b.data()[oc]);
        }
        gemm(l.out_c, k, p, w.data(), false, &cols, false, o, true);
    }
    Ok(out)
}

fn conv_backward(
    l: &Conv2d,
    params: &[Tensor],
    grads: &mut [Tensor],
    x: &Tensor,
    dy: &Tensor,
) -> Result<Tensor, NnError> {
    let g = l.geom(x)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let w = &params[l.weight];
    let mut dx = Tensor::zeros(x.shape());
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    let mut dw = std::mem::replace(&mut grads[l.weight], Tensor::zeros([0, 0, 0, 0]));
    let mut db = std::mem::replace(&mut grads[l.bias], Tensor::zeros([0, 0, 0, 0]));
    for i in 0..x.batch() {
        let dyi = dy.item(i);
        g.im2col(x.item(i), &mut cols);
        gemm(l.out_c, p, k, dyi, false, &cols, true, dw.data_mut(), true);
        for (oc, row) in dyi.chunks(p).enumerate() {
            db.data_mut()[oc] += row.iter().sum::<f32>();
        }
        gemm(k, l.out_c, p, w.data(), true, dyi, false, &mut dcols, false);
        g.col2im(&dcols, dx.item_mut(i));
    }
    grads[l.weight] = dw;
    grads[l.bias] = db;
    Ok(dx)
}

fn conv_t_forward(
    l: &ConvTranspose2d,
    w: &Tensor,
    b: &Tensor,
    x: &Tensor,
) -> Result<Tensor, NnError> {
    let g = l.geom(x)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let mut out = Tensor::zeros([x.batch(), l.out_c, g.in_h, g.in_w]);
    let mut cols = vec![0.0; k * p];
    let plane = g.in_h * g.in_w;
    for i in 0..x.batch() {
        gemm(
            k,
            l.in_c,
            p,
            w.data(),
            true,
            x.item(i),
            false,
            &mut cols,
            false,
        );
        let o = out.item_mut(i);
        g.col2im(&cols, o);
        for (oc, row) in o.chunks_mut(plane).enumerate() {
            let bias = b.data()[oc];
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    Ok(out)
}

fn conv_t_backward(
    l: &ConvTranspose2d,
    params: &[Tensor],
    grads: &mut [Tensor],
    x: &Tensor,
    dy: &Tensor,
) -> Result<Tensor, NnError> {
    let g = l.geom(x)?;
    let (k, p) = (g.col_rows(), g.col_cols());
    let plane = g.in_h * g.in_w;
    let w = &params[l.weight];
    let mut dx = Tensor::zeros(x.shape());
    let mut dcols = vec![0.0; k * p];
    let mut dw = std::mem::replace(&mut grads[l.weight], Tensor::zeros([0, 0, 0, 0]));
    let mut db = std::mem::replace(&mut grads[l.bias], Tensor::zeros([0, 0, 0, 0]));
    for i in 0..x.batch() {
        let dyi = dy.item(i);
        for (oc, row) in dyi.chunks(plane).enumerate() {
            db.data_mut()[oc] += row.iter().sum::<f32>();
        }
        g.im2col(dyi, &mut dcols);
        gemm(
            l.in_c,
            k,
            p,
            w.data(),
            false,
            &dcols,
            false,
            dx.item_mut(i),
            false,
        );
        gemm(
            l.in_c,
            p,
            k,
            x.item(i),
            false,
            &dcols,
            true,
            dw.data_mut(),
            true,
        );
    }
    grads[l.weight] = dw;
    grads[l.bias] = db;
    Ok(dx)
}

fn linear_forward(l: &Linear, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor, NnError> {
    if x.item_len() != l.in_f {
        return Err(NnError::Shape(format!(
            "dense layer expects {} features, got {}",
            l.in_f,
            x.item_len()
        )));
    }
    let n = x.batch();
    let mut out = Tensor::zeros([n, l.out_f, 1, 1]);
    for row in out.data_mut().chunks_mut(l.out_f) {
        row.copy_from_slice(b.data());
    }
    gemm(
        n,
        l.in_f,
        l.out_f,
        x.data(),
        false,
        w.data(),
        true,
        out.data_mut(),
        true,
    );
    Ok(out)
}

fn linear_backward(
    l: &Linear,
    params: &[Tensor],
    grads: &mut [Tensor],
    x: &Tensor,
    dy: &Tensor,
) -> Result<Tensor, NnError> {
    let n = x.batch();
    gemm(
        l.out_f,
        n,
        l.in_f,
        dy.data(),
        true,
        x.data(),
        false,
        grads[l.weight].data_mut(),
        true,
    );
    {
        let db = grads[l.bias].data_mut();
        for row in dy.data().chunks(l.out_f) {
            for (d, v) in db.iter_mut().zip(row) {
                *d += v;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        n,
        l.out_f,
        l.in_f,
        dy.data(),
        false,
        params[l.weight].data(),
        false,
        dx.data_mut(),
        false,
    );
    Ok(dx)
}

fn maxpool_forward(x: &Tensor, k_h: usize, k_w: usize) -> Result<(Tensor, Vec<u32>), NnError> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / k_h, w / k_w);
    if oh == 0 || ow == 0 {
        return Err(NnError::Shape(format!(
            "pooling {k_h}x{k_w} empties a {h}x{w} map"
        )));
    }
    let mut y = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    let dst = y.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k_h * w + ox * k_w;
                for ky in 0..k_h {
                    for kx in 0..k_w {
                        let idx = base + (oy * k_h + ky) * w + ox * k_w + kx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                dst[o] = src[best];
                argmax.push(best as u32);
                o += 1;
            }
        }
    }
    Ok((y, argmax))
}

fn instance_norm_forward(x: &Tensor, eps: f32) -> (Tensor, Vec<f32>) {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(n * c);
    for chunk in y.data_mut().chunks_mut(plane) {
        let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let var = chunk
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / plane as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for v in chunk.iter_mut() {
            *v = ((*v as f64 - mean) * inv) as f32;
        }
        inv_std.push(inv as f32);
    }
    (y, inv_std)
}

fn instance_norm_backward(y: &Tensor, inv_std: &[f32], mut g: Tensor) -> Tensor {
    let plane = y.shape()[2] * y.shape()[3];
    for ((gc, yc), &inv) in g
        .data_mut()
        .chunks_mut(plane)
        .zip(y.data().chunks(plane))
        .zip(inv_std)
    {
        let mean_g = gc.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
        let mean_gy = gc
            .iter()
            .zip(yc)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>()
            / plane as f64;
        for (gv, &yv) in gc.iter_mut().zip(yc) {
            *gv = (inv as f64 * (*gv as f64 - mean_g - yv as f64 * mean_gy)) as f32;
        }
    }
    g
}

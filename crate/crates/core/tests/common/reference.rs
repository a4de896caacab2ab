//! Straightforward f64 re-implementation of every layer, written from the
//! layer definitions with plain loops. Used as the numeric side of the
//! gradient checks so finite differences are not swamped by f32 rounding.

use rfprint_nn::{Layer, Network, Sequential, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Arr {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Arr {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cs, hs, ws] = self.shape;
        ((n * cs + c) * hs + y) * ws + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    fn add(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] += v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn params64(net: &Network) -> Vec<Arr> {
    net.params.iter().map(Arr::from_tensor).collect()
}

pub fn forward(seq: &Sequential, p: &[Arr], x: &Arr) -> Arr {
    seq.layers
        .iter()
        .fold(x.clone(), |h, layer| layer_forward(layer, p, &h))
}

fn layer_forward(layer: &Layer, p: &[Arr], x: &Arr) -> Arr {
    let [n, c, h, w] = x.shape;
    match layer {
        Layer::Conv2d(l) => {
            let (oh, ow) = l.output_hw(h, w).unwrap();
            let (wt, b) = (&p[l.weight], &p[l.bias]);
            let mut y = Arr::zeros([n, l.out_c, oh, ow]);
            for b_i in 0..n {
                for o in 0..l.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.data[o];
                            for i in 0..c {
                                for ky in 0..l.k_h {
                                    for kx in 0..l.k_w {
                                        let iy = (oy * l.stride_h + ky) as isize
                                            - l.padding.top as isize;
                                        let ix = (ox * l.stride_w + kx) as isize
                                            - l.padding.left as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize
                                        {
                                            continue;
                                        }
                                        acc += wt.at(o, i, ky, kx)
                                            * x.at(b_i, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                            y.add(b_i, o, oy, ox, acc);
                        }
                    }
                }
            }
            y
        }
        Layer::ConvTranspose2d(l) => {
            let (oh, ow) = l.output_hw(h, w).unwrap();
            let (wt, b) = (&p[l.weight], &p[l.bias]);
            let mut y = Arr::zeros([n, l.out_c, oh, ow]);
            for b_i in 0..n {
                for o in 0..l.out_c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            y.add(b_i, o, oy, ox, b.data[o]);
                        }
                    }
                }
                for i in 0..c {
                    for iy in 0..h {
                        for ix in 0..w {
                            let v = x.at(b_i, i, iy, ix);
                            for o in 0..l.out_c {
                                for ky in 0..l.k_h {
                                    for kx in 0..l.k_w {
                                        let oy = (iy * l.stride_h + ky) as isize - l.pad_h as isize;
                                        let ox = (ix * l.stride_w + kx) as isize - l.pad_w as isize;
                                        if oy < 0
                                            || ox < 0
                                            || oy >= oh as isize
                                            || ox >= ow as isize
                                        {
                                            continue;
                                        }
                                        y.add(
                                            b_i,
                                            o,
                                            oy as usize,
                                            ox as usize,
                                            v * wt.at(i, o, ky, kx),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
            y
        }
        Layer::Linear(l) => {
            let item = c * h * w;
            let mut y = Arr::zeros([n, l.out_f, 1, 1]);
            for b_i in 0..n {
                for o in 0..l.out_f {
                    let mut acc = p[l.bias].data[o];
                    for k in 0..item {
                        acc += p[l.weight].data[o * l.in_f + k] * x.data[b_i * item + k];
                    }
                    y.data[b_i * l.out_f + o] = acc;
                }
            }
            y
        }
        Layer::Relu => x.map(|v| v.max(0.0)),
        Layer::LeakyRelu { slope } => {
            let s = *slope as f64;
            x.map(|v| if v > 0.0 { v } else { s * v })
        }
        Layer::MaxPool2d { k_h, k_w } => {
            let (oh, ow) = (h / k_h, w / k_w);
            let mut y = Arr::zeros([n, c, oh, ow]);
            for b_i in 0..n {
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut m = f64::NEG_INFINITY;
                            for ky in 0..*k_h {
                                for kx in 0..*k_w {
                                    m = m.max(x.at(b_i, ch, oy * k_h + ky, ox * k_w + kx));
                                }
                            }
                            y.add(b_i, ch, oy, ox, m);
                        }
                    }
                }
            }
            y
        }
        Layer::InstanceNorm { eps } => {
            let plane = h * w;
            let mut y = x.clone();
            for chunk in y.data.chunks_mut(plane) {
                let mean = chunk.iter().sum::<f64>() / plane as f64;
                let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            y
        }
        Layer::Residual(body) => {
            let r = forward(body, p, x);
            Arr {
                shape: x.shape,
                data: x.data.iter().zip(&r.data).map(|(a, b)| a + b).collect(),
            }
        }
    }
}

pub fn mean_sq_to(x: &Arr, target: f64) -> f64 {
    x.data.iter().map(|v| (v - target).powi(2)).sum::<f64>() / x.data.len() as f64
}

pub fn mean_abs_diff(a: &Arr, b: &Arr) -> f64 {
    assert_eq!(a.shape, b.shape);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data.len() as f64
}

/// Mean negative log-softmax of the labelled class over `[n, k, 1, 1]` logits.
pub fn cross_entropy(logits: &Arr, labels: &[usize]) -> f64 {
    let k = logits.shape[1];
    let total: f64 = logits
        .data
        .chunks(k)
        .zip(labels)
        .map(|(row, &t)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum();
    total / labels.len() as f64
}

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, ConvTranspose2d, Layer, Linear, Padding, Sequential, Tape};
use crate::{NnError, Tensor};

/// Weight initialization scheme applied when a layer is created.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Init {
    /// Zero-mean normal with fixed standard deviation, zero bias.
    Normal { std: f32 },
    /// Uniform in `±sqrt(6 / fan_in)`, zero bias.
    HeUniform,
}

/// An architecture plus the parameter list its layers index into.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Sequential,
    #[serde(skip)]
    pub params: Vec<Tensor>,
}

impl Network {
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tape), NnError> {
        self.arch.forward(&self.params, x)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor, NnError> {
        self.arch.infer(&self.params, x)
    }

    pub fn backward(
        &self,
        tape: Tape,
        grad: Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor, NnError> {
        self.arch.backward(&self.params, tape, grad, grads)
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn output_shape(&self, input: [usize; 4]) -> Result<[usize; 4], NnError> {
        self.arch.output_shape(input)
    }

    /// Writes the network as `RFNN` magic, a little-endian u64 header
    /// length, a JSON header (architecture, parameter shapes, caller
    /// metadata) and then every parameter as raw little-endian f32.
    pub fn write_to<W: Write>(
        &self,
        mut out: W,
        metadata: &serde_json::Value,
    ) -> Result<(), NnError> {
        let header = CheckpointHeader {
            arch: self.arch.clone(),
            shapes: self.params.iter().map(Tensor::shape).collect(),
            metadata: metadata.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for p in &self.params {
            for v in p.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Inverse of [`Network::write_to`]; returns the caller metadata too.
    pub fn read_from<R: Read>(mut input: R) -> Result<(Self, serde_json::Value), NnError> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut params = Vec::with_capacity(header.shapes.len());
        for shape in header.shapes {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            input.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            params.push(Tensor::from_vec(shape, data)?);
        }
        let net = Network {
            arch: header.arch,
            params,
        };
        Ok((net, header.metadata))
    }
}

const MAGIC: &[u8; 4] = b"RFNN";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Sequential,
    shapes: Vec<[usize; 4]>,
    metadata: serde_json::Value,
}

/// Allocates and initializes parameters while layers are declared.
pub struct NetBuilder<'a, R: Rng> {
    params: Vec<Tensor>,
    rng: &'a mut R,
    init: Init,
}

impl<'a, R: Rng> NetBuilder<'a, R> {
    pub fn new(rng: &'a mut R, init: Init) -> Self {
        Self {
            params: Vec::new(),
            rng,
            init,
        }
    }

    fn alloc(&mut self, shape: [usize; 4], fan_in: usize) -> usize {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match self.init {
            Init::Normal { std } => {
                let dist = Normal::new(0.0f32, std).expect("finite std");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
            Init::HeUniform => {
                let bound = (6.0 / fan_in.max(1) as f32).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(self.rng)).collect()
            }
        };
        self.params
            .push(Tensor::from_vec(shape, data).expect("shape/len agree"));
        self.params.len() - 1
    }

    fn alloc_zeros(&mut self, shape: [usize; 4]) -> usize {
        self.params.push(Tensor::zeros(shape));
        self.params.len() - 1
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Layer {
        let (k_h, k_w) = kernel;
        let weight = self.alloc([out_c, in_c, k_h, k_w], in_c * k_h * k_w);
        let bias = self.alloc_zeros([out_c, 1, 1, 1]);
        Layer::Conv2d(Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k_h,
            k_w,
            stride_h: stride.0,
            stride_w: stride.1,
            padding,
        })
    }

    /// 1-D transposed convolution along the width axis.
    pub fn conv_transpose_w(
        &mut self,
        in_c: usize,
        out_c: usize,
        k_w: usize,
        stride_w: usize,
        pad_w: usize,
        output_pad_w: usize,
    ) -> Layer {
        let weight = self.alloc([in_c, out_c, 1, k_w], in_c * k_w);
        let bias = self.alloc_zeros([out_c, 1, 1, 1]);
        Layer::ConvTranspose2d(ConvTranspose2d {
            weight,
            bias,
            in_c,
            out_c,
            k_h: 1,
            k_w,
            stride_h: 1,
            stride_w,
            pad_h: 0,
            pad_w,
            output_pad_h: 0,
            output_pad_w,
        })
    }

    pub fn linear(&mut self, in_f: usize, out_f: usize) -> Layer {
        let weight = self.alloc([out_f, in_f, 1, 1], in_f);
        let bias = self.alloc_zeros([out_f, 1, 1, 1]);
        Layer::Linear(Linear {
            weight,
            bias,
            in_f,
            out_f,
        })
    }

    pub fn finish(self, arch: Sequential) -> Network {
        Network {
            arch,
            params: self.params,
        }
    }
}

//! Per-device signature-reveal translator.
//!
//! Two generators (`G`: S→T, `F`: T→S) and two patch discriminators
//! (`D_S`, `D_T`) are trained with least-squares adversarial terms and an L1
//! cycle-consistency term so that `G` moves a device's source-domain slices
//! into the base domain's statistics while `F(G(s)) ≈ s` keeps the device's
//! own distortions intact.
//!
//! Generator layout over `(2, 1, L)` inputs with base width `f`:
//!
//! ```text
//! encoder   conv k7 s2 (2→f)   IN ReLU
//!           conv k3 s2 (f→2f)  IN ReLU
//!           conv k3 s2 (2f→4f) IN ReLU
//! transform 9 × residual [conv k3 IN ReLU conv k3 IN]
//! decoder   convT k3 s2 (4f→2f) IN ReLU
//!           convT k3 s2 (2f→f)  IN ReLU  convT k7 s2 (f→2)
//! ```
//!
//! The second decoder block carries the third ×2 upsample so the output
//! length equals the input length. The final layer is linear.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfprint_nn::loss::{l1_mean, mse_to_const};
use rfprint_nn::{Adam, Init, Layer, NetBuilder, Network, Padding, Sequential, Tensor};
use serde::{Deserialize, Serialize};

use crate::baseline::{classify, ClassifierModel};
use crate::error::{Error, Result};
use crate::iqdata::SliceSet;

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const RESIDUAL_BLOCKS: usize = 9;
/// Generated slices remembered for discriminator updates.
pub const REPLAY_CAPACITY: usize = 50;
const NORM_EPS: f32 = 1e-5;

/// Widths of the translator networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorArch {
    pub slice_length: usize,
    pub generator_filters: usize,
    pub discriminator_filters: usize,
    /// Stride-2 layers in the discriminator; each doubles its receptive
    /// field.
    pub discriminator_downsamples: usize,
    pub residual_blocks: usize,
    /// Adds the input to the decoder output, `G(x) = x + net(x)`.
    pub input_skip: bool,
}

impl TranslatorArch {
    pub fn new(slice_length: usize) -> Self {
        Self {
            slice_length,
            generator_filters: 64,
            discriminator_filters: 64,
            discriminator_downsamples: 3,
            residual_blocks: RESIDUAL_BLOCKS,
            input_skip: false,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.slice_length < 64 {
            return Err(Error::Shape(format!(
                "translator slices must be ≥ 64 long, got {}",
                self.slice_length
            )));
        }
        if !self.slice_length.is_multiple_of(8) {
            return Err(Error::Shape(format!(
                "three stride-2 stages need a slice length divisible by 8, got {}",
                self.slice_length
            )));
        }
        if !(1..=3).contains(&self.discriminator_downsamples) {
            return Err(Error::Precondition(format!(
                "discriminator needs 1 to 3 stride-2 layers, got {}",
                self.discriminator_downsamples
            )));
        }
        if self.generator_filters == 0 || self.discriminator_filters == 0 {
            return Err(Error::Precondition(
                "translator widths must be positive".into(),
            ));
        }
        Ok(())
    }
}

const INIT: Init = Init::Normal { std: 0.02 };

pub fn build_generator(slice_length: usize) -> Result<Network> {
    build_generator_with(
        &TranslatorArch::new(slice_length),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

pub fn build_generator_with<R: Rng>(arch: &TranslatorArch, rng: &mut R) -> Result<Network> {
    arch.check()?;
    let f = arch.generator_filters;
    let mut b = NetBuilder::new(rng, INIT);
    let norm = || Layer::InstanceNorm { eps: NORM_EPS };
    let mut layers = vec![
        b.conv2d(2, f, (1, 7), (1, 2), Padding::symmetric_w(3)),
        norm(),
        Layer::Relu,
        b.conv2d(f, 2 * f, (1, 3), (1, 2), Padding::symmetric_w(1)),
        norm(),
        Layer::Relu,
        b.conv2d(2 * f, 4 * f, (1, 3), (1, 2), Padding::symmetric_w(1)),
        norm(),
        Layer::Relu,
    ];
    for _ in 0..arch.residual_blocks {
        let body = Sequential::new(vec![
            b.conv2d(4 * f, 4 * f, (1, 3), (1, 1), Padding::symmetric_w(1)),
            norm(),
            Layer::Relu,
            b.conv2d(4 * f, 4 * f, (1, 3), (1, 1), Padding::symmetric_w(1)),
            norm(),
        ]);
        layers.push(Layer::Residual(body));
    }
    layers.extend([
        b.conv_transpose_w(4 * f, 2 * f, 3, 2, 1, 1),
        norm(),
        Layer::Relu,
        b.conv_transpose_w(2 * f, f, 3, 2, 1, 1),
        norm(),
        Layer::Relu,
        b.conv_transpose_w(f, 2, 7, 2, 3, 1),
    ]);
    let body = Sequential::new(layers);
    let arch_layers = if arch.input_skip {
        Sequential::new(vec![Layer::Residual(body)])
    } else {
        body
    };
    Ok(b.finish(arch_layers))
}

pub fn build_discriminator(slice_length: usize) -> Result<Network> {
    build_discriminator_with(
        &TranslatorArch::new(slice_length),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
}

/// Patch discriminator emitting a `(1, 1, P)` grid of raw realness scores,
/// `P = discriminator_patches(L, n)` for `n` stride-2 layers:
///
/// ```text
/// conv k4 s2 (2→f) LReLU
/// (n − 1) × conv k4 s2 (×2 width) IN LReLU
/// conv k4 s1 (×2 width) IN LReLU
/// conv k4 s1 (→1)
/// ```
pub fn build_discriminator_with<R: Rng>(arch: &TranslatorArch, rng: &mut R) -> Result<Network> {
    arch.check()?;
    let f = arch.discriminator_filters;
    let mut b = NetBuilder::new(rng, INIT);
    let lrelu = || Layer::LeakyRelu { slope: 0.2 };
    let norm = || Layer::InstanceNorm { eps: NORM_EPS };
    let p = Padding::symmetric_w(1);
    let mut layers = vec![b.conv2d(2, f, (1, 4), (1, 2), p), lrelu()];
    let mut width = f;
    for _ in 1..arch.discriminator_downsamples {
        layers.extend([
            b.conv2d(width, 2 * width, (1, 4), (1, 2), p),
            norm(),
            lrelu(),
        ]);
        width *= 2;
    }
    layers.extend([
        b.conv2d(width, 2 * width, (1, 4), (1, 1), p),
        norm(),
        lrelu(),
        b.conv2d(2 * width, 1, (1, 4), (1, 1), p),
    ]);
    Ok(b.finish(Sequential::new(layers)))
}

/// Number of patch scores for slices of length `l` (a multiple of
/// `2^downsamples`): each stride-2 layer halves the length and each of the
/// two stride-1 layers trims one sample.
pub fn discriminator_patches(l: usize, downsamples: usize) -> usize {
    (l >> downsamples).saturating_sub(2)
}

/// Least-squares adversarial terms over raw discriminator scores:
/// `(mean((D(fake) − 1)²), mean((D(real) − 1)²) + mean(D(fake)²))`.
pub fn lsgan_losses(d_real: &Tensor, d_fake: &Tensor) -> (f64, f64) {
    let generator = mse_to_const(d_fake, 1.0).0;
    let discriminator = mse_to_const(d_real, 1.0).0 + mse_to_const(d_fake, 0.0).0;
    (generator, discriminator)
}

/// `mean|F(G(S)) − S| + mean|G(F(T)) − T|`, element-wise means.
pub fn cycle_loss(s: &Tensor, f_g_s: &Tensor, t: &Tensor, g_f_t: &Tensor) -> Result<f64> {
    if s.shape() != f_g_s.shape() || t.shape() != g_f_t.shape() {
        return Err(Error::Shape(format!(
            "cycle operands {:?}/{:?} and {:?}/{:?}",
            s.shape(),
            f_g_s.shape(),
            t.shape(),
            g_f_t.shape()
        )));
    }
    Ok(l1_mean(f_g_s, s).0 + l1_mean(g_f_t, t).0)
}

pub fn full_loss(l_gan1: f64, l_gan2: f64, l_cyc: f64, lambda: f64) -> f64 {
    l_gan1 + l_gan2 + lambda * l_cyc
}

/// Losses of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevealLossRecord {
    pub step: usize,
    pub l_gan1: f64,
    pub l_gan2: f64,
    pub l_cyc: f64,
    pub l_full: f64,
}

/// Per-epoch means of the step losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealEpochLog {
    pub epoch: usize,
    pub learning_rate: f32,
    pub l_gan1: f64,
    pub l_gan2: f64,
    pub l_cyc: f64,
    pub l_full: f64,
}

/// Outcome of [`customize_per_device`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidate: usize,
    pub config: RevealConfig,
    pub validation_ttod: f64,
    pub candidate_scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorPair {
    pub device_id: usize,
    pub arch: TranslatorArch,
    /// S → T.
    pub g: Network,
    /// T → S.
    pub f: Network,
    pub d_s: Network,
    pub d_t: Network,
    pub lambda: f64,
    pub steps: Vec<RevealLossRecord>,
    pub epochs: Vec<RevealEpochLog>,
    pub selection: Option<Selection>,
}

impl TranslatorPair {
    pub fn new(device_id: usize, arch: &TranslatorArch, lambda: f64, seed: u64) -> Result<Self> {
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(Error::Precondition(format!(
                "cycle weight must be > 0, got {lambda}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            device_id,
            arch: arch.clone(),
            g: build_generator_with(arch, &mut rng)?,
            f: build_generator_with(arch, &mut rng)?,
            d_s: build_discriminator_with(arch, &mut rng)?,
            d_t: build_discriminator_with(arch, &mut rng)?,
            lambda,
            steps: Vec::new(),
            epochs: Vec::new(),
            selection: None,
        })
    }

    /// Writes all four networks into one file; metadata carries the logs.
    pub fn save(&self, path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "reveal",
            "device_id": self.device_id,
            "arch": self.arch,
            "lambda": self.lambda,
            "epochs": self.epochs,
            "selection": self.selection,
            "config_hash": config_hash,
        });
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let nets = [&self.g, &self.f, &self.d_s, &self.d_t];
        for (i, net) in nets.iter().enumerate() {
            let m = if i == 0 {
                meta.clone()
            } else {
                serde_json::Value::Null
            };
            net.write_to(&mut w, &m)?;
        }
        Ok(())
    }

    /// Loads a pair and the config hash it was saved under. Step records
    /// live in the companion CSV, not the checkpoint.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let (g, meta) = Network::read_from(&mut r)?;
        let (f, _) = Network::read_from(&mut r)?;
        let (d_s, _) = Network::read_from(&mut r)?;
        let (d_t, _) = Network::read_from(&mut r)?;
        let pair = Self {
            device_id: serde_json::from_value(meta["device_id"].clone())?,
            arch: serde_json::from_value(meta["arch"].clone())?,
            g,
            f,
            d_s,
            d_t,
            lambda: serde_json::from_value(meta["lambda"].clone())?,
            steps: Vec::new(),
            epochs: serde_json::from_value(meta["epochs"].clone())?,
            selection: serde_json::from_value(meta["selection"].clone())?,
        };
        let hash = meta["config_hash"].as_str().unwrap_or_default().to_string();
        Ok((pair, hash))
    }

    /// `step,l_gan1,l_gan2,l_cyc,l_full`.
    pub fn write_steps_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "l_gan1", "l_gan2", "l_cyc", "l_full"])?;
        for r in &self.steps {
            w.write_record([
                r.step.to_string(),
                r.l_gan1.to_string(),
                r.l_gan2.to_string(),
                r.l_cyc.to_string(),
                r.l_full.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Upper bound on optimizer steps per epoch; `None` means one pass over
    /// the larger of the two training sets.
    pub steps_per_epoch: Option<usize>,
}

impl Default for RevealConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 1,
            seed: 0,
            steps_per_epoch: None,
        }
    }
}

impl RevealConfig {
    /// Constant rate for the first half of the epochs, then linear decay.
    pub fn learning_rate_at(&self, epoch: usize) -> f32 {
        let hold = self.epochs / 2;
        let decay = (self.epochs - hold) as f32 + 1.0;
        let k = 1.0 - (epoch + 1).saturating_sub(hold) as f32 / decay;
        self.learning_rate * k.max(0.0)
    }
}

/// Replay buffer of previously generated slices. Until full it stores and
/// returns each new slice; afterwards a coin flip decides between returning
/// the new slice and swapping it for a random stored one.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Vec<f32>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn query<R: Rng>(&mut self, batch: &Tensor, rng: &mut R) -> Tensor {
        if self.capacity == 0 {
            return batch.clone();
        }
        let mut out = batch.clone();
        for i in 0..batch.batch() {
            let item = batch.item(i);
            if self.items.len() < self.capacity {
                self.items.push(item.to_vec());
            } else if rng.random_bool(0.5) {
                let k = rng.random_range(0..self.capacity);
                let old = std::mem::replace(&mut self.items[k], item.to_vec());
                out.item_mut(i).copy_from_slice(&old);
            }
        }
        out
    }
}

fn single_device(set: &SliceSet, what: &str) -> Result<usize> {
    let devices = set.label_set();
    match devices.len() {
        1 => Ok(*devices.iter().next().expect("one device")),
        0 => Err(Error::Precondition(format!("{what} set is empty"))),
        _ => Err(Error::LabelMismatch(format!(
            "{what} set mixes devices {devices:?}"
        ))),
    }
}

/// Generator objective `gen(D_T(G(s))) + gen(D_S(F(t))) + λ·L_cyc` with its
/// gradients for `G` and `F` (discriminators held fixed). Also returns the
/// generated batches and their discriminator scores.
pub struct GeneratorPass {
    pub loss: f64,
    pub l_cyc: f64,
    pub fake_t: Tensor,
    pub fake_s: Tensor,
    pub d_t_fake: Tensor,
    pub d_s_fake: Tensor,
    pub g_grads: Vec<Tensor>,
    pub f_grads: Vec<Tensor>,
}

pub fn generator_pass(pair: &TranslatorPair, s: &Tensor, t: &Tensor) -> Result<GeneratorPass> {
    let lambda = pair.lambda as f32;
    let (fake_t, tape_g1) = pair.g.forward(s)?;
    let (rec_s, tape_f1) = pair.f.forward(&fake_t)?;
    let (fake_s, tape_f2) = pair.f.forward(t)?;
    let (rec_t, tape_g2) = pair.g.forward(&fake_s)?;
    let (d_t_fake, tape_dt) = pair.d_t.forward(&fake_t)?;
    let (d_s_fake, tape_ds) = pair.d_s.forward(&fake_s)?;

    let (adv_t, g_adv_t) = mse_to_const(&d_t_fake, 1.0);
    let (adv_s, g_adv_s) = mse_to_const(&d_s_fake, 1.0);
    let (cyc_s, mut g_rec_s) = l1_mean(&rec_s, s);
    let (cyc_t, mut g_rec_t) = l1_mean(&rec_t, t);
    g_rec_s.scale(lambda);
    g_rec_t.scale(lambda);

    let mut g_grads = pair.g.zero_grads();
    let mut f_grads = pair.f.zero_grads();
    let mut scratch_t = pair.d_t.zero_grads();
    let mut scratch_s = pair.d_s.zero_grads();

    // forward cycle: s → G → fake_t → F → rec_s, plus D_T on fake_t
    let mut d_fake_t = pair.d_t.backward(tape_dt, g_adv_t, &mut scratch_t)?;
    d_fake_t.add_assign(&pair.f.backward(tape_f1, g_rec_s, &mut f_grads)?);
    pair.g.backward(tape_g1, d_fake_t, &mut g_grads)?;
    // backward cycle: t → F → fake_s → G → rec_t, plus D_S on fake_s
    let mut d_fake_s = pair.d_s.backward(tape_ds, g_adv_s, &mut scratch_s)?;
    d_fake_s.add_assign(&pair.g.backward(tape_g2, g_rec_t, &mut g_grads)?);
    pair.f.backward(tape_f2, d_fake_s, &mut f_grads)?;

    let l_cyc = cyc_s + cyc_t;
    Ok(GeneratorPass {
        loss: adv_t + adv_s + pair.lambda * l_cyc,
        l_cyc,
        fake_t,
        fake_s,
        d_t_fake,
        d_s_fake,
        g_grads,
        f_grads,
    })
}

/// Discriminator objective `mean((D(real) − 1)²) + mean(D(fake)²)` and its
/// parameter gradients.
pub fn discriminator_pass(d: &Network, real: &Tensor, fake: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut grads = d.zero_grads();
    let (out_real, tape_real) = d.forward(real)?;
    let (l_real, g_real) = mse_to_const(&out_real, 1.0);
    d.backward(tape_real, g_real, &mut grads)?;
    let (out_fake, tape_fake) = d.forward(fake)?;
    let (l_fake, g_fake) = mse_to_const(&out_fake, 0.0);
    d.backward(tape_fake, g_fake, &mut grads)?;
    Ok((l_real + l_fake, grads))
}

/// Alternating least-squares adversarial training of one device's pair.
///
/// Each step first updates `G` and `F` against frozen discriminators, then
/// updates `D_T` and `D_S` against frozen generators using slices drawn
/// through the replay buffers. The logged `l_gan1`/`l_gan2` are the
/// discriminator objectives on the step's real batch and freshly generated
/// batch, evaluated before the discriminators move.
pub fn train_translator(
    mut pair: TranslatorPair,
    s_train: &SliceSet,
    t_train: &SliceSet,
    cfg: &RevealConfig,
) -> Result<TranslatorPair> {
    let dev_s = single_device(s_train, "source")?;
    let dev_t = single_device(t_train, "target")?;
    if dev_s != dev_t || dev_s != pair.device_id {
        return Err(Error::LabelMismatch(format!(
            "translator for device {} given source device {dev_s} and target device {dev_t}",
            pair.device_id
        )));
    }
    for set in [s_train, t_train] {
        if set.slice_length() != pair.arch.slice_length {
            return Err(Error::Shape(format!(
                "translator expects length {}, got {}",
                pair.arch.slice_length,
                set.slice_length()
            )));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Precondition(
            "batch size and epochs must be ≥ 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_g = Adam::new(&pair.g.params, cfg.learning_rate, cfg.beta1, 0.999);
    let mut opt_f = Adam::new(&pair.f.params, cfg.learning_rate, cfg.beta1, 0.999);
    let mut opt_dt = Adam::new(&pair.d_t.params, cfg.learning_rate, cfg.beta1, 0.999);
    let mut opt_ds = Adam::new(&pair.d_s.params, cfg.learning_rate, cfg.beta1, 0.999);
    let mut pool_t = ReplayBuffer::new(REPLAY_CAPACITY);
    let mut pool_s = ReplayBuffer::new(REPLAY_CAPACITY);
    let s_all = s_train.to_tensor();
    let t_all = t_train.to_tensor();
    let longest = s_train.len().max(t_train.len());
    let per_epoch = longest.div_ceil(cfg.batch_size);
    let steps_per_epoch = cfg
        .steps_per_epoch
        .map_or(per_epoch, |m| m.min(per_epoch).max(1));
    let mut s_order: Vec<usize> = (0..s_train.len()).collect();
    let mut t_order: Vec<usize> = (0..t_train.len()).collect();
    let (mut s_pos, mut t_pos) = (s_order.len(), t_order.len());
    let next_batch = |order: &mut Vec<usize>, pos: &mut usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(cfg.batch_size);
        while out.len() < cfg.batch_size {
            if *pos >= order.len() {
                order.shuffle(rng);
                *pos = 0;
            }
            out.push(order[*pos]);
            *pos += 1;
        }
        out
    };

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        for opt in [&mut opt_g, &mut opt_f, &mut opt_dt, &mut opt_ds] {
            opt.lr = lr;
        }
        let first_step = pair.steps.len();
        for _ in 0..steps_per_epoch {
            let s = s_all.select(&next_batch(&mut s_order, &mut s_pos, &mut rng));
            let t = t_all.select(&next_batch(&mut t_order, &mut t_pos, &mut rng));

            let gen = generator_pass(&pair, &s, &t)?;
            opt_g.step(&mut pair.g.params, &gen.g_grads);
            opt_f.step(&mut pair.f.params, &gen.f_grads);

            let d_t_real = pair.d_t.infer(&t)?;
            let d_s_real = pair.d_s.infer(&s)?;
            let l_gan1 = lsgan_losses(&d_t_real, &gen.d_t_fake).1;
            let l_gan2 = lsgan_losses(&d_s_real, &gen.d_s_fake).1;

            let fake_t = pool_t.query(&gen.fake_t, &mut rng);
            let fake_s = pool_s.query(&gen.fake_s, &mut rng);
            let (_, grads_dt) = discriminator_pass(&pair.d_t, &t, &fake_t)?;
            let (_, grads_ds) = discriminator_pass(&pair.d_s, &s, &fake_s)?;
            opt_dt.step(&mut pair.d_t.params, &grads_dt);
            opt_ds.step(&mut pair.d_s.params, &grads_ds);

            let l_full = full_loss(l_gan1, l_gan2, gen.l_cyc, pair.lambda);
            if !l_full.is_finite() || !gen.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    loss: if l_full.is_finite() { gen.loss } else { l_full },
                });
            }
            pair.steps.push(RevealLossRecord {
                step: pair.steps.len(),
                l_gan1,
                l_gan2,
                l_cyc: gen.l_cyc,
                l_full,
            });
        }
        if [&pair.g, &pair.f].iter().any(|n| {
            n.params
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
        }) {
            return Err(Error::Divergence {
                epoch,
                loss: f64::INFINITY,
            });
        }
        let recs = &pair.steps[first_step..];
        let n = recs.len().max(1) as f64;
        let mean = |f: fn(&RevealLossRecord) -> f64| recs.iter().map(f).sum::<f64>() / n;
        pair.epochs.push(RevealEpochLog {
            epoch,
            learning_rate: lr,
            l_gan1: mean(|r| r.l_gan1),
            l_gan2: mean(|r| r.l_gan2),
            l_cyc: mean(|r| r.l_cyc),
            l_full: mean(|r| r.l_full),
        });
    }
    Ok(pair)
}

const TRANSLATE_BATCH: usize = 256;

/// Applies `G` to every slice. Labels are kept; the domain becomes `target_domain`.
pub fn translate(
    pair: &TranslatorPair,
    slices: &SliceSet,
    target_domain: &str,
) -> Result<SliceSet> {
    if slices.slice_length() != pair.arch.slice_length {
        return Err(Error::Shape(format!(
            "translator expects length {}, got {}",
            pair.arch.slice_length,
            slices.slice_length()
        )));
    }
    let all: Vec<usize> = (0..slices.len()).collect();
    let mut data = Vec::with_capacity(slices.data().len());
    for chunk in all.chunks(TRANSLATE_BATCH) {
        let y = pair.g.infer(&slices.select(chunk).to_tensor())?;
        data.extend_from_slice(y.data());
    }
    SliceSet::new(
        data,
        slices.labels().to_vec(),
        target_domain,
        slices.slice_length(),
        slices.stride(),
    )
}

/// Percentage of `slices` the classifier assigns to `device` after `G`.
pub fn translated_ttod(
    pair: &TranslatorPair,
    classifier: &ClassifierModel,
    slices: &SliceSet,
    device: usize,
) -> Result<f64> {
    if slices.is_empty() {
        return Err(Error::Precondition("no validation slices".into()));
    }
    let out = classify(classifier, &translate(pair, slices, "T")?)?;
    let hits = out.predicted.iter().filter(|&&p| p == device).count();
    Ok(100.0 * hits as f64 / slices.len() as f64)
}

/// Trains one candidate per configuration from the same initial pair and
/// keeps the one whose translated validation slices score the highest
/// TTOD for this device (earliest candidate on ties).
pub fn customize_per_device(
    pair: TranslatorPair,
    s_train: &SliceSet,
    t_train: &SliceSet,
    s_val: &SliceSet,
    classifier: &ClassifierModel,
    candidates: &[RevealConfig],
) -> Result<TranslatorPair> {
    customize_with(pair, candidates, |p, cfg| {
        let trained = train_translator(p, s_train, t_train, cfg)?;
        let score = translated_ttod(&trained, classifier, s_val, trained.device_id)?;
        Ok((trained, score))
    })
}

/// Selection core of [`customize_per_device`] with a pluggable
/// train-and-score step.
pub fn customize_with(
    pair: TranslatorPair,
    candidates: &[RevealConfig],
    mut train_and_score: impl FnMut(TranslatorPair, &RevealConfig) -> Result<(TranslatorPair, f64)>,
) -> Result<TranslatorPair> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidate configurations".into()));
    }
    let mut best: Option<(usize, TranslatorPair, f64)> = None;
    let mut scores = Vec::with_capacity(candidates.len());
    for (i, cfg) in candidates.iter().enumerate() {
        let (trained, score) = train_and_score(pair.clone(), cfg)?;
        scores.push(score);
        if best.as_ref().is_none_or(|(_, _, s)| score > *s) {
            best = Some((i, trained, score));
        }
    }
    let (i, mut chosen, score) = best.expect("at least one candidate");
    chosen.selection = Some(Selection {
        candidate: i,
        config: candidates[i].clone(),
        validation_ttod: score,
        candidate_scores: scores,
    });
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch(l: usize) -> TranslatorArch {
        TranslatorArch {
            slice_length: l,
            generator_filters: 2,
            discriminator_filters: 2,
            discriminator_downsamples: 3,
            residual_blocks: 2,
            input_skip: false,
        }
    }

    fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn device_set(device: usize, m: usize, l: usize, seed: u64) -> SliceSet {
        let t = random_tensor([m, 2, 1, l], seed);
        SliceSet::new(t.into_vec(), vec![device; m], "S", l, 1).unwrap()
    }

    #[test]
    fn generator_preserves_shape() {
        let g = build_generator(128).unwrap();
        assert_eq!(g.output_shape([3, 2, 1, 128]).unwrap(), [3, 2, 1, 128]);
        let small =
            build_generator_with(&tiny_arch(64), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let y = small.infer(&random_tensor([2, 2, 1, 64], 1)).unwrap();
        assert_eq!(y.shape(), [2, 2, 1, 64]);
    }

    #[test]
    fn generator_rejects_bad_lengths() {
        assert!(matches!(build_generator(32), Err(Error::Shape(_))));
        assert!(matches!(build_generator(100), Err(Error::Shape(_))));
        assert!(matches!(build_discriminator(56), Err(Error::Shape(_))));
    }

    #[test]
    fn zeroed_final_layer_emits_its_bias() {
        let mut g =
            build_generator_with(&tiny_arch(64), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let Some(Layer::ConvTranspose2d(last)) = g.arch.layers.last().cloned() else {
            panic!("generator ends in a transposed conv");
        };
        g.params[last.weight].fill(0.0);
        g.params[last.bias]
            .data_mut()
            .copy_from_slice(&[0.25, -0.5]);
        let y = g.infer(&random_tensor([3, 2, 1, 64], 3)).unwrap();
        for i in 0..3 {
            let item = y.item(i);
            assert!(item[..64].iter().all(|&v| v == 0.25));
            assert!(item[64..].iter().all(|&v| v == -0.5));
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = build_generator(128).unwrap();
        let b = build_generator(128).unwrap();
        assert_eq!(a.param_count(), b.param_count());
        // encoder + 9 residual blocks + decoder, weights and biases
        let f = 64;
        let conv = |i: usize, o: usize, k: usize| i * o * k + o;
        let want = conv(2, f, 7)
            + conv(f, 2 * f, 3)
            + conv(2 * f, 4 * f, 3)
            + 9 * 2 * conv(4 * f, 4 * f, 3)
            + conv(4 * f, 2 * f, 3)
            + conv(2 * f, f, 3)
            + conv(f, 2, 7);
        assert_eq!(a.param_count(), want);
    }

    #[test]
    fn discriminator_grid_follows_conv_arithmetic() {
        for l in [64, 128, 288] {
            // k4 s2 p1 three times, then k4 s1 p1 twice
            let mut w = l;
            for _ in 0..3 {
                w = (w + 2 - 4) / 2 + 1;
            }
            for _ in 0..2 {
                w = w + 2 - 4 + 1;
            }
            assert_eq!(discriminator_patches(l, 3), w);
            let d = build_discriminator(l).unwrap();
            assert_eq!(d.output_shape([2, 2, 1, l]).unwrap(), [2, 1, 1, w]);
        }
        assert_eq!(discriminator_patches(288, 3), 34);
        for n in 1..=3 {
            let arch = TranslatorArch {
                discriminator_downsamples: n,
                ..TranslatorArch::new(64)
            };
            let d = build_discriminator_with(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(
                d.output_shape([1, 2, 1, 64]).unwrap()[3],
                discriminator_patches(64, n)
            );
        }
    }

    #[test]
    fn zero_discriminator_scores_zero_and_is_deterministic() {
        let mut d =
            build_discriminator_with(&tiny_arch(64), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = random_tensor([2, 2, 1, 64], 5);
        assert_eq!(d.infer(&x).unwrap(), d.infer(&x).unwrap());
        d.params.iter_mut().for_each(|p| p.fill(0.0));
        assert!(d.infer(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lsgan_hand_values() {
        let ones = Tensor::full([1, 1, 1, 4], 1.0);
        let zeros = Tensor::zeros([1, 1, 1, 4]);
        assert_eq!(lsgan_losses(&ones, &zeros).1, 0.0);
        let half = Tensor::full([1, 1, 1, 1], 0.5);
        assert!((lsgan_losses(&half, &half).1 - 0.5).abs() < 1e-12);
        assert_eq!(lsgan_losses(&zeros, &ones).0, 0.0);
    }

    #[test]
    fn cycle_hand_values() {
        let s = random_tensor([2, 2, 1, 8], 1);
        let t = random_tensor([2, 2, 1, 8], 2);
        assert_eq!(cycle_loss(&s, &s, &t, &t).unwrap(), 0.0);
        let shifted = s.map(|v| v + 0.5);
        assert!((cycle_loss(&s, &shifted, &t, &t).unwrap() - 0.5).abs() < 1e-6);
        let ss = Tensor::concat(&[&s, &s]).unwrap();
        let sh2 = Tensor::concat(&[&shifted, &shifted]).unwrap();
        let tt = Tensor::concat(&[&t, &t]).unwrap();
        assert!((cycle_loss(&ss, &sh2, &tt, &tt).unwrap() - 0.5).abs() < 1e-6);
        assert!(matches!(cycle_loss(&s, &ss, &t, &t), Err(Error::Shape(_))));
    }

    #[test]
    fn full_loss_values() {
        assert_eq!(full_loss(1.0, 1.0, 1.0, 10.0), 12.0);
        assert_eq!(full_loss(0.3, 0.4, 0.0, DEFAULT_LAMBDA), 0.7);
        assert_eq!(DEFAULT_LAMBDA, 10.0);
    }

    #[test]
    fn lambda_must_be_positive() {
        assert!(TranslatorPair::new(0, &tiny_arch(64), 0.0, 0).is_err());
        assert!(TranslatorPair::new(0, &tiny_arch(64), f64::NAN, 0).is_err());
    }

    #[test]
    fn learning_rate_holds_then_decays() {
        let cfg = RevealConfig {
            epochs: 10,
            ..RevealConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(0), 2e-4);
        assert_eq!(cfg.learning_rate_at(3), 2e-4);
        assert!(cfg.learning_rate_at(5) < 2e-4);
        assert!(cfg.learning_rate_at(9) > 0.0);
        assert!(cfg.learning_rate_at(9) < cfg.learning_rate_at(7));
    }

    #[test]
    fn replay_buffer_fills_then_mixes() {
        let mut pool = ReplayBuffer::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = random_tensor([2, 2, 1, 4], 1);
        assert_eq!(pool.query(&batch, &mut rng), batch);
        assert_eq!(pool.len(), 2);
        let mut swapped = false;
        for seed in 0..20 {
            let b = random_tensor([2, 2, 1, 4], 100 + seed);
            let out = pool.query(&b, &mut rng);
            swapped |= out != b;
            assert_eq!(pool.len(), 3);
        }
        assert!(swapped);
    }

    #[test]
    fn mixed_devices_are_rejected() {
        let pair = TranslatorPair::new(0, &tiny_arch(64), 10.0, 0).unwrap();
        let mixed = SliceSet::concat(&[device_set(0, 2, 64, 1), device_set(1, 2, 64, 2)]).unwrap();
        let t = device_set(0, 2, 64, 3);
        let cfg = RevealConfig {
            epochs: 1,
            ..RevealConfig::default()
        };
        assert!(matches!(
            train_translator(pair.clone(), &mixed, &t, &cfg),
            Err(Error::LabelMismatch(_))
        ));
        assert!(matches!(
            train_translator(
                pair,
                &device_set(1, 2, 64, 4),
                &device_set(1, 2, 64, 5),
                &cfg
            ),
            Err(Error::LabelMismatch(_))
        ));
    }

    #[test]
    fn seeded_training_repeats_and_logs_the_loss_identity() {
        let pair = TranslatorPair::new(2, &tiny_arch(64), 10.0, 7).unwrap();
        let s = device_set(2, 6, 64, 1);
        let t = device_set(2, 5, 64, 2);
        let cfg = RevealConfig {
            epochs: 2,
            batch_size: 2,
            seed: 3,
            ..RevealConfig::default()
        };
        let a = train_translator(pair.clone(), &s, &t, &cfg).unwrap();
        let b = train_translator(pair, &s, &t, &cfg).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.g.params, b.g.params);
        assert_eq!(a.steps.len(), 2 * 3);
        assert_eq!(a.epochs.len(), 2);
        for r in &a.steps {
            let want = r.l_gan1 + r.l_gan2 + 10.0 * r.l_cyc;
            assert!((r.l_full - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn translate_keeps_cardinality_and_shape() {
        let pair = TranslatorPair::new(1, &tiny_arch(64), 10.0, 0).unwrap();
        let s = device_set(1, 5, 64, 9);
        let out = translate(&pair, &s, "T").unwrap();
        assert_eq!(out.len(), 5);
        assert_eq!(out.slice_length(), 64);
        assert_eq!(out.labels(), s.labels());
        assert_eq!(out.domain_id(), "T");
        assert!(matches!(
            translate(&pair, &device_set(1, 2, 128, 0), "T"),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn selection_is_an_argmax_over_candidates() {
        let pair = TranslatorPair::new(0, &tiny_arch(64), 10.0, 0).unwrap();
        let cfgs: Vec<RevealConfig> = [3, 5, 4]
            .iter()
            .map(|&e| RevealConfig {
                epochs: e,
                ..RevealConfig::default()
            })
            .collect();
        let scores = [10.0, 30.0, 30.0];
        let mut calls = 0;
        let chosen = customize_with(pair.clone(), &cfgs, |p, _| {
            calls += 1;
            Ok((p, scores[calls - 1]))
        })
        .unwrap();
        let sel = chosen.selection.unwrap();
        assert_eq!(sel.candidate, 1);
        assert_eq!(sel.config.epochs, 5);
        assert_eq!(sel.candidate_scores, scores.to_vec());

        let single = customize_with(pair.clone(), &cfgs[..1], |p, _| Ok((p, 1.0))).unwrap();
        assert_eq!(single.selection.as_ref().unwrap().candidate, 0);
        assert_eq!(single.g, pair.g);
        assert!(customize_with(pair, &[], |p, _| Ok((p, 0.0))).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pair = TranslatorPair::new(3, &tiny_arch(64), 10.0, 1).unwrap();
        let path = dir.path().join("reveal_dev3.ckpt");
        pair.save(&path, "h").unwrap();
        let (back, hash) = TranslatorPair::load(&path).unwrap();
        assert_eq!(hash, "h");
        assert_eq!(back, pair);
    }
}

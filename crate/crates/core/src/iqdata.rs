//! IQ recordings, sliding-window slicing and the train/validate/test split.
//!
//! On disk a recording is raw interleaved little-endian `f32` pairs (I then
//! Q) with no header, named `<device_id>_<domain_id>.iq`. Slices are laid out
//! as `(2, L)` with I in row 0 and Q in row 1.

use std::collections::BTreeSet;
use std::path::Path;

use num_complex::Complex32;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfprint_nn::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One device's complex baseband capture in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct IqRecording {
    device_id: usize,
    domain_id: String,
    samples: Vec<Complex32>,
}

impl IqRecording {
    pub fn new(
        device_id: usize,
        domain_id: impl Into<String>,
        samples: Vec<Complex32>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Precondition(
                "recording needs at least one sample".into(),
            ));
        }
        if let Some(index) = samples
            .iter()
            .position(|s| !s.re.is_finite() || !s.im.is_finite())
        {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Self {
            device_id,
            domain_id: domain_id.into(),
            samples,
        })
    }

    pub fn device_id(&self) -> usize {
        self.device_id
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn samples(&self) -> &[Complex32] {
        &self.samples
    }

    pub fn sample_count(&self) -> usize {
        self.samples.len()
    }
}

pub fn iq_file_name(device_id: usize, domain_id: &str) -> String {
    format!("{device_id}_{domain_id}.iq")
}

/// Splits `<device_id>_<domain_id>.iq` back into its parts.
pub fn parse_iq_file_name(name: &str) -> Option<(usize, String)> {
    let stem = name.strip_suffix(".iq")?;
    let (dev, domain) = stem.split_once('_')?;
    if domain.is_empty() {
        return None;
    }
    Some((dev.parse().ok()?, domain.to_string()))
}

pub fn encode_iq(samples: &[Complex32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * 8);
    for s in samples {
        out.extend_from_slice(&s.re.to_le_bytes());
        out.extend_from_slice(&s.im.to_le_bytes());
    }
    out
}

pub fn decode_iq(bytes: &[u8], path: &Path) -> Result<Vec<Complex32>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(8) {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("{} bytes is not a positive multiple of 8", bytes.len()),
        });
    }
    let samples: Vec<Complex32> = bytes
        .chunks_exact(8)
        .map(|c| {
            Complex32::new(
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            )
        })
        .collect();
    if let Some(index) = samples
        .iter()
        .position(|s| !s.re.is_finite() || !s.im.is_finite())
    {
        return Err(Error::NonFiniteSample { index });
    }
    Ok(samples)
}

pub fn read_iq_file(
    path: impl AsRef<Path>,
    device_id: usize,
    domain_id: &str,
) -> Result<IqRecording> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let samples = decode_iq(&bytes, path)?;
    IqRecording::new(device_id, domain_id, samples)
}

pub fn write_iq_file(path: impl AsRef<Path>, rec: &IqRecording) -> Result<()> {
    std::fs::write(path, encode_iq(&rec.samples))?;
    Ok(())
}

/// Windowing parameters for [`slice_recording`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceParams {
    pub slice_length: usize,
    pub stride: usize,
    pub max_slices: usize,
    pub normalize: bool,
}

impl Default for SliceParams {
    fn default() -> Self {
        Self {
            slice_length: 288,
            stride: 1,
            max_slices: 12_000,
            normalize: true,
        }
    }
}

/// `m` slices of shape `(2, L)`, stored contiguously, with device labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSet {
    data: Vec<f32>,
    labels: Vec<usize>,
    domain_id: String,
    slice_length: usize,
    stride: usize,
}

impl SliceSet {
    pub fn new(
        data: Vec<f32>,
        labels: Vec<usize>,
        domain_id: impl Into<String>,
        slice_length: usize,
        stride: usize,
    ) -> Result<Self> {
        if slice_length == 0 || stride == 0 {
            return Err(Error::Precondition(
                "slice length and stride must be ≥ 1".into(),
            ));
        }
        if data.len() != labels.len() * 2 * slice_length {
            return Err(Error::Shape(format!(
                "{} values cannot hold {} slices of 2x{slice_length}",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            let index = data.iter().position(|v| !v.is_finite()).unwrap_or(0) / 2;
            return Err(Error::NonFiniteSample { index });
        }
        Ok(Self {
            data,
            labels,
            domain_id: domain_id.into(),
            slice_length,
            stride,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn slice_length(&self) -> usize {
        self.slice_length
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Slice `k` as `2·L` values: I row then Q row.
    pub fn slice(&self, k: usize) -> &[f32] {
        let n = 2 * self.slice_length;
        &self.data[k * n..(k + 1) * n]
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    pub fn select(&self, indices: &[usize]) -> SliceSet {
        let mut data = Vec::with_capacity(indices.len() * 2 * self.slice_length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.slice(i));
            labels.push(self.labels[i]);
        }
        SliceSet {
            data,
            labels,
            domain_id: self.domain_id.clone(),
            slice_length: self.slice_length,
            stride: self.stride,
        }
    }

    /// Indices of slices labelled `device`.
    pub fn indices_of(&self, device: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == device)
            .map(|(i, _)| i)
            .collect()
    }

    /// Concatenates sets sharing a domain and slice length.
    pub fn concat(parts: &[SliceSet]) -> Result<SliceSet> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Precondition("nothing to concatenate".into()))?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.slice_length != first.slice_length {
                return Err(Error::Shape(format!(
                    "slice length {} vs {}",
                    p.slice_length, first.slice_length
                )));
            }
            data.extend_from_slice(&p.data);
            labels.extend_from_slice(&p.labels);
        }
        Ok(SliceSet {
            data,
            labels,
            domain_id: first.domain_id.clone(),
            slice_length: first.slice_length,
            stride: first.stride,
        })
    }

    /// `(m, 2, 1, L)`: I/Q as channels over a length-L row.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec([self.len(), 2, 1, self.slice_length], self.data.clone())
            .expect("slice set data is always m·2·L long")
    }

    /// Rebuilds a slice set from a `(m, 2, 1, L)` tensor.
    pub fn from_tensor(
        t: &Tensor,
        labels: Vec<usize>,
        domain_id: impl Into<String>,
        stride: usize,
    ) -> Result<SliceSet> {
        let [m, c, h, l] = t.shape();
        if c != 2 || h != 1 || m != labels.len() {
            return Err(Error::Shape(format!(
                "tensor {:?} is not (m, 2, 1, L) with {} labels",
                t.shape(),
                labels.len()
            )));
        }
        SliceSet::new(t.data().to_vec(), labels, domain_id, l, stride)
    }

    pub fn with_domain(mut self, domain_id: impl Into<String>) -> Self {
        self.domain_id = domain_id.into();
        self
    }
}

/// Number of windows [`slice_recording`] produces.
pub fn slice_count(sample_count: usize, params: &SliceParams) -> usize {
    if sample_count < params.slice_length || params.stride == 0 {
        return 0;
    }
    ((sample_count - params.slice_length) / params.stride + 1).min(params.max_slices)
}

/// Cuts a recording into `(2, L)` windows starting at `k·stride`, keeping the
/// earliest `max_slices`. With `normalize`, every slice is scaled to unit
/// mean power (all-zero slices are left as they are).
pub fn slice_recording(rec: &IqRecording, params: &SliceParams) -> Result<SliceSet> {
    let l = params.slice_length;
    if l == 0 || params.stride == 0 || params.max_slices == 0 {
        return Err(Error::Precondition(
            "slice_length, stride and max_slices must be ≥ 1".into(),
        ));
    }
    if rec.sample_count() < l {
        return Err(Error::RecordingTooShort {
            samples: rec.sample_count(),
            slice_length: l,
        });
    }
    let m = slice_count(rec.sample_count(), params);
    let mut data = vec![0.0f32; m * 2 * l];
    for (k, out) in data.chunks_mut(2 * l).enumerate() {
        let window = &rec.samples[k * params.stride..k * params.stride + l];
        let (i_row, q_row) = out.split_at_mut(l);
        for ((i, q), s) in i_row.iter_mut().zip(q_row.iter_mut()).zip(window) {
            *i = s.re;
            *q = s.im;
        }
        if params.normalize {
            normalize_unit_power(out);
        }
    }
    SliceSet::new(
        data,
        vec![rec.device_id; m],
        rec.domain_id.clone(),
        l,
        params.stride,
    )
}

/// Scales a `2·L` slice so that mean(I² + Q²) over its L samples is 1.
pub fn normalize_unit_power(slice: &mut [f32]) {
    let l = slice.len() / 2;
    let power = slice.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / l as f64;
    if power > 0.0 {
        let k = (1.0 / power.sqrt()) as f32;
        slice.iter_mut().for_each(|v| *v *= k);
    }
}

pub fn mean_power(slice: &[f32]) -> f64 {
    let l = slice.len() / 2;
    slice.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / l as f64
}

pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.8, 0.1, 0.1);
/// Share of the base validation slices, and of the source-domain pool,
/// reserved for translator training.
pub const REVEAL_FRACTION: f64 = 0.1;

/// Slice-index lists for every role. Indices into the base-domain (T) slice
/// set for the `base_*` and `reveal_train_t` lists, into the source-domain
/// (S) set for the others. `reveal_train_t` is drawn from `base_val`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub slice_length: usize,
    pub fractions: (f64, f64, f64),
    pub base_train: Vec<usize>,
    pub base_val: Vec<usize>,
    pub base_test: Vec<usize>,
    pub reveal_train_t: Vec<usize>,
    pub reveal_train_s: Vec<usize>,
    pub ttod_eval_s: Vec<usize>,
    #[serde(default)]
    pub config_hash: String,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Largest-remainder apportionment of `round(frac · Σcounts)` items across
/// groups in proportion to their sizes. Every non-empty group gets at least
/// `min_each` (capped at its size).
fn apportion(counts: &[usize], frac: f64, min_each: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let target = (frac * total as f64).round() as usize;
    let quotas: Vec<f64> = counts.iter().map(|&c| frac * c as f64).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // stable sort keeps the lowest group first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &g in order.iter().take(target.saturating_sub(assigned)) {
        alloc[g] += 1;
    }
    for (a, &c) in alloc.iter_mut().zip(counts) {
        *a = (*a).max(min_each.min(c)).min(c);
    }
    alloc
}

/// Builds the per-device stratified split of both domains under `seed`.
pub fn build_splits(t: &SliceSet, s: &SliceSet, seed: u64) -> Result<SplitManifest> {
    if t.is_empty() || s.is_empty() {
        return Err(Error::Precondition(
            "both slice sets must be non-empty".into(),
        ));
    }
    if t.slice_length() != s.slice_length() {
        return Err(Error::Shape(format!(
            "slice length {} in T vs {} in S",
            t.slice_length(),
            s.slice_length()
        )));
    }
    let devices = t.label_set();
    if devices != s.label_set() {
        return Err(Error::LabelMismatch(format!(
            "devices {:?} in T vs {:?} in S",
            devices,
            s.label_set()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffled = |set: &SliceSet, rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        devices
            .iter()
            .map(|&d| {
                let mut idx = set.indices_of(d);
                idx.shuffle(rng);
                idx
            })
            .collect()
    };
    let t_groups = shuffled(t, &mut rng);
    let s_groups = shuffled(s, &mut rng);

    let t_counts: Vec<usize> = t_groups.iter().map(Vec::len).collect();
    if let Some((&d, _)) = devices.iter().zip(&t_counts).find(|(_, &c)| c < 10) {
        return Err(Error::Precondition(format!(
            "device {d} has fewer than 10 base-domain slices"
        )));
    }
    let val_counts = apportion(&t_counts, SPLIT_FRACTIONS.1, 1);
    let test_counts = apportion(&t_counts, SPLIT_FRACTIONS.2, 1);
    let reveal_t_counts = apportion(&val_counts, REVEAL_FRACTION, 1);
    let s_counts: Vec<usize> = s_groups.iter().map(Vec::len).collect();
    let reveal_s_counts = apportion(&s_counts, REVEAL_FRACTION, 1);

    let mut m = SplitManifest {
        seed,
        slice_length: t.slice_length(),
        fractions: SPLIT_FRACTIONS,
        base_train: Vec::new(),
        base_val: Vec::new(),
        base_test: Vec::new(),
        reveal_train_t: Vec::new(),
        reveal_train_s: Vec::new(),
        ttod_eval_s: Vec::new(),
        config_hash: String::new(),
    };
    for (g, idx) in t_groups.iter().enumerate() {
        let (val, rest) = idx.split_at(val_counts[g]);
        let (test, train) = rest.split_at(test_counts[g]);
        m.reveal_train_t
            .extend_from_slice(&val[..reveal_t_counts[g]]);
        m.base_val.extend_from_slice(val);
        m.base_test.extend_from_slice(test);
        m.base_train.extend_from_slice(train);
    }
    for (g, idx) in s_groups.iter().enumerate() {
        let (reveal, eval) = idx.split_at(reveal_s_counts[g]);
        m.reveal_train_s.extend_from_slice(reveal);
        m.ttod_eval_s.extend_from_slice(eval);
    }
    for list in [
        &mut m.base_train,
        &mut m.base_val,
        &mut m.base_test,
        &mut m.reveal_train_t,
        &mut m.reveal_train_s,
        &mut m.ttod_eval_s,
    ] {
        list.sort_unstable();
    }
    Ok(m)
}

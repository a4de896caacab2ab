use std::path::{Path, PathBuf};

use rfprint_core::baseline::{ClassifierArch, TrainConfig, Variant};
use rfprint_core::iqdata::SliceParams;
use rfprint_core::radiosim::{ImpairmentRanges, MultipathSpec, WaveformSpec};
use rfprint_core::reveal::{RevealConfig, TranslatorArch};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PipelineError;

/// Everything a run depends on. Only `out` is excluded from the hash, so
/// two runs of the same experiment in different directories agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub slicing: SlicingConfig,
    pub classifier: ClassifierConfig,
    pub translator: TranslatorConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Simulated(SimulationConfig),
    /// A directory of `<device>_<domain>.iq` files.
    Directory {
        path: PathBuf,
        base_domain: String,
        source_domain: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub n_devices: usize,
    pub samples_per_device: usize,
    pub impairments: ImpairmentRanges,
    pub waveform: WaveformSpec,
    pub base_channel: ChannelConfig,
    pub source_channel: ChannelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub domain_id: String,
    pub seed: u64,
    pub multipath: MultipathSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicingConfig {
    pub slice_length: usize,
    pub stride: usize,
    pub max_slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub variant: Variant,
    pub conv_filters: usize,
    pub dense: [usize; 3],
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorConfig {
    pub generator_filters: usize,
    pub discriminator_filters: usize,
    pub discriminator_downsamples: usize,
    pub residual_blocks: usize,
    pub input_skip: bool,
    pub lambda: f64,
    pub learning_rate: f32,
    pub beta1: f32,
    pub batch_size: usize,
    pub steps_per_epoch: Option<usize>,
    /// Epoch budgets tried per device; the best on validation is kept.
    pub epoch_grid: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dataset: DatasetSource::Simulated(SimulationConfig::default()),
            slicing: SlicingConfig::default(),
            classifier: ClassifierConfig::default(),
            translator: TranslatorConfig::default(),
            out: None,
        }
    }
}

impl Default for SimulationConfig {
    fn default() -> Self {
        let base = ImpairmentRanges::default();
        Self {
            n_devices: 5,
            samples_per_device: 1064,
            // wider than the radiosim defaults so five devices separate
            // cleanly at slice length 64
            impairments: ImpairmentRanges {
                gain_imbalance: 3.0 * base.gain_imbalance,
                phase_skew: 3.0 * base.phase_skew,
                dc_offset: 3.0 * base.dc_offset,
                pa_cubic: 3.0 * base.pa_cubic,
                ..base
            },
            waveform: WaveformSpec::default(),
            base_channel: ChannelConfig {
                domain_id: "day1".into(),
                seed: 11,
                multipath: MultipathSpec {
                    echoes: 0,
                    max_delay: 1,
                    echo_gain: (0.3, 0.6),
                    random_direct_phase: false,
                    snr_db: 30.0,
                },
            },
            source_channel: ChannelConfig {
                domain_id: "day2".into(),
                seed: 12,
                multipath: MultipathSpec {
                    echoes: 1,
                    max_delay: 1,
                    echo_gain: (0.3, 0.6),
                    random_direct_phase: false,
                    snr_db: 30.0,
                },
            },
        }
    }
}

impl Default for SlicingConfig {
    fn default() -> Self {
        Self {
            slice_length: 64,
            stride: 1,
            max_slices: 1000,
        }
    }
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            variant: Variant::OneD,
            conv_filters: 16,
            dense: [64, 64, 32],
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            patience: None,
        }
    }
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self {
            generator_filters: 8,
            discriminator_filters: 8,
            discriminator_downsamples: 1,
            residual_blocks: 9,
            input_skip: true,
            lambda: 10.0,
            learning_rate: 2e-4,
            beta1: 0.5,
            batch_size: 4,
            steps_per_epoch: None,
            epoch_grid: vec![50, 100, 200],
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        let t = &self.translator;
        if t.lambda.is_nan() || t.lambda <= 0.0 {
            return bad(format!("lambda must be > 0, got {}", t.lambda));
        }
        if t.epoch_grid.is_empty() || t.epoch_grid.contains(&0) {
            return bad("translator epoch_grid needs at least one positive budget".into());
        }
        if t.batch_size == 0 || self.classifier.batch_size == 0 || self.classifier.epochs == 0 {
            return bad("batch sizes and classifier epochs must be ≥ 1".into());
        }
        let s = &self.slicing;
        if s.stride == 0 || s.max_slices == 0 {
            return bad("stride and max_slices must be ≥ 1".into());
        }
        self.translator_arch()
            .check()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        match &self.dataset {
            DatasetSource::Simulated(sim) => {
                if sim.n_devices < 2 {
                    return bad("simulation needs at least two devices".into());
                }
                if sim.base_channel.domain_id == sim.source_channel.domain_id {
                    return bad("base and source domains must differ".into());
                }
                if sim.samples_per_device < s.slice_length {
                    return bad(format!(
                        "{} samples per device cannot fill a slice of {}",
                        sim.samples_per_device, s.slice_length
                    ));
                }
            }
            DatasetSource::Directory {
                path,
                base_domain,
                source_domain,
            } => {
                if !path.is_dir() {
                    return bad(format!(
                        "dataset directory {} does not exist",
                        path.display()
                    ));
                }
                if base_domain == source_domain {
                    return bad("base and source domains must differ".into());
                }
            }
        }
        Ok(())
    }

    pub fn domains(&self) -> (String, String) {
        match &self.dataset {
            DatasetSource::Simulated(sim) => (
                sim.base_channel.domain_id.clone(),
                sim.source_channel.domain_id.clone(),
            ),
            DatasetSource::Directory {
                base_domain,
                source_domain,
                ..
            } => (base_domain.clone(), source_domain.clone()),
        }
    }

    pub fn slice_params(&self) -> SliceParams {
        SliceParams {
            slice_length: self.slicing.slice_length,
            stride: self.slicing.stride,
            max_slices: self.slicing.max_slices,
            normalize: true,
        }
    }

    pub fn classifier_arch(&self, n_classes: usize) -> ClassifierArch {
        let c = &self.classifier;
        ClassifierArch {
            conv_filters: c.conv_filters,
            dense: c.dense,
            ..ClassifierArch::new(c.variant, n_classes, self.slicing.slice_length)
        }
    }

    pub fn classifier_train(&self) -> TrainConfig {
        let c = &self.classifier;
        TrainConfig {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            epochs: c.epochs,
            seed: self.seed,
            patience: c.patience,
        }
    }

    pub fn translator_arch(&self) -> TranslatorArch {
        let t = &self.translator;
        TranslatorArch {
            slice_length: self.slicing.slice_length,
            generator_filters: t.generator_filters,
            discriminator_filters: t.discriminator_filters,
            discriminator_downsamples: t.discriminator_downsamples,
            residual_blocks: t.residual_blocks,
            input_skip: t.input_skip,
        }
    }

    /// One candidate per grid entry, all sharing the run seed offset by
    /// the device id.
    pub fn reveal_candidates(&self, device: usize) -> Vec<RevealConfig> {
        let t = &self.translator;
        t.epoch_grid
            .iter()
            .map(|&epochs| RevealConfig {
                epochs,
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                batch_size: t.batch_size,
                seed: self.seed.wrapping_add(1000 + device as u64),
                steps_per_epoch: t.steps_per_epoch,
            })
            .collect()
    }
}

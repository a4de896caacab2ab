//! Desk-scale radio simulator for bit-similar devices.
//!
//! Every device transmits the same baseband waveform. What tells devices
//! apart is a frozen set of hardware impairments; what tells domains (days,
//! environments) apart is the multipath channel and noise. The transmit chain
//! is applied in a fixed order:
//!
//! IQ imbalance → DC offset → cubic PA → CFO rotation → phase-noise walk →
//! FIR multipath → AWGN.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqdata::{iq_file_name, write_iq_file, IqRecording};

/// Frozen hardware fingerprint of one transmitter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceImpairment {
    pub device_id: usize,
    /// Linear Q-branch gain relative to I.
    pub iq_gain_imbalance: f64,
    /// Quadrature skew in radians.
    pub iq_phase_skew: f64,
    pub dc_offset: Complex64,
    /// Carrier offset in cycles per sample.
    pub cfo: f64,
    /// Standard deviation of the per-sample phase increment, radians.
    pub phase_noise_std: f64,
    /// `y = x + a·x·|x|²`; negative values compress.
    pub pa_cubic_coeff: f64,
}

impl DeviceImpairment {
    /// A device that leaves the waveform untouched.
    pub fn ideal(device_id: usize) -> Self {
        Self {
            device_id,
            iq_gain_imbalance: 1.0,
            iq_phase_skew: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            cfo: 0.0,
            phase_noise_std: 0.0,
            pa_cubic_coeff: 0.0,
        }
    }
}

/// Half-widths of the uniform draws used by [`make_fleet_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpairmentRanges {
    /// `iq_gain_imbalance ∈ 1 ± gain_imbalance`.
    pub gain_imbalance: f64,
    pub phase_skew: f64,
    /// Maximum DC-offset magnitude.
    pub dc_offset: f64,
    pub cfo: f64,
    pub phase_noise_std: f64,
    /// `pa_cubic_coeff ∈ [-pa_cubic, 0]`.
    pub pa_cubic: f64,
}

impl Default for ImpairmentRanges {
    fn default() -> Self {
        Self {
            gain_imbalance: 0.05,
            phase_skew: 0.05,
            dc_offset: 0.05,
            cfo: 1e-3,
            phase_noise_std: 2e-3,
            pa_cubic: 0.1,
        }
    }
}

/// Recipe for [`ChannelProfile::generate`]: a direct path at delay 0 plus
/// `echoes` distinct delays in `1..=max_delay` with magnitudes drawn from
/// `echo_gain` and uniformly random phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultipathSpec {
    pub echoes: usize,
    pub max_delay: usize,
    pub echo_gain: (f64, f64),
    /// Also rotate the direct path by a random phase.
    pub random_direct_phase: bool,
    pub snr_db: f64,
}

impl Default for MultipathSpec {
    fn default() -> Self {
        Self {
            echoes: 2,
            max_delay: 4,
            echo_gain: (0.2, 0.7),
            random_direct_phase: true,
            snr_db: 30.0,
        }
    }
}

/// One domain's propagation conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub domain_id: String,
    pub tap_delays: Vec<usize>,
    pub tap_gains: Vec<Complex64>,
    /// `f64::INFINITY` disables the additive noise.
    pub snr_db: f64,
    pub seed: u64,
}

impl ChannelProfile {
    pub fn identity(domain_id: impl Into<String>) -> Self {
        Self {
            domain_id: domain_id.into(),
            tap_delays: vec![0],
            tap_gains: vec![Complex64::new(1.0, 0.0)],
            snr_db: f64::INFINITY,
            seed: 0,
        }
    }

    /// Random multipath profile drawn from `spec`, scaled to unit total
    /// power. See [`MultipathSpec`].
    pub fn generate(domain_id: impl Into<String>, seed: u64, spec: &MultipathSpec) -> Result<Self> {
        let MultipathSpec {
            echoes,
            max_delay,
            echo_gain,
            random_direct_phase,
            snr_db,
        } = *spec;
        if echoes > max_delay {
            return Err(Error::Precondition(format!(
                "{echoes} echoes do not fit in {max_delay} delays"
            )));
        }
        if !(echo_gain.0 >= 0.0 && echo_gain.0 <= echo_gain.1 && echo_gain.1.is_finite()) {
            return Err(Error::Precondition(format!(
                "bad echo gain range {echo_gain:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let direct_phase = if random_direct_phase {
            rng.random_range(-PI..PI)
        } else {
            0.0
        };
        let mut delays = vec![0usize];
        let mut gains = vec![Complex64::from_polar(1.0, direct_phase)];
        while delays.len() < echoes + 1 {
            let d = rng.random_range(1..=max_delay);
            if delays.contains(&d) {
                continue;
            }
            delays.push(d);
            let mag = if echo_gain.0 < echo_gain.1 {
                rng.random_range(echo_gain.0..echo_gain.1)
            } else {
                echo_gain.0
            };
            gains.push(Complex64::from_polar(mag, rng.random_range(-PI..PI)));
        }
        let power: f64 = gains.iter().map(|g| g.norm_sqr()).sum();
        let k = 1.0 / power.sqrt();
        let profile = Self {
            domain_id: domain_id.into(),
            tap_delays: delays,
            tap_gains: gains.into_iter().map(|g| g * k).collect(),
            snr_db,
            seed,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn total_tap_power(&self) -> f64 {
        self.tap_gains.iter().map(|g| g.norm_sqr()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tap_delays.is_empty() || self.tap_delays.len() != self.tap_gains.len() {
            return Err(Error::Precondition(
                "channel needs matching, non-empty tap delay and gain lists".into(),
            ));
        }
        let p = self.total_tap_power();
        if !(p > 0.0 && p <= 4.0) {
            return Err(Error::Precondition(format!(
                "total tap power {p} outside (0, 4]"
            )));
        }
        Ok(())
    }
}

pub fn make_fleet(n_devices: usize, seed: u64) -> Result<Vec<DeviceImpairment>> {
    make_fleet_with(n_devices, seed, &ImpairmentRanges::default())
}

/// Draws `n_devices` impairment profiles once from a seeded generator.
pub fn make_fleet_with(
    n_devices: usize,
    seed: u64,
    ranges: &ImpairmentRanges,
) -> Result<Vec<DeviceImpairment>> {
    if n_devices < 2 {
        return Err(Error::Precondition(
            "a fleet needs at least two devices".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sym = |half: f64| {
        if half > 0.0 {
            rng.random_range(-half..=half)
        } else {
            0.0
        }
    };
    let fleet = (0..n_devices)
        .map(|device_id| {
            let iq_gain_imbalance = 1.0 + sym(ranges.gain_imbalance);
            let iq_phase_skew = sym(ranges.phase_skew);
            let dc_mag = sym(ranges.dc_offset).abs();
            let dc_phase = sym(PI);
            let cfo = sym(ranges.cfo);
            let phase_noise_std = sym(ranges.phase_noise_std).abs();
            let pa_cubic_coeff = -sym(ranges.pa_cubic).abs();
            DeviceImpairment {
                device_id,
                iq_gain_imbalance,
                iq_phase_skew,
                dc_offset: Complex64::from_polar(dc_mag, dc_phase),
                cfo,
                phase_noise_std,
                pa_cubic_coeff,
            }
        })
        .collect();
    Ok(fleet)
}

/// Seed for the random draws of one (device, channel) transmission.
fn transmission_seed(channel_seed: u64, device_id: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = channel_seed ^ (device_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Passes `baseband` through the device's impairments and the channel.
/// Output length equals input length.
pub fn transmit(
    baseband: &[Complex64],
    dev: &DeviceImpairment,
    ch: &ChannelProfile,
) -> Result<IqRecording> {
    if baseband.is_empty() {
        return Err(Error::Precondition("baseband must be non-empty".into()));
    }
    if let Some(index) = baseband
        .iter()
        .position(|s| !s.re.is_finite() || !s.im.is_finite())
    {
        return Err(Error::NonFiniteSample { index });
    }
    ch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(transmission_seed(ch.seed, dev.device_id));
    let (sin_skew, cos_skew) = dev.iq_phase_skew.sin_cos();
    let mut theta = 0.0f64;
    let phase_step = if dev.phase_noise_std > 0.0 {
        Some(
            Normal::new(0.0, dev.phase_noise_std)
                .map_err(|e| Error::Precondition(e.to_string()))?,
        )
    } else {
        None
    };
    let tx: Vec<Complex64> = baseband
        .iter()
        .enumerate()
        .map(|(n, &x)| {
            let q = dev.iq_gain_imbalance * (sin_skew * x.re + cos_skew * x.im);
            let mut y = Complex64::new(x.re, q) + dev.dc_offset;
            y += y * y.norm_sqr() * dev.pa_cubic_coeff;
            let cfo_phase = 2.0 * PI * (dev.cfo * n as f64).fract();
            if let Some(step) = &phase_step {
                theta += step.sample(&mut rng);
            }
            y * Complex64::from_polar(1.0, cfo_phase + theta)
        })
        .collect();

    let mut rx = vec![Complex64::new(0.0, 0.0); tx.len()];
    for (&d, &g) in ch.tap_delays.iter().zip(&ch.tap_gains) {
        for n in d..tx.len() {
            rx[n] += g * tx[n - d];
        }
    }
    if ch.snr_db.is_finite() {
        let power = rx.iter().map(|v| v.norm_sqr()).sum::<f64>() / rx.len() as f64;
        let sigma = (power / 10f64.powf(ch.snr_db / 10.0) / 2.0).sqrt();
        for v in rx.iter_mut() {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *v += Complex64::new(re, im) * sigma;
        }
    }
    let samples: Vec<Complex32> = rx
        .iter()
        .map(|v| Complex32::new(v.re as f32, v.im as f32))
        .collect();
    IqRecording::new(dev.device_id, ch.domain_id.clone(), samples)
}

/// The waveform every device transmits: a pseudo-random QPSK symbol block,
/// pulse-shaped and repeated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformSpec {
    pub seed: u64,
    /// Symbols in one repetition of the block.
    pub symbols: usize,
    pub samples_per_symbol: usize,
}

impl Default for WaveformSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            symbols: 64,
            samples_per_symbol: 2,
        }
    }
}

impl WaveformSpec {
    /// `len` unit-power samples. Each symbol is spread over
    /// `samples_per_symbol` samples with a raised-cosine (Hann) pulse of
    /// twice the symbol duration, so neighbouring symbols overlap.
    pub fn baseband(&self, len: usize) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let sps = self.samples_per_symbol.max(1);
        let block_syms = self.symbols.max(1);
        let symbols: Vec<Complex64> = (0..block_syms)
            .map(|_| {
                let k = rng.random_range(0..4) as f64;
                Complex64::from_polar(1.0, PI / 4.0 + k * PI / 2.0)
            })
            .collect();
        let block_len = block_syms * sps;
        let pulse: Vec<f64> = (0..2 * sps)
            .map(|t| (PI * (t as f64 + 0.5) / (2 * sps) as f64).sin().powi(2))
            .collect();
        // one periodic block, symbols wrapping around the end
        let mut block = vec![Complex64::new(0.0, 0.0); block_len];
        for (s, &sym) in symbols.iter().enumerate() {
            for (t, &p) in pulse.iter().enumerate() {
                block[(s * sps + t) % block_len] += sym * p;
            }
        }
        let power = block.iter().map(|v| v.norm_sqr()).sum::<f64>() / block_len as f64;
        let k = 1.0 / power.sqrt();
        (0..len).map(|n| block[n % block_len] * k).collect()
    }
}

/// Every device sends the same waveform through its impairments and each
/// domain's channel. Returns recordings ordered by domain, then device.
pub fn generate_dataset(
    fleet: &[DeviceImpairment],
    channels: &[ChannelProfile],
    waveform: &WaveformSpec,
    samples_per_device: usize,
) -> Result<Vec<IqRecording>> {
    if channels.len() < 2 {
        return Err(Error::Precondition("need at least two domains".into()));
    }
    for (i, a) in channels.iter().enumerate() {
        for b in &channels[i + 1..] {
            if a.domain_id == b.domain_id || a == b {
                return Err(Error::Precondition(format!(
                    "domains {} and {} are not distinct",
                    a.domain_id, b.domain_id
                )));
            }
        }
    }
    let baseband = waveform.baseband(samples_per_device);
    let mut out = Vec::with_capacity(fleet.len() * channels.len());
    for ch in channels {
        for dev in fleet {
            out.push(transmit(&baseband, dev, ch)?);
        }
    }
    Ok(out)
}

/// Writes each recording as `<device_id>_<domain_id>.iq` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, recordings: &[IqRecording]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for rec in recordings {
        write_iq_file(
            dir.join(iq_file_name(rec.device_id(), rec.domain_id())),
            rec,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mp(echoes: usize, max_delay: usize, snr_db: f64) -> MultipathSpec {
        MultipathSpec {
            echoes,
            max_delay,
            snr_db,
            ..MultipathSpec::default()
        }
    }

    fn random_baseband(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Complex64::new(
                    rng.sample::<f64, _>(StandardNormal),
                    rng.sample::<f64, _>(StandardNormal),
                )
            })
            .collect()
    }

    #[test]
    fn fleets_are_deterministic_and_distinct() {
        assert_eq!(make_fleet(5, 7).unwrap(), make_fleet(5, 7).unwrap());
        let two = make_fleet(2, 1).unwrap();
        assert_ne!(
            DeviceImpairment {
                device_id: 0,
                ..two[0].clone()
            },
            DeviceImpairment {
                device_id: 0,
                ..two[1].clone()
            }
        );
        assert!(make_fleet(1, 0).is_err());
    }

    #[test]
    fn hundred_device_cfos_are_pairwise_distinct() {
        let fleet = make_fleet(100, 3).unwrap();
        for i in 0..fleet.len() {
            for j in i + 1..fleet.len() {
                assert_ne!(fleet[i].cfo, fleet[j].cfo, "devices {i} and {j}");
            }
        }
    }

    #[test]
    fn fleet_respects_ranges() {
        let r = ImpairmentRanges::default();
        for d in make_fleet(50, 9).unwrap() {
            assert!(
                d.iq_gain_imbalance > 0.0 && (d.iq_gain_imbalance - 1.0).abs() <= r.gain_imbalance
            );
            assert!(d.dc_offset.norm() <= r.dc_offset + 1e-12);
            assert!(d.cfo.abs() <= r.cfo);
            assert!(d.pa_cubic_coeff <= 0.0 && d.pa_cubic_coeff >= -r.pa_cubic);
        }
    }

    #[test]
    fn identity_chain_is_identity() {
        let x = random_baseband(200, 1);
        let rec = transmit(
            &x,
            &DeviceImpairment::ideal(0),
            &ChannelProfile::identity("T"),
        )
        .unwrap();
        for (a, b) in rec.samples().iter().zip(&x) {
            assert!((a.re as f64 - b.re).abs() < 1e-6 && (a.im as f64 - b.im).abs() < 1e-6);
        }
    }

    #[test]
    fn dc_offset_shifts_the_mean() {
        let n = 20_000;
        let x = random_baseband(n, 2);
        let dev = DeviceImpairment {
            dc_offset: Complex64::new(0.1, 0.0),
            ..DeviceImpairment::ideal(0)
        };
        let rec = transmit(&x, &dev, &ChannelProfile::identity("T")).unwrap();
        let mean = rec
            .samples()
            .iter()
            .fold(Complex64::new(0.0, 0.0), |acc, s| {
                acc + Complex64::new(s.re as f64, s.im as f64)
            })
            / n as f64;
        // per-component std of the input is 1
        let tol = 3.0 / (n as f64).sqrt();
        assert!((mean.re - 0.1).abs() < tol, "{mean}");
        assert!(mean.im.abs() < tol, "{mean}");
    }

    #[test]
    fn cfo_rotates_a_constant() {
        let x = vec![Complex64::new(1.0, 0.0); 5000];
        let dev = DeviceImpairment {
            cfo: 1e-3,
            ..DeviceImpairment::ideal(0)
        };
        let rec = transmit(&x, &dev, &ChannelProfile::identity("T")).unwrap();
        for (n, s) in rec.samples().iter().enumerate() {
            let want = Complex64::from_polar(1.0, 2.0 * PI * 1e-3 * n as f64);
            assert!((s.re as f64 - want.re).abs() < 1e-6, "n={n}");
            assert!((s.im as f64 - want.im).abs() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn multipath_is_a_truncated_convolution() {
        let x: Vec<Complex64> = (0..6)
            .map(|k| Complex64::new(k as f64 + 1.0, 0.0))
            .collect();
        let ch = ChannelProfile {
            domain_id: "S".into(),
            tap_delays: vec![0, 2],
            tap_gains: vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.5)],
            snr_db: f64::INFINITY,
            seed: 0,
        };
        let rec = transmit(&x, &DeviceImpairment::ideal(0), &ch).unwrap();
        assert_eq!(rec.sample_count(), 6);
        assert_eq!(rec.samples()[1], Complex32::new(2.0, 0.0));
        assert_eq!(rec.samples()[4], Complex32::new(5.0, 1.5));
    }

    #[test]
    fn noiseless_transmit_is_repeatable() {
        let x = WaveformSpec::default().baseband(512);
        let dev = make_fleet(3, 4).unwrap().remove(1);
        let ch = ChannelProfile {
            snr_db: f64::INFINITY,
            ..ChannelProfile::identity("T")
        };
        assert_eq!(
            transmit(&x, &dev, &ch).unwrap(),
            transmit(&x, &dev, &ch).unwrap()
        );
    }

    #[test]
    fn output_power_stays_within_bounds() {
        let x = WaveformSpec::default().baseband(4096);
        let p_in = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
        for (i, dev) in make_fleet(20, 5).unwrap().iter().enumerate() {
            let ch = ChannelProfile::generate("S", i as u64, &mp(3, 8, 20.0)).unwrap();
            let rec = transmit(&x, dev, &ch).unwrap();
            let p_out = rec
                .samples()
                .iter()
                .map(|s| (s.re as f64).powi(2) + (s.im as f64).powi(2))
                .sum::<f64>()
                / x.len() as f64;
            let ratio = p_out / p_in;
            assert!((0.25..=4.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn generated_channels_are_reproducible_and_bounded() {
        let a = ChannelProfile::generate("T", 42, &mp(3, 6, 25.0)).unwrap();
        assert_eq!(
            a,
            ChannelProfile::generate("T", 42, &mp(3, 6, 25.0)).unwrap()
        );
        assert!((a.total_tap_power() - 1.0).abs() < 1e-12);
        assert_eq!(a.tap_delays[0], 0);
        assert!(ChannelProfile::generate("T", 1, &mp(7, 6, 25.0)).is_err());
    }

    #[test]
    fn dataset_cardinality_and_domain_difference() {
        let fleet = make_fleet(5, 1).unwrap();
        let channels = vec![
            ChannelProfile::generate("T", 1, &mp(2, 4, 30.0)).unwrap(),
            ChannelProfile::generate("S", 2, &mp(2, 4, 30.0)).unwrap(),
        ];
        let recs = generate_dataset(&fleet, &channels, &WaveformSpec::default(), 300).unwrap();
        assert_eq!(recs.len(), 10);
        for d in 0..5 {
            assert_ne!(recs[d].samples(), recs[5 + d].samples());
            assert_eq!(recs[d].device_id(), recs[5 + d].device_id());
        }
        assert!(generate_dataset(&fleet, &channels[..1], &WaveformSpec::default(), 300).is_err());
    }

    #[test]
    fn waveform_has_unit_power_and_repeats() {
        let w = WaveformSpec::default();
        let x = w.baseband(w.symbols * w.samples_per_symbol * 3);
        let p = x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64;
        assert!((p - 1.0).abs() < 1e-9);
        let period = w.symbols * w.samples_per_symbol;
        assert_eq!(x[5], x[5 + period]);
    }
}

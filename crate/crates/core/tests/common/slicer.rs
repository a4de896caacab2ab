//! Brute-force window enumeration used as the slicer oracle.

use num_complex::Complex32;
use proptest::prelude::*;
use rfprint_core::iqdata::{slice_recording, IqRecording, SliceParams};

#[derive(Debug, Clone)]
pub struct SlicerCase {
    pub samples: Vec<Complex32>,
    pub params: SliceParams,
}

pub fn case() -> impl Strategy<Value = SlicerCase> {
    (
        1usize..120,
        1usize..12,
        1usize..9,
        1usize..40,
        any::<bool>(),
    )
        .prop_flat_map(|(n, l, stride, max_slices, normalize)| {
            prop::collection::vec((-4.0f32..4.0, -4.0f32..4.0), n).prop_map(move |v| SlicerCase {
                samples: v
                    .into_iter()
                    .map(|(re, im)| Complex32::new(re, im))
                    .collect(),
                params: SliceParams {
                    slice_length: l,
                    stride,
                    max_slices,
                    normalize,
                },
            })
        })
}

/// Every start position, in order, filtered to the stride grid and cut at
/// `max_slices`.
fn oracle_windows(samples: &[Complex32], p: &SliceParams) -> Vec<Vec<Complex32>> {
    let mut out = Vec::new();
    for start in 0..samples.len() {
        if start + p.slice_length > samples.len() || start % p.stride != 0 {
            continue;
        }
        if out.len() == p.max_slices {
            break;
        }
        out.push(samples[start..start + p.slice_length].to_vec());
    }
    out
}

/// Checks the slicer against the oracle. Raw slices must match bit for
/// bit; normalized slices must be the raw window times one positive scale
/// that brings the mean power to 1.
pub fn check(c: &SlicerCase) -> Result<(), String> {
    let l = c.params.slice_length;
    let rec = IqRecording::new(3, "d", c.samples.clone()).unwrap();
    let got = slice_recording(&rec, &c.params);
    let expect = oracle_windows(&c.samples, &c.params);
    let set = match got {
        Err(_) if c.samples.len() < l => return Ok(()),
        Err(e) => return Err(format!("unexpected error {e}")),
        Ok(_) if c.samples.len() < l => return Err("short recording accepted".into()),
        Ok(s) => s,
    };
    if set.len() != expect.len() {
        return Err(format!("{} slices, oracle {}", set.len(), expect.len()));
    }
    if set.labels().iter().any(|&d| d != 3) {
        return Err("labels changed".into());
    }
    for (k, w) in expect.iter().enumerate() {
        let s = set.slice(k);
        let raw: Vec<f32> = w
            .iter()
            .map(|z| z.re)
            .chain(w.iter().map(|z| z.im))
            .collect();
        if !c.params.normalize {
            if s != raw.as_slice() {
                return Err(format!("slice {k} differs"));
            }
            continue;
        }
        let power = raw.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / l as f64;
        if power == 0.0 {
            if s != raw.as_slice() {
                return Err(format!("zero slice {k} altered"));
            }
            continue;
        }
        let scale = 1.0 / power.sqrt();
        for (a, b) in s.iter().zip(&raw) {
            let want = *b as f64 * scale;
            if (*a as f64 - want).abs() > 1e-5 * (1.0 + want.abs()) {
                return Err(format!("slice {k}: {a} vs {want}"));
            }
        }
    }
    Ok(())
}

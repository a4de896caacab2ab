//! Central finite differences in f64 against the engine's f32 analytic
//! gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfprint_nn::Tensor;

use super::reference::Arr;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Coordinates compared against the analytic gradient.
    pub coordinates: usize,
    /// Coordinates skipped because a ReLU-type kink lies inside the step.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passes(&self, tol: f64, min_coordinates: usize) -> bool {
        self.coordinates >= min_coordinates && self.max_rel_error <= tol
    }
}

/// Random tensor with entries in `[-1, 1)`.
pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares `analytic` with f64 central differences of `loss` on random
/// parameter entries until `coordinates` of them have been scored.
///
/// Each entry is differenced with steps `h` and `h / 2`; the quotients of a
/// smooth function agree to O(h²), so when they differ by more than a
/// hundredth of `tol` a kink sits inside the step and the entry is skipped.
/// The relative error uses `max(|num|, |ana|, floor)` with the floor at
/// 1e-3 of the largest analytic magnitude, which only matters for entries
/// whose true gradient is zero (a bias feeding a normalization).
pub fn check_params(
    params: &mut [Arr],
    analytic: &[Tensor],
    mut loss: impl FnMut(&[Arr]) -> f64,
    coordinates: usize,
    h: f64,
    tol: f64,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_abs = analytic
        .iter()
        .flat_map(|t| t.data())
        .fold(0.0f64, |m, &g| m.max(g.abs() as f64));
    let floor = 1e-3 * max_abs;
    let mut report = GradReport {
        coordinates: 0,
        skipped: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    let mut quotient = |params: &mut [Arr], pi: usize, ci: usize, h: f64| {
        let orig = params[pi].data[ci];
        params[pi].data[ci] = orig + h;
        let up = loss(params);
        params[pi].data[ci] = orig - h;
        let down = loss(params);
        params[pi].data[ci] = orig;
        (up - down) / (2.0 * h)
    };
    for _ in 0..coordinates * 20 {
        if report.coordinates == coordinates {
            break;
        }
        let pi = rng.random_range(0..params.len());
        if params[pi].data.is_empty() {
            continue;
        }
        let ci = rng.random_range(0..params[pi].data.len());
        let coarse = quotient(params, pi, ci, h);
        let fine = quotient(params, pi, ci, h / 2.0);
        if rel(coarse, fine, floor) > tol / 100.0 {
            report.skipped += 1;
            continue;
        }
        let ana = analytic[pi].data()[ci] as f64;
        let err = rel(fine, ana, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = format!("tensor {pi}[{ci}]: numeric {fine:.6e} analytic {ana:.6e}");
        }
        report.coordinates += 1;
    }
    report
}

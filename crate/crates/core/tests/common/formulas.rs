//! Loss values worked out by hand on small fixed arrays.

use rfprint_core::reveal::{cycle_loss, full_loss, lsgan_losses};
use rfprint_nn::Tensor;

fn t(shape: [usize; 4], v: &[f32]) -> Tensor {
    Tensor::from_vec(shape, v.to_vec()).unwrap()
}

/// `(what, computed, expected)` triples.
pub fn cases() -> Vec<(&'static str, f64, f64)> {
    let real = t([1, 1, 1, 4], &[0.9, 0.2, 1.3, -0.4]);
    let fake = t([1, 1, 1, 4], &[0.1, 0.7, -0.3, 0.5]);
    // (0.81 + 0.09 + 1.69 + 0.25) / 4
    let (gen, disc) = lsgan_losses(&real, &fake);
    // (0.01 + 0.64 + 0.09 + 1.96) / 4 + (0.01 + 0.49 + 0.09 + 0.25) / 4
    let batched = t([2, 1, 1, 2], &[2.0, 0.0, -1.0, 1.0]);
    // (1 + 1 + 4 + 0) / 4, then that plus (4 + 0 + 1 + 1) / 4
    let (gen_b, disc_b) = lsgan_losses(&batched, &batched);

    let s = t([1, 2, 1, 2], &[1.0, -2.0, 0.5, 0.0]);
    let fgs = t([1, 2, 1, 2], &[0.5, -1.5, 0.5, 1.0]);
    let tt = t([1, 2, 1, 2], &[0.25, 0.25, -1.0, 2.0]);
    let gft = t([1, 2, 1, 2], &[0.0, 1.0, -1.0, 1.5]);
    // 2.0 / 4 + 1.5 / 4
    let cyc = cycle_loss(&s, &fgs, &tt, &gft).unwrap();
    let perfect = cycle_loss(&s, &s, &tt, &tt).unwrap();

    vec![
        ("generator term", gen, 0.71),
        ("discriminator term", disc, 0.885),
        ("generator term, batch of 2", gen_b, 1.5),
        ("discriminator term, real = fake", disc_b, 3.0),
        ("cycle loss", cyc, 0.875),
        ("cycle loss of exact reconstructions", perfect, 0.0),
        ("full loss", full_loss(0.885, 0.3, 0.875, 10.0), 9.935),
        (
            "full loss, lambda 0",
            full_loss(0.885, 0.3, 0.875, 0.0),
            1.185,
        ),
    ]
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

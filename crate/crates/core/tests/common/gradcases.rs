//! Gradient-check cases for the classifier and the translator losses, on
//! miniature networks at their training initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rfprint_core::baseline::{build_classifier_with, ClassifierArch, Variant};
use rfprint_core::reveal::*;
use rfprint_nn::loss::{l1_mean, mse_to_const};

use super::gradcheck::{check_params, random_tensor, GradReport};
use super::reference::{cross_entropy, forward, mean_abs_diff, mean_sq_to, params64, Arr};

pub const L: usize = 64;
pub const COORDS: usize = 60;
pub const MIN_COORDS: usize = 50;
pub const TOL: f64 = 1e-2;
const H: f64 = 1e-5;

fn mini_arch() -> TranslatorArch {
    TranslatorArch {
        slice_length: L,
        generator_filters: 4,
        discriminator_filters: 4,
        discriminator_downsamples: 3,
        residual_blocks: 2,
        input_skip: false,
    }
}

pub fn generator_term_check() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = build_generator_with(&mini_arch(), &mut rng).unwrap();
    let d = build_discriminator_with(&mini_arch(), &mut rng).unwrap();
    let s = random_tensor([2, 2, 1, L], 2);
    let (y, tape) = g.forward(&s).unwrap();
    let (out, dtape) = d.forward(&y).unwrap();
    let (_, grad) = mse_to_const(&out, 1.0);
    let mut scratch = d.zero_grads();
    let dy = d.backward(dtape, grad, &mut scratch).unwrap();
    let mut grads = g.zero_grads();
    g.backward(tape, dy, &mut grads).unwrap();
    let (s64, d64) = (Arr::from_tensor(&s), params64(&d));
    check_params(
        &mut params64(&g),
        &grads,
        |p| mean_sq_to(&forward(&d.arch, &d64, &forward(&g.arch, p, &s64)), 1.0),
        COORDS,
        H,
        TOL,
        3,
    )
}

pub fn discriminator_term_check() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = build_discriminator_with(&mini_arch(), &mut rng).unwrap();
    let real = random_tensor([2, 2, 1, L], 5);
    let fake = random_tensor([2, 2, 1, L], 6);
    let (_, grads) = discriminator_pass(&d, &real, &fake).unwrap();
    let (r64, f64_) = (Arr::from_tensor(&real), Arr::from_tensor(&fake));
    check_params(
        &mut params64(&d),
        &grads,
        |p| {
            mean_sq_to(&forward(&d.arch, p, &r64), 1.0)
                + mean_sq_to(&forward(&d.arch, p, &f64_), 0.0)
        },
        COORDS,
        H,
        TOL,
        7,
    )
}

pub fn cycle_check() -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = build_generator_with(&mini_arch(), &mut rng).unwrap();
    let f = build_generator_with(&mini_arch(), &mut rng).unwrap();
    let s = random_tensor([2, 2, 1, L], 9);
    let t = random_tensor([2, 2, 1, L], 10);
    // d/dG of |F(G(s)) − s| + |G(F(t)) − t|
    let (gs, tape_g1) = g.forward(&s).unwrap();
    let (fgs, tape_f1) = f.forward(&gs).unwrap();
    let ft = f.infer(&t).unwrap();
    let (gft, tape_g2) = g.forward(&ft).unwrap();
    let (_, d_fgs) = l1_mean(&fgs, &s);
    let (_, d_gft) = l1_mean(&gft, &t);
    let mut grads = g.zero_grads();
    let mut scratch = f.zero_grads();
    let d_gs = f.backward(tape_f1, d_fgs, &mut scratch).unwrap();
    g.backward(tape_g1, d_gs, &mut grads).unwrap();
    g.backward(tape_g2, d_gft, &mut grads).unwrap();
    let (s64, t64, f64p) = (Arr::from_tensor(&s), Arr::from_tensor(&t), params64(&f));
    let ft64 = forward(&f.arch, &f64p, &t64);
    check_params(
        &mut params64(&g),
        &grads,
        |p| {
            let fgs = forward(&f.arch, &f64p, &forward(&g.arch, p, &s64));
            mean_abs_diff(&fgs, &s64) + mean_abs_diff(&forward(&g.arch, p, &ft64), &t64)
        },
        COORDS,
        H,
        TOL,
        11,
    )
}

/// The full generator objective through both cycles and both discriminators.
pub fn composite_generator_check() -> GradReport {
    let pair = TranslatorPair::new(0, &mini_arch(), DEFAULT_LAMBDA, 12).unwrap();
    let s = random_tensor([2, 2, 1, L], 13);
    let t = random_tensor([2, 2, 1, L], 14);
    let pass = generator_pass(&pair, &s, &t).unwrap();
    let (s64, t64) = (Arr::from_tensor(&s), Arr::from_tensor(&t));
    let (f64p, ds, dt) = (params64(&pair.f), params64(&pair.d_s), params64(&pair.d_t));
    let fake_s = forward(&pair.f.arch, &f64p, &t64);
    check_params(
        &mut params64(&pair.g),
        &pass.g_grads,
        |p| {
            let fake_t = forward(&pair.g.arch, p, &s64);
            let rec_s = forward(&pair.f.arch, &f64p, &fake_t);
            let rec_t = forward(&pair.g.arch, p, &fake_s);
            mean_sq_to(&forward(&pair.d_t.arch, &dt, &fake_t), 1.0)
                + mean_sq_to(&forward(&pair.d_s.arch, &ds, &fake_s), 1.0)
                + DEFAULT_LAMBDA * (mean_abs_diff(&rec_s, &s64) + mean_abs_diff(&rec_t, &t64))
        },
        COORDS,
        H,
        TOL,
        15,
    )
}

/// Cross-entropy of a small classifier. Also returns the relative gap
/// between the engine's loss and the reference loss.
pub fn classifier_check(variant: Variant) -> (GradReport, f64) {
    let arch = ClassifierArch {
        conv_filters: 4,
        dense: [8, 8, 8],
        ..ClassifierArch::new(variant, 3, L)
    };
    let model = build_classifier_with(&arch, 21).unwrap();
    let x = random_tensor(arch.input_shape(4), 22);
    let labels = [0, 2, 1, 2];
    let (loss, grads) = model.loss_and_grads(&x, &labels).unwrap();
    let x64 = Arr::from_tensor(&x);
    let mut p = params64(&model.net);
    let ref_loss = cross_entropy(&forward(&model.net.arch, &p, &x64), &labels);
    let report = check_params(
        &mut p,
        &grads,
        |p| cross_entropy(&forward(&model.net.arch, p, &x64), &labels),
        COORDS,
        H,
        TOL,
        23,
    );
    (report, (loss - ref_loss).abs() / ref_loss.abs())
}

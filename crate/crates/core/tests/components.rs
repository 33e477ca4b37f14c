mod common;

use bacl_core::bns::{self, ScheduleParams, SchedulePreset};
use bacl_core::cla;
use bacl_core::encoder::{self, EncoderDims, EncoderParams, Modality};
use bacl_core::eval::contraction_fit;
use bacl_numerics::{grad_check_many, Tape, Tensor};
use common::random_matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dims() -> EncoderDims {
    EncoderDims {
        d_latent: 5,
        d_embed: 6,
        d_attn: 4,
        m_tokens: 3,
        l_tokens: 4,
    }
}

fn params(seed: u64) -> EncoderParams {
    EncoderParams::init(dims(), &mut ChaCha8Rng::seed_from_u64(seed))
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn(t.rows(), t.cols(), |i, j| t.at(perm[i], j)).unwrap()
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn embeddings_are_unit_and_scale_invariant(seed in any::<u64>(), c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(seed);
        for m in [Modality::X, Modality::Y] {
            let t = random_matrix(&mut rng, dims().tokens(m), 5);
            let e = encoder::encode_tokens(&p, &t, m).unwrap();
            let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
            let scaled = encoder::encode_tokens(&p, &t.map(|v| v * c).unwrap(), m).unwrap();
            for (a, b) in e.vector.iter().zip(&scaled.vector) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_are_distributions_and_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = params(seed);
        let x = random_matrix(&mut rng, 3, 5);
        let y = random_matrix(&mut rng, 4, 5);
        let a = encoder::cross_attention(&p, &x, &y).unwrap();
        for i in 0..7 {
            prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
            prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let px = shuffled(3, &mut rng);
        let py = shuffled(4, &mut rng);
        let b = encoder::cross_attention(&p, &permute_rows(&x, &px), &permute_rows(&y, &py)).unwrap();
        let joint: Vec<usize> = px.iter().copied().chain(py.iter().map(|&j| 3 + j)).collect();
        for i in 0..7 {
            for j in 0..7 {
                prop_assert!((b.at(i, j) - a.at(joint[i], joint[j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampler_output_is_on_the_simplex_and_reproducible(seed in any::<u64>(), n in 1usize..20, tau in 0.05f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = bns::gumbel_softmax(&u, tau, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = bns::gumbel_softmax(&u, tau, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!((a.probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        prop_assert!(a.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(a.hardest_index < n);
    }

    #[test]
    fn entropy_falls_with_temperature_for_fixed_scores(seed in any::<u64>(), n in 2usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = bns::gumbel_noise(n, &mut rng);
        let mut last = f64::INFINITY;
        for e in 0..20 {
            let tau = bns::tau_at(0.7, 0.1, e, 20);
            let h = bns::entropy(&bns::gumbel_softmax_with_noise(&u, tau, &g).unwrap().probs);
            prop_assert!(h <= last + 1e-12);
            last = h;
        }
    }

    #[test]
    fn discrepancy_and_boost_properties(seed in any::<u64>(), n in 1usize..10, beta in 0.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = random_matrix(&mut rng, n, n).softmax_rows().unwrap();
        let neg = random_matrix(&mut rng, n, n).softmax_rows().unwrap();
        let delta = cla::delta_map(&pos, &neg).unwrap();
        prop_assert!(delta.data().iter().all(|&v| v >= 0.0));
        prop_assert!(cla::delta_map(&pos, &pos).unwrap().data().iter().all(|&v| v == 0.0));
        let boosted = cla::boost(&neg, &delta, beta).unwrap();
        for (b, a) in boosted.data().iter().zip(neg.data()) {
            prop_assert!(b >= a);
        }
        prop_assert_eq!(cla::boost(&neg, &delta, 0.0).unwrap(), neg.clone());
        let zero = cla::delta_map(&neg, &neg).unwrap();
        prop_assert_eq!(cla::boost(&neg, &zero, beta).unwrap(), neg);
    }

    #[test]
    fn coverage_is_a_fraction_and_grows_with_the_top_share(seed in any::<u64>(), n in 2usize..10, planted in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = random_matrix(&mut rng, n, n).map(f64::abs).unwrap();
        let positions: Vec<usize> = (0..planted.min(n)).map(|_| rng.random_range(0..n)).collect();
        let mut last = 0.0;
        for step in 1..=10 {
            let c = cla::ael_coverage(&delta, &positions, step as f64 / 10.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert!(c >= last);
            last = c;
        }
    }

    #[test]
    fn main_loss_is_the_exact_weighted_sum(c in 0.0f64..10.0, l in 0.0f64..50.0, lambda in 0.0f64..2.0) {
        let b = cla::main_loss(c, l, lambda).unwrap();
        prop_assert_eq!(b.l_main, c + lambda * l);
        prop_assert_eq!(b.l_contrast, c);
        prop_assert_eq!(b.l_local, l);
    }

    #[test]
    fn contraction_fit_recovers_planted_exponentials(log_a in -3.0f64..1.0, slope in -0.5f64..0.5, eta0 in 0.0f64..6.0) {
        let trace: Vec<(usize, f64)> = (1..=20).map(|e| (e, (log_a + slope * (e * e) as f64).exp())).collect();
        let fit = contraction_fit(&trace, eta0).unwrap();
        prop_assert!((fit.slope - slope).abs() < 1e-9);
        prop_assert!((fit.intercept - log_a).abs() < 1e-7);
        if slope != 0.0 {
            prop_assert!((fit.r_squared - 1.0).abs() < 1e-9);
        }
        prop_assert_eq!(fit.points, (1..=20).filter(|&e| e as f64 > eta0).count());
    }
}

#[test]
fn schedule_centre_is_the_endpoint_midpoint() {
    for preset in SchedulePreset::ALL {
        for eta0 in [0.0, 3.5, 8.0, 40.0] {
            let s = preset.with_eta0(eta0);
            let mid = 0.5 * (s.alpha_early + s.alpha_late);
            assert!((bns::alpha(&s, eta0) - mid).abs() <= 1e-12);
        }
    }
    let flat = ScheduleParams::flat_zero(4.0);
    assert!((0..30).all(|e| bns::alpha(&flat, e as f64) == 0.0));
}

#[test]
fn late_curriculum_samples_harder_negatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
    let d: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let s = SchedulePreset::Default.with_eta0(8.0);
    let early = bns::sampled_difficulty(&u, &d, bns::alpha(&s, 0.0), 0.3, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let late = bns::sampled_difficulty(&u, &d, bns::alpha(&s, 20.0), 0.3, 10_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let se = (early.1.powi(2) + late.1.powi(2)).sqrt();
    assert!(late.0 - early.0 > 3.0 * se, "early {early:?} late {late:?}");
}

#[test]
fn similarity_and_attention_gradients_match_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params(5);
    let x = random_matrix(&mut rng, 3, 5);
    let y = random_matrix(&mut rng, 4, 5);
    let w = random_matrix(&mut rng, 7, 7);
    let at: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
    let vars = |v: &[bacl_numerics::Var]| encoder::EncoderVars {
        proj_x: v[0],
        proj_y: v[1],
        output: v[2],
        query: v[3],
        key: v[4],
    };
    let sim = grad_check_many(
        |tape: &mut Tape, v| {
            let e = vars(v);
            let xt = tape.constant(x.clone());
            let yt = tape.constant(y.clone());
            let ex = encoder::encode_on_tape(tape, &e, xt, 3, Modality::X).map_err(unwrap_numerics)?;
            let ey = encoder::encode_on_tape(tape, &e, yt, 4, Modality::Y).map_err(unwrap_numerics)?;
            let prod = tape.mul(ex.embeddings, ey.embeddings)?;
            tape.sum(prod)
        },
        &at,
        1e-6,
    )
    .unwrap();
    assert!(sim.max_rel_error <= 1e-5, "{sim:?}");
    let attn = grad_check_many(
        |tape: &mut Tape, v| {
            let e = vars(v);
            let xt = tape.constant(x.clone());
            let yt = tape.constant(y.clone());
            let ex = encoder::encode_on_tape(tape, &e, xt, 3, Modality::X).map_err(unwrap_numerics)?;
            let ey = encoder::encode_on_tape(tape, &e, yt, 4, Modality::Y).map_err(unwrap_numerics)?;
            let a = encoder::attention_on_tape(tape, &e, ex.states, ey.states, 4).map_err(unwrap_numerics)?;
            let wt = tape.constant(w.clone());
            let prod = tape.mul(a, wt)?;
            tape.sum(prod)
        },
        &at,
        1e-6,
    )
    .unwrap();
    assert!(attn.max_rel_error <= 1e-5, "{attn:?}");
}

fn unwrap_numerics(e: bacl_core::Error) -> bacl_numerics::NumericsError {
    match e {
        bacl_core::Error::Numerics(n) => n,
        other => panic!("{other}"),
    }
}

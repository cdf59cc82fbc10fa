//! Property tests for the invariants each module promises.

use beam_moe::array_channel::{
    beamforming_gain, build_dft_codebook, gain_ratio, optimal_beam_index, ArrayGeometry,
    ChannelState,
};
use beam_moe::config::ExperimentConfig;
use beam_moe::dataset::{split_of, Split};
use beam_moe::eval::{mean_gain_ratio, mean_std, topk_accuracy};
use beam_moe::moe::{fuse, BeamModel, FusionWeights, ModelConfig, ModelKind};
use beam_moe::nn::{argmax, DenseNet, DenseNetSpec};
use beam_moe::scenario::{generate_dataset, ScenarioConfig};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn complex_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect()
}

fn real_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codebook_beams_have_unit_norm(n in 1usize..33, m in 1usize..129) {
        let cb = build_dft_codebook(&ArrayGeometry::half_wavelength(n).unwrap(), m).unwrap();
        prop_assert_eq!(cb.len(), m);
        for b in cb.beams() {
            prop_assert_eq!(b.len(), n);
            let norm: f64 = b.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_choice_ignores_complex_scaling(seed in any::<u64>(), mag in -6.0f64..6.0, phase in 0.0f64..6.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = build_dft_codebook(&ArrayGeometry::half_wavelength(16).unwrap(), 64).unwrap();
        let h = ChannelState::from_vector(complex_vec(&mut rng, 16)).unwrap();
        let c = Complex64::from_polar(10f64.powf(mag), phase);
        prop_assert_eq!(
            optimal_beam_index(&h, &cb).unwrap(),
            optimal_beam_index(&h.scaled(c), &cb).unwrap()
        );
    }

    #[test]
    fn gain_is_phase_blind_and_ratio_bounded(seed in any::<u64>(), phase in 0.0f64..6.3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = build_dft_codebook(&ArrayGeometry::half_wavelength(8).unwrap(), 32).unwrap();
        let h = ChannelState::from_vector(complex_vec(&mut rng, 8)).unwrap();
        let rotated = h.scaled(Complex64::from_polar(1.0, phase));
        let best = optimal_beam_index(&h, &cb).unwrap();
        for m in 0..cb.len() {
            let f = cb.beam(m).unwrap();
            let g0 = beamforming_gain(&h, f).unwrap();
            let g1 = beamforming_gain(&rotated, f).unwrap();
            prop_assert!((g0 - g1).abs() <= 1e-12 * g0.max(1.0));
            let r = gain_ratio(&h, m, &cb).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
        }
        prop_assert_eq!(gain_ratio(&h, best, &cb).unwrap(), 1.0);
    }

    #[test]
    fn critically_sampled_codebook_is_orthonormal(n in 1usize..33) {
        let cb = build_dft_codebook(&ArrayGeometry::half_wavelength(n).unwrap(), n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let dot: Complex64 = cb.beam(i).unwrap().iter()
                    .zip(cb.beam(j).unwrap())
                    .map(|(a, b)| a.conj() * b)
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((dot - Complex64::new(want, 0.0)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn split_is_a_partition(id in any::<u64>(), a in 0.05f64..0.9) {
        let b = (1.0 - a) / 2.0;
        let s = split_of(id, [a, b, 1.0 - a - b]);
        prop_assert_eq!(s, split_of(id, [a, b, 1.0 - a - b]));
        prop_assert!(matches!(s, Split::Train | Split::Val | Split::Test));
    }

    #[test]
    fn fused_embedding_stays_within_expert_envelope(seed in any::<u64>(), d in 1usize..5, lz in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zs: Vec<Vec<f64>> = (0..d).map(|_| real_vec(&mut rng, lz)).collect();
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let w = FusionWeights::new(raw.iter().map(|v| v / total).collect());
        prop_assume!(w.is_ok());
        let z = fuse(&zs, &w.unwrap()).unwrap();
        for (i, v) in z.iter().enumerate() {
            let lo = zs.iter().map(|e| e[i]).fold(f64::INFINITY, f64::min);
            let hi = zs.iter().map(|e| e[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn argmax_ignores_a_constant_logit_shift(seed in any::<u64>(), shift in -1e3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = real_vec(&mut rng, 64);
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        prop_assert_eq!(argmax(&logits), argmax(&shifted));
    }

    #[test]
    fn gain_ratio_mean_dominates_top1(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cb = build_dft_codebook(&ArrayGeometry::half_wavelength(8).unwrap(), 16).unwrap();
        let channels: Vec<ChannelState> = (0..40)
            .map(|_| ChannelState::from_vector(complex_vec(&mut rng, 8)).unwrap())
            .collect();
        let labels: Vec<usize> = channels.iter().map(|h| optimal_beam_index(h, &cb).unwrap()).collect();
        let logits: Vec<Vec<f64>> = (0..40).map(|_| real_vec(&mut rng, 16)).collect();
        let preds: Vec<usize> = logits.iter().map(|l| argmax(l)).collect();
        let top1 = topk_accuracy(&logits, &labels, 1).unwrap();
        let g = mean_gain_ratio(&preds, &channels, &cb).unwrap();
        prop_assert!(g >= top1 - 1e-12 && g <= 1.0);
    }

    #[test]
    fn aggregate_mean_is_the_arithmetic_mean(values in prop::collection::vec(0.0f64..1.0, 1..12)) {
        let (mean, std) = mean_std(&values);
        let direct = values.iter().sum::<f64>() / values.len() as f64;
        prop_assert!((mean - direct).abs() < 1e-15);
        prop_assert!(std >= 0.0);
    }

    #[test]
    fn config_survives_toml_round_trip(seed in any::<u64>(), epochs in 1usize..500, lr in 1e-6f64..1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.scenario.rng_seed = seed;
        cfg.train.epochs = epochs;
        cfg.train.learning_rate = lr;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_is_pure_and_labels_reproduce(seed in any::<u64>(), paths in 0usize..3) {
        let mut cfg = ScenarioConfig { num_samples: 80, rng_seed: seed, ..ScenarioConfig::default() };
        cfg.multipath.num_paths = paths;
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        let cb = cfg.codebook().unwrap();
        for s in a.samples() {
            let h = a.channel(s).unwrap();
            prop_assert_eq!(optimal_beam_index(&h, &cb).unwrap(), s.label);
            prop_assert!(s.label < cfg.num_beams);
        }
    }

    #[test]
    fn dense_net_backward_matches_finite_differences(seed in any::<u64>(), depth in 1usize..5, width in 1usize..129) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = DenseNetSpec::mlp(5, width, depth, 3).unwrap();
        let net = DenseNet::init(spec.clone(), &mut rng);
        let x = real_vec(&mut rng, 5);
        let probe = real_vec(&mut rng, 3);
        // Loss = <probe, output>, so dL/doutput = probe.
        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &probe).unwrap();
        let theta = net.params_flat();
        let report = beam_moe::nn::grad_check(&theta, &grads.flat(), |t| {
            let n = DenseNet::from_flat(spec.clone(), t).unwrap();
            n.eval(&x).unwrap().iter().zip(&probe).map(|(o, p)| o * p).sum()
        }, 1e-4);
        prop_assert!(report.passed, "{report:?}");
    }

    #[test]
    fn mixture_weights_form_a_distribution(seed in any::<u64>(), scale in -2.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = ModelConfig { embedding_dim: 8, gating_width: 16, init_seed: seed, ..ModelConfig::default() };
        let model = BeamModel::build(ModelKind::Moe, &[2, 16], 8, &cfg).unwrap();
        let s = 10f64.powf(scale);
        let x: Vec<Vec<f64>> = vec![
            real_vec(&mut rng, 2).into_iter().map(|v| v * s).collect(),
            real_vec(&mut rng, 16).into_iter().map(|v| v * s).collect(),
        ];
        let w = model.gating_forward(&x).unwrap();
        prop_assert!(w.as_slice().iter().all(|v| *v >= 0.0));
        prop_assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

mod common;

use common::{batch_for, normal, perturb_norms, random_cnn, random_cnn_bn, random_mlp, randomize_biases};
use proptest::prelude::*;
use swr_core::data::{make_chunks, AccessMode};
use swr_core::metrics::{balance_pair, balance_pairs, entrywise_pq_norm, lipschitz_upper_bound, proportionality_residual};
use swr_core::nn::{LayerKind, Mode, Network};
use swr_core::optim::{Adam, Clip};
use swr_core::plasticity::{rescale_proportional, swr_step, SwrConfig};
use swr_core::rng;

fn random_net(seed: u64) -> (Network<f64>, rng::Rng) {
    let mut r = rng::stream(seed, 77);
    let arch = match seed % 3 {
        0 => random_mlp(&mut r),
        1 => random_cnn(&mut r),
        _ => random_cnn_bn(&mut r),
    };
    let mut net = Network::build(&arch, seed).unwrap();
    randomize_biases(&mut net, &mut r);
    perturb_norms(&mut net, &mut r);
    (net, r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn proportional_rescale_scales_logits(seed in 0u64..10_000, factors in prop::collection::vec(0.1f64..10.0, 8)) {
        let mut r = rng::stream(seed, 1);
        let arch = if seed % 2 == 0 { random_mlp(&mut r) } else { random_cnn(&mut r) };
        let mut net = Network::<f64>::build(&arch, seed).unwrap();
        randomize_biases(&mut net, &mut r);
        let before = net.clone();
        let k = net.weighted_layers().len();
        let report = rescale_proportional(&mut net, &factors[..k]).unwrap();
        let c: f64 = factors[..k].iter().product();
        prop_assert!((report.output_scale - c).abs() <= 1e-12 * c);
        let x = batch_for(&arch, 20, &mut r);
        prop_assert!(proportionality_residual(&before, &net, report.output_scale, &x).unwrap() <= 1e-9);
        prop_assert_eq!(before.predict(&x).unwrap().argmax_rows().unwrap(), net.predict(&x).unwrap().argmax_rows().unwrap());
        let bound = lipschitz_upper_bound(&before).value * c;
        prop_assert!((lipschitz_upper_bound(&net).value - bound).abs() <= 1e-12 * bound);
    }

    #[test]
    fn swr_norm_linearity(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
        let (mut net, _) = random_net(seed);
        let before = net.weight_norms();
        swr_step(&mut net, &SwrConfig::uniform(lambda)).unwrap();
        for (b, a) in before.iter().zip(net.weight_norms()) {
            let target = lambda * b.init + (1.0 - lambda) * b.current;
            prop_assert!((a.current - target).abs() <= 1e-10 * target);
            prop_assert_eq!(a.init, b.init);
        }
    }

    #[test]
    fn swr_improves_balance(seed in 0u64..10_000, lf in 0.0f64..=1.0, lc in 0.0f64..=1.0) {
        let (mut net, _) = random_net(seed);
        let cfg = SwrConfig { lambda_f: lf, lambda_c: lc };
        let before = balance_pairs(&net).unwrap();
        let lambdas: Vec<f64> = net.layers().iter().enumerate().map(|(i, _)| cfg.lambda_for(&net, i)).collect();
        swr_step(&mut net, &cfg).unwrap();
        for (b, a) in before.iter().zip(balance_pairs(&net).unwrap()) {
            if lambdas[b.i] == lambdas[b.j] {
                prop_assert!(a.b <= b.b + 1e-12, "pair ({}, {}): {} > {}", b.i, b.j, a.b, b.b);
            }
        }
    }

    #[test]
    fn swr_zero_lambda_is_identity(seed in 0u64..10_000) {
        let (mut net, _) = random_net(seed);
        let before = net.clone();
        swr_step(&mut net, &SwrConfig::uniform(0.0)).unwrap();
        prop_assert_eq!(net, before);
    }

    #[test]
    fn swr_on_batch_norm_nets_is_proportional(seed in 0u64..10_000, lambda in 0.0f64..=1.0) {
        let mut r = rng::stream(seed, 3);
        let arch = random_cnn_bn(&mut r);
        let mut net = Network::<f64>::build(&arch, seed).unwrap();
        randomize_biases(&mut net, &mut r);
        perturb_norms(&mut net, &mut r);
        // random shifts can kill every unit feeding the second norm layer,
        // leaving a batch variance comparable to epsilon
        for layer in net.layers_mut() {
            if matches!(layer.kind, LayerKind::BatchNorm { .. }) {
                layer.bias.as_mut().unwrap().scale(0.0);
            }
        }
        let x = batch_for(&arch, 8, &mut r);
        // populate running statistics
        net.forward(&x, Mode::Train).unwrap();
        let before = net.clone();
        let report = swr_step(&mut net, &SwrConfig::uniform(lambda)).unwrap();
        let c = report.output_scale;
        for mode in [Mode::Train, Mode::Eval] {
            let a = before.clone().forward(&x, mode).unwrap();
            let b = net.clone().forward(&x, mode).unwrap();
            let scale = a.max_abs() * c;
            for (u, v) in a.data().iter().zip(b.data()) {
                prop_assert!((v - c * u).abs() <= 1e-3 * scale, "{:?}: {} vs {}", mode, v, c * u);
            }
        }
    }

    #[test]
    fn balance_pair_is_symmetric(a in 0.1f64..10.0, b in 0.1f64..10.0, c in 0.1f64..10.0, d in 0.1f64..10.0) {
        prop_assert_eq!(balance_pair((0, a, b), (1, c, d)).unwrap(), balance_pair((1, c, d), (0, a, b)).unwrap());
    }

    #[test]
    fn pq_norm_homogeneity(seed in 0u64..10_000, c in 0.01f64..100.0, p in 1.0f64..4.0, q in 1.0f64..4.0) {
        let mut r = rng::stream(seed, 4);
        let w = normal(&[4, 3, 2], &mut r);
        let base = entrywise_pq_norm(&w, p, q).unwrap();
        let scaled = entrywise_pq_norm(&w.scaled(c), p, q).unwrap();
        prop_assert!((scaled - c * base).abs() <= 1e-12 * c * base);
        let fro = entrywise_pq_norm(&w, 2.0, 2.0).unwrap();
        prop_assert!((fro - w.frobenius_norm()).abs() <= 1e-12 * fro);
    }

    #[test]
    fn chunks_partition_indices(n in 10usize..500, k in 1usize..10, seed in 0u64..100) {
        let s = make_chunks(n, k, AccessMode::Limited, seed).unwrap();
        let mut all: Vec<usize> = (1..=k).flat_map(|st| s.stage_indices(st).unwrap()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = (0..k).map(|c| s.chunk(c).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let full = make_chunks(n, k, AccessMode::Full, seed).unwrap();
        prop_assert_eq!(full.stage_indices(1).unwrap(), s.stage_indices(1).unwrap());
    }

    #[test]
    fn adam_moments_track_parameter_shapes(seed in 0u64..1000, steps in 1usize..20) {
        let mut r = rng::stream(seed, 5);
        let mut a = normal(&[3, 2], &mut r);
        let mut b = normal(&[4], &mut r);
        let mut adam = Adam::new(1e-2);
        for i in 0..steps {
            let g = [normal(&[3, 2], &mut r), normal(&[4], &mut r)];
            adam.step(&mut [&mut a, &mut b], &g, Clip::None).unwrap();
            prop_assert_eq!(adam.step_count(), i as u64 + 1);
        }
        prop_assert_eq!(adam.first_moments()[0].shape(), &[3, 2]);
        prop_assert_eq!(adam.second_moments()[1].shape(), &[4]);
    }
}

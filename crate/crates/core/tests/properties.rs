mod common;

use proptest::prelude::*;
use relic::analysis::{discriminant_ratio, knn_table, neighbor_purity, RatioVariant};
use relic::augmentation::{generate_views, AugmentationConfig, Image};
use relic::harness::{decode_checkpoint, encode_checkpoint, Checkpoint, RunConfig};
use relic::networks::{NetworkPair, NetworkSpec};
use relic::objective::{batch_loss_from_embeddings, CandidateDistribution, invariance_kl, LossConfig};
use relic::optimizer::{cosine_lr, lars_step, LarsConfig, LarsState, ScheduleConfig};
use relic::rng::{stream, Purpose};
use relic::tensor::{Tape, Tensor};

use common::*;

fn logits(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, 1..max_len)
}

fn points(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), 2..max_n)
}

fn grid_points(max_n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec((0i32..3).prop_map(f64::from), d), 2..max_n)
}

fn log_softmax_of(z: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::vector(z.to_vec()));
    let out = tape.log_softmax(v).unwrap();
    tape.value(out).data().to_vec()
}

fn kl_of(zb: &[f64], za: &[f64]) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<usize> = (0..za.len()).collect();
    let a = tape.constant(Tensor::vector(za.to_vec()));
    let b = tape.constant(Tensor::vector(zb.to_vec()));
    let pa = CandidateDistribution {
        log_probs: tape.log_softmax(a).unwrap(),
        candidate_ids: ids.clone(),
    };
    let pb = CandidateDistribution {
        log_probs: tape.log_softmax(b).unwrap(),
        candidate_ids: ids,
    };
    let kl = invariance_kl(&mut tape, &pb, &pa).unwrap();
    tape.value(kl).item()
}

proptest! {
    #[test]
    fn log_softmax_normalizes(z in logits(12)) {
        let lp = log_softmax_of(&z);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(lp.iter().all(|&v| v <= 1e-15));
    }

    #[test]
    fn log_softmax_shift_invariant(z in logits(12), c in -100.0f64..100.0) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        for (a, b) in log_softmax_of(&z).iter().zip(log_softmax_of(&shifted)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn log_softmax_matches_direct_formula(z in logits(8)) {
        let direct = softmax_log(&z);
        for (a, b) in log_softmax_of(&z).iter().zip(&direct) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_non_negative_and_zero_on_self(pair in (2usize..10).prop_flat_map(|n| (
        prop::collection::vec(-10.0f64..10.0, n),
        prop::collection::vec(-10.0f64..10.0, n),
    ))) {
        let (a, b) = pair;
        prop_assert!(kl_of(&b, &a) >= 0.0);
        prop_assert!(kl_of(&a, &a).abs() <= 1e-10);
    }

    #[test]
    fn knn_matches_brute_force(x in points(60, 3), k in 1usize..8) {
        let k = k.min(x.len() - 1);
        let labels: Vec<usize> = (0..x.len()).map(|i| i % 3).collect();
        let emb = embedding_set(&x, &labels);
        prop_assert_eq!(knn_table(&emb, k).unwrap(), brute_knn(&x, k));
        prop_assert_eq!(neighbor_purity(&emb, k).unwrap(), brute_purity(&x, &labels, k));
    }

    #[test]
    fn knn_ties_match_brute_force(x in grid_points(50, 2), k in 1usize..6) {
        let k = k.min(x.len() - 1);
        let labels: Vec<usize> = (0..x.len()).map(|i| i % 2).collect();
        let emb = embedding_set(&x, &labels);
        let table = knn_table(&emb, k).unwrap();
        for row in &table {
            prop_assert!(row.windows(2).all(|w| (w[0].distance, w[0].index) < (w[1].distance, w[1].index)));
        }
        prop_assert_eq!(table, brute_knn(&x, k));
    }

    #[test]
    fn ratio_invariant_under_rotation_and_scale(
        x in points(40, 4),
        seed in 0u64..1000,
        scale in 0.01f64..100.0,
    ) {
        prop_assume!(x.len() >= 4);
        let labels: Vec<usize> = (0..x.len()).map(|i| i % 2).collect();
        let mut rng = stream(seed, Purpose::Data, 0, 0);
        let rot = random_rotation(4, &mut rng);
        let a = embedding_set(&x, &labels);
        let b = embedding_set(&transform(&x, &rot, scale), &labels);
        for v in [RatioVariant::PerPoint, RatioVariant::Centroid] {
            let (ra, rb) = (discriminant_ratio(&a, v).unwrap(), discriminant_ratio(&b, v).unwrap());
            for (p, q) in ra.per_point.iter().zip(&rb.per_point) {
                match (p, q) {
                    (Some(p), Some(q)) if p.is_finite() => prop_assert!((p - q).abs() <= 1e-9 * p.abs().max(1.0)),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn cosine_lr_bounded_and_decaying(base in 0.01f64..5.0, total in 2u64..2000, warm_frac in 0.0f64..0.5) {
        let warmup = ((total as f64) * warm_frac) as u64;
        let cfg = ScheduleConfig { base_lr: base, total_steps: total, warmup_steps: warmup, batch_size: 1 };
        let mut prev = f64::INFINITY;
        for step in 0..=total + 3 {
            let lr = cosine_lr(step, &cfg);
            prop_assert!((0.0..=base * (1.0 + 1e-12)).contains(&lr));
            if step >= warmup {
                prop_assert!(lr <= prev + 1e-12);
                prev = lr;
            }
        }
    }

    #[test]
    fn lars_first_step_matches_formula(
        w in prop::collection::vec(-2.0f64..2.0, 6),
        g in prop::collection::vec(-2.0f64..2.0, 6),
        lr in 0.0f64..1.0,
    ) {
        let cfg = LarsConfig::default();
        let mut p = Tensor::matrix(2, 3, w.clone()).unwrap();
        let mut b = Tensor::vector(w[..3].to_vec());
        let grads = [Tensor::matrix(2, 3, g.clone()).unwrap(), Tensor::vector(g[..3].to_vec())];
        let mut state = LarsState::new();
        lars_step(&mut [&mut p, &mut b], &grads, lr, &cfg, &mut state).unwrap();

        let u: Vec<f64> = g.iter().zip(&w).map(|(g, w)| g + cfg.weight_decay * w).collect();
        let (pn, un) = (dot(&w, &w).sqrt(), dot(&u, &u).sqrt());
        let r = if pn == 0.0 || un == 0.0 { 1.0 } else { cfg.trust_coefficient * pn / (un + 1e-9) };
        for ((got, w0), u) in p.data().iter().zip(&w).zip(&u) {
            prop_assert!((got - (w0 - r * lr * u)).abs() <= 1e-12);
        }
        for ((got, w0), g) in b.data().iter().zip(&w[..3]).zip(&g[..3]) {
            prop_assert!((got - (w0 - lr * g)).abs() <= 1e-12);
        }
    }

    #[test]
    fn ema_closed_form(gamma in 0.0f64..=1.0, k in 0i32..20, seed in 0u64..100) {
        let spec = NetworkSpec::new(vec![3, 4, 2], vec![2, 2]);
        let a = NetworkPair::init(spec.clone(), gamma, seed).unwrap();
        let b = NetworkPair::init(spec.clone(), gamma, seed + 1000).unwrap();
        let theta: Vec<Tensor> = a.online_params().into_iter().cloned().collect();
        let xi0: Vec<Tensor> = b.online_params().into_iter().cloned().collect();
        let mut net = NetworkPair::from_params(spec, gamma, theta.clone(), xi0.clone()).unwrap();
        for _ in 0..k {
            net.ema_update().unwrap();
        }
        let gk = gamma.powi(k);
        for ((t, x0), xi) in theta.iter().zip(&xi0).zip(net.target_params()) {
            for ((tv, xv), v) in t.data().iter().zip(x0.data()).zip(xi.data()) {
                prop_assert!((gk * xv + (1.0 - gk) * tv - v).abs() <= 1e-10);
            }
        }
        prop_assert_eq!(net.online_params().into_iter().cloned().collect::<Vec<_>>(), theta);
    }

    #[test]
    fn invariance_component_non_negative(seed in 0u64..500, large in 1usize..4, small in 0usize..3) {
        let cfg = LossConfig { n_negatives: 2, num_large_crops: large, num_small_crops: small, ..LossConfig::default() };
        let batch = 4;
        let mut rng = stream(seed, Purpose::Data, 1, 0);
        let unit = |n: usize, rng: &mut relic::rng::Rng| -> Vec<Vec<f64>> {
            use rand::Rng as _;
            (0..n).map(|_| {
                let v: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = dot(&v, &v).sqrt();
                v.iter().map(|x| x / s).collect()
            }).collect()
        };
        let on = unit(batch * (large + small), &mut rng);
        let tg = unit(batch * large, &mut rng);
        let mut tape = Tape::new();
        let o = tape.constant(Tensor::from_rows(&on).unwrap());
        let t = tape.constant(Tensor::from_rows(&tg).unwrap());
        let mut neg = stream(seed, Purpose::Negatives, 0, 0);
        let bl = batch_loss_from_embeddings(&mut tape, o, t, batch, &cfg, &mut neg).unwrap();
        prop_assert!(bl.invariance >= 0.0);
        prop_assert!((tape.value(bl.total).item() - (cfg.alpha * bl.contrastive + cfg.beta * bl.invariance)).abs() < 1e-12);
    }

    #[test]
    fn views_stay_in_unit_range(seed in 0u64..10_000) {
        let aug = AugmentationConfig { large_size: 6, small_size: 3, ..AugmentationConfig::cifar() };
        let loss = LossConfig::default();
        let img = random_image(7, 9, 3, seed);
        let mut r = stream(seed, Purpose::Augment, 0, 0);
        let e = generate_views(&img, None, &aug, &loss, &mut r, seed).unwrap();
        prop_assert_eq!(e.large.len(), loss.num_large_crops);
        prop_assert_eq!(e.small.len(), loss.num_small_crops);
        let ok = |v: &Image| v.pixels().iter().all(|p| (0.0..=1.0).contains(p));
        prop_assert!(e.large.iter().all(|v| ok(v) && v.height() == 6 && v.width() == 6));
        prop_assert!(e.small.iter().all(|v| ok(v) && v.height() == 3 && v.width() == 3));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_round_trip(seed in 0u64..1000, hidden in 1usize..6, step in 0u64..1_000_000, gamma in 0.0f64..=1.0) {
        let net = NetworkPair::init(NetworkSpec::new(vec![4, hidden, 3], vec![3, hidden, 2]), gamma, seed).unwrap();
        let momentum = net.online_params().iter().map(|p| vec![seed as f64 * 0.5; p.numel()]).collect();
        let ck = Checkpoint { net, optimizer: LarsState { momentum }, step, seed };
        let bytes = encode_checkpoint(&ck).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }

    #[test]
    fn config_text_round_trip(seed in 0u64..u64::MAX, gamma in 0.0f64..=1.0, tau in 0.01f64..1.0, beta in 0.0f64..4.0) {
        let mut cfg = RunConfig::synth();
        cfg.set("seed", &seed.to_string()).unwrap();
        cfg.set("gamma", &gamma.to_string()).unwrap();
        cfg.set("loss.tau", &tau.to_string()).unwrap();
        cfg.set("loss.beta", &beta.to_string()).unwrap();
        prop_assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

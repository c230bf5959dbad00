//! Property tests for the invariants every module promises.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splitvit::adc::{self, AdcConfig, MergePlan, MergeVector};
use splitvit::autograd::Tape;
use splitvit::baselines::{randtopk_encode, topk_encode, C3Keys, Sparse};
use splitvit::codec::CodecKind;
use splitvit::config::RunConfig;
use splitvit::cost::{max_iterations, BudgetLedger};
use splitvit::data::{generate_synthetic, SyntheticSpec};
use splitvit::gradcheck::{numeric_grad, relative_error};
use splitvit::kmeans::{kmeans, KMeansParams};
use splitvit::roles::{bottleneck_pair, ClientRole, ServerRole};
use splitvit::tensor::{softmax_rows, Tensor};
use splitvit::vit::{SplitModel, VitConfig};
use splitvit::wire::{self, ActivationPacket, Dtype, GradientPacket, Labels, Message, Payload};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_model() -> VitConfig {
    VitConfig {
        channels: 2,
        height: 8,
        width: 8,
        patch: 4,
        dim: 8,
        heads: 2,
        key_dim: 4,
        value_dim: 4,
        blocks: 3,
        classes: 3,
        split_point: 2,
        mlp_ratio: 2,
    }
}

fn small_run(codec: CodecKind, xi: Option<f64>) -> RunConfig {
    RunConfig {
        codec,
        xi,
        batch_size: 4,
        image_size: 8,
        channels: 2,
        patch: 4,
        dim: 8,
        heads: 2,
        blocks: 3,
        split_point: 2,
        mlp_ratio: 2,
        classes: 3,
        ..Default::default()
    }
}

fn random_plan(b: usize, n: usize, t: usize, k: usize, seed: u64) -> (Tensor, MergePlan) {
    let mut r = rng(seed);
    let z = Tensor::randn(&[b, n, 3], 1.0, &mut r);
    let scores = softmax_rows(&Tensor::randn(&[b, n], 1.0, &mut r));
    let config = AdcConfig {
        clusters: t,
        tokens: k,
        merge_vector: MergeVector::ClsScore,
        kmeans: KMeansParams {
            seed,
            ..Default::default()
        },
    };
    let plan = adc::plan(&z, &scores, &config).unwrap();
    (z, plan)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let x = Tensor::randn(&[rows, cols], scale, &mut rng(seed));
        let s = softmax_rows(&x);
        for row in s.data().chunks_exact(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn composite_op_gradients_match_differences(seed in any::<u64>(), rows in 1usize..4, cols in 2usize..6) {
        let mut r = rng(seed);
        let x = Tensor::uniform(&[rows, cols], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[cols, 3], -1.0, 1.0, &mut r);
        let g = Tensor::uniform(&[cols], -1.0, 1.0, &mut r);
        let b = Tensor::uniform(&[cols], -1.0, 1.0, &mut r);
        let c = Tensor::uniform(&[rows, 3], -1.0, 1.0, &mut r);
        let f = |x: &Tensor| {
            let tape = Tape::new();
            let v = tape.leaf(x.clone());
            v.layernorm(tape.constant(g.clone()), tape.constant(b.clone()))
                .and_then(|y| y.gelu().matmul(tape.constant(w.clone())))
                .and_then(|y| y.softmax().scale(2.0).mul(tape.constant(c.clone())))
                .map(|y| y.sum().value().item())
                .unwrap()
        };
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = v
            .layernorm(tape.constant(g.clone()), tape.constant(b.clone()))
            .unwrap()
            .gelu()
            .matmul(tape.constant(w.clone()))
            .unwrap()
            .softmax()
            .scale(2.0)
            .mul(tape.constant(c.clone()))
            .unwrap()
            .sum();
        let analytic = tape.backward(out).unwrap().get_or_zeros(v);
        prop_assert!(relative_error(&analytic, &numeric_grad(&x, f)) < 1e-4);
    }

    #[test]
    fn unmerge_is_adjoint_of_merge_and_select(
        b in 1usize..9, n in 1usize..7, tf in 0.0f64..1.0, kf in 0.0f64..1.0, seed in any::<u64>()
    ) {
        let t = 1 + (tf * (b - 1) as f64) as usize;
        let k = 1 + (kf * (n - 1) as f64) as usize;
        let (_, plan) = random_plan(b, n, t, k, seed);
        let mut r = rng(seed ^ 0xABCD);
        let a = Tensor::randn(&[b, n, 3], 1.0, &mut r);
        let g = Tensor::randn(&[t, k, 3], 1.0, &mut r);
        let lhs = adc::apply_plan(&a, &plan).unwrap().dot(&g);
        let rhs = a.dot(&adc::unmerge_gradient(&g, &plan, n).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn merged_symbols_follow_the_ratio_law(b in 1usize..12, n in 1usize..10, tf in 0.0f64..1.0, kf in 0.0f64..1.0, seed in any::<u64>()) {
        let t = 1 + (tf * (b - 1) as f64) as usize;
        let k = 1 + (kf * (n - 1) as f64) as usize;
        let (z, plan) = random_plan(b, n, t, k, seed);
        // Symbol counts compared as integers: sent * (B * n) == base * (T * k).
        let sent = adc::apply_plan(&z, &plan).unwrap().len();
        prop_assert_eq!(sent * b * n, z.len() * t * k);
    }

    #[test]
    fn soft_labels_are_distributions_and_pure_clusters_are_one_hot(
        assignments in prop::collection::vec(0usize..4, 1..12), labels_seed in any::<u64>()
    ) {
        // Relabel so every cluster id below the maximum is used.
        let mut ids: Vec<usize> = assignments.clone();
        ids.sort_unstable();
        ids.dedup();
        let assign: Vec<usize> = assignments.iter().map(|a| ids.binary_search(a).unwrap()).collect();
        let t = ids.len();
        let b = assign.len();
        let classes = 3;
        let labels: Vec<usize> = (0..b).map(|i| ((labels_seed >> (i % 60)) as usize + i / 7) % classes).collect();
        let mut sizes = vec![0; t];
        assign.iter().for_each(|&c| sizes[c] += 1);
        let plan = MergePlan {
            assignments: assign.clone(),
            centroids: Tensor::zeros(&[t, 2]),
            selected_tokens: vec![vec![0, 1]; t],
            cluster_sizes: sizes,
        };
        let z = Tensor::randn(&[b, 2, 2], 1.0, &mut rng(labels_seed));
        let (_, soft) = adc::merge_batch(&z, &labels, classes, &plan).unwrap();
        for (c, row) in soft.data().chunks_exact(classes).enumerate() {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let member_labels: Vec<usize> = (0..b).filter(|&i| assign[i] == c).map(|i| labels[i]).collect();
            if member_labels.iter().all(|&y| y == member_labels[0]) {
                for (j, &p) in row.iter().enumerate() {
                    prop_assert_eq!(p, if j == member_labels[0] { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn merge_plans_are_deterministic(b in 2usize..10, seed in any::<u64>()) {
        let (_, a) = random_plan(b, 5, b / 2, 3, seed);
        let (_, c) = random_plan(b, 5, b / 2, 3, seed);
        prop_assert_eq!(a, c);
    }

    #[test]
    fn balanced_rule_keeps_the_two_fractions_close(xi in 1e-4f64..=1.0, b in 1usize..200, n in 1usize..200) {
        let c = AdcConfig::balanced(xi, b, n).unwrap();
        let gap = (c.tokens as f64 / n as f64 - c.clusters as f64 / b as f64).abs();
        prop_assert!(gap <= 1.0 / b.min(n) as f64 + 1e-12);
    }

    #[test]
    fn lloyd_assigns_every_point_to_a_nearest_centroid(b in 1usize..12, m in 1usize..4, tf in 0.0f64..1.0, seed in any::<u64>()) {
        let t = 1 + (tf * (b - 1) as f64) as usize;
        let points = Tensor::randn(&[b, m], 1.0, &mut rng(seed));
        let params = KMeansParams { max_iters: 100, restarts: 2, seed };
        let result = kmeans(&points, t, &params).unwrap();
        prop_assert_eq!(result.clusters(), t);
        prop_assert!(result.members().iter().all(|g| !g.is_empty()));
        let dist = |i: usize, c: usize| -> f64 {
            (0..m).map(|j| (points.data()[i * m + j] - result.centroids.data()[c * m + j]).powi(2)).sum()
        };
        let mut sse = 0.0;
        for i in 0..b {
            let own = dist(i, result.assignments[i]);
            sse += own;
            for c in 0..t {
                prop_assert!(own <= dist(i, c) + 1e-9);
            }
        }
        prop_assert!((sse - result.sse).abs() < 1e-9 * sse.max(1.0));
    }

    #[test]
    fn topk_support_is_the_selection(b in 1usize..5, d in 1usize..20, kf in 0.0f64..1.0, seed in any::<u64>(), noisy in any::<bool>()) {
        let k = 1 + (kf * (d - 1) as f64) as usize;
        let mut r = rng(seed);
        let z = Tensor::randn(&[b, d], 1.0, &mut r);
        let s: Sparse = if noisy { randtopk_encode(&z, k, 0.5, &mut r).unwrap() } else { topk_encode(&z, k).unwrap() };
        let dense = s.to_dense();
        for i in 0..b {
            let idx = &s.indices[i * k..(i + 1) * k];
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for j in 0..d {
                let v = dense.data()[i * d + j];
                if idx.contains(&(j as u32)) {
                    prop_assert_eq!(v, z.data()[i * d + j]);
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
        }
    }

    #[test]
    fn single_key_superposition_is_lossless(b in 1usize..6, d in 1usize..64, seed in any::<u64>()) {
        let keys = C3Keys::gaussian(1, d, seed).unwrap();
        let z = Tensor::randn(&[b, d], 1.0, &mut rng(seed ^ 1));
        let back = keys.decode(&keys.encode(&z).unwrap(), b).unwrap();
        prop_assert!(back.max_abs_diff(&z) < 1e-8);
    }

    #[test]
    fn frames_round_trip_and_reject_truncation(
        dims in prop::collection::vec(1usize..4, 1..4), iteration in any::<u32>(), seed in any::<u64>(), bits in 0.0f64..1e9
    ) {
        let mut r = rng(seed);
        let t = Tensor::randn(&dims, 1.0, &mut r);
        let messages = [
            Message::Activation(ActivationPacket {
                iteration,
                codec: CodecKind::Adc,
                charged_bits: bits,
                payload: Payload::Dense(t.clone()),
                labels: Labels::Soft(softmax_rows(&Tensor::randn(&[dims[0], 3], 1.0, &mut r))),
            }),
            Message::Activation(ActivationPacket {
                iteration,
                codec: CodecKind::TopK,
                charged_bits: bits,
                payload: Payload::Sparse(topk_encode(&t.reshape(&[dims[0], t.len() / dims[0]]).unwrap(), 1).unwrap()),
                labels: Labels::Hard(vec![1; dims[0]]),
            }),
            Message::Gradient(GradientPacket {
                iteration,
                codec: CodecKind::Base,
                charged_bits: bits,
                payload: Payload::Dense(t.clone()),
                loss: bits.sqrt(),
            }),
        ];
        for msg in messages {
            let bytes = wire::encode(&msg, Dtype::F64);
            let (back, used) = wire::decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(&back, &msg);
            let cut = (seed as usize) % bytes.len();
            prop_assert!(wire::decode(&bytes[..cut]).is_err());
            let mut flipped = bytes.clone();
            let at = 5 + (seed as usize / 7) % (bytes.len() - 5);
            flipped[at] ^= 0x10;
            prop_assert!(wire::decode(&flipped).is_err());
        }
    }

    #[test]
    fn budget_runs_exactly_floor_of_budget_over_cost(base in 1.0f64..1e7, epochs in 0.0f64..20.0, xi in 0.01f64..=1.0) {
        let budget = epochs * base;
        let cost = xi * base;
        let mut ledger = BudgetLedger::new(budget);
        while ledger.ensure_affordable(cost).is_ok() {
            ledger.charge_forward(cost / 2.0).unwrap();
            ledger.charge_backward(cost / 2.0).unwrap();
            ledger.complete_iteration();
            prop_assert!(ledger.spent() <= budget * (1.0 + 1e-9));
        }
        prop_assert_eq!(ledger.iterations, max_iterations(budget, cost));
    }

    #[test]
    fn lower_ratio_never_runs_fewer_iterations(budget in 0.0f64..1e6, a in 0.01f64..=1.0, b in 0.01f64..=1.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(max_iterations(budget, lo) >= max_iterations(budget, hi));
    }

    #[test]
    fn synthetic_labels_and_split_are_valid(classes in 2usize..5, per_class in 3usize..12, seed in any::<u64>()) {
        let spec = SyntheticSpec { classes, samples_per_class: per_class, height: 8, width: 8, patch: 4, signal_patches: 2, seed, ..Default::default() };
        let data = generate_synthetic(&spec).unwrap();
        prop_assert!(data.labels.iter().all(|&y| (y as usize) < classes));
        let mut all: Vec<usize> = data.split.train.iter().chain(&data.split.val).chain(&data.split.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..data.len()).collect::<Vec<_>>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_is_deterministic_and_split_is_exact(seed in any::<u64>(), input_seed in any::<u64>()) {
        let cfg = small_model();
        let a = SplitModel::init(&cfg, seed).unwrap();
        let b = SplitModel::init(&cfg, seed).unwrap();
        let x = Tensor::randn(&[3, 2, 8, 8], 1.0, &mut rng(input_seed));
        let whole = a.unsplit_forward(&x).unwrap();
        let again = b.unsplit_forward(&x).unwrap();
        prop_assert_eq!(whole.data(), again.data());
        let (acts, _) = a.client.infer(&x).unwrap();
        let split = a.server.logits(&acts).unwrap();
        prop_assert_eq!(split.data(), whole.data());
    }

    #[test]
    fn server_accepts_any_token_count(seed in any::<u64>(), keep in 1usize..=5) {
        let cfg = small_model();
        let m = SplitModel::init(&cfg, seed).unwrap();
        let x = Tensor::randn(&[2, 2, 8, 8], 1.0, &mut rng(seed));
        let (acts, _) = m.client.infer(&x).unwrap();
        let kept: Vec<f64> = acts
            .data()
            .chunks_exact(5 * 8)
            .flat_map(|s| s[..keep * 8].to_vec())
            .collect();
        let logits = m.server.logits(&Tensor::new(vec![2, keep, 8], kept).unwrap()).unwrap();
        prop_assert_eq!(logits.shape(), &[2, 3]);
        prop_assert!(logits.all_finite());
    }

    #[test]
    fn charged_and_sent_bits_match_closed_form(kind_index in 0usize..6, xi in 0.05f64..=0.9, seed in any::<u64>()) {
        let kind = CodecKind::ALL[kind_index];
        let cfg = small_run(kind, (kind != CodecKind::Base).then_some(xi));
        let setup = cfg.setup().unwrap();
        let m = SplitModel::init(&setup.model, seed).unwrap();
        let mut client = ClientRole::new(m.client, &setup, seed).unwrap();
        let mut server = ServerRole::new(m.server, &setup, seed).unwrap();
        let x = Tensor::randn(&[4, 2, 8, 8], 1.0, &mut rng(seed));
        let report = client.train_step(&x, &[0, 1, 2, 0], 0, |p| server.train(&p)).unwrap();
        let half = setup.cost.base_iteration() / 2.0;
        let dense = (4 * setup.model.features()) as f64 * 32.0;
        prop_assert_eq!(report.forward_bits, setup.ratios.forward * half);
        prop_assert_eq!(report.backward_bits, setup.ratios.backward * half);
        prop_assert!((report.forward_payload_bits / dense - setup.ratios.forward).abs() < 1e-12);
        prop_assert!((report.backward_payload_bits / dense - setup.ratios.backward).abs() < 1e-12);
        prop_assert!(report.loss.is_finite());
    }
}

#[test]
fn only_the_bottleneck_codec_has_parameters() {
    for kind in CodecKind::ALL {
        let cfg = small_run(kind, (kind != CodecKind::Base).then_some(0.5));
        let setup = cfg.setup().unwrap();
        let pair = bottleneck_pair(&setup, 0);
        assert_eq!(pair.is_some(), kind == CodecKind::BottleNet, "{kind}");
        if let Some((enc, dec)) = pair {
            assert!(!enc.store.is_empty() && !dec.store.is_empty());
        }
    }
}

#[test]
fn every_merge_vector_strategy_trains() {
    for strategy in [MergeVector::ClsScore, MergeVector::ClsToken, MergeVector::AvgToken] {
        let cfg = RunConfig {
            merge_vector: strategy,
            ..small_run(CodecKind::Adc, Some(0.25))
        };
        let setup = cfg.setup().unwrap();
        let m = SplitModel::init(&setup.model, 1).unwrap();
        let mut client = ClientRole::new(m.client, &setup, 1).unwrap();
        let mut server = ServerRole::new(m.server, &setup, 1).unwrap();
        let x = Tensor::randn(&[4, 2, 8, 8], 1.0, &mut rng(2));
        for it in 0..3 {
            let r = client.train_step(&x, &[0, 1, 2, 0], it, |p| server.train(&p)).unwrap();
            assert!(r.loss.is_finite(), "{strategy:?}");
        }
    }
}

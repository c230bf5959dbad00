//! Quick self-checks of the numerical core, run by `splitvit check`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adc::{self, AdcConfig};
use crate::autograd::Tape;
use crate::codec::CodecKind;
use crate::config::RunConfig;
use crate::cost::max_iterations;
use crate::error::Result;
use crate::gradcheck::{numeric_grad, relative_error};
use crate::kmeans::KMeansParams;
use crate::optim::Adam;
use crate::roles::{ClientRole, ServerRole};
use crate::tensor::Tensor;
use crate::vit::{one_hot, SplitModel};
use crate::wire::{self, Dtype, Message};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A model small enough for finite differences.
pub fn tiny_config(codec: CodecKind, xi: Option<f64>) -> RunConfig {
    RunConfig {
        codec,
        xi,
        batch_size: 4,
        image_size: 8,
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

fn tiny_batch(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng), vec![0, 2, 1, 2])
}

fn outcome(name: &'static str, value: f64, limit: f64, what: &str) -> CheckResult {
    CheckResult {
        name,
        passed: value.is_finite() && value < limit,
        detail: format!("{what} {value:.3e} (limit {limit:.0e})"),
    }
}

fn end_to_end_gradient() -> Result<CheckResult> {
    let setup = tiny_config(CodecKind::Base, None).setup()?;
    let model = SplitModel::init(&setup.model, 3)?;
    let (x, y) = tiny_batch(4);
    let targets = one_hot(&y, setup.model.classes);
    let (_, client_grads, server_grads) = model.unsplit_loss_grads(&x, &targets)?;
    let loss_with = |client: Option<(usize, &Tensor)>, server: Option<(usize, &Tensor)>| {
        let mut m = model.clone();
        if let Some((i, t)) = client {
            m.client.params.tensors_mut()[i] = t.clone();
        }
        if let Some((i, t)) = server {
            m.server.params.tensors_mut()[i] = t.clone();
        }
        m.unsplit_loss_grads(&x, &targets).map(|r| r.0).unwrap_or(f64::NAN)
    };
    let mut worst: f64 = 0.0;
    for (i, t) in model.client.params.tensors().iter().enumerate() {
        let numeric = numeric_grad(t, |p| loss_with(Some((i, p)), None));
        worst = worst.max(relative_error(&client_grads[i], &numeric));
    }
    for (i, t) in model.server.params.tensors().iter().enumerate() {
        let numeric = numeric_grad(t, |p| loss_with(None, Some((i, p))));
        worst = worst.max(relative_error(&server_grads[i], &numeric));
    }
    Ok(outcome("end-to-end gradient", worst, 1e-3, "worst relative error"))
}

fn roles(cfg: &RunConfig, seed: u64) -> Result<(ClientRole, ServerRole)> {
    let setup = cfg.setup()?;
    let m = SplitModel::init(&setup.model, seed)?;
    Ok((ClientRole::new(m.client, &setup, seed)?, ServerRole::new(m.server, &setup, seed)?))
}

fn split_equivalence() -> Result<CheckResult> {
    let cfg = tiny_config(CodecKind::Base, None);
    let setup = cfg.setup()?;
    let (mut client, mut server) = roles(&cfg, 7)?;
    let mut reference = SplitModel::init(&setup.model, 7)?;
    let mut adam_c = Adam::new(setup.adam, &reference.client.params);
    let mut adam_s = Adam::new(setup.adam, &reference.server.params);
    for step in 0..5 {
        let (x, y) = tiny_batch(100 + step);
        client.train_step(&x, &y, step as u32, |p| server.train(&p))?;
        let (_, gc, gs) = reference.unsplit_loss_grads(&x, &one_hot(&y, setup.model.classes))?;
        adam_c.step(&mut reference.client.params, &gc);
        adam_s.step(&mut reference.server.params, &gs);
    }
    let diff = max_diff(client.model.params.tensors(), reference.client.params.tensors())
        .max(max_diff(server.model.params.tensors(), reference.server.params.tensors()));
    Ok(outcome("split equals unsplit", diff, 1e-9, "max parameter difference"))
}

fn max_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max)
}

fn adc_lossless_limit() -> Result<CheckResult> {
    let base = tiny_config(CodecKind::Base, None);
    let n = base.model()?.tokens();
    let full = RunConfig {
        clusters: Some(4),
        tokens: Some(n),
        ..tiny_config(CodecKind::Adc, None)
    };
    let (mut c1, mut s1) = roles(&base, 9)?;
    let (mut c2, mut s2) = roles(&full, 9)?;
    let (x, y) = tiny_batch(5);
    c1.train_step(&x, &y, 0, |p| s1.train(&p))?;
    c2.train_step(&x, &y, 0, |p| s2.train(&p))?;
    let diff = max_diff(c1.model.params.tensors(), c2.model.params.tensors())
        .max(max_diff(s1.model.params.tensors(), s2.model.params.tensors()));
    Ok(outcome("merge lossless limit", diff, 1e-9, "max parameter difference"))
}

fn unmerge_adjoint() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let z = Tensor::randn(&[6, 5, 3], 1.0, &mut rng);
        let scores = Tensor::uniform(&[6, 5], 0.0, 1.0, &mut rng);
        let config = AdcConfig {
            clusters: 3,
            tokens: 2,
            merge_vector: Default::default(),
            kmeans: KMeansParams {
                seed: trial,
                ..Default::default()
            },
        };
        let plan = adc::plan(&z, &scores, &config)?;
        let probe = Tensor::randn(&[6, 5, 3], 1.0, &mut rng);
        let g = Tensor::randn(&[3, 2, 3], 1.0, &mut rng);
        let lhs = adc::apply_plan(&probe, &plan)?.dot(&g);
        let rhs = probe.dot(&adc::unmerge_gradient(&g, &plan, 5)?);
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
    }
    Ok(outcome("unmerge is the adjoint", worst, 1e-10, "worst mismatch"))
}

fn ratio_accounting() -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for kind in CodecKind::ALL {
        for xi in [0.25, 0.5, 1.0] {
            if kind != CodecKind::Base && xi == 1.0 {
                continue;
            }
            let cfg = tiny_config(kind, (kind != CodecKind::Base).then_some(xi));
            let (mut client, mut server) = roles(&cfg, 1)?;
            let (x, y) = tiny_batch(2);
            let r = client.train_step(&x, &y, 0, |p| server.train(&p))?;
            let s = client.setup();
            let dense = (s.batch * s.model.features()) as f64 * s.cost.bits_per_feature;
            let half = s.cost.base_iteration() / 2.0;
            for (measured, closed) in [
                (r.forward_payload_bits / dense, s.ratios.forward),
                (r.backward_payload_bits / dense, s.ratios.backward),
                (r.forward_bits / half, s.ratios.forward),
                (r.backward_bits / half, s.ratios.backward),
            ] {
                worst = worst.max((measured - closed).abs());
            }
        }
    }
    Ok(outcome("ratio accounting", worst, 1e-12, "worst ratio mismatch"))
}

fn budget_law() -> CheckResult {
    let c = 1000.0;
    let budget = 10.0 * c;
    let counts = [1.0, 0.5, 0.25, 0.1].map(|xi| max_iterations(budget, xi * c));
    CheckResult {
        name: "budget law",
        passed: counts == [10, 20, 40, 100],
        detail: format!("iterations {counts:?} for ratios [1, 0.5, 0.25, 0.1]"),
    }
}

fn wire_round_trip() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let msg = Message::EvalResponse {
        iteration: 12,
        logits: Tensor::randn(&[3, 4], 1.0, &mut rng),
    };
    let bytes = wire::encode(&msg, Dtype::F64);
    let (back, used) = wire::decode(&bytes)?;
    let truncated_ok = (0..bytes.len()).all(|n| wire::decode(&bytes[..n]).is_err());
    Ok(CheckResult {
        name: "wire round trip",
        passed: back == msg && used == bytes.len() && truncated_ok,
        detail: format!("{} byte frame, every truncation rejected: {truncated_ok}", bytes.len()),
    })
}

fn op_gradients() -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let g = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
    let b = Tensor::uniform(&[4], -0.5, 0.5, &mut rng);
    let w = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let f = |x: &Tensor| -> f64 {
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let out = v
            .layernorm(tape.constant(g.clone()), tape.constant(b.clone()))
            .and_then(|y| y.gelu().softmax().mul(tape.constant(w.clone())))
            .map(|y| y.sum());
        out.map(|y| y.value().item()).unwrap_or(f64::NAN)
    };
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = v
        .layernorm(tape.constant(g.clone()), tape.constant(b.clone()))?
        .gelu()
        .softmax()
        .mul(tape.constant(w.clone()))?
        .sum();
    let analytic = tape.backward(out)?.get_or_zeros(v);
    let err = relative_error(&analytic, &numeric_grad(&x, f));
    Ok(outcome("operator gradients", err, 1e-4, "relative error"))
}

type Check = (&'static str, fn() -> Result<CheckResult>);

/// Runs every check. Errors inside a check count as failures.
pub fn run_checks() -> Vec<CheckResult> {
    let fallible: [Check; 7] = [
        ("operator gradients", op_gradients),
        ("end-to-end gradient", end_to_end_gradient),
        ("split equals unsplit", split_equivalence),
        ("merge lossless limit", adc_lossless_limit),
        ("unmerge is the adjoint", unmerge_adjoint),
        ("ratio accounting", ratio_accounting),
        ("wire round trip", wire_round_trip),
    ];
    let mut out: Vec<CheckResult> = fallible
        .into_iter()
        .map(|(name, check)| {
            check().unwrap_or_else(|e| CheckResult {
                name,
                passed: false,
                detail: e.to_string(),
            })
        })
        .collect();
    out.push(budget_law());
    out
}

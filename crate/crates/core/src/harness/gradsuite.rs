//! Gradient checks over every graph op and the model composites, used by
//! the `grad-check` command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crl::{generated_at_missing, BnMode, CrlConfig, CrlInput, CrlState, SURROGATE_FLOOR};
use crate::dataio::{apply_mask, generate_mask, generate_synthetic, Dims, SynthSpec};
use crate::error::Result;
use crate::numerics::{grad_check, Bound, GradCheckOptions, Graph, Tensor, Var};
use crate::panet::{ConversationInput, GruCell, Panet, PanetSpec};
use crate::numerics::ParamSet;

pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckKind {
    Op,
    Composite,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub kind: CheckKind,
    pub seed: u64,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
    pub max_op_err: f64,
    pub max_composite_err: f64,
    pub passed: bool,
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// Each op with the shapes of its inputs and whether inputs must be positive.
fn op_table() -> Vec<(&'static str, Vec<[usize; 2]>, bool, OpFn)> {
    let m = [3, 4];
    vec![
        ("sigmoid", vec![m], false, |g, v| Ok(g.sigmoid(v[0]))),
        ("tanh", vec![m], false, |g, v| Ok(g.tanh(v[0]))),
        ("relu", vec![m], false, |g, v| Ok(g.relu(v[0]))),
        ("leaky_relu", vec![m], false, |g, v| Ok(g.leaky_relu(v[0]))),
        ("neg", vec![m], false, |g, v| Ok(g.neg(v[0]))),
        ("square", vec![m], false, |g, v| Ok(g.square(v[0]))),
        ("sqrt", vec![m], true, |g, v| Ok(g.sqrt(v[0], 1e-3))),
        ("ln_clamped", vec![m], true, |g, v| Ok(g.ln_clamped(v[0], 1e-12))),
        ("exp", vec![m], false, |g, v| Ok(g.exp(v[0]))),
        ("add", vec![m, m], false, |g, v| g.add(v[0], v[1])),
        ("sub", vec![m, m], false, |g, v| g.sub(v[0], v[1])),
        ("mul", vec![m, m], false, |g, v| g.mul(v[0], v[1])),
        ("scale", vec![m], false, |g, v| Ok(g.scale(v[0], -1.7))),
        ("shift", vec![m], false, |g, v| Ok(g.shift(v[0], 0.3))),
        ("one_minus", vec![m], false, |g, v| Ok(g.one_minus(v[0]))),
        ("matmul", vec![m, [4, 2]], false, |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![m], false, |g, v| g.transpose(v[0])),
        ("concat_rows", vec![m, [2, 4]], false, |g, v| g.concat(&[v[0], v[1]], 0)),
        ("concat_cols", vec![m, [3, 2]], false, |g, v| g.concat(&[v[0], v[1]], 1)),
        ("select_rows", vec![m], false, |g, v| g.select_rows(v[0], &[2, 0, 2])),
        ("row", vec![m], false, |g, v| g.row(v[0], 1)),
        ("reshape", vec![m], false, |g, v| g.reshape(v[0], &[2, 6])),
        ("softmax", vec![m], false, |g, v| g.softmax(v[0])),
        ("sum", vec![m], false, |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![m], false, |g, v| Ok(g.mean(v[0]))),
        ("sum_rows", vec![m], false, |g, v| Ok(g.sum_rows(v[0]))),
        ("sum_cols", vec![m], false, |g, v| Ok(g.sum_cols(v[0]))),
        ("add_row", vec![m, [1, 4]], false, |g, v| g.add_row(v[0], v[1])),
        ("mul_row", vec![m, [1, 4]], false, |g, v| g.mul_row(v[0], v[1])),
        ("batch_norm", vec![[5, 3]], false, |g, v| g.batch_norm(v[0], 1e-5).map(|r| r.0)),
        ("pick", vec![m], false, |g, v| g.pick(v[0], 5)),
    ]
}

/// `x * detach(x)`: the value of a square with half its true gradient.
fn broken_square(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let detached = g.constant(g.value(v[0]).clone());
    g.mul(v[0], detached)
}

/// Inputs kept away from the kinks of relu-type ops and from zero.
fn op_inputs(shapes: &[[usize; 2]], positive: bool, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|s| {
            let mut t = Tensor::randn(s, 1.0, rng);
            for x in t.data_mut() {
                let mag = x.abs().max(0.1);
                *x = if positive { mag + 0.2 } else { mag.copysign(*x) };
            }
            t
        })
        .collect()
}

/// Contracts an op's output with fixed random weights so every output
/// entry contributes to the checked scalar.
fn check_op(name: &str, shapes: &[[usize; 2]], positive: bool, op: OpFn, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = op_inputs(shapes, positive, &mut rng);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        Tensor::randn(g.shape(out), 1.0, &mut rng)
    };
    let report = grad_check(
        |g, v| {
            let out = op(g, v)?;
            let w = g.constant(probe.clone());
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        },
        &inputs,
        &GradCheckOptions {
            tol: OP_TOL,
            seed,
            ..Default::default()
        },
    )?;
    Ok(outcome(name, CheckKind::Op, seed, report.max_rel_err, OP_TOL))
}

fn outcome(name: &str, kind: CheckKind, seed: u64, err: f64, tol: f64) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        kind,
        seed,
        max_rel_err: err,
        tol,
        passed: err < tol,
    }
}

fn randomize(params: &mut ParamSet, std: f64, rng: &mut ChaCha8Rng) {
    for t in params.tensors_mut() {
        *t = Tensor::randn(t.shape(), std, rng);
    }
}

fn check_gru(seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cell = GruCell::new(&mut ps, "gru", 3, 4, &mut rng);
    randomize(&mut ps, 0.5, &mut rng);
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let h = Tensor::randn(&[2, 4], 0.5, &mut rng);
    let mut params = ps.tensors().to_vec();
    params.push(x);
    params.push(h);
    let n = ps.len();
    let report = grad_check(
        |g, v| {
            let b = Bound::from_vars(v[..n].to_vec());
            let out = cell.step(g, &b, v[n], v[n + 1])?;
            let sq = g.square(out);
            Ok(g.sum(sq))
        },
        &params,
        &GradCheckOptions {
            tol: COMPOSITE_TOL,
            seed,
            ..Default::default()
        },
    )?;
    Ok(outcome("gru_cell", CheckKind::Composite, seed, report.max_rel_err, COMPOSITE_TOL))
}

fn tiny_dataset(seed: u64, turns: usize, n: usize, eta: f64) -> Result<crate::dataio::Dataset> {
    let d = generate_synthetic(
        &SynthSpec {
            seed,
            min_turns: turns,
            max_turns: turns,
            dims: Dims::uniform(3),
            num_classes: 3,
            num_parties: 2,
            ..Default::default()
        },
        n,
    )?;
    let masks = generate_mask(&d, eta, seed)?;
    apply_mask(&d, &masks)
}

/// Loss of a short conversation through every PANet equation.
fn check_panet(seed: u64) -> Result<CheckOutcome> {
    let d = tiny_dataset(seed, 2, 1, 0.3)?;
    let conv = &d.conversations[0];
    let input = ConversationInput::build(conv, &d.dims, None)?;
    let spec = PanetSpec {
        input_dim: d.dims.total(),
        global_dim: 4,
        party_dim: 3,
        emotion_dim: 4,
        num_classes: 3,
        max_parties: 2,
        party_attention: true,
        bidirectional: seed % 2 == 1,
    };
    let mut net = Panet::new(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    randomize(&mut net.params, 0.5, &mut rng);
    let labels = conv.labels();
    let report = grad_check(
        |g, v| {
            let b = Bound::from_vars(v.to_vec());
            let fwd = net.forward(g, &b, &input)?;
            net.loss(g, &b, &fwd, &labels, 1e-2)
        },
        net.params.tensors(),
        &GradCheckOptions {
            tol: COMPOSITE_TOL,
            seed,
            ..Default::default()
        },
    )?;
    Ok(outcome("panet_turns", CheckKind::Composite, seed, report.max_rel_err, COMPOSITE_TOL))
}

/// Generator objective plus every critic objective with the
/// finite-difference penalty, over representations, generators and critics.
fn check_crl(seed: u64) -> Result<CheckOutcome> {
    // centroids need every class; draw data seeds until all three appear
    let mut d = tiny_dataset(seed, 4, 3, 0.5)?;
    let mut k = 1;
    while !(0..3).all(|c| d.conversations.iter().any(|conv| conv.labels().contains(&c))) {
        d = tiny_dataset(seed.wrapping_add(k), 4, 3, 0.5)?;
        k += 1;
    }
    let inputs: Vec<CrlInput> = d
        .conversations
        .iter()
        .map(|c| CrlInput::build(c, &d.dims, None))
        .collect::<Result<_>>()?;
    let labels: Vec<Vec<usize>> = d.conversations.iter().map(|c| c.labels()).collect();
    let config = CrlConfig {
        common_dim: 3,
        hidden_width: Some(4),
        reservoir_size: 16,
        real_samples: 4,
        ..Default::default()
    };
    let mut s = CrlState::new(config, &inputs[0].dims(), 3, seed)?;
    s.init_h(&inputs);
    s.train_epoch(&inputs, &labels)?;
    s.refresh_centroids(&labels)?;
    let mu = s.centroids.matrix()?;
    // A conversation with at least one missing row somewhere.
    let k = inputs
        .iter()
        .position(|c| c.blocks.iter().any(|b| !b.missing_rows().is_empty()))
        .unwrap_or(0);
    let input = &inputs[k];
    let h0 = s.h_table(&input.id).expect("table initialised").clone();

    let mut g = Graph::new();
    let hv = g.constant(h0.clone());
    let bounds: Vec<Bound> = s.generators.iter().map(|m| m.params.bind_frozen(&mut g)).collect();
    let (outputs, _) = s.forward_generators(&mut g, hv, &bounds, BnMode::Train)?;
    let fakes = generated_at_missing(&g, &outputs, input);
    // None for a modality with no observed turn in this conversation
    let reals: Vec<Option<Tensor>> = input
        .blocks
        .iter()
        .map(|b| {
            let rows: Vec<Vec<f64>> = b.observed_rows().iter().map(|&t| b.values.row_slice(t).to_vec()).collect();
            (!rows.is_empty()).then(|| Tensor::from_rows(&rows)).transpose()
        })
        .collect::<Result<_>>()?;

    let mut params = vec![h0];
    let gen_counts: Vec<usize> = s.generators.iter().map(|m| m.params.len()).collect();
    for m in &s.generators {
        params.extend(m.params.tensors().iter().cloned());
    }
    let critic_counts: Vec<usize> = s.critics.iter().map(|m| m.params.len()).collect();
    for m in &s.critics {
        params.extend(m.params.tensors().iter().cloned());
    }
    let split = |v: &[Var], counts: &[usize], at: &mut usize| -> Vec<Bound> {
        counts
            .iter()
            .map(|&n| {
                let b = Bound::from_vars(v[*at..*at + n].to_vec());
                *at += n;
                b
            })
            .collect()
    };
    let report = grad_check(
        |g, v| {
            let mut at = 1;
            let gb = split(v, &gen_counts, &mut at);
            let cb = split(v, &critic_counts, &mut at);
            let (outs, _) = s.forward_generators(g, v[0], &gb, BnMode::Train)?;
            let (mut total, _) = s.generator_objective(g, input, &labels[k], v[0], &outs, &gb, Some(&mu))?;
            for (m, fake) in fakes.iter().enumerate() {
                if let (Some(fake), Some(real)) = (fake, &reals[m]) {
                    let c = s.critic_objective(g, m, &cb[m], real, fake)?;
                    total = g.add(total, c)?;
                }
            }
            Ok(total)
        },
        &params,
        &GradCheckOptions {
            tol: COMPOSITE_TOL,
            max_entries: Some(12),
            seed,
            floor: SURROGATE_FLOOR,
            skip_kinks: true,
            ..Default::default()
        },
    )?;
    Ok(outcome("crl_objective", CheckKind::Composite, seed, report.max_rel_err, COMPOSITE_TOL))
}

/// Runs every check at every seed. With `inject_fault`, a square whose
/// backward pass drops half the gradient is checked as well.
pub fn run_grad_suite(seeds: &[u64], inject_fault: bool) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for &seed in seeds {
        for (name, shapes, positive, op) in op_table() {
            checks.push(check_op(name, &shapes, positive, op, seed)?);
        }
        if inject_fault {
            checks.push(check_op("broken_square", &[[3, 4]], false, broken_square, seed)?);
        }
        checks.push(check_gru(seed)?);
        checks.push(check_panet(seed)?);
        checks.push(check_crl(seed)?);
    }
    let max_of = |kind| {
        checks
            .iter()
            .filter(|c| c.kind == kind)
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    };
    let (max_op_err, max_composite_err) = (max_of(CheckKind::Op), max_of(CheckKind::Composite));
    let passed = checks.iter().all(|c| c.passed);
    Ok(SuiteReport {
        checks,
        max_op_err,
        max_composite_err,
        passed,
    })
}

/// Default seed list for the suite.
pub fn default_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.random::<u32>() as u64).collect()
}

//! Self-check suites run by the `gradcheck` and `oracle` commands and by the
//! acceptance tests.
//!
//! The gradient suite compares tape gradients with central differences for
//! every differentiable op and for the supervised and consistency losses
//! composed through a model with both expert banks. The oracle suite checks
//! the gating contract, the class partition against a rank-based reference,
//! and the smooth margin loss against direct double summation.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eaf::{BankConfig, ExpertBank, ExpertKind};
use crate::error::Result;
use crate::gradcheck::grad_check_many;
use crate::model::{LeafModel, ModelSpec};
use crate::nn::{cross_entropy, BoundParams, ParamStore};
use crate::partition::{ambiguous_consistency_loss, hinge_oracle, partition, partition_rows, Partition};
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// Relative error bound for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step for single ops.
pub const OP_STEP: f64 = 1e-3;
/// Finite-difference step for the composed losses. Smaller than
/// [`OP_STEP`] so perturbations rarely cross a ReLU or top-K switch.
pub const MODEL_STEP: f64 = 1e-6;
pub const GATE_SUM_TOLERANCE: f64 = 1e-9;
pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-12;
pub const LOSS_ORACLE_TOLERANCE: f64 = 1e-9;
/// Partition thresholds exercised by the oracle.
pub const THRESHOLDS: [f64; 3] = [0.5, 0.9, 0.99];

/// Outcome of one named check over many random cases.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest observed error, in the check's own units.
    pub worst: f64,
    pub tolerance: f64,
    /// Description of the first failing case, if any.
    pub first_failure: Option<String>,
}

impl CheckResult {
    fn new(name: impl Into<String>, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            cases: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
            first_failure: None,
        }
    }

    fn record(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
        if !(err <= self.tolerance) {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(describe());
            }
        }
    }

    fn record_bool(&mut self, ok: bool, describe: impl FnOnce() -> String) {
        self.record(if ok { 0.0 } else { 1.0 }, describe);
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<30} cases={:<7} worst={:.3e} tol={:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance
        )?;
        if let Some(msg) = &self.first_failure {
            write!(f, " first failure: {msg}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        write!(
            f,
            "{} checks, {} failed, {:.2}s",
            self.checks.len(),
            self.checks.iter().filter(|c| !c.passed()).count(),
            self.elapsed.as_secs_f64()
        )
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Uniform in `[-5, 5]` with no entry closer than `gap` to zero.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-5.0..5.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Uniform rows whose entries are pairwise at least `gap` apart, so top-K
/// membership is stable under a finite-difference step.
fn well_separated(rng: &mut ChaCha8Rng, rows: usize, cols: usize, gap: f64) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row = loop {
            let cand: Vec<f64> = (0..cols).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut sorted = cand.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[1] - w[0] > gap) {
                break cand;
            }
        };
        data.extend(row);
    }
    Tensor::new(rows, cols, data).expect("sized")
}

/// Reduces a tensor-valued op to a scalar with fixed random weights, so
/// that every output coordinate influences the checked gradient.
fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}

fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    // Vary concentration so both flat and peaked vectors appear.
    let sharpness: f64 = [0.3, 1.0, 3.0, 8.0][rng.gen_range(0..4)];
    let mut v: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            (-u.ln()).powf(sharpness)
        })
        .collect();
    if rng.gen_bool(0.1) {
        // Coarse values force exact ties.
        for x in &mut v {
            *x = (*x * 2.0).round() + 1.0;
        }
    }
    let total: f64 = v.iter().sum();
    v.iter().map(|x| x / total).collect()
}

fn random_partition(rng: &mut ChaCha8Rng, k: usize) -> Partition {
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let m = rng.gen_range(1..k);
    Partition::from_order(order, m).expect("valid partition")
}

type OpCase = (&'static str, fn(&mut ChaCha8Rng) -> Result<f64>);

fn check_op(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    out_shape: (usize, usize),
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let weights = uniform(rng, out_shape.0, out_shape.1, -1.0, 1.0);
    grad_check_many(
        |tape, v| {
            let out = f(tape, v)?;
            weighted_sum(tape, out, &weights)
        },
        &inputs,
        OP_STEP,
    )
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=5))
}

fn binary_case(
    rng: &mut ChaCha8Rng,
    f: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let (r, c) = dims(rng);
    let rhs_shape = [(r, c), (1, c), (r, 1), (1, 1)][rng.gen_range(0..4)];
    let a = uniform(rng, r, c, -5.0, 5.0);
    let b = uniform(rng, rhs_shape.0, rhs_shape.1, -5.0, 5.0);
    check_op(rng, vec![a, b], (r, c), |t, v| f(t, v[0], v[1]))
}

fn unary_case(
    rng: &mut ChaCha8Rng,
    x: Tensor,
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut probe = Tape::new();
    let v = probe.constant(x.clone());
    let out = f(&mut probe, v)?;
    let shape = probe.shape(out);
    check_op(rng, vec![x], shape, |t, v| f(t, v[0]))
}

fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", |rng| {
            let (r, c) = dims(rng);
            let q = rng.gen_range(1..=4);
            let a = uniform(rng, r, c, -5.0, 5.0);
            let b = uniform(rng, c, q, -5.0, 5.0);
            check_op(rng, vec![a, b], (r, q), |t, v| t.matmul(v[0], v[1]))
        }),
        ("add", |rng| binary_case(rng, |t, a, b| t.add(a, b))),
        ("sub", |rng| binary_case(rng, |t, a, b| t.sub(a, b))),
        ("mul", |rng| binary_case(rng, |t, a, b| t.mul(a, b))),
        ("scalar_mul", |rng| {
            let (r, c) = dims(rng);
            let s = rng.gen_range(-3.0..3.0);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, move |t, v| t.scalar_mul(v, s))
        }),
        ("add_scalar", |rng| {
            let (r, c) = dims(rng);
            let s = rng.gen_range(-3.0..3.0);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, move |t, v| t.add_scalar(v, s))
        }),
        ("neg", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.neg(v))
        }),
        ("sum_all", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.sum_all(v))
        }),
        ("mean_all", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.mean_all(v))
        }),
        ("sum_rows", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.sum_rows(v))
        }),
        ("softmax_rows", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.softmax_rows(v))
        }),
        ("log_softmax_rows", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.log_softmax_rows(v))
        }),
        ("softplus", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.softplus(v))
        }),
        ("log1p_exp", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.log1p_exp(v))
        }),
        ("relu", |rng| {
            let (r, c) = dims(rng);
            let x = away_from_zero(rng, r, c, 0.01);
            unary_case(rng, x, |t, v| t.relu(v))
        }),
        ("exp", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, |t, v| t.exp(v))
        }),
        ("log", |rng| {
            let (r, c) = dims(rng);
            let x = uniform(rng, r, c, 0.1, 5.0);
            unary_case(rng, x, |t, v| t.log(v))
        }),
        ("concat_cols", |rng| {
            let (r, c) = dims(rng);
            let c2 = rng.gen_range(1..=3);
            let a = uniform(rng, r, c, -5.0, 5.0);
            let b = uniform(rng, r, c2, -5.0, 5.0);
            check_op(rng, vec![a, b], (r, c + c2), |t, v| t.concat_cols(&[v[0], v[1]]))
        }),
        ("slice_cols", |rng| {
            let (r, c) = dims(rng);
            let start = rng.gen_range(0..c);
            let end = rng.gen_range(start + 1..=c);
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, move |t, v| t.slice_cols(v, start, end))
        }),
        ("topk_mask+softmax", |rng| {
            let (r, c) = dims(rng);
            let k = rng.gen_range(1..=c);
            let x = well_separated(rng, r, c, 0.01);
            unary_case(rng, x, move |t, v| {
                let m = t.topk_mask(v, k)?;
                t.softmax_rows(m)
            })
        }),
        ("masked_log_sum_exp", |rng| {
            let (r, c) = dims(rng);
            let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen_bool(0.5)).collect();
            for row in 0..r {
                let j = rng.gen_range(0..c);
                mask[row * c + j] = true;
            }
            let x = uniform(rng, r, c, -5.0, 5.0);
            unary_case(rng, x, move |t, v| t.masked_log_sum_exp(v, &mask))
        }),
        ("cross_entropy", |rng| {
            let r = rng.gen_range(1..=4);
            let k = rng.gen_range(2..=6);
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..k)).collect();
            let x = uniform(rng, r, k, -5.0, 5.0);
            grad_check_many(|t, v| cross_entropy(t, v[0], &labels), &[x], OP_STEP)
        }),
        ("consistency_loss", |rng| {
            let r = rng.gen_range(1..=4);
            let k = rng.gen_range(2..=10);
            let parts: Vec<Partition> = (0..r).map(|_| random_partition(rng, k)).collect();
            let margin = [0.0, 0.1, 0.5][rng.gen_range(0..3)];
            let x = uniform(rng, r, k, -5.0, 5.0);
            grad_check_many(
                |t, v| ambiguous_consistency_loss(t, v[0], &parts, margin),
                &[x],
                OP_STEP,
            )
        }),
    ]
}

/// Small model with both expert banks, sized so a full finite-difference
/// sweep over every parameter stays cheap.
fn tiny_model(kind: ExpertKind, seed: u64) -> Result<(ModelSpec, ParamStore, LeafModel)> {
    let bank = BankConfig {
        width: 0,
        num_experts: 3,
        top_k: 2,
        kind,
        bottleneck_ratio: 2,
    };
    let spec = ModelSpec {
        input_dim: 5,
        encoder_widths: vec![6, 4],
        num_classes: 3,
        semantic: Some(BankConfig { width: 4, ..bank }),
        instance: Some(BankConfig { width: 3, ..bank }),
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LeafModel::new(&spec, &mut store, &mut rng)?;
    // Zero biases would park ReLU inputs exactly on the kink whenever a
    // whole feature row is dead; random values keep every input generic.
    for i in 0..store.len() {
        let id = store.find(&store.names()[i].clone()).expect("own name");
        let (r, c) = store.get(id).shape();
        *store.get_mut(id) = uniform(&mut rng, r, c, -1.0, 1.0);
    }
    Ok((spec, store, model))
}

fn model_inputs(store: &ParamStore, x: Tensor) -> Vec<Tensor> {
    let mut inputs = store.tensors().to_vec();
    inputs.push(x);
    inputs
}

fn split_bound(vars: &[Var]) -> (BoundParams, Var) {
    let (params, x) = vars.split_at(vars.len() - 1);
    (BoundParams::from_vars(params.to_vec()), x[0])
}

fn supervised_case(rng: &mut ChaCha8Rng, kind: ExpertKind) -> Result<f64> {
    let (spec, store, model) = tiny_model(kind, rng.gen())?;
    let rows = rng.gen_range(1..=3);
    let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..spec.num_classes)).collect();
    let x = uniform(rng, rows, spec.input_dim, -5.0, 5.0);
    grad_check_many(
        |tape, vars| {
            let (params, x) = split_bound(vars);
            let out = model.forward(tape, &params, x)?;
            cross_entropy(tape, out.fused_logits, &labels)
        },
        &model_inputs(&store, x),
        MODEL_STEP,
    )
}

fn consistency_case(rng: &mut ChaCha8Rng, kind: ExpertKind) -> Result<f64> {
    let (spec, store, model) = tiny_model(kind, rng.gen())?;
    let rows = rng.gen_range(1..=3);
    let target_x = uniform(rng, rows, spec.input_dim, -5.0, 5.0);
    let loss_x = uniform(rng, rows, spec.input_dim, -5.0, 5.0);
    let mut probs = model.predict_logits(&store, &target_x)?;
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    let threshold = THRESHOLDS[rng.gen_range(0..THRESHOLDS.len())];
    let parts = partition_rows(&probs, threshold)?;
    let margin = [0.0, 0.1][rng.gen_range(0..2)];
    grad_check_many(
        |tape, vars| {
            let (params, x) = split_bound(vars);
            let out = model.forward(tape, &params, x)?;
            let scores = tape.softmax_rows(out.fused_logits)?;
            ambiguous_consistency_loss(tape, scores, &parts, margin)
        },
        &model_inputs(&store, loss_x),
        MODEL_STEP,
    )
}

/// Finite-difference suite: `trials` random cases for every op and for
/// both composed losses (cycling through the expert kinds).
pub fn gradcheck_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for (name, case) in op_cases() {
        let mut check = CheckResult::new(name, GRAD_TOLERANCE);
        for trial in 0..trials {
            let err = case(&mut rng)?;
            check.record(err, || format!("trial {trial}: error {err:.3e}"));
        }
        checks.push(check);
    }
    type ModelCase = fn(&mut ChaCha8Rng, ExpertKind) -> Result<f64>;
    let model_cases: [(&str, ModelCase); 2] = [
        ("supervised_loss_through_eaf", supervised_case),
        ("consistency_loss_through_eaf", consistency_case),
    ];
    for (name, case) in model_cases {
        let mut check = CheckResult::new(name, GRAD_TOLERANCE);
        for trial in 0..trials {
            let kind = ExpertKind::ALL[trial % ExpertKind::ALL.len()];
            let err = case(&mut rng, kind)?;
            check.record(err, || format!("trial {trial} ({kind}): error {err:.3e}"));
        }
        checks.push(check);
    }
    Ok(SuiteReport {
        checks,
        elapsed: start.elapsed(),
    })
}

/// Case counts for [`oracle_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleSizes {
    pub gating: usize,
    pub partition: usize,
    pub loss: usize,
}

impl Default for OracleSizes {
    fn default() -> Self {
        Self {
            gating: 10_000,
            partition: 100_000,
            loss: 10_000,
        }
    }
}

/// Reference partition: rank every class by counting strictly larger
/// entries (lower index first on ties), then accumulate in rank order.
pub fn partition_oracle(probs: &[f64], threshold: f64) -> (usize, Vec<usize>) {
    let k = probs.len();
    let rank = |c: usize| {
        (0..k)
            .filter(|&j| probs[j] > probs[c] || (probs[j] == probs[c] && j < c))
            .count()
    };
    let mut by_rank = vec![0; k];
    for c in 0..k {
        by_rank[rank(c)] = c;
    }
    let mut m = k;
    let mut acc = 0.0;
    for (i, &c) in by_rank.iter().enumerate() {
        acc += probs[c];
        if acc >= threshold {
            m = i + 1;
            break;
        }
    }
    let m = m.clamp(1, k - 1);
    let mut positive: Vec<usize> = (0..k).filter(|&c| rank(c) < m).collect();
    positive.sort_unstable();
    (m, positive)
}

/// `log(1 + e^ε Σ_{i∈pos} Σ_{j∈neg} e^{y_j - y_i})` by explicit double sum.
pub fn direct_consistency_loss(scores: &[f64], part: &Partition, margin: f64) -> f64 {
    let mut total = 0.0;
    for &i in part.positive() {
        for &j in part.negative() {
            total += (scores[j] - scores[i]).exp();
        }
    }
    (margin.exp() * total).ln_1p()
}

fn gating_checks(rng: &mut ChaCha8Rng, cases: usize) -> Result<Vec<CheckResult>> {
    let mut contract = CheckResult::new("gate_contract", GATE_SUM_TOLERANCE);
    let mut equivariance = CheckResult::new("gate_permutation_equivariance", EQUIVARIANCE_TOLERANCE);
    for case in 0..cases {
        let n = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=n);
        let width = rng.gen_range(1..=8);
        let rows = rng.gen_range(1..=4);
        let kind = ExpertKind::ALL[rng.gen_range(0..3)];
        let cfg = BankConfig {
            width,
            num_experts: n,
            top_k: k,
            kind,
            bottleneck_ratio: 4,
        };
        let mut store = ParamStore::new();
        let bank = ExpertBank::new(&mut store, "bank", cfg, rng)?;
        let x = uniform(rng, rows, width, -5.0, 5.0);

        let mut tape = Tape::new();
        let params = store.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let decision = bank.gate(&mut tape, &params, xv)?;
        let fused = bank.fuse_with(&mut tape, &params, xv, &decision)?;
        let weights = tape.value(decision.weights).clone();
        let fused = tape.value(fused).clone();

        let mut worst: f64 = 0.0;
        let mut ok = true;
        for r in 0..rows {
            let row = weights.row(r);
            let zeros = row.iter().filter(|&&w| w == 0.0).count();
            ok &= zeros == n - k && row.iter().all(|&w| w >= 0.0);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let err = if ok { worst } else { f64::INFINITY };
        contract.record(err, || format!("case {case}: n={n} K={k} weights={weights:?}"));

        // Same bank with experts and gate columns reordered.
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let mut pstore = store.clone();
        for (j, &src) in perm.iter().enumerate() {
            for (dst_id, src_id) in bank.experts()[j]
                .param_ids()
                .into_iter()
                .zip(bank.experts()[src].param_ids())
            {
                *pstore.get_mut(dst_id) = store.get(src_id).clone();
            }
            let gate = store.get(bank.gate_weight());
            let pgate = pstore.get_mut(bank.gate_weight());
            for row in 0..width {
                pgate.set(row, j, gate.get(row, src));
            }
        }
        let mut tape = Tape::new();
        let params = pstore.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let pfused = bank.fuse(&mut tape, &params, xv)?;
        let diff = tape
            .value(pfused)
            .data()
            .iter()
            .zip(fused.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        equivariance.record(diff, || format!("case {case}: n={n} K={k} perm={perm:?} diff={diff:.3e}"));
    }
    Ok(vec![contract, equivariance])
}

fn partition_check(rng: &mut ChaCha8Rng, cases: usize) -> Result<CheckResult> {
    let mut check = CheckResult::new("partition_oracle", 0.0);
    for case in 0..cases {
        let k = rng.gen_range(2..=10);
        let threshold = THRESHOLDS[rng.gen_range(0..THRESHOLDS.len())];
        let probs = random_simplex(rng, k);
        let got = partition(&probs, threshold)?;
        let (m, positive) = partition_oracle(&probs, threshold);
        let mut got_pos = got.positive().to_vec();
        got_pos.sort_unstable();

        // Minimality: one class fewer must fall short, unless m is 1.
        let top: f64 = got.order()[..got.m()].iter().map(|&c| probs[c]).sum();
        let minimal = got.m() == 1
            || got.order()[..got.m() - 1].iter().map(|&c| probs[c]).sum::<f64>() < threshold;
        let reaches = top >= threshold || got.m() == k - 1;
        let ok = got.m() == m && got_pos == positive && got.m() < k && minimal && reaches;
        check.record_bool(ok, || {
            format!(
                "case {case}: probs={probs:?} T={threshold} got m={} pos={got_pos:?}, oracle m={m} pos={positive:?}",
                got.m()
            )
        });
    }
    Ok(check)
}

fn loss_checks(rng: &mut ChaCha8Rng, cases: usize) -> Result<Vec<CheckResult>> {
    let mut oracle = CheckResult::new("loss_direct_summation", LOSS_ORACLE_TOLERANCE);
    let mut bound = CheckResult::new("loss_upper_bounds_hinge", 0.0);
    let mut signs = CheckResult::new("loss_gradient_signs", 0.0);
    let mut monotone = CheckResult::new("loss_monotonicity", 0.0);
    for case in 0..cases {
        let k = rng.gen_range(2..=10);
        let part = random_partition(rng, k);
        let margin = [0.0, 0.1, 0.5][rng.gen_range(0..3)];
        let scale = [1.0, 5.0][rng.gen_range(0..2)];
        let scores: Vec<f64> = (0..k).map(|_| rng.gen_range(-scale..scale)).collect();

        let mut tape = Tape::new();
        let y = tape.var(Tensor::row_vector(&scores));
        let loss = ambiguous_consistency_loss(&mut tape, y, std::slice::from_ref(&part), margin)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;
        let grad = grads.get_or_zeros(y, (1, k));

        let direct = direct_consistency_loss(&scores, &part, margin);
        let err = (value - direct).abs() / direct.abs().max(1.0);
        oracle.record(err, || format!("case {case}: tape {value} direct {direct}"));

        let hinge = hinge_oracle(&scores, &part, margin);
        bound.record_bool(value >= hinge, || format!("case {case}: loss {value} < hinge {hinge}"));

        let pos_mask = part.positive_mask();
        let signs_ok = grad
            .data()
            .iter()
            .zip(&pos_mask)
            .all(|(&g, &is_pos)| if is_pos { g < 0.0 } else { g > 0.0 });
        signs.record_bool(signs_ok, || format!("case {case}: gradient {:?}", grad.data()));

        let eval = |s: &[f64]| direct_consistency_loss(s, &part, margin);
        let mut bumped = scores.clone();
        let j = part.negative()[rng.gen_range(0..part.negative().len())];
        bumped[j] += 0.1;
        let up = eval(&bumped) > direct;
        let mut bumped = scores.clone();
        let i = part.positive()[rng.gen_range(0..part.positive().len())];
        bumped[i] += 0.1;
        let down = eval(&bumped) < direct;
        monotone.record_bool(up && down, || format!("case {case}: scores {scores:?}"));
    }
    Ok(vec![oracle, bound, signs, monotone])
}

/// Gating contract and equivariance, partition and loss oracles.
pub fn oracle_suite(sizes: OracleSizes, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = gating_checks(&mut rng, sizes.gating)?;
    checks.push(partition_check(&mut rng, sizes.partition)?);
    checks.extend(loss_checks(&mut rng, sizes.loss)?);
    Ok(SuiteReport {
        checks,
        elapsed: start.elapsed(),
    })
}

//! Named property suite: finite-difference checks for every differentiable
//! op and for a whole DAP model, pooling oracles, routing exclusivity, the λ
//! simplex and run determinism.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{OpKind, Tape, Var};
use crate::data::{make_synthetic, LabeledImageSet, SyntheticSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, Mismatch, Report, DEFAULT_STEP, DEFAULT_TOL};
use crate::head::{dap, Head, HeadConfig, HeadKind};
use crate::kernels::Window;
use crate::model::{Model, ModelConfig};
use crate::nn::BackboneConfig;
use crate::reference;
use crate::tensor::Tensor;
use crate::train::{metrics_csv, OptimConfig, TrainConfig, TrainRun};

pub const OP_TRIALS: usize = 20;

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Random inputs for one op and a closure applying it.
pub struct OpCase {
    pub op: OpKind,
    pub inputs: Vec<Tensor<f64>>,
    pub apply: OpFn,
}

/// Values in `±[lo, hi]`, keeping clear of zero.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// Distinct values at least 0.05 apart, so a max never changes under a
/// finite-difference probe.
fn spread(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    data.shuffle(rng);
    for v in &mut data {
        *v += rng.gen_range(-0.02..0.02);
    }
    Tensor::new(shape, data).expect("shape matches")
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Builds trial `trial` of `op`. Shapes and op arguments vary with the
/// trial so broadcasting, strides and pooling modes are all exercised.
pub fn op_case(op: OpKind, trial: usize, rng: &mut ChaCha8Rng) -> OpCase {
    let odd = trial % 2 == 1;
    let (inputs, apply): (Vec<Tensor<f64>>, OpFn) = match op {
        OpKind::MatMul => (vec![randn(&[3, 4], rng), randn(&[4, 2], rng)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let b = if odd { vec![1] } else { vec![2, 3] };
            let inputs = vec![randn(&[2, 3], rng), randn(&b, rng)];
            let f: OpFn = match op {
                OpKind::Add => Box::new(|t, v| t.add(v[0], v[1])),
                OpKind::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (inputs, f)
        }
        OpKind::Relu => (vec![away_from_zero(&[3, 4], 0.05, 1.5, rng)], Box::new(|t, v| Ok(t.relu(v[0])))),
        OpKind::Log => (vec![Tensor::uniform(&[3, 4], 0.3, 3.0, rng)], Box::new(|t, v| t.log(v[0]))),
        OpKind::Exp => (vec![Tensor::uniform(&[3, 4], -1.5, 1.5, rng)], Box::new(|t, v| Ok(t.exp(v[0])))),
        OpKind::Scale => (vec![randn(&[3, 4], rng)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        OpKind::AddScalar => (vec![randn(&[3, 4], rng)], Box::new(|t, v| Ok(t.add_scalar(v[0], 0.3)))),
        OpKind::ClampMin => {
            let x = away_from_zero(&[3, 4], 0.05, 1.5, rng).map(|v| v + 0.25);
            (vec![x], Box::new(|t, v| Ok(t.clamp_min(v[0], 0.25))))
        }
        OpKind::Sum => (vec![randn(&[3, 4], rng)], Box::new(|t, v| Ok(t.sum(v[0])))),
        OpKind::Mean => (vec![randn(&[3, 4], rng)], Box::new(|t, v| Ok(t.mean(v[0])))),
        OpKind::Softmax => (vec![randn(&[3, 5], rng)], Box::new(|t, v| t.softmax(v[0]))),
        OpKind::Gather => {
            let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            (vec![randn(&[4, 5], rng)], Box::new(move |t, v| t.gather(v[0], &targets)))
        }
        OpKind::Select => {
            let i = rng.gen_range(0..6);
            (vec![randn(&[6], rng)], Box::new(move |t, v| t.select(v[0], i)))
        }
        OpKind::AddBias => (vec![randn(&[3, 4], rng), randn(&[4], rng)], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        OpKind::Conv2d => {
            let stride = if odd { 2 } else { 1 };
            let pad = trial % 3 % 2;
            let inputs = vec![randn(&[2, 2, 5, 5], rng), randn(&[3, 2, 3, 3], rng), randn(&[3], rng)];
            (inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad)))
        }
        OpKind::BatchNorm => {
            let inputs = vec![randn(&[3, 2, 3, 3], rng), Tensor::uniform(&[2], 0.5, 1.5, rng), randn(&[2], rng)];
            (inputs, Box::new(|t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5)?.0)))
        }
        OpKind::BatchNormEval => {
            let mean: Vec<f64> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..2).map(|_| rng.gen_range(0.5..2.0)).collect();
            let inputs = vec![randn(&[2, 2, 3, 3], rng), randn(&[2], rng), randn(&[2], rng)];
            (inputs, Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)))
        }
        OpKind::GlobalAvgPool => (vec![randn(&[2, 3, 3, 4], rng)], Box::new(|t, v| t.global_avg_pool(v[0]))),
        OpKind::GlobalMaxPool => (vec![spread(&[2, 3, 3, 4], rng)], Box::new(|t, v| t.global_max_pool(v[0]))),
        OpKind::LocalAvgPool => {
            let windows = [(3, 2, true), (3, 2, false), (2, 1, false), (4, 3, true), (6, 2, true)];
            let (size, stride, ceil) = windows[trial % windows.len()];
            let window = Window::new(size, stride, ceil);
            (vec![randn(&[2, 2, 5, 5], rng)], Box::new(move |t, v| t.local_avg_pool(v[0], window)))
        }
        OpKind::SpatialSelect => {
            let i = rng.gen_range(0..6);
            (vec![randn(&[2, 3, 2, 3], rng)], Box::new(move |t, v| t.spatial_select(v[0], i)))
        }
        OpKind::Concat => (vec![randn(&[2, 3], rng), randn(&[2, 2], rng)], Box::new(|t, v| t.concat(v[0], v[1]))),
        OpKind::Leaf => (vec![randn(&[2], rng)], Box::new(|_, v| Ok(v[0]))),
    };
    OpCase { op, inputs, apply }
}

#[derive(Clone, Debug)]
pub struct OpReport {
    pub op: OpKind,
    pub trials: usize,
    pub checked: usize,
    pub worst: Option<Mismatch>,
}

impl OpReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.map_or(0.0, |m| m.rel_err)
    }
}

/// Finite-difference check of `op` over `trials` random cases. The op output
/// is reduced by a weighted sum with fixed random weights (a sum of
/// exponentials for `mul`) so every output element carries a distinct,
/// non-trivial cotangent.
pub fn check_op(op: OpKind, trials: usize, seed: u64, fault: Option<OpKind>) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = OpReport { op, trials, checked: 0, worst: None };
    for trial in 0..trials {
        let case = op_case(op, trial, &mut rng);
        let mut probe = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|x| probe.constant(x.clone())).collect();
        let y = (case.apply)(&mut probe, &vars)?;
        let weights = away_from_zero(probe.shape(y), 0.5, 1.5, &mut rng);
        let apply = &case.apply;
        let report: Report = gradcheck::check(&case.inputs, DEFAULT_STEP, fault, |t, v| {
            let y = apply(t, v)?;
            if op == OpKind::Mul {
                // A weighting product would cancel a flipped mul rule.
                let e = t.exp(y);
                return Ok(t.sum(e));
            }
            let w = t.constant(weights.clone());
            let yw = t.mul(y, w)?;
            // Already a scalar; a second sum would cancel a flipped sum rule.
            if t.value(yw).numel() == 1 {
                return Ok(yw);
            }
            Ok(t.sum(yw))
        })?;
        out.checked += report.checked;
        if let Some(m) = report.worst {
            if out.worst.map_or(true, |w| m.rel_err > w.rel_err) {
                out.worst = Some(m);
            }
        }
    }
    Ok(out)
}

/// The smallest DAP model: one residual block on a 4×4 input, four heads,
/// two classes.
pub fn tiny_dap_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { in_channels: 1, resolution: 4, widths: vec![2], blocks: vec![1], strides: vec![1] },
        head: HeadConfig::new(HeadKind::Dap, 2),
    }
}

/// Worst element of a whole-model check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamMismatch {
    pub param: String,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct ModelReport {
    pub routed: usize,
    pub checked: usize,
    pub worst: Option<ParamMismatch>,
}

/// Every trainable parameter's gradient of the routed head's loss against
/// central differences. The routed head is chosen once, at the unperturbed
/// point, and held fixed for the probes.
pub fn check_model(model: &mut Model<f64>, images: &Tensor<f64>, targets: &[usize], fault: Option<OpKind>) -> Result<ModelReport> {
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_sign_flip(k);
    }
    let (out, _) = model.forward_train(&mut tape, images, targets)?;
    let routed = out.selected;
    let grads = tape.backward(out.losses[routed])?;
    model.store.load_grads(&tape, &grads);

    let loss_at = |m: &Model<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let (o, _) = m.forward_train(&mut t, images, targets)?;
        Ok(o.loss_values[routed])
    };
    let mut report = ModelReport { routed, checked: 0, worst: None };
    for idx in 0..model.store.len() {
        if !model.store.entries()[idx].trainable {
            continue;
        }
        for e in 0..model.store.entries()[idx].value.numel() {
            let orig = model.store.entries()[idx].value.data()[e];
            model.store.entries_mut()[idx].value.data_mut()[e] = orig + DEFAULT_STEP;
            let plus = loss_at(model)?;
            model.store.entries_mut()[idx].value.data_mut()[e] = orig - DEFAULT_STEP;
            let minus = loss_at(model)?;
            model.store.entries_mut()[idx].value.data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * DEFAULT_STEP);
            let entry = &model.store.entries()[idx];
            let analytic = entry.grad.data()[e];
            let rel_err = gradcheck::rel_err(analytic, numeric);
            report.checked += 1;
            if report.worst.as_ref().map_or(true, |w| rel_err > w.rel_err) {
                report.worst = Some(ParamMismatch { param: entry.name.clone(), element: e, analytic, numeric, rel_err });
            }
        }
    }
    Ok(report)
}

/// Outcome of one named invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Sign-flip fixture applied to the analytic side of the gradient checks.
    pub fault: Option<OpKind>,
}

/// Runs every check in order; a check that errors counts as failed.
pub fn run_suite(opts: &SuiteOptions) -> Vec<CheckResult> {
    let mut results = Vec::new();
    for (i, &op) in OpKind::DIFFERENTIABLE.iter().enumerate() {
        let name = format!("grad.{}", op.name());
        results.push(match check_op(op, OP_TRIALS, opts.seed.wrapping_add(i as u64), opts.fault) {
            Ok(r) => CheckResult::new(
                name,
                r.max_rel_err() <= DEFAULT_TOL,
                format!("{} elements, max rel err {:.3e}", r.checked, r.max_rel_err()),
            ),
            Err(e) => CheckResult::new(name, false, e.to_string()),
        });
    }
    type Check = fn(&SuiteOptions) -> Result<CheckResult>;
    let checks: [Check; 7] = [
        model_gradients,
        local_pool_oracle,
        global_pool_equivalence,
        routing_exclusivity,
        lambda_simplex,
        dap_gap_equivalence,
        determinism,
    ];
    for check in checks {
        results.push(check(opts).unwrap_or_else(|e| CheckResult::new("error", false, e.to_string())));
    }
    results
}

fn model_gradients(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut model = Model::<f64>::new(&tiny_dap_config(), opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let x = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
    let r = check_model(&mut model, &x, &[1], opts.fault)?;
    let worst = r.worst.clone().expect("model has parameters");
    Ok(CheckResult::new(
        "grad.model",
        worst.rel_err <= DEFAULT_TOL,
        format!("{} parameters, routed head {}, worst {} ({:.3e})", r.checked, r.routed, worst.param, worst.rel_err),
    ))
}

fn local_pool_oracle(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let ceil = rng.gen_bool(0.5);
        let max_size = if ceil { h.max(w) + 2 } else { h.min(w) };
        let size = rng.gen_range(1..=max_size);
        let stride = rng.gen_range(1..4);
        let x = Tensor::<f64>::randn(&[2, 2, h, w], 1.0, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let y = t.local_avg_pool(v, Window::new(size, stride, ceil))?;
        let expect = reference::local_avg_pool(&x, size, stride, ceil);
        if t.shape(y) != expect.shape() {
            return Ok(CheckResult::new(
                "pool.local_oracle",
                false,
                format!("{h}x{w} pw {size} s {stride} ceil {ceil}: shape {:?} vs {:?}", t.shape(y), expect.shape()),
            ));
        }
        worst = worst.max(t.value(y).max_abs_diff(&expect));
    }
    Ok(CheckResult::new("pool.local_oracle", worst <= 1e-10, format!("100 configurations, max abs diff {worst:.3e}")))
}

fn global_pool_equivalence(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x51);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..7), rng.gen_range(1..7));
        let x = Tensor::<f64>::randn(&[2, 3, h, w], 1.0, &mut rng);
        let mut t = Tape::new();
        let v = t.constant(x);
        let local = t.local_avg_pool(v, Window::new(h.max(w), 1, true))?;
        let g = t.global_avg_pool(v)?;
        worst = worst.max(t.value(local).data().iter().zip(t.value(g).data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    Ok(CheckResult::new("pool.global_equivalence", worst <= 1e-12, format!("max abs diff {worst:.3e}")))
}

/// A small model and data set for the training-based checks.
pub fn suite_fixture(kind: HeadKind, seed: u64) -> Result<(Model<f64>, LabeledImageSet<f64>)> {
    let cfg = ModelConfig {
        backbone: BackboneConfig { in_channels: 1, resolution: 8, widths: vec![3, 4], blocks: vec![1, 1], strides: vec![1, 2] },
        head: HeadConfig::new(kind, 2),
    };
    let data = make_synthetic(&SyntheticSpec { noise: 0.2, ..SyntheticSpec::new(2, 16, 8, seed) })?;
    Ok((Model::new(&cfg, seed)?, data))
}

fn first_max(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn routing_exclusivity(opts: &SuiteOptions) -> Result<CheckResult> {
    let (model, data) = suite_fixture(HeadKind::Dap, opts.seed)?;
    let cfg = TrainConfig { batch_size: 8, seed: opts.seed, ..TrainConfig::default() };
    let mut run = TrainRun::new(model, cfg)?;
    let plan = crate::data::BatchPlan::new(opts.seed, 8)?;
    let Head::Dap(head) = run.model.head.clone() else { unreachable!("fixture builds a DAP head") };
    let mut steps = 0;
    for epoch in 0..3 {
        for batch in crate::data::iterate_batches(&data, &plan, epoch) {
            let rec = run.step(&batch.images, &batch.labels)?;
            let losses: Vec<f64> = rec.loss_values.clone();
            if rec.selected != first_max(&losses) {
                return Ok(CheckResult::new("routing.exclusivity", false, format!("step {steps}: routed {} for losses {losses:?}", rec.selected)));
            }
            for (i, &id) in head.classifiers.iter().enumerate() {
                let nonzero = run.model.store.grad(id).data().iter().any(|&g| g != 0.0);
                if i != rec.selected && nonzero {
                    return Ok(CheckResult::new("routing.exclusivity", false, format!("step {steps}: head {i} has gradient while head {} was routed", rec.selected)));
                }
            }
            steps += 1;
        }
    }
    Ok(CheckResult::new("routing.exclusivity", true, format!("{steps} steps")))
}

fn lambda_simplex(opts: &SuiteOptions) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1a);
    for trial in 0..200 {
        let n = rng.gen_range(1..9);
        let mut lambdas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = lambdas.iter().sum();
        lambdas.iter_mut().for_each(|l| *l /= s);
        for _ in 0..10 {
            dap::update_lambdas(&mut lambdas, rng.gen_range(1e-4..1.0), dap::LAMBDA_FLOOR);
        }
        let sum: f64 = lambdas.iter().sum();
        let min = lambdas.iter().cloned().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > 1e-12 || min < dap::LAMBDA_FLOOR {
            return Ok(CheckResult::new("lambda.simplex", false, format!("trial {trial}: sum {sum}, min {min}")));
        }
    }
    let mut uniform = vec![0.25; 4];
    for _ in 0..500 {
        dap::update_lambdas(&mut uniform, 0.1, dap::LAMBDA_FLOOR);
    }
    let drift = uniform.iter().map(|l| (l - 0.25).abs()).fold(0.0, f64::max);
    Ok(CheckResult::new("lambda.simplex", drift <= 1e-12, format!("uniform drift {drift:.3e}")))
}

/// DAP whose single window covers the whole map trains exactly like GAP.
fn dap_gap_equivalence(opts: &SuiteOptions) -> Result<CheckResult> {
    let (gap, data) = suite_fixture(HeadKind::Gap, opts.seed)?;
    let mut cfg = gap.config.clone();
    cfg.head.kind = HeadKind::Dap;
    let map = cfg.backbone.out_resolution()?;
    cfg.head.dap.window = map;
    cfg.head.dap.stride = 1;
    let dap = Model::<f64>::new(&cfg, opts.seed)?;
    let tc = TrainConfig { batch_size: 8, seed: opts.seed, optim: OptimConfig { momentum: 0.9, ..OptimConfig::desk() }, ..TrainConfig::default() };
    let mut a = TrainRun::new(gap, tc.clone())?;
    let mut b = TrainRun::new(dap, tc)?;
    let plan = crate::data::BatchPlan::new(opts.seed, 8)?;
    let mut worst = 0.0f64;
    for (step, batch) in crate::data::iterate_batches(&data, &plan, 0).chain(crate::data::iterate_batches(&data, &plan, 1)).take(10).enumerate() {
        let ra = a.step(&batch.images, &batch.labels)?;
        let rb = b.step(&batch.images, &batch.labels)?;
        worst = worst.max((ra.routed_loss - rb.routed_loss).abs());
        let pa = a.model.predict(&data.images)?;
        let pb = b.model.predict(&data.images)?;
        worst = worst.max(pa.score.max_abs_diff(&pb.score));
        if pa.labels != pb.labels {
            return Ok(CheckResult::new("dap.gap_equivalence", false, format!("step {step}: predictions differ")));
        }
    }
    Ok(CheckResult::new("dap.gap_equivalence", worst <= 1e-9, format!("10 steps, max diff {worst:.3e}")))
}

fn determinism(opts: &SuiteOptions) -> Result<CheckResult> {
    let run_once = || -> Result<String> {
        let (model, data) = suite_fixture(HeadKind::Dap, opts.seed)?;
        let cfg = TrainConfig { epochs: 2, batch_size: 8, seed: opts.seed, ..TrainConfig::default() };
        let run = crate::train::train(model, &data, Some(&data), cfg, |_| Ok(()))?;
        Ok(metrics_csv(&run.history))
    };
    let (a, b) = (run_once()?, run_once()?);
    Ok(CheckResult::new("determinism.metrics", a == b, format!("{} bytes of metrics", a.len())))
}

/// Fails with the names of the failed checks.
pub fn require_all(results: &[CheckResult]) -> Result<()> {
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("failed invariants: {}", failed.join(", "))))
    }
}

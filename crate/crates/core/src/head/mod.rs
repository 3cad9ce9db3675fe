//! Classification heads that sit on the backbone's final feature map.
//!
//! Every head kind produces a list of per-head class distributions and a
//! matching list of fusion weights, so training and prediction share one
//! code path: global-pooling baselines are simply a single head with λ = 1.

pub mod dap;

use rand::Rng;

pub use dap::{fuse_score, DapConfig, DapHead, Prediction, Routing};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Forward, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Gap,
    Gmp,
    GapGmp,
    Dap,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Gap, HeadKind::Gmp, HeadKind::GapGmp, HeadKind::Dap];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gap => "gap",
            HeadKind::Gmp => "gmp",
            HeadKind::GapGmp => "gap+gmp",
            HeadKind::Dap => "dap",
        }
    }

    /// Row label in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Gap => "GAP",
            HeadKind::Gmp => "GMP",
            HeadKind::GapGmp => "GMP+GAP",
            HeadKind::Dap => "DAP",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gap" => Ok(HeadKind::Gap),
            "gmp" => Ok(HeadKind::Gmp),
            "gap+gmp" | "gmp+gap" => Ok(HeadKind::GapGmp),
            "dap" => Ok(HeadKind::Dap),
            other => Err(Error::Config(format!("unknown head kind `{other}` (gap | gmp | gap+gmp | dap)"))),
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub num_classes: usize,
    pub dap: DapConfig,
    /// Bias on the single linear classifier of the global-pooling heads.
    pub bias: bool,
}

impl HeadConfig {
    pub fn new(kind: HeadKind, num_classes: usize) -> Self {
        HeadConfig { kind, num_classes, dap: DapConfig::default(), bias: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPool {
    Avg,
    Max,
    AvgMax,
}

/// Global pooling followed by one linear softmax classifier.
#[derive(Clone, Debug)]
pub struct GlobalHead {
    pub pool: GlobalPool,
    pub classifier: Linear,
}

impl GlobalHead {
    pub fn features<T: Scalar>(&self, cx: &mut Forward<T>, y: Var) -> Result<Var> {
        match self.pool {
            GlobalPool::Avg => cx.tape.global_avg_pool(y),
            GlobalPool::Max => cx.tape.global_max_pool(y),
            GlobalPool::AvgMax => {
                let a = cx.tape.global_avg_pool(y)?;
                let m = cx.tape.global_max_pool(y)?;
                cx.tape.concat(a, m)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Global(GlobalHead),
    Dap(DapHead),
}

/// Everything a training step needs from the head.
#[derive(Clone, Debug)]
pub struct HeadOutputs<T> {
    /// `P_i`, each `[B × classes]`.
    pub probs: Vec<Var>,
    /// Batch-mean `loss_i` per head.
    pub losses: Vec<Var>,
    pub loss_values: Vec<T>,
    /// Routed head: the argmax of `loss_values` (per-batch routing) or the
    /// head chosen by the most samples (per-sample routing).
    pub selected: usize,
    /// Scalar to back-propagate.
    pub routed: Var,
    pub routed_value: T,
}

/// Builds a head for a `channels × map_size × map_size` feature map.
pub fn build_head<T: Scalar, R: Rng + ?Sized>(
    config: &HeadConfig,
    store: &mut ParamStore<T>,
    channels: usize,
    map_size: usize,
    rng: &mut R,
) -> Result<Head> {
    if config.num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", config.num_classes)));
    }
    let global = |pool: GlobalPool, width: usize, store: &mut ParamStore<T>, rng: &mut R| {
        let classifier = Linear::new(store, "head.fc", width, config.num_classes, config.bias, rng);
        Head::Global(GlobalHead { pool, classifier })
    };
    Ok(match config.kind {
        HeadKind::Gap => global(GlobalPool::Avg, channels, store, rng),
        HeadKind::Gmp => global(GlobalPool::Max, channels, store, rng),
        HeadKind::GapGmp => global(GlobalPool::AvgMax, 2 * channels, store, rng),
        HeadKind::Dap => Head::Dap(DapHead::new(store, config.dap, channels, map_size, config.num_classes, rng)?),
    })
}

impl Head {
    pub fn kind(&self) -> HeadKind {
        match self {
            Head::Global(g) => match g.pool {
                GlobalPool::Avg => HeadKind::Gap,
                GlobalPool::Max => HeadKind::Gmp,
                GlobalPool::AvgMax => HeadKind::GapGmp,
            },
            Head::Dap(_) => HeadKind::Dap,
        }
    }

    pub fn num_heads(&self) -> usize {
        match self {
            Head::Global(_) => 1,
            Head::Dap(d) => d.num_heads(),
        }
    }

    /// Current fusion weights.
    pub fn lambdas<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<T> {
        match self {
            Head::Global(_) => vec![T::one()],
            Head::Dap(d) => store.value(d.lambdas).data().to_vec(),
        }
    }

    fn routing(&self) -> Routing {
        match self {
            Head::Global(_) => Routing::PerBatch,
            Head::Dap(d) => d.config.routing,
        }
    }

    /// Per-head class distributions for a feature map.
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, y: Var) -> Result<Vec<Var>> {
        match self {
            Head::Global(g) => {
                let f = g.features(cx, y)?;
                let logits = g.classifier.forward(cx, f)?;
                Ok(vec![cx.tape.softmax(logits)?])
            }
            Head::Dap(d) => Ok(d.forward(cx, y)?.1),
        }
    }

    /// Head losses and the routed training objective.
    pub fn losses<T: Scalar>(&self, cx: &mut Forward<T>, probs: Vec<Var>, targets: &[usize]) -> Result<HeadOutputs<T>> {
        let lambda_values = self.lambdas(cx.store);
        let lambdas = cx.tape.constant(Tensor::new(&[lambda_values.len()], lambda_values)?);
        let mut losses = Vec::with_capacity(probs.len());
        let mut per_sample = Vec::with_capacity(probs.len());
        for (i, &p) in probs.iter().enumerate() {
            let lam = cx.tape.select(lambdas, i)?;
            let (loss, ps) = dap::head_loss(cx.tape, p, targets, lam)?;
            losses.push(loss);
            per_sample.push(ps);
        }
        let loss_values: Vec<T> = losses.iter().map(|&l| cx.tape.value(l).item()).collect();
        let (selected, routed) = match self.routing() {
            Routing::PerBatch => {
                let (i, _) = dap::route_max_loss(&loss_values)?;
                (i, losses[i])
            }
            Routing::PerSample => route_per_sample(cx, &per_sample)?,
        };
        let routed_value = cx.tape.value(routed).item();
        Ok(HeadOutputs { probs, losses, loss_values, selected, routed, routed_value })
    }

    /// λ-weighted fusion of the head distributions.
    pub fn predict<T: Scalar>(&self, cx: &mut Forward<T>, y: Var) -> Result<Prediction<T>> {
        let probs = self.forward(cx, y)?;
        let lambdas = self.lambdas(cx.store);
        let tensors: Vec<&Tensor<T>> = probs.iter().map(|&p| cx.tape.value(p)).collect();
        dap::fuse_score(&tensors, &lambdas)
    }

    pub fn update_lambdas<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) {
        if let Head::Dap(d) = self {
            d.update_lambdas(store, lr);
        }
    }
}

/// Routes each sample through its own worst head. Heads that win no sample
/// stay off the gradient path entirely.
fn route_per_sample<T: Scalar>(cx: &mut Forward<T>, per_sample: &[Var]) -> Result<(usize, Var)> {
    let batch = cx.tape.value(per_sample[0]).numel();
    let n = per_sample.len();
    let mut winners = Vec::with_capacity(batch);
    for b in 0..batch {
        let column: Vec<T> = per_sample.iter().map(|&v| cx.tape.value(v).data()[b]).collect();
        winners.push(dap::route_max_loss(&column)?.0);
    }
    let mut counts = vec![0usize; n];
    for &w in &winners {
        counts[w] += 1;
    }
    let mut total: Option<Var> = None;
    for (i, &ps) in per_sample.iter().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let mask: Vec<T> = winners.iter().map(|&w| if w == i { T::one() } else { T::zero() }).collect();
        let mask = cx.tape.constant(Tensor::new(&[batch], mask)?);
        let masked = cx.tape.mul(ps, mask)?;
        let s = cx.tape.sum(masked);
        total = Some(match total {
            Some(t) => cx.tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one sample");
    let routed = cx.tape.scale(total, T::one() / T::c(batch as f64));
    let majority = argmax(&counts.iter().map(|&c| T::c(c as f64)).collect::<Vec<T>>());
    Ok((majority, routed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kinds_parse() {
        for k in HeadKind::ALL {
            assert_eq!(HeadKind::parse(k.name()).unwrap(), k);
        }
        assert!(HeadKind::parse("attention").is_err());
    }

    #[test]
    fn gap_head_is_linear_in_constant_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = HeadConfig { bias: true, ..HeadConfig::new(HeadKind::Gap, 3) };
        let head = build_head(&cfg, &mut store, 2, 4, &mut rng).unwrap();
        let Head::Global(g) = &head else { panic!() };
        let bias = g.classifier.bias.unwrap();
        *store.value_mut(bias) = Tensor::from_f64(&[3], &[0.1, -0.2, 0.3]).unwrap();
        let c = 1.7;
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &store, Mode::Eval);
        let y = cx.tape.constant(Tensor::full(&[1, 2, 4, 4], c));
        let f = g.features(&mut cx, y).unwrap();
        let logits = g.classifier.forward(&mut cx, f).unwrap();
        let w = store.value(g.classifier.weight).data();
        let b = store.value(bias).data();
        for k in 0..3 {
            let expect = c * (w[k] + w[3 + k]) + b[k];
            assert!((tape.value(logits).data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gap_gmp_classifier_is_twice_as_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = build_head(&HeadConfig::new(HeadKind::GapGmp, 5), &mut store, 7, 4, &mut rng).unwrap();
        let Head::Global(g) = head else { panic!() };
        assert_eq!(g.classifier.in_features, 14);
        assert_eq!(store.value(g.classifier.weight).shape(), &[14, 5]);
    }

    #[test]
    fn dap_head_count_and_uniform_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = build_head(&HeadConfig::new(HeadKind::Dap, 10), &mut store, 8, 4, &mut rng).unwrap();
        assert_eq!(head.num_heads(), 4);
        assert_eq!(head.lambdas(&store), vec![0.25; 4]);
    }
}

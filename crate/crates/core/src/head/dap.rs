//! Dynamic attention pooling.
//!
//! The final feature map is average-pooled over a grid of `n = n1·n2`
//! windows. Each window's channel vector `f_i` feeds its own bias-free
//! softmax classifier `W_i`. Training back-propagates only the largest
//! per-head loss; inference fuses the head distributions with weights `λ`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Window;
use crate::nn::{kaiming, Forward, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{argmax, Tensor};

/// Probabilities below this are raised to it before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Default lower bound on every λ_i.
pub const LAMBDA_FLOOR: f64 = 1e-4;

/// How the max over head losses is taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Routing {
    /// One routed head per batch, chosen from batch-mean head losses.
    #[default]
    PerBatch,
    /// Each sample routes to its own worst head.
    PerSample,
}

impl Routing {
    pub fn name(self) -> &'static str {
        match self {
            Routing::PerBatch => "per_batch",
            Routing::PerSample => "per_sample",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_batch" => Ok(Routing::PerBatch),
            "per_sample" => Ok(Routing::PerSample),
            other => Err(Error::Config(format!("unknown routing `{other}` (per_batch | per_sample)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DapConfig {
    pub window: usize,
    pub stride: usize,
    pub ceil_mode: bool,
    pub routing: Routing,
    pub lambda_floor: f64,
}

impl Default for DapConfig {
    fn default() -> Self {
        DapConfig { window: 3, stride: 2, ceil_mode: true, routing: Routing::PerBatch, lambda_floor: LAMBDA_FLOOR }
    }
}

impl DapConfig {
    pub fn pooling(&self) -> Window {
        Window::new(self.window, self.stride, self.ceil_mode)
    }

    /// Pooled grid `(n1, n2)` on a `size × size` feature map.
    pub fn grid(&self, size: usize) -> Result<(usize, usize)> {
        let w = self.pooling();
        Ok((w.out_len(size)?, w.out_len(size)?))
    }
}

/// Pools `y` and returns the `n1·n2` window vectors `f_i`, each `[B, C]`,
/// in row-major grid order.
pub fn split_windows<T: Scalar>(tape: &mut Tape<T>, y: Var, window: Window) -> Result<Vec<Var>> {
    let pooled = tape.local_avg_pool(y, window)?;
    let s = tape.shape(pooled);
    let n = s[2] * s[3];
    if n < 1 {
        return Err(Error::Config("pooling produced no windows".into()));
    }
    (0..n).map(|i| tape.spatial_select(pooled, i)).collect()
}

/// `P_i(c | f_i) = softmax(f_i · W_i)` row-wise.
pub fn head_softmax<T: Scalar>(tape: &mut Tape<T>, features: Var, weight: Var) -> Result<Var> {
    let logits = tape.matmul(features, weight)?;
    tape.softmax(logits)
}

/// `−log(λ · P(target))` per sample, with P floored at [`PROB_FLOOR`].
/// Returns `(batch-mean loss, per-sample losses)`.
pub fn head_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, targets: &[usize], lambda: Var) -> Result<(Var, Var)> {
    let lam = tape.value(lambda).item();
    if !(lam > T::zero()) {
        return Err(Error::Domain { op: "head_loss", detail: format!("λ = {lam} must be positive") });
    }
    let picked = tape.gather(probs, targets)?;
    let floored = tape.clamp_min(picked, T::c(PROB_FLOOR));
    let log_p = tape.log(floored)?;
    let log_lam = tape.log(lambda)?;
    let log_joint = tape.add(log_p, log_lam)?;
    let per_sample = tape.neg(log_joint);
    let loss = tape.mean(per_sample);
    Ok((loss, per_sample))
}

/// Index and value of the largest loss; the lowest index wins ties.
pub fn route_max_loss<T: Scalar>(losses: &[T]) -> Result<(usize, T)> {
    if losses.is_empty() {
        return Err(Error::Contract("routing needs at least one head loss".into()));
    }
    if let Some(i) = losses.iter().position(|l| l.is_nan()) {
        return Err(Error::Numeric(format!("head {i} loss is NaN")));
    }
    let i = argmax(losses);
    Ok((i, losses[i]))
}

/// `∂loss_i/∂λ_i` for the loss form of [`head_loss`]: `−1/λ_i`. The
/// derivative does not depend on the classifier output.
pub fn lambda_gradients<T: Scalar>(lambdas: &[T]) -> Vec<T> {
    lambdas.iter().map(|&l| -T::one() / l).collect()
}

/// One descent step on every λ_i followed by projection onto
/// `{λ : Σλ = 1, λ_i ≥ floor}`.
pub fn update_lambdas<T: Scalar>(lambdas: &mut [T], lr: T, floor: T) {
    let grads = lambda_gradients(lambdas);
    for (l, g) in lambdas.iter_mut().zip(grads) {
        *l = *l - lr * g;
    }
    project_floored_simplex(lambdas, floor);
}

/// Projects onto the floored simplex by rescaling: entries that would fall
/// under `floor` are pinned to it and the rest share the remaining mass in
/// proportion to their current values.
pub fn project_floored_simplex<T: Scalar>(values: &mut [T], floor: T) {
    let n = values.len();
    if n == 0 {
        return;
    }
    debug_assert!(floor * T::c(n as f64) <= T::one(), "floor too large for {n} heads");
    for v in values.iter_mut() {
        if !(*v > floor) {
            *v = floor;
        }
    }
    let mut pinned = vec![false; n];
    loop {
        let free_mass: T = values.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(&v, _)| v).sum();
        let budget = T::one() - floor * T::c(pinned.iter().filter(|&&p| p).count() as f64);
        let scale = budget / free_mass;
        let mut newly_pinned = false;
        for (v, p) in values.iter_mut().zip(pinned.iter_mut()) {
            if !*p && *v * scale < floor {
                *p = true;
                *v = floor;
                newly_pinned = true;
            }
        }
        if !newly_pinned {
            for (v, &p) in values.iter_mut().zip(&pinned) {
                if !p {
                    *v = *v * scale;
                }
            }
            return;
        }
    }
}

/// Fused class scores and their argmax labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `[B × classes]`
    pub score: Tensor<T>,
    pub labels: Vec<usize>,
}

/// `score = Σ_i λ_i P_i`; labels are the per-row argmax, lowest class on ties.
pub fn fuse_score<T: Scalar>(probs: &[&Tensor<T>], lambdas: &[T]) -> Result<Prediction<T>> {
    if probs.is_empty() || probs.len() != lambdas.len() {
        return Err(Error::dim(
            "fuse_score",
            format!("{} head distributions with {} weights", probs.len(), lambdas.len()),
        ));
    }
    let shape = probs[0].shape();
    if shape.len() != 2 || probs.iter().any(|p| p.shape() != shape) {
        return Err(Error::dim("fuse_score", "head distributions must share a [B × classes] shape"));
    }
    let mut score = Tensor::zeros(shape);
    for (p, &l) in probs.iter().zip(lambdas) {
        for (s, &v) in score.data_mut().iter_mut().zip(p.data()) {
            *s = *s + l * v;
        }
    }
    let labels = score.data().chunks(shape[1]).map(argmax).collect();
    Ok(Prediction { score, labels })
}

/// `n` window classifiers plus their fusion weights.
#[derive(Clone, Debug)]
pub struct DapHead {
    pub config: DapConfig,
    pub grid: (usize, usize),
    pub channels: usize,
    pub num_classes: usize,
    pub classifiers: Vec<ParamId>,
    /// λ, stored as a buffer: it is updated by [`update_lambdas`], not SGD.
    pub lambdas: ParamId,
}

impl DapHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: DapConfig,
        channels: usize,
        map_size: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let grid = config.grid(map_size)?;
        let n = grid.0 * grid.1;
        if !(config.lambda_floor > 0.0) || config.lambda_floor * n as f64 > 1.0 {
            return Err(Error::Config(format!(
                "lambda_floor {} incompatible with {n} heads",
                config.lambda_floor
            )));
        }
        let classifiers = (0..n)
            .map(|i| {
                store.add_param(
                    &format!("head.dap{i}.weight"),
                    kaiming(&[channels, num_classes], channels, 1.0, rng),
                )
            })
            .collect();
        let lambdas = store.add_buffer("head.lambda", Tensor::full(&[n], T::c(1.0 / n as f64)));
        Ok(DapHead { config, grid, channels, num_classes, classifiers, lambdas })
    }

    pub fn num_heads(&self) -> usize {
        self.classifiers.len()
    }

    /// Window features and head distributions for a `[B, C, H, W]` map.
    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, y: Var) -> Result<(Vec<Var>, Vec<Var>)> {
        let features = split_windows(cx.tape, y, self.config.pooling())?;
        if features.len() != self.num_heads() {
            return Err(Error::Config(format!(
                "feature map yields {} windows but the head has {} classifiers",
                features.len(),
                self.num_heads()
            )));
        }
        let mut probs = Vec::with_capacity(features.len());
        for (&f, &w) in features.iter().zip(&self.classifiers) {
            let w = cx.bind(w);
            probs.push(head_softmax(cx.tape, f, w)?);
        }
        Ok((features, probs))
    }

    pub fn update_lambdas<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) {
        let floor = T::c(self.config.lambda_floor);
        update_lambdas(store.value_mut(self.lambdas).data_mut(), T::c(lr), floor);
    }
}

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct StatUpdate<T> {
    mean: ParamId,
    var: ParamId,
    momentum: f64,
    stats: BatchStats<T>,
}

/// State threaded through one forward pass.
///
/// The store is borrowed immutably; running-statistic updates from
/// training-mode batch norms are queued and applied with [`Forward::finish`].
pub struct Forward<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    updates: Vec<StatUpdate<T>>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Forward { tape, store, mode, updates: Vec::new() }
    }

    pub fn bind(&mut self, id: ParamId) -> Var {
        self.store.bind(self.tape, id)
    }

    /// Queued running-statistic updates, to be applied to the store.
    pub fn finish(self) -> RunningStats<T> {
        RunningStats { updates: self.updates }
    }
}

/// Deferred batch-norm running-statistic updates.
pub struct RunningStats<T> {
    updates: Vec<StatUpdate<T>>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn apply(self, store: &mut ParamStore<T>) {
        for u in self.updates {
            let m = T::c(u.momentum);
            let keep = T::one() - m;
            for (r, &b) in store.value_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in store.value_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }
}

/// Kaiming-normal initial weights: N(0, gain / fan_in).
pub fn kaiming<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, (gain / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub size: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        size: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * size * size;
        let kernel = store.add_param(
            &format!("{name}.kernel"),
            kaiming(&[out_ch, in_ch, size, size], fan_in, 2.0, rng),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_ch])));
        Conv2d { kernel, bias, in_ch, out_ch, size, stride, padding }
    }

    pub fn out_size(&self, len: usize) -> usize {
        (len + 2 * self.padding - self.size) / self.stride + 1
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: Var) -> Result<Var> {
        let k = cx.bind(self.kernel);
        let b = self.bias.map(|b| cx.bind(b));
        cx.tape.conv2d(x, k, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        BatchNorm2d {
            gamma: store.add_param(&format!("{name}.gamma"), Tensor::ones(&[ch])),
            beta: store.add_param(&format!("{name}.beta"), Tensor::zeros(&[ch])),
            running_mean: store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[ch])),
            running_var: store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[ch])),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: Var) -> Result<Var> {
        let g = cx.bind(self.gamma);
        let b = cx.bind(self.beta);
        match cx.mode {
            Mode::Train => {
                let (y, stats) = cx.tape.batch_norm(x, g, b, T::c(self.eps))?;
                cx.updates.push(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = cx.store.value(self.running_mean).data();
                let var = cx.store.value(self.running_var).data();
                cx.tape.batch_norm_eval(x, g, b, mean, var, T::c(self.eps))
            }
        }
    }
}

/// Dense map `x[B×in] · W[in×out] (+ b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_param(
            &format!("{name}.weight"),
            kaiming(&[in_features, out_features], in_features, 1.0, rng),
        );
        let bias = bias.then(|| store.add_param(&format!("{name}.bias"), Tensor::zeros(&[out_features])));
        Linear { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: Var) -> Result<Var> {
        let w = cx.bind(self.weight);
        let y = cx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = cx.bind(b);
                cx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Two 3×3 conv + batch-norm pairs with a skip connection:
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    /// 1×1 projection used when the block changes width or resolution.
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng);
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng);
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(store, &format!("{name}.proj"), in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm2d::new(store, &format!("{name}.proj_bn"), out_ch),
            )
        });
        ResidualBlock { conv1, bn1, conv2, bn2, shortcut }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Forward<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.bn1.forward(cx, h)?;
        let h = cx.tape.relu(h);
        let h = self.conv2.forward(cx, h)?;
        let h = self.bn2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x)?;
                bn.forward(cx, s)?
            }
            None => x,
        };
        if cx.tape.shape(h) != cx.tape.shape(skip) {
            return Err(Error::dim(
                "residual",
                format!("branch {:?} vs shortcut {:?}", cx.tape.shape(h), cx.tape.shape(skip)),
            ));
        }
        let sum = cx.tape.add(h, skip)?;
        Ok(cx.tape.relu(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_layer_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let conv = Conv2d::new(&mut store, "c", 3, 4, 3, 2, 1, true, &mut rng);
        *store.value_mut(conv.bias.unwrap()) = Tensor::randn(&[4], 1.0, &mut rng);
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &store, Mode::Eval);
        let xv = cx.tape.constant(x.clone());
        let y = conv.forward(&mut cx, xv).unwrap();
        let expect = reference::conv2d(&x, store.value(conv.kernel), Some(store.value(conv.bias.unwrap())), 2, 1);
        assert_eq!(tape.shape(y), expect.shape());
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-10);
    }

    #[test]
    fn zero_residual_branch_reduces_to_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let block = ResidualBlock::new(&mut store, "b", 3, 3, 1, &mut rng);
        assert!(block.shortcut.is_none());
        store.value_mut(block.conv1.kernel).fill(0.0);
        store.value_mut(block.conv2.kernel).fill(0.0);
        let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let mut tape = Tape::new();
            let mut cx = Forward::new(&mut tape, &store, mode);
            let xv = cx.tape.constant(x.clone());
            let y = block.forward(&mut cx, xv).unwrap();
            let relu = x.map(|v| v.max(0.0));
            assert!(tape.value(y).max_abs_diff(&relu) <= 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn running_stats_follow_the_moving_average() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1);
        let x = Tensor::from_f64(&[2, 1, 1, 2], &[1., 3., 5., 7.]).unwrap();
        let mut tape = Tape::new();
        let mut cx = Forward::new(&mut tape, &store, Mode::Train);
        let xv = cx.tape.constant(x);
        bn.forward(&mut cx, xv).unwrap();
        cx.finish().apply(&mut store);
        // batch mean 4, unbiased var 20/3
        assert!((store.value(bn.running_mean).item() - 0.4).abs() < 1e-12);
        assert!((store.value(bn.running_var).item() - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::num::Real;

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Relu,
    MaxPool1d,
    Dense,
    Dropout,
    Flatten,
}

/// Layer description as stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Valid padding, stride 1.
    Conv1d { filters: usize, kernel: usize },
    Relu,
    /// Non-overlapping windows, trailing remainder dropped.
    MaxPool1d { window: usize },
    Dense { units: usize },
    /// Inverted dropout.
    Dropout { rate: f64 },
    Flatten,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Conv1d { .. } => LayerKind::Conv1d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::MaxPool1d { .. } => LayerKind::MaxPool1d,
            LayerSpec::Dense { .. } => LayerKind::Dense,
            LayerSpec::Dropout { .. } => LayerKind::Dropout,
            LayerSpec::Flatten => LayerKind::Flatten,
        }
    }
}

/// Activation shape `channels x length`. Dense layers see `size x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub length: usize,
}

impl Shape {
    pub fn new(channels: usize, length: usize) -> Self {
        Self { channels, length }
    }

    pub fn size(&self) -> usize {
        self.channels * self.length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A layer resolved against its input shape, with the offset of its
/// weights in the network's flat parameter vector. Conv weights are laid out
/// `[filter][channel][tap]`, dense weights `[out][in]`, biases follow.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub input: Shape,
    pub output: Shape,
    pub offset: usize,
    pub n_params: usize,
}

/// Per-sample state a layer needs for its backward pass beyond its input and output.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Aux<T> {
    #[default]
    None,
    Argmax(Vec<usize>),
    Mask(Vec<T>),
}

impl Layer {
    pub fn resolve(spec: LayerSpec, input: Shape, offset: usize) -> Result<Self, NnError> {
        let (output, n_params) = match spec {
            LayerSpec::Conv1d { filters, kernel } => {
                if filters == 0 || kernel == 0 {
                    return Err(NnError::InvalidLayer(format!("{spec:?}")));
                }
                if input.length < kernel {
                    return Err(NnError::InputTooShort {
                        length: input.length,
                        needed: kernel,
                    });
                }
                (
                    Shape::new(filters, input.length - kernel + 1),
                    filters * input.channels * kernel + filters,
                )
            }
            LayerSpec::Relu => (input, 0),
            LayerSpec::MaxPool1d { window } => {
                if window == 0 {
                    return Err(NnError::InvalidLayer("pool window must be at least 1".into()));
                }
                if input.length < window {
                    return Err(NnError::InputTooShort {
                        length: input.length,
                        needed: window,
                    });
                }
                (Shape::new(input.channels, input.length / window), 0)
            }
            LayerSpec::Dense { units } => {
                if units == 0 {
                    return Err(NnError::InvalidLayer("dense layer needs at least one unit".into()));
                }
                if input.length != 1 {
                    return Err(NnError::ShapeMismatch(format!(
                        "dense layer expects flattened input, got {}x{}",
                        input.channels, input.length
                    )));
                }
                (Shape::new(units, 1), units * input.channels + units)
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(NnError::InvalidLayer(format!("dropout rate {rate} outside [0, 1)")));
                }
                (input, 0)
            }
            LayerSpec::Flatten => (Shape::new(input.size(), 1), 0),
        };
        Ok(Self {
            spec,
            input,
            output,
            offset,
            n_params,
        })
    }

    pub fn kind(&self) -> LayerKind {
        self.spec.kind()
    }

    /// Fan-in-scaled uniform initialisation of this layer's weights and biases.
    pub fn init<T: Real>(&self, params: &mut [T], rng: &mut ChaCha8Rng) {
        let fan_in = match self.spec {
            LayerSpec::Conv1d { kernel, .. } => self.input.channels * kernel,
            LayerSpec::Dense { .. } => self.input.channels,
            _ => return,
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        for p in &mut params[self.offset..self.offset + self.n_params] {
            *p = T::lit(rng.random_range(-bound..bound));
        }
    }

    /// Computes the output for one sample. `rng` is only consulted by dropout in train mode.
    pub fn forward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        y: &mut Vec<T>,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Aux<T> {
        y.clear();
        y.resize(self.output.size(), T::zero());
        let w = &params[self.offset..self.offset + self.n_params];
        match self.spec {
            LayerSpec::Conv1d { filters, kernel } => {
                conv_forward(w, x, y, self.input, filters, kernel);
                Aux::None
            }
            LayerSpec::Relu => {
                for (o, i) in y.iter_mut().zip(x) {
                    *o = if *i > T::zero() { *i } else { T::zero() };
                }
                Aux::None
            }
            LayerSpec::MaxPool1d { window } => {
                let (lin, lout) = (self.input.length, self.output.length);
                let mut arg = vec![0; y.len()];
                for c in 0..self.input.channels {
                    for t in 0..lout {
                        let base = c * lin + t * window;
                        let mut best = base;
                        for j in base + 1..base + window {
                            if x[j] > x[best] {
                                best = j;
                            }
                        }
                        y[c * lout + t] = x[best];
                        arg[c * lout + t] = best;
                    }
                }
                Aux::Argmax(arg)
            }
            LayerSpec::Dense { units } => {
                let n_in = self.input.channels;
                let (wm, b) = w.split_at(units * n_in);
                for (o, out) in y.iter_mut().enumerate() {
                    *out = b[o] + dot(&wm[o * n_in..(o + 1) * n_in], x);
                }
                Aux::None
            }
            LayerSpec::Dropout { rate } => {
                y.copy_from_slice(x);
                match (mode, rng) {
                    (Mode::Train, Some(rng)) if rate > 0.0 => {
                        let keep = T::lit(1.0 / (1.0 - rate));
                        let mask: Vec<T> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                            .collect();
                        for (o, m) in y.iter_mut().zip(&mask) {
                            *o = *o * *m;
                        }
                        Aux::Mask(mask)
                    }
                    _ => Aux::None,
                }
            }
            LayerSpec::Flatten => {
                y.copy_from_slice(x);
                Aux::None
            }
        }
    }

    /// Accumulates parameter gradients into `grad` (full-network layout) and
    /// writes the input gradient into `dx`.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        x: &[T],
        y: &[T],
        aux: &Aux<T>,
        dy: &[T],
        dx: &mut Vec<T>,
        grad: &mut [T],
    ) {
        dx.clear();
        dx.resize(self.input.size(), T::zero());
        let range = self.offset..self.offset + self.n_params;
        match self.spec {
            LayerSpec::Conv1d { filters, kernel } => {
                conv_backward(&params[range.clone()], x, dy, dx, &mut grad[range], self.input, filters, kernel);
            }
            LayerSpec::Relu => {
                for ((d, o), g) in dx.iter_mut().zip(y).zip(dy) {
                    *d = if *o > T::zero() { *g } else { T::zero() };
                }
            }
            LayerSpec::MaxPool1d { .. } => {
                if let Aux::Argmax(arg) = aux {
                    for (a, g) in arg.iter().zip(dy) {
                        dx[*a] = dx[*a] + *g;
                    }
                }
            }
            LayerSpec::Dense { units } => {
                let n_in = self.input.channels;
                let w = &params[range.clone()];
                let (gw, gb) = grad[range].split_at_mut(units * n_in);
                for o in 0..units {
                    let g = dy[o];
                    gb[o] = gb[o] + g;
                    if g == T::zero() {
                        continue;
                    }
                    axpy(g, x, &mut gw[o * n_in..(o + 1) * n_in]);
                    axpy(g, &w[o * n_in..(o + 1) * n_in], dx);
                }
            }
            LayerSpec::Dropout { .. } => match aux {
                Aux::Mask(mask) => {
                    for ((d, m), g) in dx.iter_mut().zip(mask).zip(dy) {
                        *d = *g * *m;
                    }
                }
                _ => dx.copy_from_slice(dy),
            },
            LayerSpec::Flatten => dx.copy_from_slice(dy),
        }
    }
}

/// Dot product with eight independent partial sums; fixed summation order.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (pa, pb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + pa[l] * pb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..n {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += alpha * x`.
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

fn conv_forward<T: Real>(w: &[T], x: &[T], y: &mut [T], input: Shape, filters: usize, kernel: usize) {
    let (cin, lin) = (input.channels, input.length);
    let lout = lin - kernel + 1;
    let (wk, b) = w.split_at(filters * cin * kernel);
    for f in 0..filters {
        let yf = &mut y[f * lout..(f + 1) * lout];
        yf.iter_mut().for_each(|v| *v = b[f]);
        for c in 0..cin {
            for k in 0..kernel {
                let wv = wk[(f * cin + c) * kernel + k];
                let xs = &x[c * lin + k..c * lin + k + lout];
                axpy(wv, xs, yf);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    w: &[T],
    x: &[T],
    dy: &[T],
    dx: &mut [T],
    grad: &mut [T],
    input: Shape,
    filters: usize,
    kernel: usize,
) {
    let (cin, lin) = (input.channels, input.length);
    let lout = lin - kernel + 1;
    let nw = filters * cin * kernel;
    let (wk, _) = w.split_at(nw);
    let (gw, gb) = grad.split_at_mut(nw);
    for f in 0..filters {
        let dyf = &dy[f * lout..(f + 1) * lout];
        gb[f] = gb[f] + dyf.iter().copied().sum::<T>();
        for c in 0..cin {
            for k in 0..kernel {
                let i = (f * cin + c) * kernel + k;
                let xs = &x[c * lin + k..c * lin + k + lout];
                gw[i] = gw[i] + dot(dyf, xs);
                axpy(wk[i], dyf, &mut dx[c * lin + k..c * lin + k + lout]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn run(spec: LayerSpec, input: Shape, params: &[f64], x: &[f64]) -> Vec<f64> {
        let layer = Layer::resolve(spec, input, 0).unwrap();
        let mut y = Vec::new();
        layer.forward(params, x, &mut y, Mode::Eval, None);
        y
    }

    #[test]
    fn conv_relu_hand_examples() {
        let conv = LayerSpec::Conv1d { filters: 1, kernel: 2 };
        let pre = run(conv, Shape::new(1, 3), &[1.0, -1.0, 0.0], &[3.0, 1.0, 4.0]);
        assert_eq!(pre, vec![2.0, -3.0]);
        assert_eq!(run(LayerSpec::Relu, Shape::new(1, 2), &[], &pre), vec![2.0, 0.0]);

        let zero = run(conv, Shape::new(1, 3), &[1.0, -1.0, 0.0], &[0.0; 3]);
        assert_eq!(zero, vec![0.0, 0.0]);

        let one = LayerSpec::Conv1d { filters: 1, kernel: 1 };
        let pre = run(one, Shape::new(1, 2), &[1.0, -5.0], &[3.0, 7.0]);
        assert_eq!(run(LayerSpec::Relu, Shape::new(1, 2), &[], &pre), vec![0.0, 2.0]);
    }

    #[test]
    fn conv_sums_over_channels() {
        // two input channels, one filter with taps [[1, 2], [0, -1]], bias 0.5
        let y = run(
            LayerSpec::Conv1d { filters: 1, kernel: 2 },
            Shape::new(2, 3),
            &[1.0, 2.0, 0.0, -1.0, 0.5],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
        );
        assert_eq!(y, vec![1.0 + 4.0 - 5.0 + 0.5, 2.0 + 6.0 - 6.0 + 0.5]);
    }

    #[test]
    fn maxpool_examples() {
        let p = |w: usize, x: &[f64]| run(LayerSpec::MaxPool1d { window: w }, Shape::new(1, x.len()), &[], x);
        assert_eq!(p(2, &[4.0, 1.0, 3.0, 2.0]), vec![4.0, 3.0]);
        assert_eq!(p(1, &[5.0]), vec![5.0]);
        assert_eq!(p(2, &[1.0, 2.0, 3.0]), vec![2.0]);
        assert!(Layer::resolve(LayerSpec::MaxPool1d { window: 0 }, Shape::new(1, 3), 0).is_err());
    }

    #[test]
    fn conv_rejects_short_input() {
        let err = Layer::resolve(LayerSpec::Conv1d { filters: 4, kernel: 7 }, Shape::new(2, 3), 0).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn dropout_modes() {
        let layer = Layer::resolve(LayerSpec::Dropout { rate: 0.5 }, Shape::new(10_000, 1), 0).unwrap();
        let x = vec![1.0f64; 10_000];
        let mut y = Vec::new();
        layer.forward(&[], &x, &mut y, Mode::Eval, None);
        assert_eq!(y, x);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        layer.forward(&[], &x, &mut y, Mode::Train, Some(&mut rng));
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        assert!((0.97..=1.03).contains(&mean), "{mean}");
        assert!(y.iter().all(|v| *v == 0.0 || *v == 2.0));

        let none = Layer::resolve(LayerSpec::Dropout { rate: 0.0 }, Shape::new(5, 1), 0).unwrap();
        let x = vec![0.3f64, -1.0, 2.0, 0.0, 7.0];
        none.forward(&[], &x, &mut y, Mode::Train, Some(&mut rng));
        assert_eq!(y, x);
        assert!(Layer::resolve(LayerSpec::Dropout { rate: 1.0 }, Shape::new(5, 1), 0).is_err());
    }

    #[test]
    fn dense_is_affine() {
        let y = run(
            LayerSpec::Dense { units: 2 },
            Shape::new(3, 1),
            &[1.0, 0.0, 2.0, -1.0, 1.0, 0.0, 0.5, -0.5],
            &[1.0, 2.0, 3.0],
        );
        assert_eq!(y, vec![7.5, 0.5]);
    }

    #[test]
    fn dot_matches_naive_sum() {
        let a: Vec<f64> = (0..19).map(|i| i as f64 * 0.5 - 3.0).collect();
        let b: Vec<f64> = (0..19).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}

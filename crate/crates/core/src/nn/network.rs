use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::num::Real;

use super::layers::{Aux, Layer, LayerKind, LayerSpec, Mode, Shape};
use super::NnError;

pub const DEFAULT_DROPOUT: f64 = 0.2;

/// Shared trunk followed by one branch per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_length: usize,
    pub trunk: Vec<LayerSpec>,
    pub branches: Vec<Vec<LayerSpec>>,
}

/// Activations recorded by a forward pass of one sample.
#[derive(Debug, Clone)]
pub struct Cache<T> {
    trunk_acts: Vec<Vec<T>>,
    trunk_aux: Vec<Aux<T>>,
    branch_acts: Vec<Vec<Vec<T>>>,
    branch_aux: Vec<Vec<Aux<T>>>,
}

impl<T: Real> Cache<T> {
    pub fn outputs(&self) -> Vec<T> {
        self.branch_acts.iter().map(|b| b.last().unwrap()[0]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    trunk: Vec<Layer>,
    branches: Vec<Vec<Layer>>,
    params: Vec<T>,
    mode: Mode,
}

impl<T: Real> Network<T> {
    /// Resolves shapes and initialises all weights from `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self, NnError> {
        let mut net = Self::uninit(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.trunk.iter().chain(net.branches.iter().flatten()) {
            layer.init(&mut net.params, &mut rng);
        }
        Ok(net)
    }

    pub fn from_params(arch: Architecture, params: Vec<T>) -> Result<Self, NnError> {
        let mut net = Self::uninit(arch)?;
        if params.len() != net.params.len() {
            return Err(NnError::ShapeMismatch(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    fn uninit(arch: Architecture) -> Result<Self, NnError> {
        if arch.input_channels == 0 || arch.input_length == 0 {
            return Err(NnError::Architecture("empty input".into()));
        }
        if arch.branches.is_empty() {
            return Err(NnError::Architecture("at least one branch required".into()));
        }
        let mut offset = 0;
        let mut resolve = |specs: &[LayerSpec], mut shape: Shape| -> Result<(Vec<Layer>, Shape), NnError> {
            let mut layers = Vec::with_capacity(specs.len());
            for spec in specs {
                let layer = Layer::resolve(*spec, shape, offset)?;
                offset += layer.n_params;
                shape = layer.output;
                layers.push(layer);
            }
            Ok((layers, shape))
        };
        let (trunk, trunk_out) = resolve(&arch.trunk, Shape::new(arch.input_channels, arch.input_length))?;
        let mut branches = Vec::with_capacity(arch.branches.len());
        for (j, specs) in arch.branches.iter().enumerate() {
            let (layers, out) = resolve(specs, trunk_out)?;
            if out != Shape::new(1, 1) {
                return Err(NnError::Architecture(format!(
                    "branch {j} ends in {}x{}, expected a scalar",
                    out.channels, out.length
                )));
            }
            branches.push(layers);
        }
        Ok(Self {
            arch,
            trunk,
            branches,
            params: vec![T::zero(); offset],
            mode: Mode::Eval,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.branches.len()
    }

    pub fn input_size(&self) -> usize {
        self.arch.input_channels * self.arch.input_length
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// ReLU on/off states and pooling argmaxes of a cached pass, used to detect kinks.
    pub fn pattern(&self, cache: &Cache<T>) -> Vec<usize> {
        let mut out = Vec::new();
        let mut push = |layers: &[Layer], acts: &[Vec<T>], aux: &[Aux<T>]| {
            for (i, layer) in layers.iter().enumerate() {
                match (&aux[i], layer.kind()) {
                    (Aux::Argmax(arg), _) => out.extend_from_slice(arg),
                    (_, LayerKind::Relu) => out.extend(acts[i].iter().map(|v| usize::from(*v > T::zero()))),
                    _ => {}
                }
            }
        };
        push(&self.trunk, &cache.trunk_acts, &cache.trunk_aux);
        for (j, layers) in self.branches.iter().enumerate() {
            push(layers, &cache.branch_acts[j], &cache.branch_aux[j]);
        }
        out
    }

    pub fn trunk_layers(&self) -> &[Layer] {
        &self.trunk
    }

    pub fn branch_layers(&self, j: usize) -> &[Layer] {
        &self.branches[j]
    }

    pub fn trunk_params(&self) -> Range<usize> {
        span(&self.trunk)
    }

    pub fn branch_params(&self, j: usize) -> Range<usize> {
        span(&self.branches[j])
    }

    /// Sets the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<(), NnError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NnError::InvalidLayer(format!("dropout rate {rate} outside [0, 1)")));
        }
        let set = |spec: &mut LayerSpec| {
            if let LayerSpec::Dropout { rate: r } = spec {
                *r = rate;
            }
        };
        self.arch.trunk.iter_mut().for_each(set);
        self.arch.branches.iter_mut().flatten().for_each(set);
        self.trunk.iter_mut().for_each(|l| set(&mut l.spec));
        self.branches.iter_mut().flatten().for_each(|l| set(&mut l.spec));
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            trunk: self.trunk.clone(),
            branches: self.branches.clone(),
            params: self.params.iter().map(|p| U::lit(p.to_f64_lossy())).collect(),
            mode: self.mode,
        }
    }

    /// One-sample forward pass in the network's current mode.
    pub fn forward(&self, x: &[T], rng: Option<&mut ChaCha8Rng>) -> Result<Cache<T>, NnError> {
        self.forward_with(x, self.mode, rng)
    }

    pub fn forward_with(&self, x: &[T], mode: Mode, mut rng: Option<&mut ChaCha8Rng>) -> Result<Cache<T>, NnError> {
        if x.len() != self.input_size() {
            return Err(NnError::ShapeMismatch(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input_size()
            )));
        }
        let mut run = |layers: &[Layer], input: Vec<T>| {
            let mut acts = Vec::with_capacity(layers.len() + 1);
            let mut aux = Vec::with_capacity(layers.len());
            acts.push(input);
            for layer in layers {
                let mut y = Vec::new();
                aux.push(layer.forward(&self.params, acts.last().unwrap(), &mut y, mode, rng.as_deref_mut()));
                acts.push(y);
            }
            (acts, aux)
        };
        let (trunk_acts, trunk_aux) = run(&self.trunk, x.to_vec());
        let features = trunk_acts.last().unwrap().clone();
        let mut branch_acts = Vec::with_capacity(self.branches.len());
        let mut branch_aux = Vec::with_capacity(self.branches.len());
        for layers in &self.branches {
            let (a, x) = run(layers, features.clone());
            branch_acts.push(a);
            branch_aux.push(x);
        }
        Ok(Cache {
            trunk_acts,
            trunk_aux,
            branch_acts,
            branch_aux,
        })
    }

    /// Eval-mode outputs; consumes no randomness.
    pub fn infer(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        Ok(self.forward_with(x, Mode::Eval, None)?.outputs())
    }

    /// Trunk output for one sample in eval mode.
    pub fn features(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        let cache = self.forward_with(x, Mode::Eval, None)?;
        Ok(cache.trunk_acts.last().unwrap().clone())
    }

    /// Accumulates `d(objective)/d(params)` into `grad` given the output
    /// gradient `dout` of one cached sample. Returns the input gradient.
    pub fn backward(&self, cache: &Cache<T>, dout: &[T], grad: &mut [T]) -> Result<Vec<T>, NnError> {
        if cache.branch_acts.len() != self.branches.len() || cache.trunk_acts.len() != self.trunk.len() + 1 {
            return Err(NnError::NoForwardPass);
        }
        if dout.len() != self.branches.len() || grad.len() != self.params.len() {
            return Err(NnError::ShapeMismatch("gradient buffer sizes".into()));
        }
        let back = |layers: &[Layer], acts: &[Vec<T>], aux: &[Aux<T>], mut dy: Vec<T>, grad: &mut [T]| {
            let mut dx = Vec::new();
            for (i, layer) in layers.iter().enumerate().rev() {
                layer.backward(&self.params, &acts[i], &acts[i + 1], &aux[i], &dy, &mut dx, grad);
                std::mem::swap(&mut dx, &mut dy);
            }
            dy
        };
        let mut dfeat = vec![T::zero(); cache.trunk_acts.last().unwrap().len()];
        for (j, layers) in self.branches.iter().enumerate() {
            let d = back(layers, &cache.branch_acts[j], &cache.branch_aux[j], vec![dout[j]], grad);
            for (a, b) in dfeat.iter_mut().zip(&d) {
                *a = *a + *b;
            }
        }
        Ok(back(&self.trunk, &cache.trunk_acts, &cache.trunk_aux, dfeat, grad))
    }

    /// Forward, RMS loss and summed gradient over a batch. Samples are
    /// processed in parallel into separate buffers which are then reduced
    /// pairwise in index order, so the result does not depend on the
    /// thread count. `rngs[i]` drives dropout for sample `i` in train mode.
    pub fn batch_gradient(
        &self,
        xs: &[&[T]],
        targets: &[&[T]],
        mode: Mode,
        rngs: Option<Vec<ChaCha8Rng>>,
        buffers: &mut Vec<Vec<T>>,
    ) -> Result<(T, T, Vec<T>), NnError> {
        let n = xs.len();
        if n == 0 || targets.len() != n {
            return Err(NnError::EmptyBatch);
        }
        let mut rngs: Vec<Option<ChaCha8Rng>> = match rngs {
            Some(r) => r.into_iter().map(Some).collect(),
            None => vec![None; n],
        };
        let caches = xs
            .par_iter()
            .zip(rngs.par_iter_mut())
            .map(|(x, r)| self.forward_with(x, mode, r.as_mut()))
            .collect::<Result<Vec<_>, _>>()?;
        let k = self.n_outputs();
        let mut pred = Vec::with_capacity(n * k);
        let mut tgt = Vec::with_capacity(n * k);
        for (c, t) in caches.iter().zip(targets) {
            pred.extend(c.outputs());
            tgt.extend_from_slice(t);
        }
        let (loss, dpred) = super::loss::rms_loss(&pred, &tgt)?;
        let sq = loss * loss * T::lit((n * k) as f64);

        buffers.resize_with(n, Vec::new);
        buffers.par_iter_mut().take(n).for_each(|b| {
            b.clear();
            b.resize(self.params.len(), T::zero());
        });
        buffers[..n]
            .par_iter_mut()
            .zip(caches.par_iter())
            .enumerate()
            .try_for_each(|(i, (b, c))| self.backward(c, &dpred[i * k..(i + 1) * k], b).map(|_| ()))?;
        let mut stride = 1;
        while stride < n {
            let mut i = 0;
            while i + stride < n {
                let (lo, hi) = buffers.split_at_mut(i + stride);
                lo[i].par_iter_mut().zip(hi[0].par_iter()).with_min_len(4096).for_each(|(a, b)| *a = *a + *b);
                i += 2 * stride;
            }
            stride *= 2;
        }
        Ok((loss, sq, buffers[0].clone()))
    }
}

fn span(layers: &[Layer]) -> Range<usize> {
    let start = layers.first().map_or(0, |l| l.offset);
    let end = layers.last().map_or(start, |l| l.offset + l.n_params);
    start..end
}

/// Convolutional trunk of two conv/relu/pool stages and, per output, a
/// conv/relu/pool stage, flatten, dense 64 with ReLU, dropout and a scalar head.
pub fn cnn_architecture(
    input_channels: usize,
    input_length: usize,
    n_outputs: usize,
    dropout: f64,
) -> Result<Architecture, NnError> {
    if n_outputs == 0 {
        return Err(NnError::Architecture("at least one branch required".into()));
    }
    let trunk = vec![
        LayerSpec::Conv1d { filters: 16, kernel: 7 },
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { window: 2 },
        LayerSpec::Conv1d { filters: 32, kernel: 5 },
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { window: 2 },
    ];
    let branch = vec![
        LayerSpec::Conv1d { filters: 16, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool1d { window: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 64 },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { units: 1 },
    ];
    let arch = Architecture {
        input_channels,
        input_length,
        trunk,
        branches: vec![branch; n_outputs],
    };
    Network::<f64>::uninit(arch.clone())?;
    Ok(arch)
}

/// Dense baseline: flatten, three equal-width hidden layers each followed
/// by ReLU and dropout, then a scalar head per output. The width is the one whose
/// parameter count is closest to `target_params`.
pub fn mlp_architecture(
    input_channels: usize,
    input_length: usize,
    n_outputs: usize,
    dropout: f64,
    target_params: usize,
) -> Result<Architecture, NnError> {
    if n_outputs == 0 {
        return Err(NnError::Architecture("at least one branch required".into()));
    }
    let n_in = input_channels * input_length;
    let count = |w: usize| n_in * w + w + 2 * (w * w + w) + n_outputs * (w + 1);
    let mut width = 1;
    while count(width + 1) <= target_params {
        width += 1;
    }
    if target_params.abs_diff(count(width + 1)) < target_params.abs_diff(count(width)) {
        width += 1;
    }
    let trunk = vec![
        LayerSpec::Flatten,
        LayerSpec::Dense { units: width },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { units: width },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
        LayerSpec::Dense { units: width },
        LayerSpec::Relu,
        LayerSpec::Dropout { rate: dropout },
    ];
    Ok(Architecture {
        input_channels,
        input_length,
        trunk,
        branches: vec![vec![LayerSpec::Dense { units: 1 }]; n_outputs],
    })
}

pub fn build_cnn<T: Real>(
    input_channels: usize,
    input_length: usize,
    n_outputs: usize,
    seed: u64,
) -> Result<Network<T>, NnError> {
    Network::new(cnn_architecture(input_channels, input_length, n_outputs, DEFAULT_DROPOUT)?, seed)
}

/// Dense baseline sized to match the CNN built with the same arguments.
pub fn build_mlp<T: Real>(
    input_channels: usize,
    input_length: usize,
    n_outputs: usize,
    seed: u64,
) -> Result<Network<T>, NnError> {
    let cnn = Network::<f32>::uninit(cnn_architecture(input_channels, input_length, n_outputs, DEFAULT_DROPOUT)?)?;
    let arch = mlp_architecture(input_channels, input_length, n_outputs, DEFAULT_DROPOUT, cnn.n_params())?;
    Network::new(arch, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn input(len: usize, phase: f64) -> Vec<f64> {
        (0..len).map(|i| ((i as f64) * 0.37 + phase).sin()).collect()
    }

    #[test]
    fn default_sizes_are_comparable() {
        let cnn = build_cnn::<f32>(2, 300, 4, 0).unwrap();
        let mlp = build_mlp::<f32>(2, 300, 4, 0).unwrap();
        assert_eq!(cnn.n_params(), 148_820);
        let ratio = mlp.n_params() as f64 / cnn.n_params() as f64;
        assert!((0.8..=1.2).contains(&ratio), "{ratio}");
        assert_eq!(cnn.n_outputs(), 4);
        assert_eq!(mlp.n_outputs(), 4);
    }

    #[test]
    fn single_output_has_one_branch() {
        let net = build_cnn::<f64>(2, 301, 1, 0).unwrap();
        assert_eq!(net.n_outputs(), 1);
        assert_eq!(net.infer(&input(602, 0.0)).unwrap().len(), 1);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let err = build_cnn::<f64>(1, 3, 4, 0).unwrap_err();
        assert!(err.to_string().contains("input too short"), "{err}");
        assert!(build_cnn::<f64>(2, 301, 0, 0).is_err());
    }

    #[test]
    fn branch_weights_only_move_their_output() {
        let mut net = build_cnn::<f64>(2, 64, 3, 5).unwrap();
        let x = input(128, 0.3);
        let before = net.infer(&x).unwrap();
        let r = net.branch_params(1);
        for p in &mut net.params_mut()[r] {
            *p += 0.05;
        }
        let after = net.infer(&x).unwrap();
        assert_eq!(after[0], before[0]);
        assert_ne!(after[1], before[1]);
        assert_eq!(after[2], before[2]);

        let r = net.trunk_params();
        for p in &mut net.params_mut()[r] {
            *p *= 1.1;
        }
        let moved = net.infer(&x).unwrap();
        assert!(moved.iter().zip(&after).all(|(a, b)| a != b));
    }

    #[test]
    fn pooled_shift_only_moves_boundary_features() {
        // One conv tap of weight 1 and a pool of 2: shifting the input by the
        // pool stride shifts the pooled features by one slot.
        let arch = Architecture {
            input_channels: 1,
            input_length: 16,
            trunk: vec![
                LayerSpec::Conv1d { filters: 1, kernel: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { window: 2 },
            ],
            branches: vec![vec![LayerSpec::Flatten, LayerSpec::Dense { units: 1 }]],
        };
        let mut net = Network::<f64>::new(arch, 0).unwrap();
        net.params_mut()[..2].copy_from_slice(&[1.0, 0.0]);
        let x: Vec<f64> = (0..16).map(|i| ((i * 7) % 5) as f64).collect();
        let mut shifted = vec![0.0; 16];
        shifted[2..].copy_from_slice(&x[..14]);
        let (a, b) = (net.features(&x).unwrap(), net.features(&shifted).unwrap());
        assert_eq!(a.len(), 8);
        assert_eq!(&b[1..], &a[..7]);
        assert_eq!(b[0], 0.0);
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let net = build_mlp::<f64>(2, 40, 2, 1).unwrap();
        let x = input(80, 1.0);
        let y = net.infer(&x).unwrap();
        let mut bufs = Vec::new();
        let (loss, _, g) = net.batch_gradient(&[&x], &[&y], Mode::Eval, None, &mut bufs).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn dead_relu_blocks_incoming_gradient() {
        let arch = Architecture {
            input_channels: 1,
            input_length: 3,
            trunk: vec![LayerSpec::Flatten, LayerSpec::Dense { units: 2 }, LayerSpec::Relu],
            branches: vec![vec![LayerSpec::Dense { units: 1 }]],
        };
        let mut net = Network::<f64>::new(arch, 2).unwrap();
        // unit 1 has a large negative bias so it never fires
        net.params_mut()[7] = -100.0;
        let xs = [vec![0.5, 1.0, -0.2], vec![1.5, -1.0, 0.3]];
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let t = [1.0f64];
        let mut bufs = Vec::new();
        let (_, _, g) = net.batch_gradient(&refs, &[&t, &t], Mode::Eval, None, &mut bufs).unwrap();
        assert!(g[3..6].iter().all(|v| *v == 0.0));
        assert_eq!(g[7], 0.0);
        assert!(g[0..3].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_needs_forward_cache() {
        let net = build_mlp::<f64>(1, 40, 2, 0).unwrap();
        let other = build_mlp::<f64>(1, 40, 3, 0).unwrap();
        let cache = other.forward_with(&[0.0; 40], Mode::Eval, None).unwrap();
        let mut g = vec![0.0; net.n_params()];
        assert!(matches!(net.backward(&cache, &[1.0, 1.0], &mut g), Err(NnError::NoForwardPass)));
    }

    #[test]
    fn batch_gradient_is_order_stable() {
        let net = build_cnn::<f32>(2, 40, 2, 3).unwrap();
        let xs: Vec<Vec<f32>> = (0..7).map(|i| input(80, i as f64).iter().map(|v| *v as f32).collect()).collect();
        let refs: Vec<&[f32]> = xs.iter().map(|v| v.as_slice()).collect();
        let t = [0.3f32, 0.7];
        let ts = vec![&t[..]; 7];
        let mut bufs = Vec::new();
        let a = net.batch_gradient(&refs, &ts, Mode::Eval, None, &mut bufs).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| net.batch_gradient(&refs, &ts, Mode::Eval, None, &mut Vec::new()).unwrap());
        assert_eq!(a.2, b.2);
        assert_eq!(a.0, b.0);
    }
}

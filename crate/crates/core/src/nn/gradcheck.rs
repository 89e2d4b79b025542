use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Aux, Layer, LayerSpec, Mode, Shape};
use super::loss::rms_loss;
use super::network::Network;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub rel_tol: f64,
    /// Absolute tolerance used where both gradients are below `small`.
    pub abs_tol: f64,
    pub small: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
            small: 1e-2,
            mode: Mode::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because a ReLU or pooling decision flipped
    /// between the two probe points.
    pub skipped: usize,
    pub failures: Vec<(usize, f64, f64)>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / (self.checked + self.skipped).max(1) as f64
    }

    fn compare(&mut self, index: usize, analytic: f64, numeric: f64, opts: &GradCheckOptions) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let ok = if scale < opts.small {
            diff <= opts.abs_tol
        } else {
            let rel = diff / scale;
            self.max_rel_error = self.max_rel_error.max(rel);
            rel <= opts.rel_tol
        };
        if !ok {
            self.failures.push((index, analytic, numeric));
        }
    }
}

fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn batch_loss(
    net: &Network<f64>,
    xs: &[Vec<f64>],
    targets: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<(f64, Vec<usize>), NnError> {
    let mut pred = Vec::new();
    let mut tgt = Vec::new();
    let mut pattern = Vec::new();
    for (i, (x, t)) in xs.iter().zip(targets).enumerate() {
        let mut rng = sample_rng(opts.seed, i);
        let cache = net.forward_with(x, opts.mode, Some(&mut rng))?;
        pred.extend(cache.outputs());
        tgt.extend_from_slice(t);
        pattern.extend(net.pattern(&cache));
    }
    Ok((rms_loss(&pred, &tgt)?.0, pattern))
}

/// Compares the batch RMS-loss gradient of every weight against central
/// differences. Dropout masks are replayed identically at each probe.
pub fn check_network(
    net: &Network<f64>,
    xs: &[Vec<f64>],
    targets: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, NnError> {
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let trefs: Vec<&[f64]> = targets.iter().map(|v| v.as_slice()).collect();
    let rngs = (0..xs.len()).map(|i| sample_rng(opts.seed, i)).collect();
    let (_, _, grad) = net.batch_gradient(&refs, &trefs, opts.mode, Some(rngs), &mut Vec::new())?;
    let (_, base) = batch_loss(net, xs, targets, opts)?;

    let mut probe = net.clone();
    let mut report = GradCheckReport::default();
    for j in 0..net.n_params() {
        let p = net.params()[j];
        probe.params_mut()[j] = p + opts.eps;
        let (hi, pat_hi) = batch_loss(&probe, xs, targets, opts)?;
        probe.params_mut()[j] = p - opts.eps;
        let (lo, pat_lo) = batch_loss(&probe, xs, targets, opts)?;
        probe.params_mut()[j] = p;
        if pat_hi != base || pat_lo != base {
            report.skipped += 1;
            continue;
        }
        report.compare(j, grad[j], (hi - lo) / (2.0 * opts.eps), opts);
    }
    Ok(report)
}

fn layer_objective(
    layer: &Layer,
    params: &[f64],
    x: &[f64],
    c: &[f64],
    opts: &GradCheckOptions,
) -> (f64, Vec<f64>, Aux<f64>, Vec<usize>) {
    let mut y = Vec::new();
    let mut rng = sample_rng(opts.seed, 0);
    let aux = layer.forward(params, x, &mut y, opts.mode, Some(&mut rng));
    let pattern = match (&aux, layer.spec) {
        (Aux::Argmax(a), _) => a.clone(),
        (_, LayerSpec::Relu) => x.iter().map(|v| usize::from(*v > 0.0)).collect(),
        _ => Vec::new(),
    };
    let f = y.iter().zip(c).map(|(a, b)| a * b).sum();
    (f, y, aux, pattern)
}

/// Checks one layer on a random instance against the objective `sum(c * y)`
/// for random `c`, covering both weight and input gradients.
pub fn check_layer(spec: LayerSpec, input: Shape, opts: &GradCheckOptions) -> Result<GradCheckReport, NnError> {
    let layer = Layer::resolve(spec, input, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6c_6179_6572);
    let mut params = vec![0.0; layer.n_params];
    layer.init(&mut params, &mut rng);
    for p in &mut params {
        *p += rng.random_range(-0.1..0.1);
    }
    let mut x: Vec<f64> = (0..input.size()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..layer.output.size()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, y, aux, base) = layer_objective(&layer, &params, &x, &c, opts);
    let mut grad = vec![0.0; layer.n_params];
    let mut dx = Vec::new();
    layer.backward(&params, &x, &y, &aux, &c, &mut dx, &mut grad);

    let mut report = GradCheckReport::default();
    for j in 0..layer.n_params {
        let p = params[j];
        params[j] = p + opts.eps;
        let (hi, _, _, ph) = layer_objective(&layer, &params, &x, &c, opts);
        params[j] = p - opts.eps;
        let (lo, _, _, pl) = layer_objective(&layer, &params, &x, &c, opts);
        params[j] = p;
        if ph != base || pl != base {
            report.skipped += 1;
            continue;
        }
        report.compare(j, grad[j], (hi - lo) / (2.0 * opts.eps), opts);
    }
    for i in 0..x.len() {
        let v = x[i];
        x[i] = v + opts.eps;
        let (hi, _, _, ph) = layer_objective(&layer, &params, &x, &c, opts);
        x[i] = v - opts.eps;
        let (lo, _, _, pl) = layer_objective(&layer, &params, &x, &c, opts);
        x[i] = v;
        if ph != base || pl != base {
            report.skipped += 1;
            continue;
        }
        report.compare(layer.n_params + i, dx[i], (hi - lo) / (2.0 * opts.eps), opts);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_kind_passes() {
        let cases = [
            (LayerSpec::Conv1d { filters: 3, kernel: 4 }, Shape::new(2, 11)),
            (LayerSpec::Relu, Shape::new(2, 9)),
            (LayerSpec::MaxPool1d { window: 3 }, Shape::new(2, 10)),
            (LayerSpec::Dense { units: 5 }, Shape::new(7, 1)),
            (LayerSpec::Dropout { rate: 0.3 }, Shape::new(12, 1)),
            (LayerSpec::Flatten, Shape::new(3, 4)),
        ];
        for seed in 0..5 {
            for (spec, shape) in cases {
                let opts = GradCheckOptions { seed, ..Default::default() };
                let r = check_layer(spec, shape, &opts).unwrap();
                assert!(r.passed(), "{spec:?} seed {seed}: {:?}", r.failures);
                assert!(r.skipped_fraction() < 0.1, "{spec:?}: {}", r.skipped);
            }
        }
    }
}

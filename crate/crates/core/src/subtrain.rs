//! Dense-network training engine for substitute models.
//!
//! Weights are stored `in x out`, row-major, matching the victim's packed
//! matrices. Gradients are computed by hand-written reverse-mode passes with a
//! fixed summation order, so a seed fully determines a training run.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::bitprofile::{LeakProfile, WeightSetClass};
use crate::error::{Error, Result};
use crate::seeds;
use crate::victim_runtime::QuantizedModel;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `inputs x outputs`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TinyNet {
    pub layers: Vec<Dense>,
}

impl TinyNet {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases, ReLU on
    /// every layer but the last.
    pub fn init_uniform<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Dense {
                    inputs: w[0],
                    outputs: w[1],
                    weights: (0..w[0] * w[1]).map(|_| rng.random_range(-bound..bound)).collect(),
                    bias: vec![0.0; w[1]],
                    relu: i + 2 < dims.len(),
                }
            })
            .collect();
        TinyNet { layers }
    }

    pub fn from_quantized(model: &QuantizedModel) -> Self {
        let n = model.layers.len();
        let layers = model
            .layers
            .iter()
            .zip(&model.biases)
            .enumerate()
            .map(|(i, (l, b))| Dense {
                inputs: l.rows,
                outputs: l.cols,
                weights: l.dequantized(),
                bias: b.clone(),
                relu: i + 1 < n,
            })
            .collect();
        TinyNet { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(|l| l.inputs).collect();
        if let Some(last) = self.layers.last() {
            d.push(last.outputs);
        }
        d
    }

    pub fn num_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Activations of every layer for a batch of `n` rows; entry 0 is the input.
    fn forward_all(&self, x: &[f64], n: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let input = acts.last().unwrap();
            let mut out = vec![0.0; n * layer.outputs];
            for s in 0..n {
                let xi = &input[s * layer.inputs..(s + 1) * layer.inputs];
                let zo = &mut out[s * layer.outputs..(s + 1) * layer.outputs];
                zo.copy_from_slice(&layer.bias);
                for (i, &xv) in xi.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    for (z, &w) in zo.iter_mut().zip(wrow) {
                        *z += xv * w;
                    }
                }
                if layer.relu {
                    for z in zo.iter_mut() {
                        *z = z.max(0.0);
                    }
                }
            }
            acts.push(out);
        }
        acts
    }

    pub fn logits(&self, x: &[f64], n: usize) -> Vec<f64> {
        self.forward_all(x, n).pop().unwrap()
    }

    pub fn predict(&self, x: &[f64], n: usize) -> Vec<usize> {
        let c = self.classes();
        self.logits(x, n).chunks(c).map(argmax).collect()
    }

    /// Mean cross-entropy and its gradients with respect to weights, biases
    /// and inputs.
    fn backward(&self, x: &[f64], y: &[usize]) -> (f64, Grads, Vec<f64>) {
        let n = y.len();
        let acts = self.forward_all(x, n);
        let c = self.classes();
        let logits = acts.last().unwrap();
        let mut loss = 0.0;
        let mut delta = vec![0.0; n * c];
        for s in 0..n {
            let z = &logits[s * c..(s + 1) * c];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            let lse = m + sum.ln();
            loss += lse - z[y[s]];
            for k in 0..c {
                delta[s * c + k] = ((z[k] - lse).exp() - if k == y[s] { 1.0 } else { 0.0 }) / n as f64;
            }
        }
        loss /= n as f64;

        let mut grads = Grads::zeros(self);
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let input = &acts[li];
            let gw = &mut grads.weights[li];
            let gb = &mut grads.bias[li];
            let mut prev = vec![0.0; n * layer.inputs];
            for s in 0..n {
                let d = &delta[s * layer.outputs..(s + 1) * layer.outputs];
                let xi = &input[s * layer.inputs..(s + 1) * layer.inputs];
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for i in 0..layer.inputs {
                    let wrow = &layer.weights[i * layer.outputs..(i + 1) * layer.outputs];
                    let grow = &mut gw[i * layer.outputs..(i + 1) * layer.outputs];
                    let mut acc = 0.0;
                    for k in 0..layer.outputs {
                        grow[k] += xi[i] * d[k];
                        acc += wrow[k] * d[k];
                    }
                    prev[s * layer.inputs + i] = acc;
                }
            }
            if li > 0 && self.layers[li - 1].relu {
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        (loss, grads, delta)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Grads {
    fn zeros(net: &TinyNet) -> Self {
        Grads {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

/// Per-layer projected ranges (dequantized) and the class of each weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRanges {
    pub w_min: Vec<f64>,
    pub w_max: Vec<f64>,
    pub w_mean: Vec<f64>,
    pub class: Vec<WeightSetClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeTensors {
    pub layers: Vec<LayerRanges>,
}

impl RangeTensors {
    pub fn from_profile(profile: &LeakProfile) -> Self {
        let layers = profile
            .layers
            .iter()
            .map(|lp| {
                let n = lp.ranges.len();
                let mut out = LayerRanges {
                    w_min: Vec::with_capacity(n),
                    w_max: Vec::with_capacity(n),
                    w_mean: Vec::with_capacity(n),
                    class: Vec::with_capacity(n),
                };
                for (i, r) in lp.ranges.iter().enumerate() {
                    out.w_min.push(r.code_min as f64 * lp.scale);
                    out.w_max.push(r.code_max as f64 * lp.scale);
                    out.w_mean.push(r.mean);
                    out.class.push(lp.class(i));
                }
                out
            })
            .collect();
        RangeTensors { layers }
    }

    /// No leaked bits at all: every weight in the unknown class.
    pub fn unknown(net_dims: &[usize]) -> Self {
        let layers = net_dims
            .windows(2)
            .map(|w| {
                let n = w[0] * w[1];
                LayerRanges {
                    w_min: vec![f64::NEG_INFINITY; n],
                    w_max: vec![f64::INFINITY; n],
                    w_mean: vec![0.0; n],
                    class: vec![WeightSetClass::None; n],
                }
            })
            .collect();
        RangeTensors { layers }
    }

    fn check(&self, net: &TinyNet) -> Result<()> {
        if self.layers.len() != net.layers.len()
            || self
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(r, l)| r.class.len() != l.weights.len())
        {
            return Err(Error::Shape("range tensors do not match network".into()));
        }
        Ok(())
    }
}

/// Cross-entropy plus `lambda * sum (W - W_mean)^2` over partially leaked
/// weights. Gradients of fully leaked weights are zeroed.
pub fn loss(
    net: &TinyNet,
    x: &[f64],
    y: &[usize],
    ranges: &RangeTensors,
    lambda: f64,
) -> Result<(f64, Grads)> {
    check_batch(net, x, y)?;
    ranges.check(net)?;
    let (ce, mut grads, _) = net.backward(x, y);
    let mut penalty = 0.0;
    for ((layer, r), g) in net.layers.iter().zip(&ranges.layers).zip(&mut grads.weights) {
        for i in 0..layer.weights.len() {
            match r.class[i] {
                WeightSetClass::Full => g[i] = 0.0,
                WeightSetClass::Partial(_) => {
                    let d = layer.weights[i] - r.w_mean[i];
                    penalty += d * d;
                    g[i] += 2.0 * lambda * d;
                }
                WeightSetClass::None => {}
            }
        }
    }
    Ok((ce + lambda * penalty, grads))
}

/// Gradient of each sample's own cross-entropy with respect to its input.
pub fn input_gradient(net: &TinyNet, x: &[f64], y: &[usize]) -> Result<Vec<f64>> {
    check_batch(net, x, y)?;
    let (_, _, dx) = net.backward(x, y);
    // backward averages over the batch; undo it so each row is per-sample
    let n = y.len() as f64;
    Ok(dx.into_iter().map(|g| g * n).collect())
}

fn check_batch(net: &TinyNet, x: &[f64], y: &[usize]) -> Result<()> {
    let d = net.input_dim();
    if y.is_empty() || x.len() != y.len() * d {
        return Err(Error::Shape(format!(
            "{} inputs of dim {d} expected, got {} values",
            y.len(),
            x.len()
        )));
    }
    if let Some(bad) = y.iter().find(|&&c| c >= net.classes()) {
        return Err(Error::Shape(format!("label {bad} with {} classes", net.classes())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Total epochs, including the final fine-tuning epochs.
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            lr: 0.02,
            momentum: 0.9,
            epochs: 120,
            finetune_epochs: 40,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Parameter("lambda must be non-negative".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Parameter("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter("momentum must lie in [0, 1)".into()));
        }
        if self.finetune_epochs > self.epochs {
            return Err(Error::Parameter("finetune_epochs exceeds epochs".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// A labelled set of inputs in `[0, 1]^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.dim..(i + 1) * self.dim]
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        let mut x = Vec::with_capacity(idx.len() * self.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(self.row(i));
            y.push(self.y[i]);
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            x,
            y,
        }
    }

    /// The first `ceil(fraction * len)` samples of a seeded shuffle.
    pub fn subset(&self, fraction: f64, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeds::rng(seed));
        let n = ((fraction * self.len() as f64).ceil() as usize).min(self.len());
        idx.truncate(n);
        self.select(&idx)
    }
}

/// Seeded Gaussian-mixture classification task: each class owns several
/// cluster centres; samples are a centre plus isotropic noise, clamped to
/// `[0, 1]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticTask {
    pub dim: usize,
    pub classes: usize,
    pub clusters_per_class: usize,
    /// Half-width of the box around 0.5 that centres are drawn from.
    pub center_spread: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            dim: 32,
            classes: 4,
            clusters_per_class: 3,
            center_spread: 0.2,
            noise: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticTask {
    fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = seeds::rng(seeds::derive(self.seed, "centers"));
        (0..self.classes * self.clusters_per_class)
            .map(|_| {
                (0..self.dim)
                    .map(|_| 0.5 + rng.random_range(-self.center_spread..=self.center_spread))
                    .collect()
            })
            .collect()
    }

    /// Draws `n` samples with balanced labels from the stream named `split`.
    pub fn sample(&self, n: usize, split: &str) -> Result<Dataset> {
        if self.dim == 0 || self.classes == 0 || self.clusters_per_class == 0 {
            return Err(Error::Parameter("task dimensions must be positive".into()));
        }
        let noise = Normal::new(0.0, self.noise)
            .map_err(|e| Error::Parameter(format!("noise: {e}")))?;
        let centers = self.centers();
        let mut rng = seeds::rng(seeds::derive(self.seed, split));
        let mut x = Vec::with_capacity(n * self.dim);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % self.classes;
            let k = rng.random_range(0..self.clusters_per_class);
            let c = &centers[class * self.clusters_per_class + k];
            for &m in c {
                x.push((m + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
            y.push(class);
        }
        Ok(Dataset {
            dim: self.dim,
            classes: self.classes,
            x,
            y,
        })
    }
}

/// Trains a substitute of the given architecture.
///
/// Fully leaked weights start at their exact value and never move; partially
/// leaked weights start at their range midpoint, are pulled toward it by the
/// penalty and clipped into the range after every epoch; the rest start
/// uniform. The last `finetune_epochs` drop the penalty and clipping and use a
/// tenth of the learning rate. When `known_biases` is given the biases are
/// copied and frozen as well.
pub fn train_substitute(
    dims: &[usize],
    ranges: &RangeTensors,
    data: &Dataset,
    config: &TrainConfig,
    known_biases: Option<&[Vec<f64>]>,
) -> Result<TinyNet> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Parameter("training data is empty".into()));
    }
    if dims.first() != Some(&data.dim) || dims.last() != Some(&data.classes) {
        return Err(Error::Shape(format!(
            "architecture {dims:?} does not fit {}-dim, {}-class data",
            data.dim, data.classes
        )));
    }
    let mut rng = seeds::rng(config.seed);
    let mut net = TinyNet::init_uniform(dims, &mut rng);
    ranges.check(&net)?;
    for (layer, r) in net.layers.iter_mut().zip(&ranges.layers) {
        for i in 0..layer.weights.len() {
            match r.class[i] {
                WeightSetClass::Full | WeightSetClass::Partial(_) => layer.weights[i] = r.w_mean[i],
                WeightSetClass::None => {}
            }
        }
    }
    if let Some(b) = known_biases {
        for (layer, bias) in net.layers.iter_mut().zip(b) {
            if bias.len() != layer.bias.len() {
                return Err(Error::Shape("bias length mismatch".into()));
            }
            layer.bias.clone_from(bias);
        }
    }

    let mut vel = Grads::zeros(&net);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let main_epochs = config.epochs - config.finetune_epochs;
    for epoch in 0..config.epochs {
        let finetune = epoch >= main_epochs;
        let (lambda, lr) = if finetune {
            (0.0, config.lr * 0.1)
        } else {
            (config.lambda, config.lr)
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let b = data.select(batch);
            let (_, g) = loss(&net, &b.x, &b.y, ranges, lambda)?;
            for (li, layer) in net.layers.iter_mut().enumerate() {
                let class = &ranges.layers[li].class;
                for i in 0..layer.weights.len() {
                    if class[i] == WeightSetClass::Full {
                        continue;
                    }
                    let v = &mut vel.weights[li][i];
                    *v = config.momentum * *v + g.weights[li][i];
                    layer.weights[i] -= lr * *v;
                }
                if known_biases.is_none() {
                    for i in 0..layer.bias.len() {
                        let v = &mut vel.bias[li][i];
                        *v = config.momentum * *v + g.bias[li][i];
                        layer.bias[i] -= lr * *v;
                    }
                }
            }
        }
        if !finetune {
            clip_partial(&mut net, ranges);
        }
    }
    Ok(net)
}

fn clip_partial(net: &mut TinyNet, ranges: &RangeTensors) {
    for (layer, r) in net.layers.iter_mut().zip(&ranges.layers) {
        for i in 0..layer.weights.len() {
            if let WeightSetClass::Partial(_) = r.class[i] {
                layer.weights[i] = layer.weights[i].clamp(r.w_min[i], r.w_max[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PgdConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig::with_epsilon(0.031, 7)
    }
}

impl PgdConfig {
    /// Step size `2 * epsilon / steps`.
    pub fn with_epsilon(epsilon: f64, steps: usize) -> Self {
        PgdConfig {
            epsilon,
            steps,
            step_size: if steps == 0 { 0.0 } else { 2.0 * epsilon / steps as f64 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !(self.step_size >= 0.0) || self.step_size > self.epsilon {
            return Err(Error::Parameter(
                "PGD needs 0 <= step_size <= epsilon".into(),
            ));
        }
        Ok(())
    }
}

/// L-infinity PGD: `steps` signed-gradient ascent steps on the cross-entropy,
/// each followed by projection into the epsilon ball around `x` and `[0, 1]`.
pub fn pgd_attack(net: &TinyNet, x: &[f64], y: &[usize], config: &PgdConfig) -> Result<Vec<f64>> {
    check_batch(net, x, y)?;
    let eps = config.epsilon;
    let mut adv = x.to_vec();
    for _ in 0..config.steps {
        let g = input_gradient(net, &adv, y)?;
        for ((a, &x0), gi) in adv.iter_mut().zip(x).zip(g) {
            let step = if gi > 0.0 {
                config.step_size
            } else if gi < 0.0 {
                -config.step_size
            } else {
                0.0
            };
            *a = project(*a + step, x0, eps);
        }
    }
    Ok(adv)
}

fn project(v: f64, x0: f64, eps: f64) -> f64 {
    let mut p = v.clamp(x0 - eps, x0 + eps);
    // x0 +/- eps can round outward; walk back until the distance is within eps
    while p - x0 > eps {
        p = p.next_down();
    }
    while x0 - p > eps {
        p = p.next_up();
    }
    p.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub fidelity: f64,
    pub accuracy_under_attack: f64,
}

pub fn accuracy(net: &TinyNet, data: &Dataset) -> f64 {
    let pred = net.predict(&data.x, data.len());
    100.0 * pred.iter().zip(&data.y).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

pub fn fidelity(a: &TinyNet, b: &TinyNet, data: &Dataset) -> f64 {
    let pa = a.predict(&data.x, data.len());
    let pb = b.predict(&data.x, data.len());
    100.0 * pa.iter().zip(&pb).filter(|(p, q)| p == q).count() as f64 / data.len() as f64
}

/// Substitute accuracy, agreement with the victim, and victim accuracy on
/// PGD examples crafted against the substitute, all in percent.
pub fn evaluate(victim: &TinyNet, substitute: &TinyNet, test: &Dataset, pgd: &PgdConfig) -> Result<Metrics> {
    if victim.dims() != substitute.dims() {
        return Err(Error::Shape("victim and substitute architectures differ".into()));
    }
    pgd.validate()?;
    let adv = pgd_attack(substitute, &test.x, &test.y, pgd)?;
    let adv_set = Dataset {
        x: adv,
        ..test.clone()
    };
    Ok(Metrics {
        accuracy: accuracy(substitute, test),
        fidelity: fidelity(victim, substitute, test),
        accuracy_under_attack: accuracy(victim, &adv_set),
    })
}

/// Plain cross-entropy training of a float network on the full data, used to
/// produce victims.
pub fn train_plain(dims: &[usize], data: &Dataset, config: &TrainConfig) -> Result<TinyNet> {
    let ranges = RangeTensors::unknown(dims);
    let cfg = TrainConfig {
        lambda: 0.0,
        ..*config
    };
    train_substitute(dims, &ranges, data, &cfg, None)
}

//! A small multilayer perceptron with hand-written backpropagation.
//!
//! The network is a ReLU backbone followed by a linear head. All parameters
//! live in one flat `Vec<f64>` so that aggregation, EMA blending and the
//! optimizer can treat a model as a plain vector.

use rand::Rng;

use crate::error::{Error, Result};

/// Layer widths `[d_in, hidden.., d_rep, n_classes]`.
///
/// Every layer except the last is followed by a ReLU and belongs to the
/// backbone; the last layer is the linear head. With only two entries the
/// backbone is the identity and the representation is the input itself.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    dims: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
struct LayerSpan {
    weights: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

impl Architecture {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::shape("an architecture needs at least input and output widths"));
        }
        if dims.contains(&0) {
            return Err(Error::shape(format!("zero-width layer in {dims:?}")));
        }
        Ok(Self { dims })
    }

    /// Backbone of `depth` ReLU layers of width `hidden`, then a linear head.
    pub fn mlp(input: usize, hidden: usize, depth: usize, classes: usize) -> Result<Self> {
        let mut dims = Vec::with_capacity(depth + 2);
        dims.push(input);
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(classes);
        Self::new(dims)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn representation_dim(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.dims
            .windows(2)
            .map(|w| {
                let span = LayerSpan {
                    weights: offset,
                    bias: offset + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                offset += w[0] * w[1] + w[1];
                span
            })
            .collect()
    }
}

/// Flat parameter vector. Layer `l` stores a row-major `[out × in]` weight
/// matrix followed by its `out` biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

/// Gradient (or optimizer velocity) with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    arch: Architecture,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn from_values(arch: &Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite parameter value".into()));
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut params = Self::zeros(arch);
        for span in arch.spans() {
            let bound = 1.0 / (span.fan_in as f64).sqrt();
            let end = span.bias + span.fan_out;
            for v in &mut params.values[span.weights..end] {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
    }

    fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "architectures differ: {:?} vs {:?}",
                self.arch.dims, other.arch.dims
            )))
        }
    }

    /// `self ← decay·self + (1 − decay)·other`, elementwise.
    ///
    /// `decay = 0` copies `other` and `decay = 1` leaves `self` untouched.
    /// Every result lies between its two operands.
    pub fn blend_toward(&mut self, other: &ModelParams, decay: f64) -> Result<()> {
        self.check_shape(other)?;
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Parameter(format!("decay {decay} outside [0, 1]")));
        }
        if decay == 0.0 {
            self.values.copy_from_slice(&other.values);
            return Ok(());
        }
        if decay == 1.0 {
            return Ok(());
        }
        let step = 1.0 - decay;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            let (lo, hi) = if *a <= b { (*a, b) } else { (b, *a) };
            *a = (*a + step * (b - *a)).clamp(lo, hi);
        }
        Ok(())
    }
}

impl GradientBuffer {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            arch: arch.clone(),
            values: vec![0.0; arch.param_count()],
        }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self::zeros(&params.arch)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Backbone output, the input of the head.
    pub representation: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Post-activation values of every layer; `[0]` is the input.
fn trace(params: &ModelParams, x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let arch = &params.arch;
    if x.len() != arch.input_dim() {
        return Err(Error::shape(format!(
            "input has {} features, model expects {}",
            x.len(),
            arch.input_dim()
        )));
    }
    let spans = arch.spans();
    let last = spans.len() - 1;
    let mut acts = Vec::with_capacity(spans.len() + 1);
    acts.push(x.to_vec());
    for (l, span) in spans.iter().enumerate() {
        let input = &acts[l];
        let w = &params.values[span.weights..span.bias];
        let b = &params.values[span.bias..span.bias + span.fan_out];
        let mut out = Vec::with_capacity(span.fan_out);
        for o in 0..span.fan_out {
            let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
            let z = b[o] + dot(row, input);
            out.push(if l < last { z.max(0.0) } else { z });
        }
        acts.push(out);
    }
    Ok(acts)
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardOutput> {
    let mut acts = trace(params, x)?;
    let logits = acts.pop().expect("at least one layer");
    let representation = acts.pop().expect("input is always present");
    Ok(ForwardOutput {
        representation,
        logits,
    })
}

/// Logits only; avoids keeping the representation around.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(params, x)?.logits)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn scaled(v: &[f64], tau: f64) -> Vec<f64> {
    v.iter().map(|x| x / tau).collect()
}

/// `−Σ_c target_c · log softmax(logits)_c`. An all-zero target yields 0.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::shape(format!(
            "logits have {} classes, target has {}",
            logits.len(),
            target.len()
        )));
    }
    if target.iter().all(|&t| t == 0.0) {
        return Ok(0.0);
    }
    let logp = log_softmax(logits);
    Ok(-target
        .iter()
        .zip(&logp)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, lp)| t * lp)
        .sum::<f64>())
}

/// `KL(softmax(teacher/τ) ‖ softmax(student/τ))`.
pub fn kl_divergence_softened(teacher: &[f64], student: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    if teacher.len() != student.len() {
        return Err(Error::shape(format!(
            "teacher has {} entries, student has {}",
            teacher.len(),
            student.len()
        )));
    }
    let lt = log_softmax(&scaled(teacher, tau));
    let ls = log_softmax(&scaled(student, tau));
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .map(|(&a, &b)| {
            let p = a.exp();
            if p == 0.0 {
                0.0
            } else {
                p * (a - b)
            }
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Weights of the composite objective `CE + distill·KL_logits + represent·KL_rep`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub distill: f64,
    pub represent: f64,
    pub tau: f64,
}

impl LossWeights {
    pub fn supervised_only() -> Self {
        Self {
            distill: 0.0,
            represent: 0.0,
            tau: 1.0,
        }
    }
}

/// One training example with its (constant) teacher outputs.
///
/// Teacher outputs are inputs, not functions of the parameters being
/// differentiated, so no gradient reaches the teachers.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: &'a [f64],
    pub target: &'a [f64],
    pub teacher_logits: Option<&'a [f64]>,
    pub teacher_representation: Option<&'a [f64]>,
}

impl<'a> Example<'a> {
    pub fn supervised(input: &'a [f64], target: &'a [f64]) -> Self {
        Self {
            input,
            target,
            teacher_logits: None,
            teacher_representation: None,
        }
    }
}

fn active(weight: f64, teacher: Option<&[f64]>) -> Option<&[f64]> {
    if weight != 0.0 {
        teacher
    } else {
        None
    }
}

fn example_loss(out: &ForwardOutput, ex: &Example<'_>, w: &LossWeights) -> Result<f64> {
    let mut loss = cross_entropy(&out.logits, ex.target)?;
    if let Some(t) = active(w.distill, ex.teacher_logits) {
        loss += w.distill * kl_divergence_softened(t, &out.logits, w.tau)?;
    }
    if let Some(t) = active(w.represent, ex.teacher_representation) {
        loss += w.represent * kl_divergence_softened(t, &out.representation, w.tau)?;
    }
    Ok(loss)
}

/// Batch-mean composite loss, evaluated by forward passes only.
pub fn composite_loss(params: &ModelParams, batch: &[Example<'_>], weights: &LossWeights) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in batch {
        total += example_loss(&forward(params, ex.input)?, ex, weights)?;
    }
    Ok(total / batch.len() as f64)
}

fn check_example(arch: &Architecture, ex: &Example<'_>, tau: f64) -> Result<()> {
    if ex.target.len() != arch.num_classes() {
        return Err(Error::shape(format!(
            "target has {} classes, model has {}",
            ex.target.len(),
            arch.num_classes()
        )));
    }
    if ex.teacher_logits.is_some_and(|t| t.len() != arch.num_classes()) {
        return Err(Error::shape("teacher logits do not match the class count"));
    }
    if ex
        .teacher_representation
        .is_some_and(|t| t.len() != arch.representation_dim())
    {
        return Err(Error::shape("teacher representation does not match the backbone width"));
    }
    if (ex.teacher_logits.is_some() || ex.teacher_representation.is_some()) && !(tau > 0.0) {
        return Err(Error::Parameter(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Batch-mean loss and its gradient with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    batch: &[Example<'_>],
    weights: &LossWeights,
) -> Result<(f64, GradientBuffer)> {
    let arch = &params.arch;
    let spans = arch.spans();
    let head = spans.len() - 1;
    let mut grad = GradientBuffer::zeros(arch);
    if batch.is_empty() {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;

    for ex in batch {
        check_example(arch, ex, weights.tau)?;
        let acts = trace(params, ex.input)?;
        let logits = &acts[head + 1];
        let rep = &acts[head];

        // d loss / d logits
        let mut delta = vec![0.0; logits.len()];
        let mass: f64 = ex.target.iter().sum();
        if mass != 0.0 {
            let p = softmax(logits);
            for c in 0..delta.len() {
                delta[c] = p[c] * mass - ex.target[c];
            }
        }
        if let Some(t) = active(weights.distill, ex.teacher_logits) {
            let ps = softmax(&scaled(logits, weights.tau));
            let pt = softmax(&scaled(t, weights.tau));
            let k = weights.distill / weights.tau;
            for c in 0..delta.len() {
                delta[c] += k * (ps[c] - pt[c]);
            }
        }

        // d loss / d representation, from the regularizer
        let mut rep_delta = vec![0.0; rep.len()];
        if let Some(t) = active(weights.represent, ex.teacher_representation) {
            let ps = softmax(&scaled(rep, weights.tau));
            let pt = softmax(&scaled(t, weights.tau));
            let k = weights.represent / weights.tau;
            for j in 0..rep_delta.len() {
                rep_delta[j] = k * (ps[j] - pt[j]);
            }
        }

        total += {
            let out = ForwardOutput {
                representation: rep.clone(),
                logits: logits.clone(),
            };
            example_loss(&out, ex, weights)?
        };

        // Walk the layers backwards; `delta` is d loss / d pre-activation of
        // the current layer.
        for l in (0..spans.len()).rev() {
            let span = spans[l];
            let input = &acts[l];
            if l < head {
                let out = &acts[l + 1];
                for o in 0..span.fan_out {
                    if out[o] <= 0.0 {
                        delta[o] = 0.0;
                    }
                }
            }
            let g = &mut grad.values;
            for o in 0..span.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                g[span.bias + o] += d;
                let row = &mut g[span.weights + o * span.fan_in..span.weights + (o + 1) * span.fan_in];
                for (gi, &xi) in row.iter_mut().zip(input) {
                    *gi += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &params.values[span.weights..span.bias];
            let mut prev = vec![0.0; span.fan_in];
            for o in 0..span.fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
                for (pi, &wi) in prev.iter_mut().zip(row) {
                    *pi += d * wi;
                }
            }
            if l == head {
                for (pi, ri) in prev.iter_mut().zip(&rep_delta) {
                    *pi += ri;
                }
            }
            delta = prev;
        }
        // A head-only network has no backbone to receive `rep_delta`; the
        // representation is then the input and carries no parameters.
    }

    let n = batch.len() as f64;
    for g in &mut grad.values {
        *g /= n;
    }
    Ok((total / n, grad))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradientBuffer,
    velocity: &mut GradientBuffer,
    cfg: &SgdConfig,
) -> Result<()> {
    if !(cfg.lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if grads.arch != params.arch || velocity.arch != params.arch {
        return Err(Error::shape("gradient or velocity layout differs from the model"));
    }
    for ((p, &g), v) in params
        .values
        .iter_mut()
        .zip(&grads.values)
        .zip(velocity.values.iter_mut())
    {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn seeded(dims: &[usize], seed: u64) -> ModelParams {
        let arch = Architecture::new(dims.to_vec()).unwrap();
        ModelParams::init(&arch, &mut rng::stream(seed, &[99]))
    }

    #[test]
    fn zero_network_outputs_zero() {
        let arch = Architecture::mlp(3, 4, 2, 5).unwrap();
        let out = forward(&ModelParams::zeros(&arch), &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(out.logits, vec![0.0; 5]);
        assert_eq!(out.representation, vec![0.0; 4]);
    }

    #[test]
    fn identity_head_passes_input_through() {
        let arch = Architecture::new(vec![2, 2]).unwrap();
        let p = ModelParams::from_values(&arch, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let out = forward(&p, &[1.0, 2.0]).unwrap();
        assert_eq!(out.logits, vec![1.0, 2.0]);
        assert_eq!(out.representation, vec![1.0, 2.0]);
    }

    #[test]
    fn small_mlp_matches_scalar_reference() {
        let p = seeded(&[2, 3, 2], 5);
        let v = p.values();
        let x = [0.5, -0.5];
        // hidden: W1 is 3x2 at [0..6], b1 at [6..9]; head W2 2x3 at [9..15], b2 at [15..17]
        let mut h = [0.0; 3];
        for o in 0..3 {
            let z = v[6 + o] + v[o * 2] * x[0] + v[o * 2 + 1] * x[1];
            h[o] = if z > 0.0 { z } else { 0.0 };
        }
        let mut expected = [0.0; 2];
        for o in 0..2 {
            expected[o] = v[15 + o] + v[9 + o * 3] * h[0] + v[9 + o * 3 + 1] * h[1] + v[9 + o * 3 + 2] * h[2];
        }
        let out = forward(&p, &x).unwrap();
        for o in 0..2 {
            assert!((out.logits[o] - expected[o]).abs() < 1e-12);
        }
        assert_eq!(out.representation.len(), 3);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let p = seeded(&[2, 3, 2], 1);
        assert!(matches!(forward(&p, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], &[1.0, 0.0]).unwrap() - LN2).abs() < 1e-12);
        assert_eq!(cross_entropy(&[3.0, -1.0], &[0.0, 0.0]).unwrap(), 0.0);
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 2.0)).ln();
        assert!((expected - 0.2395).abs() < 1e-4);
        assert!((cross_entropy(&[2.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap() - expected).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence_softened(&[0.4, 1.3], &[0.4, 1.3], 0.5).unwrap(), 0.0);
        // p_t = σ([1,0]), p_s = σ([0,1]) = reverse of p_t; log(p_t/p_s) = ±1
        // exactly, so KL = p_t0 − p_t1 = tanh(1/2) ≈ 0.4621.
        let a = 1.0 / (1.0 + (-1f64).exp());
        let b = 1.0 - a;
        let expected = a * (a / b).ln() + b * (b / a).ln();
        assert!((expected - 0.5f64.tanh()).abs() < 1e-12, "{expected}");
        let kl = kl_divergence_softened(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!(matches!(
            kl_divergence_softened(&[1.0], &[1.0], 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn temperature_is_logit_scaling() {
        let t = [0.3, -1.2, 2.0];
        let s = [1.0, 0.1, -0.4];
        let half = kl_divergence_softened(&t, &s, 0.5).unwrap();
        let doubled = |v: &[f64]| v.iter().map(|x| 2.0 * x).collect::<Vec<_>>();
        let one = kl_divergence_softened(&doubled(&t), &doubled(&s), 1.0).unwrap();
        assert!((half - one).abs() < 1e-12);
    }

    fn finite_difference(params: &ModelParams, batch: &[Example<'_>], w: &LossWeights, i: usize, h: f64) -> f64 {
        let mut plus = params.clone();
        plus.values_mut()[i] += h;
        let mut minus = params.clone();
        minus.values_mut()[i] -= h;
        (composite_loss(&plus, batch, w).unwrap() - composite_loss(&minus, batch, w).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradients_match_finite_differences_on_2_4_3() {
        let p = seeded(&[2, 4, 3], 11);
        let mut r = rng::stream(3, &[1]);
        let inputs: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let targets = [
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.3, 0.7],
            vec![0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.5, 0.0, 0.0],
        ];
        let teachers: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let reps: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let batch: Vec<Example<'_>> = (0..5)
            .map(|i| Example {
                input: &inputs[i],
                target: &targets[i],
                teacher_logits: Some(&teachers[i]),
                teacher_representation: Some(&reps[i]),
            })
            .collect();
        let w = LossWeights {
            distill: 1.0,
            represent: 0.1,
            tau: 0.5,
        };
        let (loss, g) = backward(&p, &batch, &w).unwrap();
        assert!((loss - composite_loss(&p, &batch, &w).unwrap()).abs() < 1e-12);
        for i in 0..p.param_count() {
            let fd = finite_difference(&p, &batch, &w, i, 1e-6);
            let an = g.values()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "param {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn zero_weights_reduce_to_cross_entropy() {
        let p = seeded(&[3, 5, 5, 4], 2);
        let x = [0.2, -0.7, 1.1];
        let y = [0.0, 0.0, 1.0, 0.0];
        let t = [0.5, 0.5, -1.0, 2.0];
        let r = [0.1, 0.2, 0.3, 0.4, 0.5];
        let full = Example {
            input: &x,
            target: &y,
            teacher_logits: Some(&t),
            teacher_representation: Some(&r),
        };
        let off = LossWeights {
            distill: 0.0,
            represent: 0.0,
            tau: 0.5,
        };
        let (_, a) = backward(&p, &[full], &off).unwrap();
        let (_, b) = backward(&p, &[Example::supervised(&x, &y)], &LossWeights::supervised_only()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn masked_targets_give_zero_supervised_gradient() {
        let p = seeded(&[3, 5, 5, 4], 2);
        let x = [0.2, -0.7, 1.1];
        let y = [0.0; 4];
        let (loss, g) = backward(&p, &[Example::supervised(&x, &y)], &LossWeights::supervised_only()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_examples() {
        let arch = Architecture::new(vec![1, 1]).unwrap();
        let mut p = ModelParams::from_values(&arch, vec![1.0, 0.0]).unwrap();
        let mut g = GradientBuffer::zeros(&arch);
        g.values_mut().copy_from_slice(&[1.0, 0.0]);
        let mut v = GradientBuffer::zeros(&arch);
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
        sgd_step(&mut p, &g, &mut v, &cfg).unwrap();
        assert!((p.values()[0] - 0.75).abs() < 1e-12);

        let mut q = ModelParams::from_values(&arch, vec![0.4, -0.2]).unwrap();
        let mut v = GradientBuffer::zeros(&arch);
        g.values_mut().copy_from_slice(&[2.0, -1.0]);
        let plain = SgdConfig {
            lr: 0.5,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        sgd_step(&mut q, &g, &mut v, &plain).unwrap();
        assert_eq!(q.values(), &[0.4 - 1.0, -0.2 + 0.5]);

        let before = q.clone();
        let zero = GradientBuffer::zeros(&arch);
        let mut v = GradientBuffer::zeros(&arch);
        sgd_step(&mut q, &zero, &mut v, &plain).unwrap();
        assert_eq!(q, before);

        let bad = SgdConfig { lr: 0.0, ..plain };
        assert!(sgd_step(&mut q, &zero, &mut v, &bad).is_err());
    }

    #[test]
    fn blend_degenerate_decays() {
        let a = seeded(&[2, 3, 2], 1);
        let b = seeded(&[2, 3, 2], 2);
        let mut x = a.clone();
        x.blend_toward(&b, 0.0).unwrap();
        assert_eq!(x, b);
        let mut y = a.clone();
        y.blend_toward(&b, 1.0).unwrap();
        assert_eq!(y, a);
        assert!(x.blend_toward(&seeded(&[2, 2], 1), 0.5).is_err());
    }

    proptest! {
        #[test]
        fn softmax_is_a_simplex(v in proptest::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn kl_is_nonnegative(
            pair in (1usize..8).prop_flat_map(|n| (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(-10.0f64..10.0, n),
            )),
            tau in 0.1f64..3.0,
        ) {
            let (t, s) = pair;
            prop_assert!(kl_divergence_softened(&t, &s, tau).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence_softened(&t, &t, tau).unwrap(), 0.0);
        }

        #[test]
        fn forward_is_pure(seed in 0u64..1000, x in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let p = seeded(&[4, 6, 6, 3], seed);
            let a = forward(&p, &x).unwrap();
            let b = forward(&p, &x).unwrap();
            prop_assert_eq!(a.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.logits.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn blend_stays_between_operands(seed in 0u64..500, decay in 0.0f64..=1.0) {
            let a = seeded(&[3, 4, 2], seed);
            let b = seeded(&[3, 4, 2], seed + 1000);
            let mut c = a.clone();
            c.blend_toward(&b, decay).unwrap();
            for ((&x, &y), &z) in a.values().iter().zip(b.values()).zip(c.values()) {
                prop_assert!(z >= x.min(y) && z <= x.max(y));
            }
        }
    }
}

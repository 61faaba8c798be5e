//! Dense multilayer perceptron with hand-written backpropagation.
//!
//! Parameters live in one flat [`ParamVector`] so that gradients can be
//! quantized and shipped as a single message. Each layer contributes a
//! weight block of shape `(out, in)` stored row-major, followed by a bias
//! block of shape `(1, out)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat parameter (or gradient) vector with layer-shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f32>,
    shapes: Vec<(usize, usize)>,
}

impl ParamVector {
    pub fn new(values: Vec<f32>, shapes: Vec<(usize, usize)>) -> Result<Self> {
        let expected: usize = shapes.iter().map(|(r, c)| r * c).sum();
        if expected != values.len() {
            return Err(Error::Dimension(format!(
                "{} values for shapes totalling {expected}",
                values.len()
            )));
        }
        Ok(Self { values, shapes })
    }

    pub fn zeros(shapes: Vec<(usize, usize)>) -> Self {
        let len = shapes.iter().map(|(r, c)| r * c).sum();
        Self {
            values: vec![0.0; len],
            shapes,
        }
    }

    /// Same shapes as `self`, new values.
    pub fn with_values(&self, values: Vec<f32>) -> Result<Self> {
        Self::new(values, self.shapes.clone())
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn shapes(&self) -> &[(usize, usize)] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Root-mean-square of the entries, accumulated in f64.
    pub fn rms(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        let ss: f64 = self.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        (ss / self.values.len() as f64).sqrt()
    }
}

/// A batch of labelled examples. `inputs` is row-major `(rows, dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Vec<f32>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f32>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dimension("batch dim must be positive".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Dimension(format!(
                "{} input values for {} labels of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Self { inputs, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    /// Gathers the rows at `indices` into a new batch.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let mut inputs = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch {
            inputs,
            labels,
            dim: self.dim,
        }
    }

    /// Row-wise concatenation.
    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let dim = parts
            .first()
            .map(|b| b.dim)
            .ok_or_else(|| Error::Dimension("concat of zero batches".into()))?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for b in parts {
            if b.dim != dim {
                return Err(Error::Dimension("concat of batches with different dims".into()));
            }
            inputs.extend_from_slice(&b.inputs);
            labels.extend_from_slice(&b.labels);
        }
        Batch::new(inputs, labels, dim)
    }
}

/// Architecture of the MLP: ReLU hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Widths from input to number of classes.
    pub layer_sizes: Vec<usize>,
    #[serde(default = "ModelSpec::default_l2")]
    pub l2_coeff: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layer_sizes: vec![16, 32, 16, 4],
            l2_coeff: Self::default_l2(),
        }
    }
}

impl ModelSpec {
    fn default_l2() -> f32 {
        1e-4
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(
                "model.layer_sizes",
                "need at least an input and an output width",
            ));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config("model.layer_sizes", "widths must be positive"));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            return Err(Error::config("model.l2_coeff", "must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Shapes in storage order: `(out, in)` weights then `(1, out)` bias, per layer.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layer_sizes
            .windows(2)
            .flat_map(|w| [(w[1], w[0]), (1, w[1])])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }

    /// Element range `[start, end)` covered by layer `layer` (weights and bias).
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let mut start = 0;
        for w in self.layer_sizes.windows(2).take(layer) {
            start += w[1] * w[0] + w[1];
        }
        let (i, o) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        start..start + o * i + o
    }

    /// Uniform Glorot initialization, biases at zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.num_params());
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
            for _ in 0..fan_in * fan_out {
                values.push(rng.random_range(-limit..limit));
            }
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector {
            values,
            shapes: self.shapes(),
        }
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.shapes != self.shapes() {
            return Err(Error::Dimension(format!(
                "parameter shapes {:?} do not match model {:?}",
                params.shapes,
                self.layer_sizes
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch dim {} but model input {}",
                batch.dim,
                self.input_dim()
            )));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= self.num_classes()) {
            return Err(Error::Dimension(format!(
                "label {bad} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// Per-layer pre-activations and activations for one example.
struct Activations {
    /// `acts[0]` is the input; `acts[l+1]` is the output of layer `l`
    /// (post-ReLU for hidden layers, raw logits for the last).
    acts: Vec<Vec<f32>>,
}

fn forward(spec: &ModelSpec, params: &[f32], x: &[f32]) -> Activations {
    let mut acts = Vec::with_capacity(spec.layer_sizes.len());
    acts.push(x.to_vec());
    let last = spec.num_layers() - 1;
    let mut offset = 0;
    for (l, w) in spec.layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params[offset..offset + fan_in * fan_out];
        let bias = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = &acts[l];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &weights[o * fan_in..(o + 1) * fan_in];
            let z = row.iter().zip(input).map(|(a, b)| a * b).sum::<f32>() + bias[o];
            out.push(if l < last { z.max(0.0) } else { z });
        }
        acts.push(out);
    }
    Activations { acts }
}

/// Softmax with max subtraction.
fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Negative log-probability of `label` computed as logsumexp - logit.
fn cross_entropy(logits: &[f32], label: usize) -> f32 {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
    lse - logits[label]
}

/// Mean cross-entropy over `batch` plus `l2_coeff * ||w||^2`, and its gradient.
pub fn compute_grad_loss(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<(ParamVector, f32)> {
    spec.check(params)?;
    spec.check_batch(batch)?;
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let w = &params.values;
    // Batch sums are accumulated in f64 and rounded once at the end.
    let mut grad = vec![0.0f64; w.len()];
    let scale = 1.0 / batch.len() as f64;
    let mut ce_sum = 0.0f64;

    // Layer offsets, computed once.
    let mut offsets = Vec::with_capacity(spec.num_layers());
    let mut acc = 0;
    for win in spec.layer_sizes.windows(2) {
        offsets.push(acc);
        acc += win[0] * win[1] + win[1];
    }

    for i in 0..batch.len() {
        let label = batch.labels[i];
        let a = forward(spec, w, batch.row(i));
        let logits = a.acts.last().unwrap();
        ce_sum += cross_entropy(logits, label) as f64;

        let mut delta = softmax(logits);
        delta[label] -= 1.0;
        for l in (0..spec.num_layers()).rev() {
            let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
            let off = offsets[l];
            let input = &a.acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g_row = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (g, &x) in g_row.iter_mut().zip(input) {
                    *g += (d * x) as f64;
                }
                grad[off + fan_in * fan_out + o] += d as f64;
            }
            if l > 0 {
                let weights = &w[off..off + fan_in * fan_out];
                let mut prev = vec![0.0f32; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wv) in prev.iter_mut().zip(&weights[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wv;
                    }
                }
                // ReLU'(z) is 1 where the stored activation is positive.
                for (p, &h) in prev.iter_mut().zip(input) {
                    if h <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    let mut loss = ce_sum / batch.len() as f64;
    if spec.l2_coeff > 0.0 {
        let sq: f64 = w.iter().map(|&v| v as f64 * v as f64).sum();
        loss += spec.l2_coeff as f64 * sq;
    }
    let l2 = 2.0 * spec.l2_coeff as f64;
    let grad: Vec<f32> = grad
        .iter()
        .zip(w)
        .map(|(&g, &v)| (g * scale + l2 * v as f64) as f32)
        .collect();
    if !(loss as f32).is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("loss or gradient".into()));
    }
    Ok((
        ParamVector {
            values: grad,
            shapes: params.shapes.clone(),
        },
        loss as f32,
    ))
}

/// `params - lr * grad`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f32) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "params len {} vs grad len {}",
            params.len(),
            grad.len()
        )));
    }
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .map(|(w, g)| w - lr * g)
        .collect();
    Ok(ParamVector {
        values,
        shapes: params.shapes.clone(),
    })
}

/// Predicted class per row. Ties go to the lowest class index.
pub fn predict(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<usize>> {
    spec.check(params)?;
    spec.check_batch(batch)?;
    Ok((0..batch.len())
        .map(|i| {
            let a = forward(spec, &params.values, batch.row(i));
            let logits = a.acts.last().unwrap();
            let mut best = 0;
            for (c, &z) in logits.iter().enumerate().skip(1) {
                if z > logits[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn evaluate_accuracy(params: &ParamVector, spec: &ModelSpec, test: &Batch) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Dimension("empty test set".into()));
    }
    let preds = predict(params, spec, test)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Mean cross-entropy plus L2 over a whole dataset, without the gradient.
pub fn dataset_loss(params: &ParamVector, spec: &ModelSpec, data: &Batch) -> Result<f64> {
    spec.check(params)?;
    spec.check_batch(data)?;
    if data.is_empty() {
        return Err(Error::Dimension("empty dataset".into()));
    }
    let ce: f64 = (0..data.len())
        .map(|i| {
            let a = forward(spec, &params.values, data.row(i));
            f64::from(cross_entropy(a.acts.last().unwrap(), data.labels[i]))
        })
        .sum();
    let sq: f64 = params.values.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
    Ok(ce / data.len() as f64 + f64::from(spec.l2_coeff) * sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(l2: f32) -> ModelSpec {
        ModelSpec {
            layer_sizes: vec![3, 5, 4, 2],
            l2_coeff: l2,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
        let inputs = (0..n * dim).map(|_| rng.random_range(-1.5f32..1.5)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        Batch::new(inputs, labels, dim).unwrap()
    }

    #[test]
    fn zero_params_give_ln2_and_half_residuals() {
        let spec = ModelSpec {
            layer_sizes: vec![2, 2],
            l2_coeff: 0.0,
        };
        let params = ParamVector::zeros(spec.shapes());
        let batch = Batch::new(vec![1.5, -2.0], vec![0], 2).unwrap();
        let (grad, loss) = compute_grad_loss(&params, &spec, &batch).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
        // softmax - onehot = (0.5 - 1, 0.5) for label 0
        let g = grad.values();
        assert_eq!(&g[0..2], &[-0.5 * 1.5, -0.5 * -2.0]);
        assert_eq!(&g[2..4], &[0.5 * 1.5, 0.5 * -2.0]);
        assert_eq!(&g[4..6], &[-0.5, 0.5]);
    }

    #[test]
    fn duplicating_rows_changes_nothing_without_l2() {
        let spec = tiny_spec(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&mut rng, 6, 3, 2);
        let doubled = Batch::concat(&[batch.clone(), batch.clone()]).unwrap();
        let (g1, l1) = compute_grad_loss(&params, &spec, &batch).unwrap();
        let (g2, l2) = compute_grad_loss(&params, &spec, &doubled).unwrap();
        assert!((l1 - l2).abs() <= 1e-6 * l1.abs());
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    /// Central differences in f64 over every coordinate.
    fn fd_check(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> f64 {
        let (grad, _) = compute_grad_loss(params, spec, batch).unwrap();
        let h = 1e-4f64;
        let loss64 = |w: &[f64]| reference_loss_f64(spec, w, batch);
        let base: Vec<f64> = params.values().iter().map(|&v| f64::from(v)).collect();
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            let mut minus = base.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss64(&plus) - loss64(&minus)) / (2.0 * h);
            let an = f64::from(grad.values()[i]);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        worst
    }

    /// Independent f64 forward pass used only by the finite-difference oracle.
    fn reference_loss_f64(spec: &ModelSpec, w: &[f64], batch: &Batch) -> f64 {
        let mut total = 0.0;
        for i in 0..batch.len() {
            let mut a: Vec<f64> = batch.row(i).iter().map(|&x| f64::from(x)).collect();
            let mut off = 0;
            let layers = spec.layer_sizes.len() - 1;
            for l in 0..layers {
                let (fi, fo) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
                let mut z = vec![0.0; fo];
                for o in 0..fo {
                    let mut s = w[off + fi * fo + o];
                    for k in 0..fi {
                        s += w[off + o * fi + k] * a[k];
                    }
                    z[o] = if l + 1 < layers { s.max(0.0) } else { s };
                }
                off += fi * fo + fo;
                a = z;
            }
            let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + a.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += lse - a[batch.labels()[i]];
        }
        total / batch.len() as f64
            + f64::from(spec.l2_coeff) * w.iter().map(|v| v * v).sum::<f64>()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let spec = tiny_spec(0.01);
        assert!(spec.num_params() <= 200);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = spec.init_params(&mut rng);
        let batch = random_batch(&mut rng, 8, 3, 2);
        let worst = fd_check(&spec, &params, &batch);
        assert!(worst < 1e-3, "max relative error {worst}");
    }

    #[test]
    fn sgd_step_examples() {
        let p = ParamVector::new(vec![1.0, 2.0], vec![(1, 2)]).unwrap();
        let zero = ParamVector::new(vec![0.0, 0.0], vec![(1, 2)]).unwrap();
        assert_eq!(sgd_step(&p, &zero, 0.2).unwrap().values(), &[1.0, 2.0]);
        let g = ParamVector::new(vec![1.0, -1.0], vec![(1, 2)]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().values(), &[0.5, 2.5]);
        let short = ParamVector::new(vec![1.0], vec![(1, 1)]).unwrap();
        assert!(matches!(sgd_step(&p, &short, 0.1), Err(Error::Dimension(_))));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let spec = tiny_spec(0.0);
        let params = ParamVector::zeros(vec![(2, 2)]);
        let batch = Batch::new(vec![0.0; 3], vec![0], 3).unwrap();
        assert!(compute_grad_loss(&params, &spec, &batch).is_err());
        let good = ParamVector::zeros(spec.shapes());
        let wrong_dim = Batch::new(vec![0.0; 4], vec![0], 4).unwrap();
        assert!(compute_grad_loss(&good, &spec, &wrong_dim).is_err());
        let bad_label = Batch::new(vec![0.0; 3], vec![5], 3).unwrap();
        assert!(compute_grad_loss(&good, &spec, &bad_label).is_err());
        assert!(ParamVector::new(vec![0.0; 3], vec![(2, 2)]).is_err());
    }

    #[test]
    fn constant_predictor_accuracy_is_class0_share() {
        let spec = ModelSpec {
            layer_sizes: vec![2, 3, 2],
            l2_coeff: 0.0,
        };
        let params = ParamVector::zeros(spec.shapes());
        let test = Batch::new(vec![0.3; 10], vec![0, 1, 1, 0, 1], 2).unwrap();
        let acc = evaluate_accuracy(&params, &spec, &test).unwrap();
        assert_eq!(acc, 2.0 / 5.0);
    }

    #[test]
    fn oracle_params_separate_perfectly() {
        // Logit for class c is x_c; argmax picks the hot coordinate.
        let spec = ModelSpec {
            layer_sizes: vec![2, 2],
            l2_coeff: 0.0,
        };
        let params = ParamVector::new(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0], spec.shapes()).unwrap();
        let test = Batch::new(vec![2.0, 0.1, -1.0, 3.0, 0.5, 0.2], vec![0, 1, 0], 2).unwrap();
        assert_eq!(evaluate_accuracy(&params, &spec, &test).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_brute_force_count() {
        let spec = tiny_spec(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = spec.init_params(&mut rng);
        let test = random_batch(&mut rng, 200, 3, 2);
        let mut correct = 0usize;
        for i in 0..test.len() {
            let one = test.select(&[i]);
            if predict(&params, &spec, &one).unwrap()[0] == test.labels()[i] {
                correct += 1;
            }
        }
        let acc = evaluate_accuracy(&params, &spec, &test).unwrap();
        assert_eq!(acc, correct as f64 / 200.0);
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let spec = tiny_spec(0.0);
        let params = ParamVector::zeros(spec.shapes());
        let empty = Batch::new(vec![], vec![], 3).unwrap();
        assert!(evaluate_accuracy(&params, &spec, &empty).is_err());
    }

    #[test]
    fn layer_ranges_tile_the_vector() {
        let spec = ModelSpec::default();
        assert_eq!(spec.num_params(), 16 * 32 + 32 + 32 * 16 + 16 + 16 * 4 + 4);
        let mut next = 0;
        for l in 0..spec.num_layers() {
            let r = spec.layer_range(l);
            assert_eq!(r.start, next);
            next = r.end;
        }
        assert_eq!(next, spec.num_params());
    }
}

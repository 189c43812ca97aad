//! Minimal multilayer perceptron over a flat parameter vector.
//!
//! Parameters are laid out layer by layer; each layer stores its weight
//! matrix row-major (`out x in`) followed by its bias vector. Every layer
//! except the last forms the embedding slice, the final fully connected
//! layer is the decision slice.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FedError, Result};

/// Hidden-layer nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Smooth alternative, handy for finite-difference checks.
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Architecture of a fully connected network with a softmax head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    /// Start offset of each layer's block in the flat vector.
    offsets: Vec<usize>,
    split_index: usize,
    total: usize,
}

impl MlpSpec {
    /// `layer_sizes` is `[input, hidden..., classes]`; at least one hidden
    /// layer is required so that the embedding slice is non-empty.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(FedError::Config(format!(
                "an MLP needs input, at least one hidden and an output layer, got {:?}",
                layer_sizes
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(FedError::Config("layer sizes must be positive".into()));
        }
        if layer_sizes[layer_sizes.len() - 1] < 2 {
            return Err(FedError::Config("at least two classes are required".into()));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len() - 1);
        let mut total = 0;
        for w in layer_sizes.windows(2) {
            offsets.push(total);
            total += w[0] * w[1] + w[1];
        }
        let split_index = *offsets.last().unwrap();
        Ok(Self {
            layer_sizes,
            activation,
            offsets,
            split_index,
            total,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.total
    }

    /// Offset separating embedding parameters from decision parameters.
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.total],
            split_index: self.split_index,
        }
    }

    /// Uniform initialization in `[-s, s]` with `s = 1/sqrt(fan_in)`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.total);
        for w in self.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..(fan_in * fan_out + fan_out) {
                values.push(rng.random_range(-s..=s));
            }
        }
        ParamVector {
            values,
            split_index: self.split_index,
        }
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, &'a [f64]) {
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        let start = self.offsets[l];
        let w = &params[start..start + n_in * n_out];
        let b = &params[start + n_in * n_out..start + n_in * n_out + n_out];
        (ArrayView2::from_shape((n_out, n_in), w).unwrap(), b)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.total || params.split_index != self.split_index {
            return shape_err(format!(
                "parameter vector has length {} (split {}), spec expects {} (split {})",
                params.len(),
                params.split_index,
                self.total,
                self.split_index
            ));
        }
        Ok(())
    }

    fn check_features(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.input_dim() {
            return shape_err(format!(
                "feature width {} does not match input dim {}",
                features.ncols(),
                self.input_dim()
            ));
        }
        Ok(())
    }
}

/// Flat model parameters with the embedding/decision boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    split_index: usize,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, split_index: usize) -> Result<Self> {
        if split_index > values.len() {
            return shape_err(format!(
                "split index {} exceeds length {}",
                split_index,
                values.len()
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric { layer: 0 });
        }
        Ok(Self { values, split_index })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn embedding(&self) -> &[f64] {
        &self.values[..self.split_index]
    }

    pub fn decision(&self) -> &[f64] {
        &self.values[self.split_index..]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same layout, new values. Lengths must agree.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            split_index: self.split_index,
        }
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

/// Splits a model into its embedding and decision slices.
pub fn split_params(params: &ParamVector) -> (&[f64], &[f64]) {
    params.values.split_at(params.split_index)
}

/// A labelled mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return shape_err("batch is empty");
        }
        if features.nrows() != labels.len() {
            return shape_err(format!(
                "batch has {} feature rows but {} labels",
                features.nrows(),
                labels.len()
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Pre-activations and activations of every layer, input included.
struct Trace {
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

fn forward_trace(spec: &MlpSpec, params: &[f64], features: &Array2<f64>) -> Result<Trace> {
    let depth = spec.depth();
    let mut pre = Vec::with_capacity(depth);
    let mut post = Vec::with_capacity(depth + 1);
    post.push(features.clone());
    for l in 0..depth {
        let (w, b) = spec.layer(params, l);
        let mut z = post[l].dot(&w.t());
        for mut row in z.rows_mut() {
            row.iter_mut().zip(b).for_each(|(v, bias)| *v += bias);
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(FedError::Numeric { layer: l });
        }
        if l + 1 < depth {
            let a = z.mapv(|v| spec.activation.apply(v));
            pre.push(z);
            post.push(a);
        } else {
            pre.push(z);
        }
    }
    Ok(Trace { pre, post })
}

/// Class probabilities for each row of `features`.
pub fn forward(spec: &MlpSpec, params: &ParamVector, features: &Array2<f64>) -> Result<Array2<f64>> {
    spec.check_params(params)?;
    spec.check_features(features)?;
    let mut trace = forward_trace(spec, params.as_slice(), features)?;
    let mut logits = trace.pre.pop().unwrap();
    softmax_rows(&mut logits);
    Ok(logits)
}

/// Index of the largest probability per row; ties go to the lowest class.
pub fn predict(spec: &MlpSpec, params: &ParamVector, features: &Array2<f64>) -> Result<Vec<usize>> {
    let probs = forward(spec, params, features)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_features(&batch.features)?;
    let classes = spec.class_count();
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
        return shape_err(format!("label {} out of range for {} classes", bad, classes));
    }
    let depth = spec.depth();
    let n = batch.len() as f64;
    let trace = forward_trace(spec, params.as_slice(), &batch.features)?;

    // loss via log-sum-exp, delta = (softmax - onehot) / n
    let logits = &trace.pre[depth - 1];
    let mut loss = 0.0;
    let mut delta = logits.clone();
    for (mut row, &y) in delta.rows_mut().into_iter().zip(&batch.labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        row.mapv_inplace(|v| (v - lse).exp() / n);
        row[y] -= 1.0 / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(FedError::Numeric { layer: depth - 1 });
    }

    let mut grad = vec![0.0; spec.param_count()];
    for l in (0..depth).rev() {
        let (n_in, n_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let start = spec.offsets[l];
        let gw = delta.t().dot(&trace.post[l]);
        let gb = delta.sum_axis(Axis(0));
        grad[start..start + n_in * n_out].copy_from_slice(gw.as_slice().unwrap());
        grad[start + n_in * n_out..start + n_in * n_out + n_out].copy_from_slice(gb.as_slice().unwrap());
        if grad[start..start + n_in * n_out + n_out]
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(FedError::Numeric { layer: l });
        }
        if l > 0 {
            let (w, _) = spec.layer(params.as_slice(), l);
            let mut back = delta.dot(&w);
            let act = spec.activation;
            ndarray::Zip::from(&mut back)
                .and(&trace.pre[l - 1])
                .and(&trace.post[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            delta = back;
        }
    }
    Ok((loss, params.with_values(grad)))
}

fn check_reg_shapes(params: &ParamVector, other: &ParamVector, global_embedding: &[f64]) -> Result<()> {
    if other.len() != params.len() {
        return shape_err(format!(
            "vector length {} does not match parameters {}",
            other.len(),
            params.len()
        ));
    }
    if global_embedding.len() != params.split_index {
        return shape_err(format!(
            "global embedding length {} does not match split index {}",
            global_embedding.len(),
            params.split_index
        ));
    }
    Ok(())
}

/// One step of
/// `w - eta*grad - eta*mu*(w - center) - eta*lambda*(phi - global)`,
/// where the last term only touches the embedding slice.
pub fn regularized_step(
    params: &ParamVector,
    grad: &ParamVector,
    center: &ParamVector,
    global_embedding: &[f64],
    eta: f64,
    mu: f64,
    lambda: f64,
) -> Result<ParamVector> {
    check_reg_shapes(params, grad, global_embedding)?;
    check_reg_shapes(params, center, global_embedding)?;
    if !(eta >= 0.0 && mu >= 0.0 && lambda >= 0.0) {
        return Err(FedError::Config(format!(
            "step sizes must be non-negative (eta={eta}, mu={mu}, lambda={lambda})"
        )));
    }
    let split = params.split_index;
    let values = params
        .values
        .iter()
        .zip(&grad.values)
        .zip(&center.values)
        .enumerate()
        .map(|(i, ((&w, &g), &c))| {
            let mut next = w - eta * g - eta * mu * (w - c);
            if i < split {
                next -= eta * lambda * (w - global_embedding[i]);
            }
            next
        })
        .collect();
    Ok(params.with_values(values))
}

/// Local objective
/// `CE(batch) + mu/2 ||w - center||^2 + lambda/2 ||phi - global||^2`
/// and its gradient. `regularized_step` descends along this gradient.
pub fn local_objective(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
    center: &ParamVector,
    global_embedding: &[f64],
    mu: f64,
    lambda: f64,
) -> Result<(f64, ParamVector)> {
    check_reg_shapes(params, center, global_embedding)?;
    let (loss, grad) = loss_and_grad(spec, params, batch)?;
    let split = params.split_index;
    let mut total = loss;
    let mut g = grad.into_vec();
    for (i, (gi, (&w, &c))) in g
        .iter_mut()
        .zip(params.values.iter().zip(&center.values))
        .enumerate()
    {
        total += 0.5 * mu * (w - c) * (w - c);
        *gi += mu * (w - c);
        if i < split {
            let d = w - global_embedding[i];
            total += 0.5 * lambda * d * d;
            *gi += lambda * d;
        }
    }
    Ok((total, params.with_values(g)))
}

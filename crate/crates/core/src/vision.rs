//! Per-client image models: an MLP feature extractor `f_i` with shared
//! output width `d` followed by a linear classifier `h_i`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub hidden_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub output_dim: usize,
}

/// Client `i` gets `family[i mod X]`.
pub fn assign_architectures(
    num_clients: usize,
    family: &[ArchitectureSpec],
) -> Result<Vec<ArchitectureSpec>> {
    if family.is_empty() {
        return Err(Error::Config("architecture family is empty".into()));
    }
    let d = family[0].output_dim;
    if family.iter().any(|a| a.output_dim != d) {
        return Err(Error::Config(
            "all architectures must share the same output_dim".into(),
        ));
    }
    Ok((0..num_clients)
        .map(|i| family[i % family.len()].clone())
        .collect())
}

/// Dense layer computing `x · weight + bias`; `weight` is `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: rng.normal_matrix(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt()),
            bias: vec![0.0; fan_out],
        }
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_vector(&self.bias)?;
        Ok(out)
    }

    fn zeros_like(&self) -> Linear {
        Linear {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn len(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: ArchitectureSpec,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden layers followed by the projection to `output_dim`.
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
}

/// Gradients with the same layout as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub extractor: Vec<Linear>,
    pub classifier: Linear,
}

impl ModelParams {
    pub fn init(
        arch: &ArchitectureSpec,
        input_dim: usize,
        num_classes: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if input_dim == 0 || arch.output_dim == 0 || num_classes == 0 {
            return Err(Error::Config(
                "model dimensions must be positive".into(),
            ));
        }
        if arch.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut extractor = Vec::with_capacity(arch.hidden_widths.len() + 1);
        let mut fan_in = input_dim;
        for &w in arch.hidden_widths.iter().chain(std::iter::once(&arch.output_dim)) {
            extractor.push(Linear::init(fan_in, w, rng));
            fan_in = w;
        }
        let classifier = Linear::init(arch.output_dim, num_classes, rng);
        Ok(Self {
            arch: arch.clone(),
            input_dim,
            num_classes,
            extractor,
            classifier,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.output_dim
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// `f_i(x)`. Pure: equal inputs give bit-identical outputs.
    pub fn forward_features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.extractor.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.extractor.iter().enumerate() {
            h = layer.forward(&h)?;
            if l < last {
                h = h.map(|v| self.arch.activation.apply(v));
            }
        }
        Ok(h)
    }

    pub fn classify(&self, features: &Matrix) -> Result<Matrix> {
        self.classifier.forward(features)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.classify(&self.forward_features(x)?)
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardCache> {
        self.check_input(x)?;
        let last = self.extractor.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.extractor.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.clone();
        for (l, layer) in self.extractor.iter().enumerate() {
            let z = layer.forward(&h)?;
            layer_inputs.push(h);
            h = if l < last {
                let a = z.map(|v| self.arch.activation.apply(v));
                pre_activations.push(z);
                a
            } else {
                z
            };
        }
        let logits = self.classify(&h)?;
        Ok(ForwardCache {
            layer_inputs,
            pre_activations,
            features: h,
            logits,
        })
    }

    /// Backpropagates `grad_logits` through the classifier and adds the
    /// direct feature gradient `grad_features` before descending the extractor.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_features: Option<&Matrix>,
        grad_logits: &Matrix,
    ) -> Result<ParamGrads> {
        let batch = cache.features.rows();
        if grad_logits.shape() != (batch, self.num_classes) {
            return Err(Error::Shape(format!(
                "grad_logits {:?}, expected {:?}",
                grad_logits.shape(),
                (batch, self.num_classes)
            )));
        }
        let classifier = Linear {
            weight: cache.features.t_matmul(grad_logits)?,
            bias: grad_logits.column_sums(),
        };
        let mut delta = grad_logits.matmul_t(&self.classifier.weight)?;
        if let Some(gf) = grad_features {
            if gf.shape() != cache.features.shape() {
                return Err(Error::Shape(format!(
                    "grad_features {:?}, expected {:?}",
                    gf.shape(),
                    cache.features.shape()
                )));
            }
            delta.add_assign(gf)?;
        }

        let mut extractor: Vec<Linear> = Vec::with_capacity(self.extractor.len());
        for l in (0..self.extractor.len()).rev() {
            if l < self.extractor.len() - 1 {
                let pre = &cache.pre_activations[l];
                for (d, &z) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *d *= self.arch.activation.derivative(z);
                }
            }
            let input = &cache.layer_inputs[l];
            extractor.push(Linear {
                weight: input.t_matmul(&delta)?,
                bias: delta.column_sums(),
            });
            if l > 0 {
                delta = delta.matmul_t(&self.extractor[l].weight)?;
            }
        }
        extractor.reverse();
        Ok(ParamGrads {
            extractor,
            classifier,
        })
    }

    /// One vanilla gradient-descent step. Fails if any parameter becomes non-finite.
    pub fn apply_gradients(&mut self, grads: &ParamGrads, lr: f64) -> Result<()> {
        for (layer, g) in self.extractor.iter_mut().zip(&grads.extractor) {
            step_linear(layer, g, lr)?;
        }
        step_linear(&mut self.classifier, &grads.classifier, lr)?;
        if !self.is_finite() {
            return Err(Error::Numeric(
                "model parameters diverged to non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Gradient step on the classifier only; the extractor stays untouched.
    pub fn apply_classifier_gradient(&mut self, grad: &Linear, lr: f64) -> Result<()> {
        step_linear(&mut self.classifier, grad, lr)?;
        if !self.classifier.is_finite() {
            return Err(Error::Numeric("classifier diverged".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.extractor.iter().all(Linear::is_finite) && self.classifier.is_finite()
    }

    pub fn num_params(&self) -> usize {
        self.extractor.iter().map(Linear::len).sum::<usize>() + self.classifier.len()
    }

    /// All parameters in a fixed order: extractor layers (weight then bias),
    /// then the classifier.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.extractor.iter().chain(std::iter::once(&self.classifier)) {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for layer in self
            .extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
        {
            let w = layer.weight.as_mut_slice();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let n = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Extractor parameters only, in [`Self::to_flat`] order.
    pub fn extractor_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.extractor {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn same_architecture(&self, other: &ModelParams) -> bool {
        self.arch == other.arch
            && self.input_dim == other.input_dim
            && self.num_classes == other.num_classes
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format {
            field: "model".into(),
            message: e.to_string(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: ModelParams = serde_json::from_str(text).map_err(|e| Error::Format {
            field: "model".into(),
            message: e.to_string(),
        })?;
        model.check_layout()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn check_layout(&self) -> Result<()> {
        let widths: Vec<usize> = std::iter::once(self.input_dim)
            .chain(self.arch.hidden_widths.iter().copied())
            .chain(std::iter::once(self.arch.output_dim))
            .collect();
        let layers_ok = self.extractor.len() == widths.len() - 1
            && self.extractor.iter().zip(widths.windows(2)).all(|(l, w)| {
                l.weight.shape() == (w[0], w[1]) && l.bias.len() == w[1]
            });
        let cls_ok = self.classifier.weight.shape() == (self.arch.output_dim, self.num_classes)
            && self.classifier.bias.len() == self.num_classes;
        if !(layers_ok && cls_ok) {
            return Err(Error::Format {
                field: "extractor".into(),
                message: "layer shapes do not chain from input_dim to num_classes".into(),
            });
        }
        if !self.is_finite() {
            return Err(Error::Numeric("checkpoint contains non-finite values".into()));
        }
        Ok(())
    }
}

fn step_linear(layer: &mut Linear, grad: &Linear, lr: f64) -> Result<()> {
    layer.weight.axpy(-lr, &grad.weight)?;
    if layer.bias.len() != grad.bias.len() {
        return Err(Error::Shape("bias gradient length".into()));
    }
    for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
        *b -= lr * g;
    }
    Ok(())
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        Self {
            extractor: model.extractor.iter().map(Linear::zeros_like).collect(),
            classifier: model.classifier.zeros_like(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.extractor.iter().chain(std::iter::once(&self.classifier)) {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// A model plus the cache of its most recent training forward pass.
#[derive(Clone, Debug)]
pub struct ModelTrainer {
    pub params: ModelParams,
    cache: Option<ForwardCache>,
}

impl ModelTrainer {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            cache: None,
        }
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// Runs and caches a forward pass; returns `(features, logits)`.
    pub fn forward(&mut self, x: &Matrix) -> Result<(&Matrix, &Matrix)> {
        let cache = self.cache.insert(self.params.forward(x)?);
        Ok((&cache.features, &cache.logits))
    }

    /// Consumes the cached forward pass and applies one descent step.
    pub fn backward_and_step(
        &mut self,
        grad_features: Option<&Matrix>,
        grad_logits: &Matrix,
        lr: f64,
    ) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::ProtocolMisuse("backward_and_step called without a cached forward pass".into())
        })?;
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        let grads = self.params.backward(&cache, grad_features, grad_logits)?;
        self.params.apply_gradients(&grads, lr)
    }
}

/// Entry-wise weighted average of identically shaped models.
pub fn weighted_average(models: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = models
        .first()
        .ok_or_else(|| Error::Protocol("no models to average".into()))?;
    if models.len() != weights.len() {
        return Err(Error::Shape("one weight per model required".into()));
    }
    if let Some(m) = models.iter().find(|m| !m.same_architecture(first)) {
        return Err(Error::Config(format!(
            "cannot average heterogeneous architectures ({:?} vs {:?})",
            first.arch.hidden_widths, m.arch.hidden_widths
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Protocol("averaging weights sum to zero".into()));
    }
    let mut acc = vec![0.0; first.num_params()];
    for (m, &w) in models.iter().zip(weights) {
        let share = w / total;
        for (a, p) in acc.iter_mut().zip(m.to_flat()) {
            *a += share * p;
        }
    }
    let mut out = (*first).clone();
    out.set_flat(&acc)?;
    Ok(out)
}

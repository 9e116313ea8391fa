//! Flat parameter vectors and a small analytic multilayer perceptron.
//!
//! Downstream networks and the generative model both live in flat weight
//! space, so everything here works on a [`ParameterVector`] plus an
//! [`MlpSpec`] describing how to carve it into layers. Backpropagation is
//! hand-derived per layer; the layer zoo is tiny (dense + tanh/relu) and a
//! general tape would buy nothing but dependencies.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

/// A flat, fixed-length real vector of network weights or sampler states.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
}

impl ParameterVector {
    /// Wraps a non-empty, all-finite vector.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "parameter vector must be non-empty".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter vector entry {i} is {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// self += a * other.
    pub fn axpy(&mut self, a: f64, other: &[f64]) {
        debug_assert_eq!(self.values.len(), other.len());
        for (x, y) in self.values.iter_mut().zip(other) {
            *x += a * y;
        }
    }

    pub fn squared_distance(&self, other: &ParameterVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch {
                context: "squared_distance",
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(crate::linalg::squared_distance(&self.values, &other.values))
    }
}

/// Derivative of a scalar quantity with respect to a [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    values: Vec<f64>,
}

impl Gradient {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {}",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        crate::linalg::norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// What the final linear layer is read as. Purely semantic; the output layer
/// is linear either way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Logits,
    Scalar,
}

/// Architecture of a dense feed-forward network.
///
/// `layer_widths = [in, h1, ..., out]`; hidden layers use `activation`, the
/// output layer is linear. Parameters are stored flat, layer by layer, each
/// as a row-major (out × in) weight block followed by the bias block.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
    output: OutputKind,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, output: OutputKind) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer widths must be >= 1, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
            output,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn output(&self) -> OutputKind {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total number of weights + biases; equals the dim of any compatible
    /// [`ParameterVector`].
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// (weight range, bias range, in, out) for each layer within the flat vector.
    fn layer_ranges(&self) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>, usize, usize)> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let w_range = offset..offset + n_in * n_out;
                let b_range = w_range.end..w_range.end + n_out;
                offset = b_range.end;
                (w_range, b_range, n_in, n_out)
            })
            .collect()
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimMismatch {
                context: "mlp parameter count",
                expected: self.param_count(),
                actual: params.dim(),
            });
        }
        Ok(())
    }
}

/// Splits a flat parameter vector into per-layer (weights, biases) views.
pub fn unflatten(spec: &MlpSpec, params: &ParameterVector) -> Result<Vec<(Matrix, Vec<f64>)>> {
    spec.check_params(params)?;
    let vals = params.values();
    spec.layer_ranges()
        .into_iter()
        .map(|(wr, br, n_in, n_out)| {
            let w = Matrix::from_flat(n_out, n_in, vals[wr].to_vec())?;
            Ok((w, vals[br].to_vec()))
        })
        .collect()
}

/// Inverse of [`unflatten`].
pub fn flatten(spec: &MlpSpec, layers: &[(Matrix, Vec<f64>)]) -> Result<ParameterVector> {
    if layers.len() != spec.n_layers() {
        return Err(Error::DimMismatch {
            context: "flatten layer count",
            expected: spec.n_layers(),
            actual: layers.len(),
        });
    }
    let mut values = Vec::with_capacity(spec.param_count());
    for ((w, b), (_, _, n_in, n_out)) in layers.iter().zip(spec.layer_ranges()) {
        if w.rows() != n_out || w.cols() != n_in || b.len() != n_out {
            return Err(Error::DimMismatch {
                context: "flatten layer shape",
                expected: n_out * n_in,
                actual: w.rows() * w.cols(),
            });
        }
        values.extend_from_slice(w.data());
        values.extend_from_slice(b);
    }
    ParameterVector::new(values)
}

/// Per-layer post-activation values kept for the backward pass.
/// `activations[0]` is the input batch; `activations[i+1]` the output of layer i.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

/// Batched forward pass. Rows of `inputs` are samples.
pub fn mlp_forward(spec: &MlpSpec, params: &ParameterVector, inputs: &Matrix) -> Result<Matrix> {
    Ok(mlp_forward_traced(spec, params, inputs)?.output().clone())
}

/// Forward pass retaining per-layer activations for backprop.
pub fn mlp_forward_traced(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
) -> Result<ForwardTrace> {
    spec.check_params(params)?;
    forward_traced_raw(spec, params.values(), inputs)
}

/// Slice-level forward pass; lets callers embed MLP blocks inside a larger
/// flat parameter vector without copying.
pub(crate) fn forward_traced_raw(
    spec: &MlpSpec,
    vals: &[f64],
    inputs: &Matrix,
) -> Result<ForwardTrace> {
    if vals.len() != spec.param_count() {
        return Err(Error::DimMismatch {
            context: "mlp parameter count",
            expected: spec.param_count(),
            actual: vals.len(),
        });
    }
    if inputs.cols() != spec.input_dim() {
        return Err(Error::DimMismatch {
            context: "mlp input width",
            expected: spec.input_dim(),
            actual: inputs.cols(),
        });
    }
    let n_layers = spec.n_layers();
    let mut activations = Vec::with_capacity(n_layers + 1);
    activations.push(inputs.clone());
    for (li, (wr, br, n_in, n_out)) in spec.layer_ranges().into_iter().enumerate() {
        let w = &vals[wr];
        let b = &vals[br];
        let prev = activations.last().unwrap();
        let mut out = Matrix::zeros(prev.rows(), n_out);
        let last = li == n_layers - 1;
        for r in 0..prev.rows() {
            let x = prev.row(r);
            let o = out.row_mut(r);
            for (j, oj) in o.iter_mut().enumerate() {
                let z = b[j] + crate::linalg::dot(&w[j * n_in..(j + 1) * n_in], x);
                *oj = if last { z } else { spec.activation.apply(z) };
            }
        }
        activations.push(out);
    }
    Ok(ForwardTrace { activations })
}

/// Parameter gradient of a scalar loss, given the loss gradient at the
/// network output (one row per input sample).
pub fn mlp_backward(
    spec: &MlpSpec,
    params: &ParameterVector,
    inputs: &Matrix,
    loss_grad_at_output: &Matrix,
) -> Result<Gradient> {
    let trace = mlp_forward_traced(spec, params, inputs)?;
    let (grad, _) = mlp_backward_traced(spec, params, &trace, loss_grad_at_output)?;
    Ok(grad)
}

/// Backward pass from a retained trace; also returns the loss gradient with
/// respect to the network inputs (needed when the MLP is an inner block of a
/// larger differentiated computation).
pub fn mlp_backward_traced(
    spec: &MlpSpec,
    params: &ParameterVector,
    trace: &ForwardTrace,
    loss_grad_at_output: &Matrix,
) -> Result<(Gradient, Matrix)> {
    spec.check_params(params)?;
    let mut grad = vec![0.0; spec.param_count()];
    let d_inputs = backward_traced_raw(spec, params.values(), trace, loss_grad_at_output, &mut grad)?;
    Ok((Gradient::new(grad)?, d_inputs))
}

/// Slice-level backward pass accumulating parameter gradients into
/// `grad_accum` (same layout and length as the parameter slice). Returns
/// dL/d(inputs).
pub(crate) fn backward_traced_raw(
    spec: &MlpSpec,
    vals: &[f64],
    trace: &ForwardTrace,
    loss_grad_at_output: &Matrix,
    grad_accum: &mut [f64],
) -> Result<Matrix> {
    if vals.len() != spec.param_count() || grad_accum.len() != spec.param_count() {
        return Err(Error::DimMismatch {
            context: "mlp parameter count",
            expected: spec.param_count(),
            actual: vals.len().min(grad_accum.len()),
        });
    }
    let out = trace.output();
    if loss_grad_at_output.rows() != out.rows() || loss_grad_at_output.cols() != out.cols() {
        return Err(Error::DimMismatch {
            context: "mlp output gradient shape",
            expected: out.rows() * out.cols(),
            actual: loss_grad_at_output.rows() * loss_grad_at_output.cols(),
        });
    }
    let grad = grad_accum;
    let ranges = spec.layer_ranges();
    let batch = loss_grad_at_output.rows();

    // delta starts as dL/d(output); walking backward it becomes dL/d(pre-activation).
    let mut delta = loss_grad_at_output.clone();
    for (li, (wr, br, n_in, n_out)) in ranges.into_iter().enumerate().rev() {
        let a_in = &trace.activations[li];
        let w = &vals[wr.clone()];
        // Parameter gradients.
        for r in 0..batch {
            let d = delta.row(r);
            let x = a_in.row(r);
            for j in 0..n_out {
                let dj = d[j];
                if dj == 0.0 {
                    continue;
                }
                crate::linalg::axpy(
                    &mut grad[wr.start + j * n_in..wr.start + (j + 1) * n_in],
                    dj,
                    x,
                );
                grad[br.start + j] += dj;
            }
        }
        // Propagate to the previous layer's outputs.
        let mut prev_delta = Matrix::zeros(batch, n_in);
        for r in 0..batch {
            let d = delta.row(r);
            let p = prev_delta.row_mut(r);
            for j in 0..n_out {
                let dj = d[j];
                if dj == 0.0 {
                    continue;
                }
                crate::linalg::axpy(p, dj, &w[j * n_in..(j + 1) * n_in]);
            }
        }
        if li > 0 {
            // activations[li] is this layer's input, i.e. the previous layer's
            // post-activation output.
            for r in 0..batch {
                let p = prev_delta.row_mut(r);
                for (k, pk) in p.iter_mut().enumerate() {
                    let a = trace.activations[li].get(r, k);
                    *pk *= spec.activation.deriv_from_output(a);
                }
            }
        }
        delta = prev_delta;
    }
    Ok(delta)
}

/// Fresh standard-normal parameter vector; reproducible per seed stream.
pub fn gaussian_sample(rng: &mut Rng, dim: usize) -> Result<ParameterVector> {
    if dim == 0 {
        return Err(Error::InvalidArgument("gaussian_sample dim must be > 0".into()));
    }
    ParameterVector::new(rng.normal_vec(dim))
}

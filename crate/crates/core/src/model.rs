//! Dense classifiers: multinomial logistic regression and ReLU MLPs, with
//! cross-entropy loss and hand-written backpropagation.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::datagen::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Logreg,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        Self { architecture: Architecture::Logreg, input_dim, hidden_dims: Vec::new(), num_classes }
    }

    pub fn mlp(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        Self { architecture: Architecture::Mlp, input_dim, hidden_dims, num_classes }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(invalid("model needs input_dim >= 1 and num_classes >= 2"));
        }
        match self.architecture {
            Architecture::Logreg if !self.hidden_dims.is_empty() => {
                Err(invalid("logreg takes no hidden layers"))
            }
            Architecture::Mlp if self.hidden_dims.is_empty() => Err(invalid("mlp needs hidden layers")),
            _ if self.hidden_dims.contains(&0) => Err(invalid("hidden widths must be positive")),
            _ => Ok(()),
        }
    }

    /// Widths from input to output.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    pub fn layout(&self) -> Vec<Segment> {
        let widths = self.widths();
        widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    Segment { name: format!("layer{l}.weight"), rows: w[1], cols: w[0] },
                    Segment { name: format!("layer{l}.bias"), rows: w[1], cols: 1 },
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter (or gradient) vector with named segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<Segment>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    endianness: String,
    len: usize,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let expected: usize = layout.iter().map(Segment::len).sum();
        if values.len() != expected {
            return Err(invalid(format!("{} values but layout describes {expected}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("parameter vector contains non-finite values".into()));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<Segment>) -> Self {
        let len = layout.iter().map(Segment::len).sum();
        Self { values: vec![0.0; len], layout }
    }

    pub fn zeros_like(&self) -> Self {
        Self { values: vec![0.0; self.values.len()], layout: self.layout.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn segment_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layout
            .iter()
            .map(|s| {
                let o = off;
                off += s.len();
                o
            })
            .collect()
    }

    /// Writes little-endian f64 values to `path` and the layout to `path` with a
    /// `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(path, bytes)?;
        let sidecar = Sidecar {
            dtype: "f64".into(),
            endianness: "little".into(),
            len: self.values.len(),
            segments: self.layout.clone(),
        };
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(path.with_extension("json"))?)?;
        let bytes = fs::read(path)?;
        if bytes.len() != sidecar.len * 8 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                kind: crate::error::ParseErrorKind::Truncated { expected: sidecar.len * 8, found: bytes.len() },
            });
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        ParamVector::new(values, sidecar.segments)
    }
}

pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamVector> {
    spec.validate()?;
    let mut rng = Rng::seed_from_u64(seed);
    let layout = spec.layout();
    let mut values = Vec::with_capacity(spec.num_params());
    for seg in &layout {
        if seg.cols == 1 && seg.name.ends_with(".bias") {
            values.extend(std::iter::repeat_n(0.0, seg.len()));
        } else {
            let bound = 1.0 / (seg.cols as f64).sqrt();
            values.extend((0..seg.len()).map(|_| rng.random_range(-bound..bound)));
        }
    }
    ParamVector::new(values, layout)
}

struct LayerView<'a> {
    weight: &'a [f64],
    bias: &'a [f64],
    inputs: usize,
    outputs: usize,
}

fn layers<'a>(params: &'a ParamVector, spec: &ModelSpec) -> Result<Vec<LayerView<'a>>> {
    if params.layout() != spec.layout().as_slice() {
        return Err(invalid("parameter layout does not match model spec"));
    }
    let offsets = params.segment_offsets();
    Ok(params
        .layout
        .chunks(2)
        .zip(offsets.chunks(2))
        .map(|(segs, offs)| LayerView {
            weight: &params.values[offs[0]..offs[0] + segs[0].len()],
            bias: &params.values[offs[1]..offs[1] + segs[1].len()],
            inputs: segs[0].cols,
            outputs: segs[0].rows,
        })
        .collect())
}

/// Forward pass for one example; returns post-activation outputs of every
/// layer (the last entry holds the logits).
fn forward(layers: &[LayerView<'_>], x: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let input = if l == 0 { x } else { &acts[l - 1] };
        let last = l + 1 == layers.len();
        let mut out = layer.bias.to_vec();
        for (o, row) in out.iter_mut().zip(layer.weight.chunks_exact(layer.inputs)) {
            *o += row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>();
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: l });
        }
        if !last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Stable softmax in place; returns `log(sum(exp(logits)))`.
fn softmax_in_place(logits: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    logits.iter_mut().for_each(|v| *v /= sum);
    max + sum.ln()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_batch(spec: &ModelSpec, data: &LabeledDataset, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(invalid("empty batch"));
    }
    if data.dim() != spec.input_dim {
        return Err(invalid(format!("feature dim {} != model input {}", data.dim(), spec.input_dim)));
    }
    if data.num_classes() > spec.num_classes {
        return Err(invalid("dataset has more classes than the model outputs"));
    }
    Ok(())
}

/// Mean cross-entropy over the batch plus `weight_decay / 2 * ||W||^2`
/// (weights only), with its exact gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    indices: &[usize],
    weight_decay: f64,
) -> Result<(f64, ParamVector)> {
    check_batch(spec, data, indices)?;
    let views = layers(params, spec)?;
    let offsets = params.segment_offsets();
    let mut grad = params.zeros_like();
    let inv_n = 1.0 / indices.len() as f64;
    let mut loss = 0.0;

    for &i in indices {
        let x = data.row(i);
        let y = data.label(i);
        let mut acts = forward(&views, x)?;
        let logits = acts.last_mut().unwrap();
        let logit_y = logits[y];
        loss += softmax_in_place(logits) - logit_y;

        let mut delta: Vec<f64> = logits.clone();
        delta[y] -= 1.0;

        for l in (0..views.len()).rev() {
            let layer = &views[l];
            let input = if l == 0 { x } else { &acts[l - 1] };
            let (w_off, b_off) = (offsets[2 * l], offsets[2 * l + 1]);
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let g = d * inv_n;
                grad.values[b_off + o] += g;
                let row = &mut grad.values[w_off + o * layer.inputs..w_off + (o + 1) * layer.inputs];
                for (gw, v) in row.iter_mut().zip(input) {
                    *gw += g * v;
                }
            }
            if l > 0 {
                let mut back = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate().take(layer.outputs) {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += d * w;
                    }
                }
                for (b, a) in back.iter_mut().zip(&acts[l - 1]) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
    }
    loss *= inv_n;

    if weight_decay != 0.0 {
        for (l, layer) in views.iter().enumerate() {
            let w_off = offsets[2 * l];
            let mut sq = 0.0;
            for (j, &w) in layer.weight.iter().enumerate() {
                sq += w * w;
                grad.values[w_off + j] += weight_decay * w;
            }
            loss += 0.5 * weight_decay * sq;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    Ok((loss, grad))
}

/// Mean per-example cross-entropy (no decay) and argmax accuracy.
pub fn evaluate(params: &ParamVector, spec: &ModelSpec, data: &LabeledDataset, indices: &[usize]) -> Result<(f64, f64)> {
    check_batch(spec, data, indices)?;
    let views = layers(params, spec)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &i in indices {
        let y = data.label(i);
        let mut acts = forward(&views, data.row(i))?;
        let logits = acts.last_mut().unwrap();
        if argmax(logits) == y {
            correct += 1;
        }
        let logit_y = logits[y];
        loss += softmax_in_place(logits) - logit_y;
    }
    let n = indices.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

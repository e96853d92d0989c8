//! The quantised MLP classifier.
//!
//! Each hidden stage is `Linear -> BatchNorm -> ReLU -> activation quant`,
//! followed by a final `Linear -> softmax`. In fake-quant mode weights are
//! quantised per tensor with a max-abs scale recomputed on every forward
//! pass, and each hidden activation is quantised to `bits` unsigned levels
//! with a trainable scale. Biases stay real.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

use crate::feature::FeatureBlock;
use crate::qtensor::{calibrate_scale, QuantError, QuantSpec, ScaleMode};
use crate::training::{loss_grad_logits, LossKind};

pub const DEFAULT_DIMS: [usize; 6] = [40, 256, 128, 64, 32, 4];
pub const INPUT_SCALE: f64 = 1.0 / 128.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dim { expected: usize, found: usize },
    #[error("architecture needs at least an input and an output width, got {0:?}")]
    Architecture(Vec<usize>),
    #[error("backward called before a recorded forward pass")]
    NoForward,
    #[error("batch has {rows} rows but {targets} targets")]
    Targets { rows: usize, targets: usize },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {0} is not supported")]
    Version(u32),
    #[error("model file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Real,
    FakeQuant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch norm uses batch statistics.
    Train,
    /// Batch norm uses running statistics.
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    /// Fixed weight-quantiser scale; `None` recomputes max-abs each pass.
    pub weight_scale: Option<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            weight_scale: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn identity(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma.len()
    }

    /// Inference-time map of one channel.
    #[inline]
    pub fn apply(&self, channel: usize, z: f64) -> f64 {
        (z - self.running_mean[channel]) / (self.running_var[channel] + self.eps).sqrt()
            * self.gamma[channel]
            + self.beta[channel]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u64,
    pub best_epoch: Option<u64>,
    pub best_val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CqmlpModel {
    pub bits: u8,
    pub dims: Vec<usize>,
    pub layers: Vec<Linear>,
    /// One per hidden layer.
    pub norms: Vec<BatchNorm>,
    /// Trainable post-ReLU quantiser scales, one per hidden layer.
    pub act_scales: Vec<f64>,
    pub meta: TrainMeta,
}

/// Per-class logits and softmax probabilities for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.logits)
    }
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

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let p = softmax(row.as_slice().expect("standard layout"));
        row.assign(&Array1::from(p));
    }
    out
}

/// Stacks blocks into a `batch x width` real input matrix.
pub fn blocks_to_matrix(blocks: &[&FeatureBlock]) -> Array2<f64> {
    let width = blocks.first().map_or(0, |b| b.data.len());
    let mut x = Array2::zeros((blocks.len(), width));
    for (mut row, b) in x.rows_mut().into_iter().zip(blocks) {
        for (dst, v) in row.iter_mut().zip(b.to_real()) {
            *dst = v;
        }
    }
    x
}

#[derive(Debug, Clone)]
struct HiddenCache {
    input: Array2<f64>,
    weight: Array2<f64>,
    weight_pass: Option<Array2<bool>>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
    pre_act: Array2<f64>,
}

/// Everything a forward pass produced, kept for backward and inspection.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub mode: Mode,
    pub phase: Phase,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
    /// Integer activation levels per hidden layer (fake-quant mode only).
    pub levels: Vec<Array2<i32>>,
    hidden: Vec<HiddenCache>,
    out_input: Array2<f64>,
    out_weight: Array2<f64>,
    out_weight_pass: Option<Array2<bool>>,
}

impl ForwardPass {
    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("standard layout")))
            .collect()
    }

    /// Batch-norm outputs of each hidden layer, before ReLU.
    pub fn pre_activations(&self) -> impl Iterator<Item = &Array2<f64>> {
        self.hidden.iter().map(|h| &h.pre_act)
    }
}

/// Holds the most recent recorded forward pass for backward.
#[derive(Debug, Default)]
pub struct Tape {
    pass: Option<ForwardPass>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn pass(&self) -> Option<&ForwardPass> {
        self.pass.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub gammas: Vec<Array1<f64>>,
    pub betas: Vec<Array1<f64>>,
    pub act_scales: Vec<f64>,
}

impl Gradients {
    /// Flat views in the same order as [`CqmlpModel::params_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        for (g, b) in self.gammas.iter().zip(&self.betas) {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out.push(&self.act_scales);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl CqmlpModel {
    /// A model with zero weights, identity batch norm and unit activation
    /// scales.
    pub fn new(dims: &[usize], bits: u8) -> Result<Self, ModelError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(ModelError::Architecture(dims.to_vec()));
        }
        QuantSpec::weight(bits, 1.0)?;
        let layers = dims.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect();
        let hidden = &dims[1..dims.len() - 1];
        Ok(CqmlpModel {
            bits,
            dims: dims.to_vec(),
            layers,
            norms: hidden.iter().map(|&w| BatchNorm::identity(w)).collect(),
            act_scales: vec![1.0; hidden.len()],
            meta: TrainMeta::default(),
        })
    }

    pub fn default_arch(bits: u8) -> Result<Self, ModelError> {
        Self::new(&DEFAULT_DIMS, bits)
    }

    /// Kaiming-uniform (fan-in, ReLU gain) weights, biases uniform in
    /// `±1/sqrt(fan_in)`, batch norm reset to identity.
    pub fn init_kaiming<R: Rng>(&mut self, rng: &mut R) {
        for layer in &mut self.layers {
            let fan_in = layer.in_dim() as f64;
            let w_bound = (6.0 / fan_in).sqrt();
            let b_bound = 1.0 / fan_in.sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-w_bound..w_bound));
            layer.bias.mapv_inplace(|_| rng.random_range(-b_bound..b_bound));
        }
        for bn in &mut self.norms {
            *bn = BatchNorm::identity(bn.width());
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    pub fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    /// Weights + biases + BN gamma/beta + activation scales.
    pub fn count_params(&self) -> usize {
        let linear: usize = self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        let bn: usize = self.norms.iter().map(|b| 2 * b.width()).sum();
        linear + bn + self.act_scales.len()
    }

    pub fn weight_spec(&self, layer: usize) -> Result<QuantSpec, ModelError> {
        let l = &self.layers[layer];
        let proto = QuantSpec::weight(self.bits, 1.0)?;
        let scale = match l.weight_scale {
            Some(s) => s,
            None => calibrate_scale(
                l.weight.as_slice().expect("standard layout"),
                proto,
                ScaleMode::MaxAbs,
            ),
        };
        Ok(proto.with_scale(scale)?)
    }

    pub fn act_spec(&self, layer: usize) -> Result<QuantSpec, ModelError> {
        Ok(QuantSpec::activation(self.bits, self.act_scales[layer])?)
    }

    /// Integer weight levels of one layer (row-major, `out x in`) and their
    /// scale.
    pub fn integer_weights(&self, layer: usize) -> Result<(Vec<i32>, QuantSpec), ModelError> {
        let spec = self.weight_spec(layer)?;
        let levels = self.layers[layer].weight.iter().map(|&w| spec.level(w)).collect();
        Ok((levels, spec))
    }

    fn effective_weight(
        &self,
        layer: usize,
        mode: Mode,
    ) -> Result<(Array2<f64>, Option<Array2<bool>>), ModelError> {
        let w = &self.layers[layer].weight;
        match mode {
            Mode::Real => Ok((w.clone(), None)),
            Mode::FakeQuant => {
                let spec = self.weight_spec(layer)?;
                Ok((w.mapv(|v| spec.fake(v)), Some(w.mapv(|v| spec.passes(v)))))
            }
        }
    }

    /// Forward pass over a batch (`rows x input_dim`).
    pub fn forward_batch(&self, x: &Array2<f64>, mode: Mode, phase: Phase) -> Result<ForwardPass, ModelError> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::Dim {
                expected: self.input_dim(),
                found: x.ncols(),
            });
        }
        let batch = x.nrows() as f64;
        let mut input = x.to_owned();
        let mut hidden = Vec::with_capacity(self.hidden_count());
        let mut levels = Vec::new();

        for l in 0..self.hidden_count() {
            let (weight, weight_pass) = self.effective_weight(l, mode)?;
            let mut z = input.dot(&weight.t());
            z += &self.layers[l].bias;

            let bn = &self.norms[l];
            let (mean, var) = match phase {
                Phase::Train => {
                    let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = z
                        .axis_iter(Axis(0))
                        .fold(Array1::zeros(z.ncols()), |acc: Array1<f64>, row| {
                            acc + (&row - &mean).mapv(|d| d * d)
                        })
                        / batch;
                    (mean, var)
                }
                Phase::Infer => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + bn.eps).sqrt());
            let xhat = (&z - &mean) * &inv_std;
            let pre_act = &xhat * &bn.gamma + &bn.beta;

            let act = match mode {
                Mode::Real => pre_act.mapv(|v| v.max(0.0)),
                Mode::FakeQuant => {
                    let spec = self.act_spec(l)?;
                    let lv = pre_act.mapv(|v| spec.level(v.max(0.0)));
                    let a = lv.mapv(|q| q as f64 * spec.scale);
                    levels.push(lv);
                    a
                }
            };
            hidden.push(HiddenCache {
                input: std::mem::replace(&mut input, act),
                weight,
                weight_pass,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                pre_act,
            });
        }

        let last = self.layers.len() - 1;
        let (out_weight, out_weight_pass) = self.effective_weight(last, mode)?;
        let mut logits = input.dot(&out_weight.t());
        logits += &self.layers[last].bias;
        let probabilities = softmax_rows(&logits);

        Ok(ForwardPass {
            mode,
            phase,
            logits,
            probabilities,
            levels,
            hidden,
            out_input: input,
            out_weight,
            out_weight_pass,
        })
    }

    /// Forward pass that keeps its cache on `tape` for [`Self::backward`].
    pub fn forward_recorded<'t>(
        &self,
        x: &Array2<f64>,
        mode: Mode,
        phase: Phase,
        tape: &'t mut Tape,
    ) -> Result<&'t ForwardPass, ModelError> {
        let pass = self.forward_batch(x, mode, phase)?;
        Ok(tape.pass.insert(pass))
    }

    pub fn forward(&self, block: &FeatureBlock, mode: Mode, phase: Phase) -> Result<Prediction, ModelError> {
        if block.data.len() != self.input_dim() {
            return Err(ModelError::Dim {
                expected: self.input_dim(),
                found: block.data.len(),
            });
        }
        let x = blocks_to_matrix(&[block]);
        let pass = self.forward_batch(&x, mode, phase)?;
        Ok(Prediction {
            logits: pass.logits.row(0).to_vec(),
            probabilities: pass.probabilities.row(0).to_vec(),
        })
    }

    /// Folds the batch statistics of a train-phase pass into the running
    /// statistics (unbiased variance, PyTorch convention).
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        if pass.phase != Phase::Train {
            return;
        }
        let n = pass.logits.nrows() as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        for (bn, cache) in self.norms.iter_mut().zip(&pass.hidden) {
            let m = bn.momentum;
            Zip::from(&mut bn.running_mean)
                .and(&cache.batch_mean)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            Zip::from(&mut bn.running_var)
                .and(&cache.batch_var)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * correction);
        }
    }

    /// Gradients of the mean batch loss for the pass recorded on `tape`.
    pub fn backward(&self, tape: &Tape, targets: &[usize], loss: LossKind) -> Result<Gradients, ModelError> {
        let pass = tape.pass.as_ref().ok_or(ModelError::NoForward)?;
        let rows = pass.logits.nrows();
        if targets.len() != rows {
            return Err(ModelError::Targets { rows, targets: targets.len() });
        }
        let classes = self.output_dim();
        let mut dlogits = Array2::zeros((rows, classes));
        for (r, (&t, p)) in targets.iter().zip(pass.probabilities.rows()).enumerate() {
            let g = loss_grad_logits(loss, p.as_slice().expect("standard layout"), t);
            for (c, v) in g.into_iter().enumerate() {
                dlogits[[r, c]] = v / rows as f64;
            }
        }

        let n_layers = self.layers.len();
        let mut weights = vec![Array2::zeros((0, 0)); n_layers];
        let mut biases = vec![Array1::zeros(0); n_layers];
        let mut gammas = vec![Array1::zeros(0); self.hidden_count()];
        let mut betas = vec![Array1::zeros(0); self.hidden_count()];
        let mut act_scales = vec![0.0; self.hidden_count()];

        let last = n_layers - 1;
        let mut dw = dlogits.t().dot(&pass.out_input);
        if let Some(mask) = &pass.out_weight_pass {
            Zip::from(&mut dw).and(mask).for_each(|g, &p| if !p { *g = 0.0 });
        }
        weights[last] = dw;
        biases[last] = dlogits.sum_axis(Axis(0));
        let mut dact = dlogits.dot(&pass.out_weight);

        for l in (0..self.hidden_count()).rev() {
            let cache = &pass.hidden[l];
            let mut dy = dact;
            match pass.mode {
                Mode::Real => {
                    Zip::from(&mut dy)
                        .and(&cache.pre_act)
                        .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
                }
                Mode::FakeQuant => {
                    let spec = self.act_spec(l)?;
                    let top = spec.hi() as f64 * spec.scale;
                    let mut ds = 0.0;
                    Zip::from(&mut dy).and(&cache.pre_act).for_each(|g, &y| {
                        let r = y.max(0.0);
                        ds += *g * spec.scale_grad(r);
                        if y <= 0.0 || r > top {
                            *g = 0.0;
                        }
                    });
                    act_scales[l] = ds;
                }
            }

            let bn = &self.norms[l];
            gammas[l] = (&dy * &cache.xhat).sum_axis(Axis(0));
            betas[l] = dy.sum_axis(Axis(0));
            let dxhat = &dy * &bn.gamma;
            let dz = match pass.phase {
                Phase::Train => {
                    let n = rows as f64;
                    let sum_dxhat = dxhat.sum_axis(Axis(0));
                    let sum_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                    ((&dxhat * n) - &sum_dxhat - &(&cache.xhat * &sum_dxhat_xhat)) * &(&cache.inv_std / n)
                }
                Phase::Infer => &dxhat * &cache.inv_std,
            };

            let mut dw = dz.t().dot(&cache.input);
            if let Some(mask) = &cache.weight_pass {
                Zip::from(&mut dw).and(mask).for_each(|g, &p| if !p { *g = 0.0 });
            }
            weights[l] = dw;
            biases[l] = dz.sum_axis(Axis(0));
            dact = dz.dot(&cache.weight);
        }

        Ok(Gradients {
            weights,
            biases,
            gammas,
            betas,
            act_scales,
        })
    }

    /// Mutable flat views of every trainable parameter, in the order used
    /// by [`Gradients::slices`].
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        for bn in &mut self.norms {
            out.push(bn.gamma.as_slice_mut().expect("standard layout"));
            out.push(bn.beta.as_slice_mut().expect("standard layout"));
        }
        out.push(&mut self.act_scales);
        out
    }

    /// Sets every activation scale from the max-abs rule on the post-ReLU
    /// activations of `x`, layer by layer so each scale sees the quantised
    /// output of the layers before it.
    pub fn calibrate_activation_scales(&mut self, x: &Array2<f64>, phase: Phase) -> Result<(), ModelError> {
        for l in 0..self.hidden_count() {
            let pass = self.forward_batch(x, Mode::FakeQuant, phase)?;
            let relu: Vec<f64> = pass.hidden[l].pre_act.iter().map(|v| v.max(0.0)).collect();
            let spec = self.act_spec(l)?;
            self.act_scales[l] = calibrate_scale(&relu, spec, ScaleMode::LearnedInit);
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let text = fs::read_to_string(path)?;
        Self::from_text(&text)
    }

    /// Versioned text form: every real is the hex of its IEEE-754 bits, and
    /// a CRC-32 over everything before the final line guards the payload.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} {}", MODEL_MAGIC, MODEL_VERSION).unwrap();
        writeln!(s, "bits {}", self.bits).unwrap();
        writeln!(s, "dims {}", join(self.dims.iter())).unwrap();
        writeln!(s, "meta.seed {}", self.meta.seed).unwrap();
        writeln!(s, "meta.epochs {}", self.meta.epochs).unwrap();
        writeln!(s, "meta.best_epoch {}", opt_u64(self.meta.best_epoch)).unwrap();
        writeln!(s, "meta.best_val_loss {}", opt_hex(self.meta.best_val_loss)).unwrap();
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(s, "layer {} {} {} {}", i, layer.out_dim(), layer.in_dim(), opt_hex(layer.weight_scale)).unwrap();
            for row in layer.weight.rows() {
                writeln!(s, "{}", hex_row(row.iter())).unwrap();
            }
            writeln!(s, "{}", hex_row(layer.bias.iter())).unwrap();
        }
        for (i, bn) in self.norms.iter().enumerate() {
            writeln!(s, "norm {} {} {} {}", i, bn.width(), hex(bn.eps), hex(bn.momentum)).unwrap();
            for v in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                writeln!(s, "{}", hex_row(v.iter())).unwrap();
            }
        }
        writeln!(s, "act_scales {}", hex_row(self.act_scales.iter())).unwrap();
        let crc = crc32fast::hash(s.as_bytes());
        writeln!(s, "crc32 {:08x}", crc).unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let body_end = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|i| i + 1)
            .ok_or(ModelError::Truncated)?;
        let (body, trailer) = text.split_at(body_end);
        let stored = trailer
            .trim()
            .strip_prefix("crc32 ")
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or(ModelError::Truncated)?;
        let computed = crc32fast::hash(body.as_bytes());
        if stored != computed {
            return Err(ModelError::Checksum { stored, computed });
        }

        let mut lines = Lines(body.lines());
        let header = lines.fields(MODEL_MAGIC, 1)?;
        let version: u32 = parse_num(header[0])?;
        if version != MODEL_VERSION {
            return Err(ModelError::Version(version));
        }
        let bits: u8 = parse_num(lines.fields("bits", 1)?[0])?;
        let dims = lines
            .fields("dims", 0)?
            .iter()
            .map(|t| parse_num(t))
            .collect::<Result<Vec<usize>, _>>()?;
        let mut model = CqmlpModel::new(&dims, bits)?;
        model.meta.seed = parse_num(lines.fields("meta.seed", 1)?[0])?;
        model.meta.epochs = parse_num(lines.fields("meta.epochs", 1)?[0])?;
        model.meta.best_epoch = parse_opt_u64(lines.fields("meta.best_epoch", 1)?[0])?;
        model.meta.best_val_loss = parse_opt_hex(lines.fields("meta.best_val_loss", 1)?[0])?;

        for (i, layer) in model.layers.iter_mut().enumerate() {
            let f = lines.fields("layer", 4)?;
            let (idx, out, inp): (usize, usize, usize) = (parse_num(f[0])?, parse_num(f[1])?, parse_num(f[2])?);
            if idx != i || out != layer.out_dim() || inp != layer.in_dim() {
                return Err(ModelError::Format(format!("layer {i} header does not match dims")));
            }
            layer.weight_scale = parse_opt_hex(f[3])?;
            for mut row in layer.weight.rows_mut() {
                let vals = lines.hex_row(inp)?;
                row.assign(&Array1::from(vals));
            }
            layer.bias = Array1::from(lines.hex_row(out)?);
        }
        for (i, bn) in model.norms.iter_mut().enumerate() {
            let f = lines.fields("norm", 4)?;
            let (idx, width): (usize, usize) = (parse_num(f[0])?, parse_num(f[1])?);
            if idx != i || width != bn.width() {
                return Err(ModelError::Format(format!("norm {i} header does not match dims")));
            }
            bn.eps = parse_hex(f[2])?;
            bn.momentum = parse_hex(f[3])?;
            bn.gamma = Array1::from(lines.hex_row(width)?);
            bn.beta = Array1::from(lines.hex_row(width)?);
            bn.running_mean = Array1::from(lines.hex_row(width)?);
            bn.running_var = Array1::from(lines.hex_row(width)?);
            if let Some(c) = bn.running_var.iter().position(|&v| !(v > 0.0)) {
                return Err(ModelError::Format(format!("norm {i} channel {c}: running variance must be positive")));
            }
        }
        let scales = lines.fields("act_scales", model.hidden_count())?;
        model.act_scales = scales.iter().map(|t| parse_hex(t)).collect::<Result<_, _>>()?;
        if lines.0.next().is_some() {
            return Err(ModelError::Format("trailing data before checksum".into()));
        }
        Ok(model)
    }
}

const MODEL_MAGIC: &str = "cqmlp-model";
const MODEL_VERSION: u32 = 1;

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_row<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|&v| hex(v)).collect::<Vec<_>>().join(" ")
}

fn join<T: ToString>(vals: impl Iterator<Item = T>) -> String {
    vals.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn opt_hex(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), hex)
}

fn opt_u64(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

fn parse_hex(t: &str) -> Result<f64, ModelError> {
    if t.len() != 16 {
        return Err(ModelError::Format(format!("bad hex real `{t}`")));
    }
    u64::from_str_radix(t, 16)
        .map(f64::from_bits)
        .map_err(|_| ModelError::Format(format!("bad hex real `{t}`")))
}

fn parse_opt_hex(t: &str) -> Result<Option<f64>, ModelError> {
    if t == "-" {
        Ok(None)
    } else {
        parse_hex(t).map(Some)
    }
}

fn parse_opt_u64(t: &str) -> Result<Option<u64>, ModelError> {
    if t == "-" {
        Ok(None)
    } else {
        parse_num(t).map(Some)
    }
}

fn parse_num<T: std::str::FromStr>(t: &str) -> Result<T, ModelError> {
    t.parse().map_err(|_| ModelError::Format(format!("bad integer `{t}`")))
}

struct Lines<'a>(std::str::Lines<'a>);

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<&'a str, ModelError> {
        self.0.next().ok_or(ModelError::Truncated)
    }

    /// Next line, which must start with `key`; returns the remaining
    /// fields. `count == 0` accepts any number.
    fn fields(&mut self, key: &str, count: usize) -> Result<Vec<&'a str>, ModelError> {
        let line = self.next()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(key) {
            return Err(ModelError::Format(format!("expected `{key}`, found `{line}`")));
        }
        let rest: Vec<&str> = it.collect();
        if count != 0 && rest.len() != count {
            return Err(ModelError::Format(format!("`{key}` expects {count} fields, found {}", rest.len())));
        }
        Ok(rest)
    }

    fn hex_row(&mut self, len: usize) -> Result<Vec<f64>, ModelError> {
        let vals = self
            .next()?
            .split_whitespace()
            .map(parse_hex)
            .collect::<Result<Vec<_>, _>>()?;
        if vals.len() != len {
            return Err(ModelError::Format(format!("expected {len} values, found {}", vals.len())));
        }
        Ok(vals)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::Label;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_model(dims: &[usize], bits: u8, seed: u64) -> CqmlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = CqmlpModel::new(dims, bits).unwrap();
        m.init_kaiming(&mut rng);
        for bn in &mut m.norms {
            bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            bn.beta.mapv_inplace(|_| rng.random_range(-0.2..0.2));
            bn.running_mean.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
        }
        m
    }

    fn random_input(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-128i32..128) as f64 / 128.0)
    }

    #[test]
    fn parameter_counts() {
        let m = CqmlpModel::default_arch(2).unwrap();
        assert_eq!(m.count_params(), 54_824);
        let linear: usize = m.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum();
        assert_eq!(linear, 53_860);
        let toy = CqmlpModel::new(&[2, 3, 4], 2).unwrap();
        assert_eq!(toy.count_params(), 32);
        assert!(CqmlpModel::new(&[4], 2).is_err());
        assert!(CqmlpModel::new(&[4, 2], 5).is_err());
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = CqmlpModel::default_arch(2).unwrap();
        let block = FeatureBlock {
            data: vec![0; 40],
            label: Label::Benign,
            window_start: 0,
        };
        for mode in [Mode::Real, Mode::FakeQuant] {
            let p = m.forward(&block, mode, Phase::Infer).unwrap();
            assert_eq!(p.logits, vec![0.0; 4]);
            for v in p.probabilities {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2f64.ln(), 0.0, 0.0, 0.0]);
        for (got, want) in p.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((got - want).abs() < 1e-12);
        }
        let big = softmax(&[1000.0, 0.0, -1000.0]);
        assert!(big.iter().all(|v| v.is_finite()));
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_a_simplex() {
        let m = random_model(&DEFAULT_DIMS, 3, 1);
        let x = random_input(64, 40, 2);
        for mode in [Mode::Real, Mode::FakeQuant] {
            let pass = m.forward_batch(&x, mode, Phase::Infer).unwrap();
            for row in pass.probabilities.rows() {
                assert!(row.iter().all(|&p| p > 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = CqmlpModel::default_arch(2).unwrap();
        let block = FeatureBlock {
            data: vec![0; 30],
            label: Label::Benign,
            window_start: 0,
        };
        assert!(matches!(
            m.forward(&block, Mode::Real, Phase::Infer),
            Err(ModelError::Dim { expected: 40, found: 30 })
        ));
    }

    #[test]
    fn infer_batch_norm_matches_explicit_affine() {
        let m = random_model(&[40, 8, 4], 4, 3);
        let x = random_input(5, 40, 4);
        let pass = m.forward_batch(&x, Mode::Real, Phase::Infer).unwrap();
        let z = x.dot(&m.layers[0].weight.t()) + &m.layers[0].bias;
        let bn = &m.norms[0];
        for r in 0..5 {
            for c in 0..8 {
                let explicit = (z[[r, c]] - bn.running_mean[c]) / (bn.running_var[c] + bn.eps).sqrt()
                    * bn.gamma[c]
                    + bn.beta[c];
                assert!((pass.hidden[0].pre_act[[r, c]] - explicit).abs() < 1e-12);
                assert!((bn.apply(c, z[[r, c]]) - explicit).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eight_bit_fake_quant_tracks_real_within_propagated_bound() {
        let mut m = random_model(&DEFAULT_DIMS, 8, 5);
        let x = random_input(200, 40, 6);
        // Scales large enough that no activation saturates.
        let real = m.forward_batch(&x, Mode::Real, Phase::Infer).unwrap();
        for l in 0..m.hidden_count() {
            let max = real.hidden[l].pre_act.iter().fold(0.0f64, |a, &v| a.max(v));
            m.act_scales[l] = 2.0 * max / 255.0;
        }
        let fq = m.forward_batch(&x, Mode::FakeQuant, Phase::Infer).unwrap();

        for r in 0..x.nrows() {
            // Per-channel bound on |fake - real| propagated layer by layer.
            let mut err = vec![0.0; 40];
            let mut real_in: Vec<f64> = x.row(r).to_vec();
            for l in 0..m.layers.len() {
                let w = &m.layers[l].weight;
                let spec = m.weight_spec(l).unwrap();
                let out = w.nrows();
                let mut next_err = vec![0.0; out];
                for j in 0..out {
                    let mut e = 0.0;
                    for i in 0..w.ncols() {
                        let wq = spec.fake(w[[j, i]]);
                        e += wq.abs() * err[i] + (wq - w[[j, i]]).abs() * real_in[i].abs();
                    }
                    next_err[j] = e;
                }
                if l < m.hidden_count() {
                    let bn = &m.norms[l];
                    for j in 0..out {
                        let gain = (bn.gamma[j] / (bn.running_var[j] + bn.eps).sqrt()).abs();
                        next_err[j] = gain * next_err[j] + m.act_scales[l] / 2.0;
                    }
                    real_in = real.hidden[l + 1..]
                        .first()
                        .map(|h| h.input.row(r).to_vec())
                        .unwrap_or_else(|| real.out_input.row(r).to_vec());
                } else {
                    for j in 0..out {
                        let d = (fq.logits[[r, j]] - real.logits[[r, j]]).abs();
                        assert!(d <= next_err[j] + 1e-9, "row {r} logit {j}: {d} > {}", next_err[j]);
                    }
                }
                err = next_err;
            }
        }
    }

    #[test]
    fn backward_before_forward_errors() {
        let m = CqmlpModel::new(&[40, 8, 4], 2).unwrap();
        let tape = Tape::new();
        assert!(matches!(m.backward(&tape, &[0], LossKind::Bce), Err(ModelError::NoForward)));
    }

    #[test]
    fn confident_correct_prediction_has_zero_gradient() {
        let mut m = CqmlpModel::new(&[40, 8, 4], 2).unwrap();
        m.layers[1].bias = Array1::from(vec![1000.0, 0.0, 0.0, 0.0]);
        let x = random_input(3, 40, 7);
        let mut tape = Tape::new();
        for mode in [Mode::Real, Mode::FakeQuant] {
            m.forward_recorded(&x, mode, Phase::Train, &mut tape).unwrap();
            let g = m.backward(&tape, &[0, 0, 0], LossKind::Bce).unwrap();
            assert_eq!(g.max_abs(), 0.0);
        }
    }

    #[test]
    fn clamped_weights_get_no_gradient() {
        let mut m = random_model(&[40, 8, 4], 2, 8);
        m.layers[0].weight_scale = Some(0.05);
        let x = random_input(16, 40, 9);
        let mut tape = Tape::new();
        m.forward_recorded(&x, Mode::FakeQuant, Phase::Train, &mut tape).unwrap();
        let g = m.backward(&tape, &[1; 16], LossKind::Bce).unwrap();
        let spec = m.weight_spec(0).unwrap();
        let mut clamped = 0;
        for (w, gw) in m.layers[0].weight.iter().zip(g.weights[0].iter()) {
            if !spec.passes(*w) {
                clamped += 1;
                assert_eq!(*gw, 0.0);
            }
        }
        assert!(clamped > 0);
        assert!(g.weights[0].iter().any(|&v| v != 0.0));
    }

    fn batch_loss(m: &CqmlpModel, x: &Array2<f64>, targets: &[usize], mode: Mode) -> f64 {
        let pass = m.forward_batch(x, mode, Phase::Train).unwrap();
        pass.probabilities
            .rows()
            .into_iter()
            .zip(targets)
            .map(|(p, &t)| crate::training::loss(p.as_slice().unwrap(), t))
            .sum::<f64>()
            / targets.len() as f64
    }

    #[test]
    fn real_gradients_match_finite_differences() {
        let m = random_model(&[40, 8, 4], 2, 10);
        let x = random_input(6, 40, 11);
        let targets = [0, 1, 2, 3, 1, 0];
        let mut tape = Tape::new();
        m.forward_recorded(&x, Mode::Real, Phase::Train, &mut tape).unwrap();
        let g = m.backward(&tape, &targets, LossKind::Bce).unwrap();
        let analytic: Vec<f64> = g.slices().iter().flat_map(|s| s.iter().copied()).collect();

        let h = 1e-5;
        let mut numeric = Vec::new();
        let mut probe = m.clone();
        let n_slices = probe.params_mut().len();
        for s in 0..n_slices {
            let len = probe.params_mut()[s].len();
            for i in 0..len {
                let orig = probe.params_mut()[s][i];
                probe.params_mut()[s][i] = orig + h;
                let up = batch_loss(&probe, &x, &targets, Mode::Real);
                probe.params_mut()[s][i] = orig - h;
                let down = batch_loss(&probe, &x, &targets, Mode::Real);
                probe.params_mut()[s][i] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        assert!(diff / norm < 1e-4, "relative error {}", diff / norm);
    }

    #[test]
    fn activation_scale_gradient_matches_surrogate() {
        // One hidden layer: the loss depends on the scale only through the
        // hidden activations. Rebuild that tail by hand with the STE
        // surrogate a(s) = s * (clamp(r/s) + c), c frozen, and difference it.
        let mut m = random_model(&[40, 8, 4], 3, 12);
        let x = random_input(32, 40, 13);
        m.calibrate_activation_scales(&x, Phase::Train).unwrap();
        m.act_scales[0] *= 0.8;
        let targets: Vec<usize> = (0..32).map(|i| i % 4).collect();
        let mut tape = Tape::new();
        let pass = m.forward_recorded(&x, Mode::FakeQuant, Phase::Train, &mut tape).unwrap().clone();
        let g = m.backward(&tape, &targets, LossKind::Bce).unwrap();

        let s0 = m.act_scales[0];
        let hi = m.act_spec(0).unwrap().hi() as f64;
        let relu = pass.hidden[0].pre_act.mapv(|v| v.max(0.0));
        let resid = relu.mapv(|r| {
            let v = (r / s0).clamp(0.0, hi);
            v.round() - v
        });
        let (w_out, _) = m.effective_weight(1, Mode::FakeQuant).unwrap();
        let loss_at = |s: f64| {
            let a = Zip::from(&relu).and(&resid).map_collect(|&r, &c| s * ((r / s).clamp(0.0, hi) + c));
            let logits = a.dot(&w_out.t()) + &m.layers[1].bias;
            logits
                .rows()
                .into_iter()
                .zip(&targets)
                .map(|(z, &t)| crate::training::loss(&softmax(z.as_slice().unwrap()), t))
                .sum::<f64>()
                / targets.len() as f64
        };
        assert!((loss_at(s0) - batch_loss(&m, &x, &targets, Mode::FakeQuant)).abs() < 1e-12);
        let h = 1e-6;
        let fd = (loss_at(s0 + h) - loss_at(s0 - h)) / (2.0 * h);
        assert!((fd - g.act_scales[0]).abs() <= 1e-6 * fd.abs().max(1.0), "fd {fd} vs {}", g.act_scales[0]);
        assert!(g.act_scales[0] != 0.0);
    }

    #[test]
    fn running_stats_update() {
        let mut m = random_model(&[40, 8, 4], 2, 14);
        for bn in &mut m.norms {
            *bn = BatchNorm::identity(bn.width());
        }
        let x = random_input(10, 40, 15);
        let pass = m.forward_batch(&x, Mode::Real, Phase::Train).unwrap();
        m.update_running_stats(&pass);
        let z = x.dot(&m.layers[0].weight.t()) + &m.layers[0].bias;
        let mean = z.mean_axis(Axis(0)).unwrap();
        let var = z.var_axis(Axis(0), 1.0);
        for c in 0..8 {
            assert!((m.norms[0].running_mean[c] - 0.1 * mean[c]).abs() < 1e-12);
            assert!((m.norms[0].running_var[c] - (0.9 + 0.1 * var[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = random_model(&DEFAULT_DIMS, 3, 16);
        m.meta = TrainMeta {
            seed: 7,
            epochs: 12,
            best_epoch: Some(4),
            best_val_loss: Some(0.123456789),
        };
        m.layers[2].weight_scale = Some(0.01);
        let text = m.to_text();
        let back = CqmlpModel::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.bits, 3);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cqm");
        m.save(&path).unwrap();
        let loaded = CqmlpModel::load(&path).unwrap();
        loaded.save(dir.path().join("m2.cqm")).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("m2.cqm")).unwrap());
    }

    #[test]
    fn load_rejects_damage() {
        let m = random_model(&[40, 8, 4], 2, 17);
        let text = m.to_text();

        let corrupted = text.replacen("bits 2", "bits 3", 1);
        assert!(matches!(CqmlpModel::from_text(&corrupted), Err(ModelError::Checksum { .. })));

        let lines: Vec<&str> = text.lines().collect();
        let truncated = lines[..lines.len() / 2].join("\n");
        assert!(CqmlpModel::from_text(&truncated).is_err());

        let v2 = text.replacen("cqmlp-model 1", "cqmlp-model 2", 1);
        let body_end = v2.trim_end().rfind('\n').unwrap() + 1;
        let body = &v2[..body_end];
        let resealed = format!("{}crc32 {:08x}\n", body, crc32fast::hash(body.as_bytes()));
        assert!(matches!(CqmlpModel::from_text(&resealed), Err(ModelError::Version(2))));
    }
}

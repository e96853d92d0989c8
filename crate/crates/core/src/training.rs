//! Quantisation-aware training: loss, Adam, the epoch loop with
//! best-validation checkpointing, and loss-curve export.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cqmlp::{blocks_to_matrix, CqmlpModel, ModelError, Mode, Phase, Tape, DEFAULT_DIMS};
use crate::feature::{DatasetSplit, FeatureBlock};

/// Probabilities are clipped to `[CLIP, 1 - CLIP]` before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    /// Mean binary cross-entropy of the softmax outputs against the one-hot
    /// target.
    #[default]
    Bce,
    /// Categorical cross-entropy, `-ln p_target`.
    CrossEntropy,
}

fn clip(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

/// `-(1/C) * sum_c [y_c ln p_c + (1 - y_c) ln(1 - p_c)]` with one-hot `y`.
pub fn loss(probabilities: &[f64], target: usize) -> f64 {
    loss_of(LossKind::Bce, probabilities, target)
}

pub fn loss_of(kind: LossKind, probabilities: &[f64], target: usize) -> f64 {
    match kind {
        LossKind::Bce => {
            let c = probabilities.len() as f64;
            -probabilities
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let p = clip(p);
                    if i == target {
                        p.ln()
                    } else {
                        (1.0 - p).ln()
                    }
                })
                .sum::<f64>()
                / c
        }
        LossKind::CrossEntropy => -clip(probabilities[target]).ln(),
    }
}

/// Gradient of the per-sample loss with respect to the logits that
/// produced `probabilities` through softmax. Clipped components contribute
/// nothing.
pub fn loss_grad_logits(kind: LossKind, probabilities: &[f64], target: usize) -> Vec<f64> {
    let c = probabilities.len() as f64;
    let inside = |p: f64| p > PROB_CLIP && p < 1.0 - PROB_CLIP;
    let dp: Vec<f64> = probabilities
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            if !inside(p) {
                return 0.0;
            }
            match kind {
                LossKind::Bce if i == target => -1.0 / (c * p),
                LossKind::Bce => 1.0 / (c * (1.0 - p)),
                LossKind::CrossEntropy if i == target => -1.0 / p,
                LossKind::CrossEntropy => 0.0,
            }
        })
        .collect();
    let dot: f64 = dp.iter().zip(probabilities).map(|(g, p)| g * p).sum();
    probabilities
        .iter()
        .zip(&dp)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` must keep the same
    /// structure across calls.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "group {k} shape");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub bits: u8,
    pub seed: u64,
    pub loss: LossKind,
    pub dims: Vec<usize>,
    pub mode: Mode,
    /// Where to write the best checkpoint, if anywhere.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 128,
            epochs: 50,
            bits: 2,
            seed: 0,
            loss: LossKind::Bce,
            dims: DEFAULT_DIMS.to_vec(),
            mode: Mode::FakeQuant,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    pub train: Vec<f64>,
    pub validation: Vec<f64>,
}

impl LossCurve {
    pub fn len(&self) -> usize {
        self.train.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train.is_empty()
    }

    /// 1-based epoch with the lowest validation loss (first on ties).
    pub fn best_epoch(&self) -> Option<(u64, f64)> {
        self.validation
            .iter()
            .enumerate()
            .fold(None, |best: Option<(u64, f64)>, (i, &v)| match best {
                Some((_, b)) if b <= v => best,
                _ => Some((i as u64 + 1, v)),
            })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss, or the
    /// initial model when no epoch ran.
    pub model: CqmlpModel,
    pub curve: LossCurve,
}

fn labels_of(blocks: &[&FeatureBlock]) -> Vec<usize> {
    blocks.iter().map(|b| b.label.index()).collect()
}

/// Mean over batches of the mean per-sample loss, in inference phase.
pub fn evaluate_loss(
    model: &CqmlpModel,
    blocks: &[FeatureBlock],
    batch_size: usize,
    mode: Mode,
    kind: LossKind,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in blocks.chunks(batch_size.max(1)) {
        let refs: Vec<&FeatureBlock> = chunk.iter().collect();
        let x = blocks_to_matrix(&refs);
        let pass = model.forward_batch(&x, mode, Phase::Infer)?;
        let targets = labels_of(&refs);
        let sum: f64 = pass
            .probabilities
            .rows()
            .into_iter()
            .zip(&targets)
            .map(|(p, &t)| loss_of(kind, p.as_slice().expect("standard layout"), t))
            .sum();
        total += sum / chunk.len() as f64;
        batches += 1;
    }
    Ok(if batches == 0 { 0.0 } else { total / batches as f64 })
}

/// Predicted class index for each block, inference phase.
pub fn predict(model: &CqmlpModel, blocks: &[FeatureBlock], mode: Mode) -> Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(blocks.len());
    for chunk in blocks.chunks(1024) {
        let refs: Vec<&FeatureBlock> = chunk.iter().collect();
        let pass = model.forward_batch(&blocks_to_matrix(&refs), mode, Phase::Infer)?;
        out.extend(pass.predictions());
    }
    Ok(out)
}

/// Builds the initial model: Kaiming weights, identity batch norm, and
/// activation scales calibrated on the first training batch.
pub fn init_model(config: &TrainConfig, train: &[FeatureBlock]) -> Result<CqmlpModel, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = CqmlpModel::new(&config.dims, config.bits)?;
    model.init_kaiming(&mut rng);
    model.meta.seed = config.seed;
    if !train.is_empty() {
        let n = config.batch_size.min(train.len()).max(2.min(train.len()));
        let refs: Vec<&FeatureBlock> = train[..n].iter().collect();
        let phase = if n > 1 { Phase::Train } else { Phase::Infer };
        model.calibrate_activation_scales(&blocks_to_matrix(&refs), phase)?;
    }
    Ok(model)
}

/// Runs quantisation-aware training.
pub fn train_qat(config: &TrainConfig, split: &DatasetSplit) -> Result<TrainOutcome, TrainError> {
    train_qat_with(config, split, |_, _, _| {})
}

/// Like [`train_qat`], calling `on_epoch(epoch, train_loss, val_loss)`
/// after every epoch.
pub fn train_qat_with(
    config: &TrainConfig,
    split: &DatasetSplit,
    mut on_epoch: impl FnMut(u64, f64, f64),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = init_model(config, &split.train)?;
    let mut curve = LossCurve::default();
    if config.epochs == 0 {
        save_checkpoint(config, &model)?;
        return Ok(TrainOutcome { model, curve });
    }
    if split.train.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if split.validation.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }

    let mut adam = Adam::new();
    let mut tape = Tape::new();
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut best: Option<(f64, CqmlpModel)> = None;

    for epoch in 1..=config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch));
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut train_total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let refs: Vec<&FeatureBlock> = chunk.iter().map(|&i| &split.train[i]).collect();
            let x: Array2<f64> = blocks_to_matrix(&refs);
            let targets = labels_of(&refs);
            // A single-row batch has no batch variance.
            let phase = if chunk.len() > 1 { Phase::Train } else { Phase::Infer };
            let pass = model.forward_recorded(&x, config.mode, phase, &mut tape)?;
            train_total += pass
                .probabilities
                .rows()
                .into_iter()
                .zip(&targets)
                .map(|(p, &t)| loss_of(config.loss, p.as_slice().expect("standard layout"), t))
                .sum::<f64>()
                / chunk.len() as f64;
            batches += 1;

            let grads = model.backward(&tape, &targets, config.loss)?;
            let pass = tape.pass().expect("recorded above");
            model.update_running_stats(pass);
            adam.step(model.params_mut(), &grads.slices(), config.learning_rate);
            for s in &mut model.act_scales {
                *s = s.max(1e-6);
            }
        }

        let train_loss = train_total / batches as f64;
        let val_loss = evaluate_loss(&model, &split.validation, config.batch_size, config.mode, config.loss)?;
        curve.train.push(train_loss);
        curve.validation.push(val_loss);
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        on_epoch(epoch, train_loss, val_loss);

        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            let mut snapshot = model.clone();
            snapshot.meta.epochs = config.epochs;
            snapshot.meta.best_epoch = Some(epoch);
            snapshot.meta.best_val_loss = Some(val_loss);
            save_checkpoint(config, &snapshot)?;
            best = Some((val_loss, snapshot));
        }
    }

    let (_, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome { model, curve })
}

fn save_checkpoint(config: &TrainConfig, model: &CqmlpModel) -> Result<(), TrainError> {
    if let Some(path) = &config.checkpoint {
        model.save(path).map_err(|e| match e {
            ModelError::Io(source) => TrainError::Io {
                path: path.clone(),
                source,
            },
            other => TrainError::Model(other),
        })?;
    }
    Ok(())
}

/// Writes `epoch,train_loss,val_loss` rows. Values use the shortest
/// representation that parses back to the same f64.
pub fn export_loss_csv(curve: &LossCurve, path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = Vec::new();
    write_loss_csv(curve, &mut out)?;
    fs::write(path, out)
}

pub fn write_loss_csv<W: Write>(curve: &LossCurve, mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,train_loss,val_loss")?;
    for (i, (t, v)) in curve.train.iter().zip(&curve.validation).enumerate() {
        writeln!(out, "{},{},{}", i + 1, t, v)?;
    }
    Ok(())
}

pub fn parse_loss_csv(text: &str) -> Result<LossCurve, String> {
    let mut lines = text.lines();
    if lines.next() != Some("epoch,train_loss,val_loss") {
        return Err("missing header".into());
    }
    let mut curve = LossCurve::default();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(format!("row {}: expected 3 fields", i + 1));
        }
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format!("row {}: {e}", i + 1));
        curve.train.push(parse(f[1])?);
        curve.validation.push(parse(f[2])?);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::can::Label;
    use crate::feature::{split_dataset, DEFAULT_RATIOS};
    use rand::Rng;

    #[test]
    fn bce_examples() {
        assert!(loss(&[1.0, 0.0, 0.0, 0.0], 0) < 1e-6);
        let uniform = loss(&[0.25; 4], 0);
        let expected = -(0.25f64.ln() + 3.0 * 0.75f64.ln()) / 4.0;
        assert!((uniform - expected).abs() < 1e-12);
        assert!((uniform - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn bce_is_permutation_symmetric() {
        let p = [0.1, 0.2, 0.3, 0.4];
        let base = loss(&p, 2);
        let perm = [3usize, 0, 2, 1];
        let q: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
        let target = perm.iter().position(|&i| i == 2).unwrap();
        assert!((loss(&q, target) - base).abs() < 1e-15);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 0.8, 0.1];
        for kind in [LossKind::Bce, LossKind::CrossEntropy] {
            let g = loss_grad_logits(kind, &crate::cqmlp::softmax(&z), 1);
            for i in 0..4 {
                let h = 1e-6;
                let mut up = z;
                up[i] += h;
                let mut down = z;
                down[i] -= h;
                let fd = (loss_of(kind, &crate::cqmlp::softmax(&up), 1)
                    - loss_of(kind, &crate::cqmlp::softmax(&down), 1))
                    / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-7, "{kind:?} {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = vec![1.0, 1.0, 1.0];
        let g = [0.5, -3.0, 1e-3];
        let mut adam = Adam::new();
        adam.step(vec![&mut p], &[&g], 0.01);
        for (pi, gi) in p.iter().zip(g) {
            let step = 1.0 - pi;
            assert!((step - 0.01 * gi.signum()).abs() < 1e-6, "{step}");
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![0.3, -0.7];
        let mut adam = Adam::new();
        for _ in 0..100 {
            adam.step(vec![&mut p], &[&[0.0, 0.0]], 0.1);
        }
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn adam_step_descends_quadratic_bowl() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for lr in [1e-4, 1e-3, 1e-2] {
            let mut p: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
            let f = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>();
            let before = f(&p);
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            let mut adam = Adam::new();
            adam.step(vec![&mut p], &[&g], lr);
            assert!(f(&p) < before);
        }
    }

    fn toy_blocks(n: usize, seed: u64) -> Vec<FeatureBlock> {
        // Class 0: first byte negative; class 1: first byte positive.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { Label::Benign } else { Label::DoS };
                let mut data: Vec<i8> = (0..40).map(|_| rng.random_range(-20..20)).collect();
                data[0] = if label == Label::Benign { -100 } else { 100 };
                FeatureBlock {
                    data,
                    label,
                    window_start: i as u64,
                }
            })
            .collect()
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 20,
            bits: 2,
            seed: 4,
            dims: vec![40, 16, 8, 4],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let split = split_dataset(toy_blocks(100, 1), DEFAULT_RATIOS, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..toy_config()
        };
        let out = train_qat(&cfg, &split).unwrap();
        assert!(out.curve.is_empty());
        assert_eq!(out.model, init_model(&cfg, &split.train).unwrap());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let split = split_dataset(toy_blocks(400, 2), DEFAULT_RATIOS, 2).unwrap();
        let cfg = toy_config();
        let a = train_qat(&cfg, &split).unwrap();
        let b = train_qat(&cfg, &split).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model.to_text(), b.model.to_text());
        assert_eq!(a.curve.len(), 20);
        assert!(a.curve.validation[19] < a.curve.validation[0], "{:?}", a.curve.validation);

        let (best_epoch, best_val) = a.curve.best_epoch().unwrap();
        assert_eq!(a.model.meta.best_epoch, Some(best_epoch));
        let reeval = evaluate_loss(&a.model, &split.validation, cfg.batch_size, cfg.mode, cfg.loss).unwrap();
        assert_eq!(reeval, best_val);
        let min = a.curve.validation.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(best_val, min);
    }

    #[test]
    fn checkpoint_written_and_reloadable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("best.cqm");
        let split = split_dataset(toy_blocks(120, 3), DEFAULT_RATIOS, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            checkpoint: Some(path.clone()),
            ..toy_config()
        };
        let out = train_qat(&cfg, &split).unwrap();
        assert_eq!(CqmlpModel::load(&path).unwrap(), out.model);
    }

    #[test]
    fn bad_config_rejected() {
        let split = split_dataset(toy_blocks(40, 1), DEFAULT_RATIOS, 1).unwrap();
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..toy_config() },
            TrainConfig { batch_size: 0, ..toy_config() },
        ] {
            assert!(matches!(train_qat(&cfg, &split), Err(TrainError::Config(_))));
        }
    }

    #[test]
    fn loss_csv_round_trip() {
        let curve = LossCurve {
            train: vec![0.5623351446188083, 0.31, 1.0 / 3.0],
            validation: vec![0.6, 0.2999999999999, 0.123456789012345],
        };
        let mut buf = Vec::new();
        write_loss_csv(&curve, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let back = parse_loss_csv(&text).unwrap();
        for (a, b) in back.train.iter().chain(&back.validation).zip(curve.train.iter().chain(&curve.validation)) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }

        let mut empty = Vec::new();
        write_loss_csv(&LossCurve::default(), &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "epoch,train_loss,val_loss\n");

        let dir = tempfile::tempdir().unwrap();
        assert!(export_loss_csv(&curve, dir.path().join("missing/dir/loss.csv")).is_err());
    }
}

//! Integer-only inference.
//!
//! [`streamline`] folds the input and weight scales, the bias, batch norm and
//! the activation quantiser of every hidden layer into a table of integer
//! thresholds per output channel: the channel emits level `k` iff its
//! integer accumulator reaches `T_k`. Channels whose batch-norm gain is
//! negative are mirrored by negating their weights, so every comparison is
//! `z >= T`. The output layer keeps a real affine read-out that only feeds
//! argmax.

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::can::CanFrame;
use crate::cqmlp::{argmax, blocks_to_matrix, CqmlpModel, ModelError, Mode, Phase, INPUT_SCALE};
use crate::feature::{encode_frame, FeatureBlock, MESSAGE_BYTES, WINDOW};

#[derive(Debug, Error)]
pub enum StreamlineError {
    #[error("layer {layer} channel {channel}: batch-norm gamma is zero")]
    ZeroGamma { layer: usize, channel: usize },
    #[error("layer {layer} channel {channel}: running variance {value} is not positive")]
    Variance { layer: usize, channel: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("pipeline file: {0}")]
    Format(String),
    #[error("pipeline file checksum mismatch")]
    Checksum,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out x in` weight levels; mirrored rows are negated.
    pub weights: Vec<i32>,
    /// `out_dim` rows of `2^bits - 1` non-decreasing thresholds.
    pub thresholds: Vec<Vec<i32>>,
    pub mirrored: Vec<bool>,
}

impl ThresholdLayer {
    fn accumulate(&self, input: &[i32], out: &mut Vec<i32>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.in_dim).map(|row| {
            row.iter().zip(input).map(|(&w, &x)| w * x).sum::<i32>()
        }));
    }

    /// Level of one channel for accumulator `z`: the number of thresholds
    /// reached.
    #[inline]
    pub fn level(&self, channel: usize, z: i32) -> i32 {
        self.thresholds[channel].partition_point(|&t| t <= z) as i32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<i32>,
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdPipeline {
    pub bits: u8,
    pub input_dim: usize,
    pub hidden: Vec<ThresholdLayer>,
    pub output: Readout,
}

/// Result of one integer inference.
#[derive(Debug, Clone, PartialEq)]
pub struct IntInference {
    pub class: usize,
    /// Activation levels of every hidden layer.
    pub trace: Vec<Vec<i32>>,
    pub logits: Vec<f64>,
}

/// Folds a trained model into a threshold pipeline. Batch norm uses its
/// running statistics.
pub fn streamline(model: &CqmlpModel) -> Result<ThresholdPipeline, StreamlineError> {
    let mut hidden = Vec::with_capacity(model.hidden_count());
    let mut in_scale = INPUT_SCALE;
    // Largest |input level| reaching the layer.
    let mut in_max: i64 = 128;

    for l in 0..model.hidden_count() {
        let layer = &model.layers[l];
        let bn = &model.norms[l];
        let (mut weights, wspec) = model.integer_weights(l)?;
        let aspec = model.act_spec(l)?;
        let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
        let levels = aspec.hi();
        let z_max = in_dim as i64 * in_max * wspec.hi() as i64;
        let acc_scale = wspec.scale * in_scale;

        let mut thresholds = Vec::with_capacity(out_dim);
        let mut mirrored = Vec::with_capacity(out_dim);
        for j in 0..out_dim {
            let gamma = bn.gamma[j];
            if gamma == 0.0 {
                return Err(StreamlineError::ZeroGamma { layer: l, channel: j });
            }
            let var = bn.running_var[j];
            if !(var > 0.0) {
                return Err(StreamlineError::Variance { layer: l, channel: j, value: var });
            }
            let inv_std = 1.0 / (var + bn.eps).sqrt();
            let (mean, beta, bias) = (bn.running_mean[j], bn.beta[j], layer.bias[j]);

            // Same operation order as the fake-quant forward pass.
            let level_at = |z: i64| -> i32 {
                let pre = acc_scale * z as f64 + bias;
                let y = (pre - mean) * inv_std * gamma + beta;
                aspec.level(y.max(0.0))
            };
            let mirror = gamma < 0.0;
            let eff = |z: i64| if mirror { level_at(-z) } else { level_at(z) };

            let gain = gamma * inv_std * acc_scale;
            let offset = (bias - mean) * inv_std * gamma + beta;
            let row: Vec<i32> = (1..=levels)
                .map(|k| {
                    let t = ((k as f64 - 0.5) * aspec.scale - offset) / gain;
                    let t = if mirror { -t } else { t };
                    let mut th = if t.is_nan() { z_max + 1 } else { (t.ceil() as i64).clamp(-z_max, z_max + 1) };
                    while th > -z_max && eff(th - 1) >= k {
                        th -= 1;
                    }
                    while th <= z_max && eff(th) < k {
                        th += 1;
                    }
                    th as i32
                })
                .collect();
            if mirror {
                for w in &mut weights[j * in_dim..(j + 1) * in_dim] {
                    *w = -*w;
                }
            }
            thresholds.push(row);
            mirrored.push(mirror);
        }

        hidden.push(ThresholdLayer {
            in_dim,
            out_dim,
            weights,
            thresholds,
            mirrored,
        });
        in_scale = aspec.scale;
        in_max = levels as i64;
    }

    let last = model.layers.len() - 1;
    let (weights, wspec) = model.integer_weights(last)?;
    let out = &model.layers[last];
    let output = Readout {
        in_dim: out.in_dim(),
        out_dim: out.out_dim(),
        weights,
        scale: vec![wspec.scale * in_scale; out.out_dim()],
        offset: out.bias.to_vec(),
    };
    Ok(ThresholdPipeline {
        bits: model.bits,
        input_dim: model.input_dim(),
        hidden,
        output,
    })
}

impl ThresholdPipeline {
    pub fn run_int(&self, block: &FeatureBlock) -> IntInference {
        self.run_bytes(&block.data)
    }

    /// Integer inference over raw signed input bytes.
    pub fn run_bytes(&self, data: &[i8]) -> IntInference {
        assert_eq!(data.len(), self.input_dim, "input width");
        let mut act: Vec<i32> = data.iter().map(|&b| b as i32).collect();
        let mut acc = Vec::new();
        let mut trace = Vec::with_capacity(self.hidden.len());
        for layer in &self.hidden {
            layer.accumulate(&act, &mut acc);
            act = acc.iter().enumerate().map(|(j, &z)| layer.level(j, z)).collect();
            trace.push(act.clone());
        }
        let logits: Vec<f64> = self
            .output
            .weights
            .chunks_exact(self.output.in_dim)
            .enumerate()
            .map(|(j, row)| {
                let z: i32 = row.iter().zip(&act).map(|(&w, &x)| w * x).sum();
                self.output.scale[j] * z as f64 + self.output.offset[j]
            })
            .collect();
        IntInference {
            class: argmax(&logits),
            trace,
            logits,
        }
    }

    /// Class only; skips building the trace.
    pub fn classify(&self, data: &[i8]) -> usize {
        self.run_bytes(data).class
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), StreamlineError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StreamlineError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let ints = |v: &[i32]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
        let hexes = |v: &[f64]| v.iter().map(|x| format!("{:016x}", x.to_bits())).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "{PIPELINE_MAGIC} {PIPELINE_VERSION}").unwrap();
        writeln!(s, "bits {}", self.bits).unwrap();
        writeln!(s, "input {}", self.input_dim).unwrap();
        writeln!(s, "hidden_layers {}", self.hidden.len()).unwrap();
        for (i, h) in self.hidden.iter().enumerate() {
            writeln!(s, "hidden {} {} {}", i, h.out_dim, h.in_dim).unwrap();
            let flags: Vec<i32> = h.mirrored.iter().map(|&m| m as i32).collect();
            writeln!(s, "{}", ints(&flags)).unwrap();
            for (row, th) in h.weights.chunks_exact(h.in_dim).zip(&h.thresholds) {
                writeln!(s, "{}", ints(row)).unwrap();
                writeln!(s, "{}", ints(th)).unwrap();
            }
        }
        let o = &self.output;
        writeln!(s, "readout {} {}", o.out_dim, o.in_dim).unwrap();
        for row in o.weights.chunks_exact(o.in_dim) {
            writeln!(s, "{}", ints(row)).unwrap();
        }
        writeln!(s, "{}", hexes(&o.scale)).unwrap();
        writeln!(s, "{}", hexes(&o.offset)).unwrap();
        let crc = crc32fast::hash(s.as_bytes());
        writeln!(s, "crc32 {crc:08x}").unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self, StreamlineError> {
        let fmt_err = |m: &str| StreamlineError::Format(m.to_string());
        let body_end = text
            .trim_end_matches('\n')
            .rfind('\n')
            .map(|i| i + 1)
            .ok_or_else(|| fmt_err("truncated"))?;
        let (body, trailer) = text.split_at(body_end);
        let stored = trailer
            .trim()
            .strip_prefix("crc32 ")
            .and_then(|h| u32::from_str_radix(h, 16).ok())
            .ok_or_else(|| fmt_err("missing checksum"))?;
        if stored != crc32fast::hash(body.as_bytes()) {
            return Err(StreamlineError::Checksum);
        }

        let mut lines = body.lines();
        let mut next = || lines.next().ok_or_else(|| fmt_err("truncated"));
        fn keyed<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>, StreamlineError> {
            let mut it = line.split_whitespace();
            if it.next() != Some(key) {
                return Err(StreamlineError::Format(format!("expected `{key}`, found `{line}`")));
            }
            Ok(it.collect())
        }
        fn num<T: std::str::FromStr>(t: &str) -> Result<T, StreamlineError> {
            t.parse().map_err(|_| StreamlineError::Format(format!("bad number `{t}`")))
        }
        fn int_row(line: &str, len: usize) -> Result<Vec<i32>, StreamlineError> {
            let v = line.split_whitespace().map(num).collect::<Result<Vec<i32>, _>>()?;
            if v.len() != len {
                return Err(StreamlineError::Format(format!("expected {len} integers, found {}", v.len())));
            }
            Ok(v)
        }
        fn hex_row(line: &str, len: usize) -> Result<Vec<f64>, StreamlineError> {
            let v = line
                .split_whitespace()
                .map(|t| {
                    u64::from_str_radix(t, 16)
                        .map(f64::from_bits)
                        .map_err(|_| StreamlineError::Format(format!("bad hex real `{t}`")))
                })
                .collect::<Result<Vec<f64>, _>>()?;
            if v.len() != len {
                return Err(StreamlineError::Format(format!("expected {len} reals, found {}", v.len())));
            }
            Ok(v)
        }

        let header = keyed(next()?, PIPELINE_MAGIC)?;
        if header.first().map(|v| num::<u32>(v)).transpose()? != Some(PIPELINE_VERSION) {
            return Err(fmt_err("unsupported version"));
        }
        let bits: u8 = num(keyed(next()?, "bits")?.first().ok_or_else(|| fmt_err("bits"))?)?;
        let input_dim: usize = num(keyed(next()?, "input")?.first().ok_or_else(|| fmt_err("input"))?)?;
        let n_hidden: usize = num(keyed(next()?, "hidden_layers")?.first().ok_or_else(|| fmt_err("hidden_layers"))?)?;
        let n_thresholds = (1usize << bits) - 1;
        let mut hidden = Vec::with_capacity(n_hidden);
        for i in 0..n_hidden {
            let f = keyed(next()?, "hidden")?;
            if f.len() != 3 || num::<usize>(f[0])? != i {
                return Err(fmt_err("bad hidden header"));
            }
            let (out_dim, in_dim): (usize, usize) = (num(f[1])?, num(f[2])?);
            let mirrored = int_row(next()?, out_dim)?.into_iter().map(|v| v != 0).collect();
            let mut weights = Vec::with_capacity(out_dim * in_dim);
            let mut thresholds = Vec::with_capacity(out_dim);
            for _ in 0..out_dim {
                weights.extend(int_row(next()?, in_dim)?);
                thresholds.push(int_row(next()?, n_thresholds)?);
            }
            hidden.push(ThresholdLayer {
                in_dim,
                out_dim,
                weights,
                thresholds,
                mirrored,
            });
        }
        let f = keyed(next()?, "readout")?;
        if f.len() != 2 {
            return Err(fmt_err("bad readout header"));
        }
        let (out_dim, in_dim): (usize, usize) = (num(f[0])?, num(f[1])?);
        let mut weights = Vec::with_capacity(out_dim * in_dim);
        for _ in 0..out_dim {
            weights.extend(int_row(next()?, in_dim)?);
        }
        let scale = hex_row(next()?, out_dim)?;
        let offset = hex_row(next()?, out_dim)?;
        Ok(ThresholdPipeline {
            bits,
            input_dim,
            hidden,
            output: Readout {
                in_dim,
                out_dim,
                weights,
                scale,
                offset,
            },
        })
    }
}

const PIPELINE_MAGIC: &str = "cqmlp-pipeline";
const PIPELINE_VERSION: u32 = 1;

/// First disagreement between the pipeline and the fake-quant reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub block: FeatureBlock,
    pub int_trace: Vec<Vec<i32>>,
    pub reference_levels: Vec<Vec<i32>>,
    pub int_class: usize,
    pub reference_class: usize,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "block {} (window start {}): data {:?}", self.index, self.block.window_start, self.block.data)?;
        writeln!(f, "  class: integer {} vs reference {}", self.int_class, self.reference_class)?;
        for (l, (a, b)) in self.int_trace.iter().zip(&self.reference_levels).enumerate() {
            let diffs: Vec<usize> = a.iter().zip(b).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect();
            if !diffs.is_empty() {
                writeln!(f, "  layer {l}: {} channels differ, first at {}", diffs.len(), diffs[0])?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub checked: usize,
    pub activation_mismatches: usize,
    pub class_mismatches: usize,
    pub first: Option<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.activation_mismatches == 0 && self.class_mismatches == 0
    }
}

/// Compares the pipeline against the model's fake-quant inference forward
/// on every block: every hidden level and the argmax must agree.
pub fn check_equivalence(
    model: &CqmlpModel,
    pipeline: &ThresholdPipeline,
    blocks: &[FeatureBlock],
) -> Result<CheckReport, ModelError> {
    let mut report = CheckReport {
        checked: 0,
        activation_mismatches: 0,
        class_mismatches: 0,
        first: None,
    };
    for (chunk_idx, chunk) in blocks.chunks(512).enumerate() {
        let refs: Vec<&FeatureBlock> = chunk.iter().collect();
        let pass = model.forward_batch(&blocks_to_matrix(&refs), Mode::FakeQuant, Phase::Infer)?;
        let ref_classes = pass.predictions();
        for (r, block) in chunk.iter().enumerate() {
            let int = pipeline.run_int(block);
            let ref_levels: Vec<Vec<i32>> = pass.levels.iter().map(|lv| lv.row(r).to_vec()).collect();
            let act_bad = int.trace != ref_levels;
            let class_bad = int.class != ref_classes[r];
            report.checked += 1;
            report.activation_mismatches += act_bad as usize;
            report.class_mismatches += class_bad as usize;
            if (act_bad || class_bad) && report.first.is_none() {
                report.first = Some(Mismatch {
                    index: chunk_idx * 512 + r,
                    block: block.clone(),
                    int_trace: int.trace,
                    reference_levels: ref_levels,
                    int_class: int.class,
                    reference_class: ref_classes[r],
                });
            }
        }
    }
    Ok(report)
}

/// Online detector: keeps the last four encoded messages and classifies
/// once the window is full.
#[derive(Debug, Clone)]
pub struct SlidingDetector<'p> {
    pipeline: &'p ThresholdPipeline,
    ring: [[u8; MESSAGE_BYTES]; WINDOW],
    head: usize,
    seen: usize,
    buf: Vec<i8>,
}

impl<'p> SlidingDetector<'p> {
    pub fn new(pipeline: &'p ThresholdPipeline) -> Self {
        SlidingDetector {
            pipeline,
            ring: [[0; MESSAGE_BYTES]; WINDOW],
            head: 0,
            seen: 0,
            buf: Vec::with_capacity(WINDOW * MESSAGE_BYTES),
        }
    }

    /// Feeds one frame; returns the class of the window ending at it once
    /// four frames have arrived.
    pub fn push(&mut self, frame: &CanFrame) -> Option<usize> {
        self.ring[self.head] = encode_frame(frame);
        self.head = (self.head + 1) % WINDOW;
        self.seen += 1;
        if self.seen < WINDOW {
            return None;
        }
        self.buf.clear();
        for k in 0..WINDOW {
            let msg = &self.ring[(self.head + k) % WINDOW];
            self.buf.extend(msg.iter().map(|&b| b as i8));
        }
        Some(self.pipeline.classify(&self.buf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    PerBlock,
    PerMessageSliding,
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchMode::PerBlock => "per_block",
            BenchMode::PerMessageSliding => "per_message_sliding",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub mode: BenchMode,
    /// Classifications performed.
    pub blocks: usize,
    pub wall_time: Duration,
    pub mean_latency: Duration,
    pub median_latency: Duration,
    pub p99_latency: Duration,
    /// Classifications per second of wall time.
    pub throughput: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("benchmark stream is empty")]
    Empty,
    #[error("stream of {0} frames is shorter than one window")]
    TooShort(usize),
}

impl BenchReport {
    fn from_samples(mode: BenchMode, mut samples: Vec<Duration>, wall_time: Duration) -> Self {
        samples.sort_unstable();
        let n = samples.len();
        let total: Duration = samples.iter().sum();
        let rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        BenchReport {
            mode,
            blocks: n,
            wall_time,
            mean_latency: total / n as u32,
            median_latency: rank(0.5),
            p99_latency: rank(0.99),
            throughput: n as f64 / wall_time.as_secs_f64().max(f64::MIN_POSITIVE),
        }
    }

    pub const CSV_HEADER: &'static str = "mode,blocks,wall_s,mean_us,median_us,p99_us,throughput_per_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.3},{:.3},{:.3},{:.1}",
            self.mode,
            self.blocks,
            self.wall_time.as_secs_f64(),
            self.mean_latency.as_secs_f64() * 1e6,
            self.median_latency.as_secs_f64() * 1e6,
            self.p99_latency.as_secs_f64() * 1e6,
            self.throughput
        )
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode        {}", self.mode)?;
        writeln!(f, "blocks      {}", self.blocks)?;
        writeln!(f, "wall time   {:.3} ms", self.wall_time.as_secs_f64() * 1e3)?;
        writeln!(f, "latency     mean {:.2} us, median {:.2} us, p99 {:.2} us",
            self.mean_latency.as_secs_f64() * 1e6,
            self.median_latency.as_secs_f64() * 1e6,
            self.p99_latency.as_secs_f64() * 1e6)?;
        write!(f, "throughput  {:.0} blocks/s", self.throughput)
    }
}

/// Times one classification per block. With `workers > 1` the blocks are
/// sharded across scoped threads and latency samples are merged.
pub fn bench_blocks(
    pipeline: &ThresholdPipeline,
    blocks: &[FeatureBlock],
    workers: usize,
) -> Result<BenchReport, BenchError> {
    if blocks.is_empty() {
        return Err(BenchError::Empty);
    }
    let time_chunk = |chunk: &[FeatureBlock]| -> Vec<Duration> {
        chunk
            .iter()
            .map(|b| {
                let t = Instant::now();
                std::hint::black_box(pipeline.classify(std::hint::black_box(&b.data)));
                t.elapsed()
            })
            .collect()
    };
    let workers = workers.clamp(1, blocks.len());
    let start = Instant::now();
    let samples = if workers == 1 {
        time_chunk(blocks)
    } else {
        let per = blocks.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = blocks.chunks(per).map(|c| s.spawn(move || time_chunk(c))).collect();
            handles.into_iter().flat_map(|h| h.join().expect("bench worker panicked")).collect()
        })
    };
    Ok(BenchReport::from_samples(BenchMode::PerBlock, samples, start.elapsed()))
}

/// Feeds frames one by one through a [`SlidingDetector`]; each arriving
/// frame after the third yields one timed classification.
pub fn bench_sliding(pipeline: &ThresholdPipeline, frames: &[CanFrame]) -> Result<BenchReport, BenchError> {
    if frames.is_empty() {
        return Err(BenchError::Empty);
    }
    if frames.len() < WINDOW {
        return Err(BenchError::TooShort(frames.len()));
    }
    let mut det = SlidingDetector::new(pipeline);
    let mut samples = Vec::with_capacity(frames.len());
    let start = Instant::now();
    for f in frames {
        let t = Instant::now();
        if std::hint::black_box(det.push(f)).is_some() {
            samples.push(t.elapsed());
        }
    }
    Ok(BenchReport::from_samples(BenchMode::PerMessageSliding, samples, start.elapsed()))
}

//! Confusion matrices, per-class metrics and the bit-operation cost model.

use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::can::Label;
use crate::cqmlp::{CqmlpModel, ModelError};

const K: usize = Label::COUNT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("no (true, predicted) pairs to tally")]
    Empty,
    #[error("confusion table line {line}: {msg}")]
    Table { line: usize, msg: String },
}

/// Rows are true classes, columns predicted classes, both in
/// [`Label::ALL`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_counts(counts: [[u64; K]; K]) -> Self {
        ConfusionMatrix { counts }
    }

    pub fn record(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn get(&self, truth: Label, predicted: Label) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, truth: Label) -> u64 {
        self.counts[truth.index()].iter().sum()
    }

    pub fn col_sum(&self, predicted: Label) -> u64 {
        self.counts.iter().map(|r| r[predicted.index()]).sum()
    }

    /// Relabels classes: class `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: [usize; K]) -> Self {
        let mut out = [[0; K]; K];
        for i in 0..K {
            for j in 0..K {
                out[perm[i]][perm[j]] = self.counts[i][j];
            }
        }
        ConfusionMatrix { counts: out }
    }

    pub const CSV_HEADER: &'static str = "true\\predicted,Benign,DoS,Fuzzing,SpoofRPM";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for l in Label::ALL {
            let row: Vec<String> = self.counts[l.index()].iter().map(u64::to_string).collect();
            writeln!(s, "{},{}", l.name(), row.join(",")).unwrap();
        }
        s
    }

    /// Reads the layout written by [`Self::to_csv`]. Rows may appear in
    /// any order; the header line is optional.
    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut counts = [[0u64; K]; K];
        let mut seen = [false; K];
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("true")) {
                continue;
            }
            let err = |msg: String| EvalError::Table { line: line_no, msg };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != K + 1 {
                return Err(err(format!("expected {} fields, found {}", K + 1, fields.len())));
            }
            let label: Label = fields[0].parse().map_err(|e| err(format!("{e}")))?;
            if std::mem::replace(&mut seen[label.index()], true) {
                return Err(err(format!("duplicate row for {label}")));
            }
            for (j, f) in fields[1..].iter().enumerate() {
                counts[label.index()][j] = f.parse().map_err(|_| err(format!("bad count `{f}`")))?;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(EvalError::Table {
                line: text.lines().count(),
                msg: format!("missing row for {}", Label::ALL[missing]),
            });
        }
        Ok(ConfusionMatrix { counts })
    }
}

impl fmt::Display for ConfusionMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<10}", "")?;
        for l in Label::ALL {
            write!(f, "{:>10}", l.name())?;
        }
        for l in Label::ALL {
            write!(f, "\n{:<10}", l.name())?;
            for c in self.counts[l.index()] {
                write!(f, "{c:>10}")?;
            }
        }
        Ok(())
    }
}

/// Tallies `(true, predicted)` pairs.
pub fn confusion<I>(pairs: I) -> Result<ConfusionMatrix, EvalError>
where
    I: IntoIterator<Item = (Label, Label)>,
{
    let mut cm = ConfusionMatrix::new();
    for (t, p) in pairs {
        cm.record(t, p);
    }
    if cm.total() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(cm)
}

/// A rate with a flag raised when its denominator was zero (value 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Rate { value: 0.0, undefined: true }
        } else {
            Rate { value: num as f64 / den as f64, undefined: false }
        }
    }

    pub fn percent(&self) -> f64 {
        self.value * 100.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub label: Label,
    pub support: u64,
    pub precision: Rate,
    pub recall: Rate,
    pub f1: Rate,
    pub fnr: Rate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub classes: [ClassMetrics; K],
    pub accuracy: f64,
    /// Benign blocks flagged as any attack over all benign blocks.
    pub fpr: Rate,
    pub misclassifications: u64,
    pub total: u64,
}

impl MetricsReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        &self.classes[label.index()]
    }

    pub fn macro_f1(&self) -> f64 {
        self.classes.iter().map(|c| c.f1.value).sum::<f64>() / K as f64
    }

    pub fn any_undefined(&self) -> bool {
        self.classes
            .iter()
            .any(|c| c.precision.undefined || c.recall.undefined || c.f1.undefined)
            || self.fpr.undefined
    }

    pub const CSV_HEADER: &'static str = "class,support,precision,recall,f1,fnr,undefined";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.classes {
            let undefined = c.precision.undefined || c.recall.undefined || c.f1.undefined;
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                c.label.name(),
                c.support,
                c.precision.value,
                c.recall.value,
                c.f1.value,
                c.fnr.value,
                undefined
            )
            .unwrap();
        }
        writeln!(s, "accuracy,{},{:.6},,,,", self.total, self.accuracy).unwrap();
        writeln!(s, "fpr,,{:.6},,,,{}", self.fpr.value, self.fpr.undefined).unwrap();
        writeln!(s, "misclassifications,{},,,,,", self.misclassifications).unwrap();
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pct = |r: &Rate| {
            if r.undefined {
                format!("{:>10}", "n/a")
            } else {
                format!("{:>10.2}", r.percent())
            }
        };
        writeln!(f, "{:<10}{:>10}{:>10}{:>10}{:>10}", "class (%)", "precision", "recall", "F1", "FNR")?;
        for c in &self.classes[1..] {
            writeln!(f, "{:<10}{}{}{}{}", c.label.name(), pct(&c.precision), pct(&c.recall), pct(&c.f1), pct(&c.fnr))?;
        }
        let b = &self.classes[0];
        writeln!(f, "{:<10}{}{}{}{}", b.label.name(), pct(&b.precision), pct(&b.recall), pct(&b.f1), pct(&b.fnr))?;
        writeln!(f, "accuracy  {:.3}% ({} of {})", self.accuracy * 100.0, self.total - self.misclassifications, self.total)?;
        writeln!(f, "FPR       {}%", pct(&self.fpr).trim())?;
        write!(f, "misclassified {}", self.misclassifications)
    }
}

/// Per-class one-vs-rest metrics. An empty matrix reports accuracy 0.
pub fn metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let classes = Label::ALL.map(|l| {
        let i = l.index();
        let tp = cm.counts[i][i];
        let support = cm.row_sum(l);
        let predicted = cm.col_sum(l);
        let precision = Rate::ratio(tp, predicted);
        let recall = Rate::ratio(tp, support);
        let f1 = if precision.undefined || recall.undefined || precision.value + recall.value == 0.0 {
            Rate { value: 0.0, undefined: true }
        } else {
            let (p, r) = (precision.value, recall.value);
            Rate { value: 2.0 * p * r / (p + r), undefined: false }
        };
        ClassMetrics {
            label: l,
            support,
            precision,
            recall,
            f1,
            fnr: Rate::ratio(support - tp, support),
        }
    });
    let total = cm.total();
    let trace = cm.trace();
    let benign = cm.row_sum(Label::Benign);
    MetricsReport {
        classes,
        accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
        fpr: Rate::ratio(benign - cm.get(Label::Benign, Label::Benign), benign),
        misclassifications: total - trace,
        total,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCost {
    pub macs: u64,
    pub weight_bits: u32,
    pub input_bits: u32,
    /// Fraction of weights counted; 1 unless sparsity-discounted.
    pub density: f64,
    pub bops: f64,
    pub memory_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub bits: u32,
    pub baseline_bits: u32,
    pub layers: Vec<LayerCost>,
    pub bops: f64,
    pub memory_bits: f64,
    pub baseline_bops: f64,
    pub baseline_memory_bits: f64,
    pub bops_ratio: f64,
    pub memory_ratio: f64,
    pub normalised: f64,
}

fn layer_costs(dims: &[usize], bits: u32, input_bits: u32, density: &[f64]) -> Vec<LayerCost> {
    dims.windows(2)
        .enumerate()
        .map(|(l, w)| {
            let macs = (w[0] * w[1]) as u64;
            let b_in = if l == 0 { input_bits } else { bits };
            let d = density.get(l).copied().unwrap_or(1.0);
            LayerCost {
                macs,
                weight_bits: bits,
                input_bits: b_in,
                density: d,
                bops: macs as f64 * d * (bits * b_in) as f64,
                memory_bits: macs as f64 * d * bits as f64,
            }
        })
        .collect()
}

/// Bit-operation and weight-memory cost of a dense MLP with layer widths
/// `dims`, normalised against the same network at `baseline_bits`:
/// `0.5 * bops / bops_base + 0.5 * mem / mem_base`.
pub fn inference_cost(dims: &[usize], bits: u32, input_bits: u32, baseline_bits: u32) -> CostReport {
    inference_cost_sparse(dims, bits, input_bits, baseline_bits, &[])
}

/// As [`inference_cost`], counting only the fraction `density[l]` of each
/// layer's weights (missing entries count as dense). The baseline stays
/// dense.
pub fn inference_cost_sparse(
    dims: &[usize],
    bits: u32,
    input_bits: u32,
    baseline_bits: u32,
    density: &[f64],
) -> CostReport {
    let layers = layer_costs(dims, bits, input_bits, density);
    let base = layer_costs(dims, baseline_bits, input_bits, &[]);
    let bops: f64 = layers.iter().map(|l| l.bops).sum();
    let memory_bits: f64 = layers.iter().map(|l| l.memory_bits).sum();
    let baseline_bops: f64 = base.iter().map(|l| l.bops).sum();
    let baseline_memory_bits: f64 = base.iter().map(|l| l.memory_bits).sum();
    let bops_ratio = bops / baseline_bops;
    let memory_ratio = memory_bits / baseline_memory_bits;
    CostReport {
        bits,
        baseline_bits,
        layers,
        bops,
        memory_bits,
        baseline_bops,
        baseline_memory_bits,
        bops_ratio,
        memory_ratio,
        normalised: 0.5 * bops_ratio + 0.5 * memory_ratio,
    }
}

/// Fraction of nonzero integer weight levels per layer.
pub fn weight_density(model: &CqmlpModel) -> Result<Vec<f64>, ModelError> {
    (0..model.layers.len())
        .map(|l| {
            let (w, _) = model.integer_weights(l)?;
            Ok(w.iter().filter(|&&q| q != 0).count() as f64 / w.len() as f64)
        })
        .collect()
}

impl CostReport {
    pub const CSV_HEADER: &'static str = "layer,macs,weight_bits,input_bits,density,bops,memory_bits";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(s, "{i},{},{},{},{:.6},{},{}", l.macs, l.weight_bits, l.input_bits, l.density, l.bops, l.memory_bits).unwrap();
        }
        writeln!(s, "total,,{},,,{},{}", self.bits, self.bops, self.memory_bits).unwrap();
        writeln!(s, "normalised,,,,,{:.6},{:.6}", self.bops_ratio, self.memory_ratio).unwrap();
        writeln!(s, "cost,,,,,,{:.6}", self.normalised).unwrap();
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<7}{:>8}{:>6}{:>6}{:>12}{:>12}", "layer", "MACs", "w", "in", "BOPs", "mem bits")?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(f, "{:<7}{:>8}{:>6}{:>6}{:>12.0}{:>12.0}", i, l.macs, l.weight_bits, l.input_bits, l.bops, l.memory_bits)?;
        }
        writeln!(f, "{:<7}{:>8}{:>6}{:>6}{:>12.0}{:>12.0}", "total", "", "", "", self.bops, self.memory_bits)?;
        writeln!(f, "BOPs ratio {:.4}, memory ratio {:.4} (vs {}-bit)", self.bops_ratio, self.memory_ratio, self.baseline_bits)?;
        write!(f, "normalised cost {:.4}", self.normalised)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cqmlp::DEFAULT_DIMS;
    use proptest::prelude::*;
    use Label::*;

    #[test]
    fn tallies_pairs() {
        let cm = confusion([(Benign, Benign), (DoS, DoS)]).unwrap();
        assert_eq!(cm.get(Benign, Benign), 1);
        assert_eq!(cm.get(DoS, DoS), 1);
        assert_eq!(cm.total(), 2);
        let cm = confusion([(Benign, DoS)]).unwrap();
        assert_eq!(cm.counts[0][1], 1);
        assert_eq!(confusion(std::iter::empty()), Err(EvalError::Empty));
    }

    #[test]
    fn identity_matrix_is_perfect() {
        let cm = confusion(Label::ALL.map(|l| (l, l))).unwrap();
        let m = metrics(&cm);
        for c in &m.classes {
            assert_eq!((c.precision.value, c.recall.value, c.f1.value, c.fnr.value), (1.0, 1.0, 1.0, 0.0));
        }
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.fpr.value, 0.0);
        assert_eq!(m.misclassifications, 0);
    }

    #[test]
    fn missing_class_is_flagged() {
        let m = metrics(&confusion([(Benign, Benign), (DoS, Benign)]).unwrap());
        let f = m.class(Fuzzing);
        assert!(f.precision.undefined && f.recall.undefined && f.f1.undefined);
        assert_eq!(f.f1.value, 0.0);
        let d = m.class(DoS);
        assert!(!d.recall.undefined && d.precision.undefined);
        assert_eq!(d.fnr.value, 1.0);
        assert!(m.any_undefined());
    }

    #[test]
    fn hand_computed_rates() {
        // TP=3, FP=1, FN=2 for DoS
        let cm = ConfusionMatrix::from_counts([[5, 1, 0, 0], [2, 3, 0, 0], [0, 0, 4, 0], [0, 0, 0, 1]]);
        let m = metrics(&cm);
        let d = m.class(DoS);
        assert_eq!(d.precision.value, 0.75);
        assert_eq!(d.recall.value, 0.6);
        assert!((d.f1.value - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.fpr.value - 1.0 / 6.0).abs() < 1e-12);
        assert_eq!(m.misclassifications, 3);
    }

    #[test]
    fn csv_round_trip() {
        let cm = ConfusionMatrix::from_counts([[9, 1, 2, 3], [4, 5, 6, 7], [0, 0, 8, 0], [1, 0, 0, 2]]);
        assert_eq!(ConfusionMatrix::from_csv(&cm.to_csv()).unwrap(), cm);
        let err = ConfusionMatrix::from_csv("Benign,1,2,3\n").unwrap_err();
        assert!(matches!(err, EvalError::Table { line: 1, .. }));
        assert!(ConfusionMatrix::from_csv("Benign,1,0,0,0\n").is_err());
        assert_eq!(MetricsReport::CSV_HEADER.split(',').count(), 7);
    }

    #[test]
    fn cost_oracle() {
        // MACs per layer and the BOPs formula evaluated by hand.
        let macs = [10240u64, 32768, 8192, 2048, 128];
        let bops = |b: u64| macs[0] * b * 8 + macs[1..].iter().sum::<u64>() * b * b;
        let mem = |b: u64| macs.iter().sum::<u64>() * b;
        for b in [2u32, 3, 4, 8] {
            let r = inference_cost(&DEFAULT_DIMS, b, 8, 4);
            assert_eq!(r.bops, bops(b as u64) as f64);
            assert_eq!(r.memory_bits, mem(b as u64) as f64);
            let expect = 0.5 * bops(b as u64) as f64 / bops(4) as f64 + 0.5 * b as f64 / 4.0;
            assert!((r.normalised - expect).abs() < 1e-12);
        }
        assert_eq!(inference_cost(&DEFAULT_DIMS, 3, 8, 4).bops, 633_984.0);
        assert_eq!(inference_cost(&DEFAULT_DIMS, 2, 8, 4).bops, 336_384.0);
        assert_eq!(inference_cost(&DEFAULT_DIMS, 4, 8, 4).normalised, 1.0);
        assert!((inference_cost(&DEFAULT_DIMS, 3, 8, 4).normalised - 0.6864).abs() < 1e-3);
        assert!((inference_cost(&DEFAULT_DIMS, 2, 8, 4).normalised - 0.4152).abs() < 1e-3);
    }

    #[test]
    fn sparsity_discount_lowers_cost() {
        let dense = inference_cost(&DEFAULT_DIMS, 2, 8, 4);
        let half = inference_cost_sparse(&DEFAULT_DIMS, 2, 8, 4, &[0.5; 5]);
        assert!((half.normalised - dense.normalised / 2.0).abs() < 1e-12);
        let m = CqmlpModel::default_arch(2).unwrap();
        // zero-initialised weights: every level is zero
        assert!(weight_density(&m).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn cost_increases_with_bits() {
        let c: Vec<f64> = [2, 3, 4, 8].iter().map(|&b| inference_cost(&DEFAULT_DIMS, b, 8, 4).normalised).collect();
        assert!(c.windows(2).all(|w| w[0] < w[1]));
    }

    fn arb_pairs() -> impl Strategy<Value = Vec<(Label, Label)>> {
        prop::collection::vec((0..4usize, 0..4usize), 1..300)
            .prop_map(|v| v.into_iter().map(|(a, b)| (Label::ALL[a], Label::ALL[b])).collect())
    }

    proptest! {
        #[test]
        fn streaming_equals_batch(pairs in arb_pairs()) {
            let batch = confusion(pairs.iter().copied()).unwrap();
            let mut streaming = ConfusionMatrix::new();
            for &(t, p) in &pairs {
                streaming.record(t, p);
            }
            prop_assert_eq!(streaming, batch);
            prop_assert_eq!(metrics(&streaming), metrics(&batch));
            let m = metrics(&batch);
            prop_assert_eq!(m.accuracy, batch.trace() as f64 / batch.total() as f64);
            for c in &m.classes {
                for r in [c.precision, c.recall, c.f1, c.fnr] {
                    prop_assert!((0.0..=1.0).contains(&r.value));
                }
            }
        }

        #[test]
        fn permutation_permutes_metrics(pairs in arb_pairs(), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
            let cm = confusion(pairs).unwrap();
            let a = metrics(&cm);
            let b = metrics(&cm.permuted(perm));
            for i in 0..4 {
                let (x, y) = (&a.classes[i], &b.classes[perm[i]]);
                prop_assert_eq!((x.precision, x.recall, x.f1, x.fnr, x.support), (y.precision, y.recall, y.f1, y.fnr, y.support));
            }
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }
}

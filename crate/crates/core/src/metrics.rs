//! Gradient divergence, communication accounting, privacy reconstruction,
//! clustering recovery, accuracy and the per-round metrics row.

use std::collections::VecDeque;
use std::io::Write;

use crate::error::{Error, Result};
use crate::numerics::ParamVector;

/// Sliding-window length for reported gradient divergence.
pub const GD_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    /// Some delta had zero norm; its pairs used cosine 0.
    pub degenerate: bool,
}

/// `sum_i sum_j w_i w_j (1 - cos(d_i, d_j)) / 2` for one parameter group.
/// Self-pairs contribute nothing; a zero-norm delta has cosine 0 with
/// everything else.
pub fn divergence_group(deltas: &[&[f64]], weights: &[f64]) -> Divergence {
    assert_eq!(deltas.len(), weights.len(), "one weight per delta");
    let norms: Vec<f64> = deltas.iter().map(|d| dot(d, d).sqrt()).collect();
    let mut value = 0.0;
    let mut degenerate = false;
    for i in 0..deltas.len() {
        for j in 0..deltas.len() {
            if i == j {
                continue;
            }
            let cos = if norms[i] == 0.0 || norms[j] == 0.0 {
                degenerate = true;
                0.0
            } else {
                (dot(deltas[i], deltas[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            value += weights[i] * weights[j] * 0.5 * (1.0 - cos);
        }
    }
    Divergence { value, degenerate }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divergence of whole-model deltas: computed per parameter block and summed.
pub fn gradient_divergence(deltas: &[&ParamVector], weights: &[f64]) -> Result<Divergence> {
    if deltas.len() != weights.len() {
        return Err(Error::dim("divergence weights", deltas.len(), weights.len()));
    }
    let Some(first) = deltas.first() else {
        return Ok(Divergence {
            value: 0.0,
            degenerate: false,
        });
    };
    for d in &deltas[1..] {
        first.check_aligned(d)?;
    }
    let mut total = Divergence {
        value: 0.0,
        degenerate: false,
    };
    for b in 0..first.blocks().len() {
        let group: Vec<&[f64]> = deltas.iter().map(|d| d.blocks()[b].values.as_slice()).collect();
        let g = divergence_group(&group, weights);
        if g.degenerate {
            log::debug!("zero-norm delta in block {}", first.blocks()[b].name);
        }
        total.value += g.value;
        total.degenerate |= g.degenerate;
    }
    Ok(total)
}

/// Mean of the last `capacity` pushed values.
#[derive(Debug, Clone)]
pub struct SlidingWindow {
    capacity: usize,
    values: VecDeque<f64>,
}

impl SlidingWindow {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        SlidingWindow {
            capacity,
            values: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }
}

/// Wire size of a parameter payload: 8 bytes per value.
pub fn payload_bytes(p: &ParamVector) -> u64 {
    8 * p.len() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionMode {
    /// One full-batch step from a uniform-output model: exact.
    SingleFullBatch,
    /// Several local steps: normalized positive part of the bias change.
    MultiStep,
}

impl ReconstructionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReconstructionMode::SingleFullBatch => "single_step",
            ReconstructionMode::MultiStep => "multi_step",
        }
    }
}

/// Estimates a client's label marginal from its output-bias change.
///
/// Under cross-entropy descent at uniform outputs the bias moves by
/// `lr * (p(y) - 1/C)`, so `p(y) = 1/C + (after - before) / lr`.
pub fn privacy_reconstruct(before: &[f64], after: &[f64], lr: f64, mode: ReconstructionMode) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::config("lr", "reconstruction needs lr > 0"));
    }
    if before.len() != after.len() {
        return Err(Error::dim("bias vector", before.len(), after.len()));
    }
    let c = before.len();
    let diff: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    Ok(match mode {
        ReconstructionMode::SingleFullBatch => diff.iter().map(|d| d / lr + 1.0 / c as f64).collect(),
        ReconstructionMode::MultiStep => {
            let pos: Vec<f64> = diff.iter().map(|d| d.max(0.0)).collect();
            let s: f64 = pos.iter().sum();
            if s > 0.0 {
                pos.iter().map(|p| p / s).collect()
            } else {
                vec![1.0 / c as f64; c]
            }
        }
    })
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of shards whose argmax expert agrees with the best injective
/// matching between ground-truth clusters and experts.
pub fn clustering_score(q_z_given_s: &[Vec<f64>], ground_truth: &[usize], k: usize) -> Result<f64> {
    if q_z_given_s.len() != ground_truth.len() {
        return Err(Error::dim("ground truth", q_z_given_s.len(), ground_truth.len()));
    }
    if q_z_given_s.is_empty() {
        return Ok(0.0);
    }
    let clusters = ground_truth.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0usize; k]; clusters];
    for (q, &g) in q_z_given_s.iter().zip(ground_truth) {
        if q.len() != k {
            return Err(Error::dim("q(z|s)", k, q.len()));
        }
        counts[g][argmax(q)] += 1;
    }
    Ok(max_matching(&counts) as f64 / q_z_given_s.len() as f64)
}

/// Maximum-weight bipartite matching (rows to columns, each used at most
/// once) by dynamic programming over subsets of the smaller side.
pub fn max_matching(w: &[Vec<usize>]) -> usize {
    let rows = w.len();
    let cols = w.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return 0;
    }
    if cols > rows {
        let t: Vec<Vec<usize>> = (0..cols).map(|c| (0..rows).map(|r| w[r][c]).collect()).collect();
        return max_matching(&t);
    }
    assert!(cols <= 20, "matching side too large for subset enumeration");
    let full = 1usize << cols;
    let mut dp = vec![0usize; full];
    for row in w {
        let mut next = dp.clone();
        for mask in 0..full {
            for (c, &v) in row.iter().enumerate() {
                if mask & (1 << c) == 0 {
                    let m2 = mask | (1 << c);
                    next[m2] = next[m2].max(dp[mask] + v);
                }
            }
        }
        dp = next;
    }
    dp.into_iter().max().unwrap_or(0)
}

/// Top-1 accuracy of predicted distributions against labels.
pub fn top1_accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-client accuracies; `None` entries (clients never
/// evaluated) are skipped and counted.
pub fn mean_local_accuracy(per_client: &[Option<f64>]) -> (Option<f64>, usize) {
    let vals: Vec<f64> = per_client.iter().flatten().copied().collect();
    let skipped = per_client.len() - vals.len();
    if vals.is_empty() {
        (None, skipped)
    } else {
        (Some(vals.iter().sum::<f64>() / vals.len() as f64), skipped)
    }
}

pub const METRICS_HEADER: &str =
    "round,algo,K,local_acc,global_acc,bytes_up,bytes_down,gd,gd_window,phi_entropy,active_experts_mean,clustering_score";

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub algo: String,
    pub k: usize,
    pub local_acc: Option<f64>,
    pub global_acc: Option<f64>,
    /// Cumulative up-link bytes.
    pub bytes_up: u64,
    /// Cumulative down-link bytes.
    pub bytes_down: u64,
    pub gd: Option<f64>,
    pub gd_window: Option<f64>,
    pub phi_entropy: Option<f64>,
    pub active_experts_mean: Option<f64>,
    pub clustering_score: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.algo,
            self.k,
            opt(self.local_acc),
            opt(self.global_acc),
            self.bytes_up,
            self.bytes_down,
            opt(self.gd),
            opt(self.gd_window),
            opt(self.phi_entropy),
            opt(self.active_experts_mean),
            opt(self.clustering_score),
        )
    }

    pub fn write_csv<W: Write>(rows: &[RoundMetrics], mut w: W) -> Result<()> {
        writeln!(w, "{METRICS_HEADER}")?;
        for r in rows {
            writeln!(w, "{}", r.csv_row())?;
        }
        Ok(())
    }

    /// Parses rows written by [`RoundMetrics::write_csv`].
    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<RoundMetrics>> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header.join(",") != METRICS_HEADER {
            return Err(Error::Format {
                what: "metrics csv",
                detail: format!("unexpected header {}", header.join(",")),
            });
        }
        let bad = |e: String| Error::Format {
            what: "metrics csv",
            detail: e,
        };
        let f = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| bad(format!("{s}: {e}")))
            }
        };
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            out.push(RoundMetrics {
                round: rec[0].parse().map_err(|e| bad(format!("{e}")))?,
                algo: rec[1].to_string(),
                k: rec[2].parse().map_err(|e| bad(format!("{e}")))?,
                local_acc: f(&rec[3])?,
                global_acc: f(&rec[4])?,
                bytes_up: rec[5].parse().map_err(|e| bad(format!("{e}")))?,
                bytes_down: rec[6].parse().map_err(|e| bad(format!("{e}")))?,
                gd: f(&rec[7])?,
                gd_window: f(&rec[8])?,
                phi_entropy: f(&rec[9])?,
                active_experts_mean: f(&rec[10])?,
                clustering_score: f(&rec[11])?,
            });
        }
        Ok(out)
    }
}

//! Aggregation of per-rule results: Pearson correlations with significance,
//! last-k attention summaries, CKA similarity between checkpoints, Wolfram
//! class summaries, classical MDS of the similarity matrix, and paired
//! horizon comparisons.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::complexity::{wolfram_class, ComplexityReport, WolframClass};
use crate::eca::RuleId;
use crate::model::{final_hidden, AttentionTrace, Model, ModelError, TaskData};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One rule's aggregated experiment outcome: the row type behind the
/// results table and all correlations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub rule: u8,
    pub complexity: ComplexityReport,
    pub efficiency_easy: f64,
    pub efficiency_hard: f64,
    pub chess_accuracy: f64,
    pub avg_attention_last10: f64,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

impl CorrelationResult {
    /// The asterisk convention: two-sided p below 0.05.
    pub fn significant(&self) -> bool {
        self.p < 0.05
    }
}

/// Pearson r with a two-sided p-value from the t-statistic
/// `t = r * sqrt((n-2) / (1-r^2))` against Student-t with n-2 dof.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<CorrelationResult, AnalysisError> {
    let n = x.len();
    if n != y.len() {
        return Err(AnalysisError::Contract("length mismatch".into()));
    }
    if n < 3 {
        return Err(AnalysisError::Contract("need at least 3 points".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation(
            "zero variance input".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let p = if (1.0 - r * r) <= f64::EPSILON {
        0.0
    } else {
        let t = r * ((nf - 2.0) / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, nf - 2.0).expect("valid dof");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(CorrelationResult { r, p, n })
}

/// Mean attention of the final query position on each of the `k` most
/// recent key positions, excluding self; offset 1 is the key immediately
/// before the final position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub k: usize,
    /// index 0 = offset 1 (most recent non-self key)
    pub per_offset: Vec<f64>,
    /// unweighted mean over the k offsets
    pub mean: f64,
}

pub fn attention_last_k(trace: &AttentionTrace, k: usize) -> Result<AttentionSummary, AnalysisError> {
    let seq = trace
        .final_row
        .first()
        .map(|m| m.ncols())
        .ok_or_else(|| AnalysisError::Contract("empty attention trace".into()))?;
    if seq < k + 1 {
        return Err(AnalysisError::Contract(format!(
            "sequence length {seq} too short for k = {k}"
        )));
    }
    let mut per_offset = vec![0.0; k];
    let mut count = 0usize;
    for m in &trace.final_row {
        count += m.nrows();
        for row in m.rows() {
            for offset in 1..=k {
                per_offset[offset - 1] += row[seq - 1 - offset];
            }
        }
    }
    for v in per_offset.iter_mut() {
        *v /= count as f64;
    }
    let mean = per_offset.iter().sum::<f64>() / k as f64;
    Ok(AttentionSummary { k, per_offset, mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CkaMode {
    Activation,
    Weight,
}

/// Linear CKA between two feature matrices with rows as samples:
/// `‖Yᵀ X‖²_F / (‖Xᵀ X‖_F · ‖Yᵀ Y‖_F)` after column centering.
pub fn cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, AnalysisError> {
    if x.nrows() != y.nrows() {
        return Err(AnalysisError::Contract("row count mismatch".into()));
    }
    let center = |m: &Array2<f64>| {
        let mean = m.mean_axis(Axis(0)).expect("nonempty");
        let mut c = m.clone();
        for mut row in c.rows_mut() {
            row -= &mean;
        }
        c
    };
    let xc = center(x);
    let yc = center(y);
    let cross = yc.t().dot(&xc);
    let xx = xc.t().dot(&xc);
    let yy = yc.t().dot(&yc);
    let fro2 = |m: &Array2<f64>| m.iter().map(|v| v * v).sum::<f64>();
    let denom = fro2(&xx).sqrt() * fro2(&yy).sqrt();
    if denom == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation(
            "zero-variance features".into(),
        ));
    }
    Ok((fro2(&cross) / denom).clamp(0.0, 1.0))
}

/// CKA between two checkpoints of identical architecture. Activation mode
/// compares final-layer hidden states over a shared probe set; weight mode
/// compares each layer's concatenated weight matrices and averages.
pub fn cka_checkpoints(
    a: &Model,
    b: &Model,
    mode: CkaMode,
    probe: &TaskData,
) -> Result<f64, AnalysisError> {
    if a.config.n_layers != b.config.n_layers
        || a.config.d_model != b.config.d_model
        || a.config.n_heads != b.config.n_heads
        || a.config.d_ff != b.config.d_ff
    {
        return Err(AnalysisError::Contract("architecture mismatch".into()));
    }
    match mode {
        CkaMode::Activation => {
            let ha = final_hidden(a, probe, 64)?;
            let hb = final_hidden(b, probe, 64)?;
            cka(&ha, &hb)
        }
        CkaMode::Weight => {
            let mut sum = 0.0;
            for (ba, bb) in a.params.blocks.iter().zip(&b.params.blocks) {
                let wa = layer_weight_features(ba);
                let wb = layer_weight_features(bb);
                sum += cka(&wa, &wb)?;
            }
            Ok(sum / a.config.n_layers as f64)
        }
    }
}

/// One layer's weight matrices side by side as a d x (4d + 2 d_ff) feature
/// matrix: rows index input dimensions, columns index learned features.
fn layer_weight_features(b: &crate::model::BlockParams) -> Array2<f64> {
    let d = b.wq.nrows();
    let ff = b.w1.ncols();
    let mut out = Array2::zeros((d, 4 * d + 2 * ff));
    let mut col = 0;
    for w in [&b.wq, &b.wk, &b.wv, &b.wo] {
        out.slice_mut(ndarray::s![.., col..col + d]).assign(w);
        col += d;
    }
    out.slice_mut(ndarray::s![.., col..col + ff]).assign(&b.w1);
    col += ff;
    out.slice_mut(ndarray::s![.., col..col + ff])
        .assign(&b.w2.t());
    out
}

/// Full pairwise CKA matrix over checkpoints, parallel over pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub labels: Vec<String>,
    pub mode: CkaMode,
    pub values: Vec<Vec<f64>>,
}

pub fn cka_matrix(
    models: &[(String, Model)],
    mode: CkaMode,
    probe: &TaskData,
) -> Result<CkaMatrix, AnalysisError> {
    let n = models.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i..n).map(move |j| (i, j)))
        .collect();
    let computed: Result<Vec<f64>, AnalysisError> = pairs
        .par_iter()
        .map(|&(i, j)| cka_checkpoints(&models[i].1, &models[j].1, mode, probe))
        .collect();
    let computed = computed?;
    let mut values = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(computed) {
        values[i][j] = v;
        values[j][i] = v;
    }
    Ok(CkaMatrix {
        labels: models.iter().map(|(l, _)| l.clone()).collect(),
        mode,
        values,
    })
}

/// Mean and standard error of one metric per Wolfram class, classes in
/// I..IV order, empty classes omitted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStat {
    pub class: WolframClass,
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
}

pub fn class_summary(rules: &[RuleId], values: &[f64]) -> Vec<ClassStat> {
    use WolframClass::*;
    let mut out = Vec::new();
    for class in [I, II, III, IV] {
        let vals: Vec<f64> = rules
            .iter()
            .zip(values)
            .filter(|(r, _)| wolfram_class(**r) == class)
            .map(|(_, &v)| v)
            .collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        out.push(ClassStat {
            class,
            n,
            mean,
            stderr,
        });
    }
    out
}

/// Classical MDS of distance 1 - CKA: double-centered Gram matrix,
/// eigendecomposition, top-2 components. Returns the coordinates and the
/// number of usable dimensions (1 when the matrix is rank-deficient).
pub fn mds_embed(matrix: &CkaMatrix) -> Result<(Array2<f64>, usize), AnalysisError> {
    let n = matrix.labels.len();
    if n < 2 {
        return Err(AnalysisError::Contract("need at least 2 points".into()));
    }
    // B = -1/2 J D^2 J with J = I - 11ᵀ/n
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let d = 1.0 - matrix.values[i][j];
            d2[[i, j]] = d * d;
        }
    }
    let row_mean = d2.mean_axis(Axis(0)).expect("nonempty");
    let grand = row_mean.sum() / n as f64;
    let mut b = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            b[[i, j]] = -0.5 * (d2[[i, j]] - row_mean[i] - row_mean[j] + grand);
        }
    }
    let (eigvals, eigvecs) = jacobi_eigh(&b);
    // indices of eigenvalues in descending order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eigvals[c].partial_cmp(&eigvals[a]).unwrap());
    let eps = 1e-12 * eigvals[order[0]].abs().max(1.0);
    let dims = order
        .iter()
        .take(2)
        .filter(|&&i| eigvals[i] > eps)
        .count()
        .max(1);
    let mut coords = Array2::zeros((n, dims.min(2)));
    for (c, &ei) in order.iter().take(dims).enumerate() {
        let scale = eigvals[ei].max(0.0).sqrt();
        let mut col: Vec<f64> = (0..n).map(|r| eigvecs[[r, ei]] * scale).collect();
        // sign convention: largest-magnitude coordinate positive
        let dominant = col
            .iter()
            .cloned()
            .fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if dominant < 0.0 {
            for v in col.iter_mut() {
                *v = -*v;
            }
        }
        for r in 0..n {
            coords[[r, c]] = col[r];
        }
    }
    Ok((coords, dims))
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix; returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigh(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[[p, q]].abs() < 1e-18 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * m[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eigvals = (0..n).map(|i| m[[i, i]]).collect();
    (eigvals, v)
}

/// One rule's paired short- vs long-horizon outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonPair {
    pub rule: u8,
    pub short: f64,
    pub long: f64,
    pub delta: f64,
    /// complexity coloring column for the scatter export
    pub lempel_ziv: f64,
}

pub fn compare_horizons(
    short: &[ExperimentResult],
    long: &[ExperimentResult],
) -> Result<Vec<HorizonPair>, AnalysisError> {
    if short.len() != long.len() {
        return Err(AnalysisError::Contract("result count mismatch".into()));
    }
    let mut out = Vec::with_capacity(short.len());
    for (s, l) in short.iter().zip(long) {
        if s.rule != l.rule {
            return Err(AnalysisError::Contract(format!(
                "rule mismatch: {} vs {}",
                s.rule, l.rule
            )));
        }
        out.push(HorizonPair {
            rule: s.rule,
            short: s.efficiency_easy,
            long: l.efficiency_easy,
            delta: l.efficiency_easy - s.efficiency_easy,
            lempel_ziv: s.complexity.lempel_ziv,
        });
    }
    Ok(out)
}

/// One row of the correlations table: a complexity measure against a
/// downstream metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub measure: String,
    pub metric: String,
    pub r: f64,
    pub p: f64,
    pub n: usize,
    pub significant: bool,
}

/// All measure x metric Pearson correlations over a result set; pairs with
/// undefined correlation (zero variance) are skipped.
pub fn correlation_table(results: &[ExperimentResult]) -> Vec<CorrelationEntry> {
    let measures: [(&str, fn(&ExperimentResult) -> f64); 4] = [
        ("lempel_ziv", |r| r.complexity.lempel_ziv),
        ("compression", |r| r.complexity.compression),
        ("lyapunov", |r| r.complexity.lyapunov),
        ("krylov", |r| r.complexity.krylov),
    ];
    let metrics: [(&str, fn(&ExperimentResult) -> f64); 4] = [
        ("efficiency_easy", |r| r.efficiency_easy),
        ("efficiency_hard", |r| r.efficiency_hard),
        ("chess_accuracy", |r| r.chess_accuracy),
        ("avg_attention_last10", |r| r.avg_attention_last10),
    ];
    let mut out = Vec::new();
    for (mname, mf) in measures {
        let x: Vec<f64> = results.iter().map(mf).collect();
        for (tname, tf) in metrics {
            let y: Vec<f64> = results.iter().map(tf).collect();
            if let Ok(c) = pearson(&x, &y) {
                out.push(CorrelationEntry {
                    measure: mname.to_string(),
                    metric: tname.to_string(),
                    r: c.r,
                    p: c.p,
                    n: c.n,
                    significant: c.significant(),
                });
            }
        }
    }
    out
}

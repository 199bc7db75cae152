//! Objective evaluation: character error rate, DTW-aligned mel-cepstral
//! distortion, and log-F0 RMSE / correlation, plus report assembly.

use crate::corpus::PhoneId;
use crate::dsp::{F0Track, McepSequence};
use crate::mat::euclidean;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("fewer than two co-voiced aligned frames")]
    InsufficientVoicing,
}

/// Levenshtein distance over symbol sequences.
pub fn edit_distance(a: &[PhoneId], b: &[PhoneId]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut curr = vec![0usize; m + 1];
    for i in 1..=n {
        curr[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            curr[j] = sub.min(prev[j] + 1).min(curr[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[m]
}

/// Character error rate: edit distance divided by reference length.
/// May exceed 1 for long hypotheses.
pub fn cer(reference: &[PhoneId], hypothesis: &[PhoneId]) -> Result<f64, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Monotonic alignment path: sequence of (row in a, row in b) pairs.
pub type DtwPath = Vec<(usize, usize)>;

/// Minimum-cost monotonic boundary-complete alignment with step set
/// {(1,0), (0,1), (1,1)}; frame distance is Euclidean over c1..cD
/// (c0, the gain term, excluded).
pub fn dtw_align(a: &McepSequence, b: &McepSequence) -> Result<DtwPath, EvalError> {
    if a.frames.rows == 0 || b.frames.rows == 0 {
        return Err(EvalError::ShapeError("empty sequence".into()));
    }
    if a.frames.cols != b.frames.cols {
        return Err(EvalError::ShapeError(format!(
            "feature dims {} vs {}",
            a.frames.cols, b.frames.cols
        )));
    }
    let (n, m) = (a.frames.rows, b.frames.rows);
    let dist = |i: usize, j: usize| euclidean(&a.frames.row(i)[1..], &b.frames.row(j)[1..]);
    let mut cost = vec![f64::INFINITY; n * m];
    // 0 = start, 1 = from (i-1,j), 2 = from (i,j-1), 3 = from (i-1,j-1)
    let mut back = vec![0u8; n * m];
    for i in 0..n {
        for j in 0..m {
            let d = dist(i, j);
            let (best, step) = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut best = f64::INFINITY;
                let mut step = 0u8;
                if i > 0 && cost[(i - 1) * m + j] < best {
                    best = cost[(i - 1) * m + j];
                    step = 1;
                }
                if j > 0 && cost[i * m + j - 1] < best {
                    best = cost[i * m + j - 1];
                    step = 2;
                }
                if i > 0 && j > 0 && cost[(i - 1) * m + j - 1] < best {
                    best = cost[(i - 1) * m + j - 1];
                    step = 3;
                }
                (best, step)
            };
            cost[i * m + j] = best + d;
            back[i * m + j] = step;
        }
    }
    let mut path = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n - 1, m - 1);
    loop {
        path.push((i, j));
        match back[i * m + j] {
            0 => break,
            1 => i -= 1,
            2 => j -= 1,
            _ => {
                i -= 1;
                j -= 1;
            }
        }
    }
    path.reverse();
    Ok(path)
}

/// Total frame-distance cost along a path (c0 excluded).
pub fn dtw_cost(a: &McepSequence, b: &McepSequence, path: &DtwPath) -> f64 {
    path.iter()
        .map(|&(i, j)| euclidean(&a.frames.row(i)[1..], &b.frames.row(j)[1..]))
        .sum()
}

const MCD_SCALE: f64 = 10.0 / std::f64::consts::LN_10;

/// Mel-cepstral distortion in dB over DTW-aligned frame pairs,
/// (10/ln 10) * sqrt(2 * sum_d (c_d - c'_d)^2) averaged along the path,
/// 0th coefficient excluded.
pub fn mcd(a: &McepSequence, b: &McepSequence) -> Result<f64, EvalError> {
    let path = dtw_align(a, b)?;
    let mut total = 0.0;
    for &(i, j) in &path {
        let d2: f64 = a.frames.row(i)[1..]
            .iter()
            .zip(&b.frames.row(j)[1..])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        total += MCD_SCALE * (2.0 * d2).sqrt();
    }
    Ok(total / path.len() as f64)
}

/// Log-F0 RMSE (cents) and Pearson correlation of log F0 over aligned
/// frame pairs voiced in both tracks. The alignment path comes from the
/// mel-cepstral DTW so every metric shares one frame pairing.
pub fn f0_metrics(a: &F0Track, b: &F0Track, path: &DtwPath) -> Result<(f64, f64), EvalError> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(i, j) in path {
        if i < a.voiced.len() && j < b.voiced.len() && a.voiced[i] && b.voiced[j] {
            xs.push(a.f0_hz[i]);
            ys.push(b.f0_hz[j]);
        }
    }
    if xs.len() < 2 {
        return Err(EvalError::InsufficientVoicing);
    }
    let n = xs.len() as f64;
    let rmse = (xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| {
            let cents = 1200.0 * (x / y).log2();
            cents * cents
        })
        .sum::<f64>()
        / n)
        .sqrt();
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (x, y) in lx.iter().zip(&ly) {
        num += (x - mx) * (y - my);
        dx += (x - mx) * (x - mx);
        dy += (y - my) * (y - my);
    }
    let corr = if dx > 0.0 && dy > 0.0 {
        num / (dx * dy).sqrt()
    } else {
        0.0
    };
    Ok((rmse, corr))
}

/// One evaluated system configuration, mirroring the comparison columns:
/// inputs / outputs / pretraining method plus the four objective metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub system_id: String,
    pub inputs: String,
    pub outputs: String,
    pub pretraining: String,
    pub mcd_db: f64,
    pub cer_pct: f64,
    /// Log-F0 RMSE in cents over co-voiced aligned frames.
    pub f0_rmse_cents: f64,
    pub f0_corr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Aligned text table with the metric columns.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<8} {:<8} {:<14} {:>8} {:>8} {:>14} {:>8}\n",
            "System", "Inputs", "Outputs", "Pretraining", "MCD(dB)", "CER(%)", "F0RMSE(cents)", "F0CORR"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:<8} {:<8} {:<14} {:>8.2} {:>8.1} {:>14.1} {:>8.2}\n",
                r.system_id, r.inputs, r.outputs, r.pretraining, r.mcd_db, r.cer_pct, r.f0_rmse_cents, r.f0_corr
            ));
        }
        out
    }
}

/// Evaluates one system over parallel (converted, reference) utterance
/// pairs. CER is corpus-level: total edit distance over total reference
/// length, decoded by the supplied recognizer closure.
pub fn evaluate_pairs(
    system_id: &str,
    inputs: &str,
    outputs: &str,
    pretraining: &str,
    pairs: &[(Vec<f64>, Vec<f64>, Vec<PhoneId>)],
    decode: impl Fn(&[f64]) -> Vec<PhoneId>,
    dsp: &crate::dsp::DspParams,
) -> Result<EvalRow, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let mut mcd_total = 0.0;
    let mut mcd_count = 0usize;
    let mut rmse_total = 0.0;
    let mut corr_total = 0.0;
    let mut f0_count = 0usize;
    let mut edits = 0usize;
    let mut ref_len = 0usize;
    for (converted, reference, transcript) in pairs {
        if transcript.is_empty() {
            return Err(EvalError::EmptyReference);
        }
        let hyp = decode(converted);
        edits += edit_distance(transcript, &hyp);
        ref_len += transcript.len();
        let mcep_c = crate::dsp::mel_cepstrum(converted, dsp)
            .map_err(|e| EvalError::ShapeError(e.to_string()))?;
        let mcep_r = crate::dsp::mel_cepstrum(reference, dsp)
            .map_err(|e| EvalError::ShapeError(e.to_string()))?;
        let path = dtw_align(&mcep_c, &mcep_r)?;
        let mut total = 0.0;
        for &(i, j) in &path {
            let d2: f64 = mcep_c.frames.row(i)[1..]
                .iter()
                .zip(&mcep_r.frames.row(j)[1..])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            total += MCD_SCALE * (2.0 * d2).sqrt();
        }
        mcd_total += total / path.len() as f64;
        mcd_count += 1;
        let f0_c = crate::dsp::extract_f0(converted, dsp).map_err(|e| EvalError::ShapeError(e.to_string()))?;
        let f0_r = crate::dsp::extract_f0(reference, dsp).map_err(|e| EvalError::ShapeError(e.to_string()))?;
        if let Ok((rmse, corr)) = f0_metrics(&f0_c, &f0_r, &path) {
            rmse_total += rmse;
            corr_total += corr;
            f0_count += 1;
        }
    }
    Ok(EvalRow {
        system_id: system_id.to_string(),
        inputs: inputs.to_string(),
        outputs: outputs.to_string(),
        pretraining: pretraining.to_string(),
        mcd_db: mcd_total / mcd_count as f64,
        cer_pct: 100.0 * edits as f64 / ref_len as f64,
        f0_rmse_cents: if f0_count > 0 { rmse_total / f0_count as f64 } else { f64::NAN },
        f0_corr: if f0_count > 0 { corr_total / f0_count as f64 } else { f64::NAN },
    })
}

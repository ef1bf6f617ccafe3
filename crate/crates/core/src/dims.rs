//! Per-dimension statistics of query/key tables: magnitude profiles,
//! first/last-n ablation sweeps and L1 row norms of projection matrices.
//!
//! Every dimension index here is canonical (highest rotation frequency
//! first), whatever the storage layout of the input.

use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toy::{eval_loss, EmbeddingStore, TaskConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    First,
    Last,
}

impl Side {
    pub fn tag(self) -> &'static str {
        match self {
            Side::First => "first",
            Side::Last => "last",
        }
    }

    /// Canonical indices of the first or last `n` of `width` dimensions.
    pub fn columns(self, n: usize, width: usize) -> Result<Vec<usize>> {
        if n > width {
            return Err(Error::OutOfRange(format!("cannot remove {n} of {width} dimensions")));
        }
        Ok(match self {
            Side::First => (0..n).collect(),
            Side::Last => (width - n..width).collect(),
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Side::First),
            "last" => Ok(Side::Last),
            other => Err(Error::Config(format!("unknown side `{other}` (expected first|last)"))),
        }
    }
}

/// Which tables an ablation zeroes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTarget {
    #[default]
    QueryAndKey,
    QueryOnly,
}

impl FromStr for AblationTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query-and-key" | "both" => Ok(AblationTarget::QueryAndKey),
            "query-only" | "query" => Ok(AblationTarget::QueryOnly),
            other => Err(Error::Config(format!(
                "unknown ablation target `{other}` (expected query-and-key|query-only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub side: Side,
    pub n_removed: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionReport {
    pub mean_abs_q: Vec<f64>,
    pub mean_abs_k: Vec<f64>,
    pub rms_q: Vec<f64>,
    pub rms_k: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l1_row_norm: Option<Vec<f64>>,
}

impl DimensionReport {
    pub fn width(&self) -> usize {
        self.mean_abs_q.len()
    }

    /// Mean of `mean_abs` over canonical dimensions `[start, end)`.
    pub fn band_mean(values: &[f64], start: usize, end: usize) -> f64 {
        values[start..end].iter().sum::<f64>() / (end - start) as f64
    }

    pub fn ablation_loss(&self, side: Side, n: usize) -> Option<f64> {
        self.ablation
            .iter()
            .find(|r| r.side == side && r.n_removed == n)
            .map(|r| r.eval_loss)
    }
}

/// Mean |x| and RMS of each canonical dimension of Q and K over all rows.
pub fn magnitude_profile(store: &EmbeddingStore) -> DimensionReport {
    let ordering = store.ordering();
    let d = store.head_dim();
    let n = store.n() as f64;
    let profile = |t: &Tensor| {
        let mut abs = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for r in 0..t.rows() {
            for (c, x) in ordering.to_canonical_slice(t.row(r)).into_iter().enumerate() {
                abs[c] += x.abs();
                sq[c] += x * x;
            }
        }
        let mean: Vec<f64> = abs.into_iter().map(|s| s / n).collect();
        let rms: Vec<f64> = sq.into_iter().map(|s| (s / n).sqrt()).collect();
        (mean, rms)
    };
    let (mean_abs_q, rms_q) = profile(&store.queries);
    let (mean_abs_k, rms_k) = profile(&store.keys);
    DimensionReport {
        mean_abs_q,
        mean_abs_k,
        rms_q,
        rms_k,
        ablation: Vec::new(),
        l1_row_norm: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationOptions {
    pub episodes: usize,
    /// Seeds the evaluation episodes; every cell sees the same episodes.
    pub seed: u64,
    pub target: AblationTarget,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            episodes: 2000,
            seed: 0,
            target: AblationTarget::QueryAndKey,
        }
    }
}

/// Store with canonical dimensions `[..n]` or `[width-n..]` zeroed.
pub fn ablate(store: &EmbeddingStore, side: Side, n: usize, target: AblationTarget) -> Result<EmbeddingStore> {
    let ordering = store.ordering();
    let cols: Vec<usize> = side
        .columns(n, store.head_dim())?
        .into_iter()
        .map(|c| ordering.storage_of(c))
        .collect();
    Ok(store.with_zeroed_columns(&cols, true, target == AblationTarget::QueryAndKey))
}

/// Eval loss for every `(side, n)` cell. An `n = 0` row is added for each
/// side when absent; rows come back sorted by side, then `n`.
pub fn ablation_sweep(
    store: &EmbeddingStore,
    config: &TaskConfig,
    sides: &[Side],
    ns: &[usize],
    options: &AblationOptions,
) -> Result<Vec<AblationRow>> {
    let width = store.head_dim();
    if let Some(&bad) = ns.iter().find(|&&n| n > width) {
        return Err(Error::OutOfRange(format!("n = {bad} exceeds head dim {width}")));
    }
    let mut ns: Vec<usize> = ns.iter().copied().chain([0]).collect();
    ns.sort_unstable();
    ns.dedup();
    let mut sides = sides.to_vec();
    sides.sort_unstable();
    sides.dedup();

    let cells: Vec<(Side, usize)> = sides.iter().flat_map(|&s| ns.iter().map(move |&n| (s, n))).collect();
    cells
        .into_par_iter()
        .map(|(side, n)| {
            let ablated = ablate(store, side, n, options.target)?;
            let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
            let eval_loss = eval_loss(&ablated, config, options.episodes, &mut rng)?;
            Ok(AblationRow {
                side,
                n_removed: n,
                eval_loss,
            })
        })
        .collect()
}

/// L1 norm of each row of `w`.
pub fn l1_row_norms(w: &Tensor) -> Result<Vec<f64>> {
    if w.shape().len() != 2 {
        return Err(Error::shape("l1_row_norms", format!("expected a matrix, got {:?}", w.shape())));
    }
    Ok((0..w.rows()).map(|r| w.row(r).iter().map(|x| x.abs()).sum()).collect())
}

/// `dim,mean_abs_q,mean_abs_k,rms_q,rms_k`, plus `l1_row_norm` when present.
pub fn write_magnitude_csv(out: impl Write, report: &DimensionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["dim", "mean_abs_q", "mean_abs_k", "rms_q", "rms_k"];
    if report.l1_row_norm.is_some() {
        header.push("l1_row_norm");
    }
    w.write_record(&header)?;
    for d in 0..report.width() {
        let mut row = vec![
            d.to_string(),
            report.mean_abs_q[d].to_string(),
            report.mean_abs_k[d].to_string(),
            report.rms_q[d].to_string(),
            report.rms_k[d].to_string(),
        ];
        if let Some(l1) = &report.l1_row_norm {
            row.push(l1[d].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `side,n_removed,eval_loss`.
pub fn write_ablation_csv(out: impl Write, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["side", "n_removed", "eval_loss"])?;
    for r in rows {
        w.write_record([r.side.tag().to_string(), r.n_removed.to_string(), r.eval_loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

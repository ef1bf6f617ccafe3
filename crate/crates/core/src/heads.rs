//! Retrieval-head scores from recorded attention rows, and first/last-n
//! query-dimension interventions.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::attend_masked;
use crate::dims::Side;
use crate::error::{Error, Result};
use crate::mask::HeadSnapshots;
use crate::snapshot::{AttnRecord, Metadata, Record, RecordKind, SnapshotFile};
use crate::tensor::Tensor;

/// Row sums must be 1 within this.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;
/// Looser bound for rows read back from 32-bit containers.
pub const FILE_ROW_SUM_TOLERANCE: f64 = 1e-3;

/// Token spans of one recorded sequence. Ranges are half-open.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Spans {
    pub bos: usize,
    pub context: (usize, usize),
    pub answer: (usize, usize),
}

impl Spans {
    pub fn from_raw(s: [u32; 5]) -> Self {
        let s = s.map(|x| x as usize);
        Self {
            bos: s[0],
            context: (s[1], s[2]),
            answer: (s[3], s[4]),
        }
    }

    pub fn to_raw(self) -> [u32; 5] {
        [self.bos, self.context.0, self.context.1, self.answer.0, self.answer.1].map(|x| x as u32)
    }

    fn validate(&self, seq_len: usize) -> Result<()> {
        let bad = |d: String| Err(Error::Config(format!("malformed spans {self:?}: {d}")));
        let (c0, c1) = self.context;
        let (a0, a1) = self.answer;
        if c0 > c1 || a0 > a1 {
            return bad("span end before start".into());
        }
        if c1 > seq_len || a1 > seq_len || self.bos >= seq_len {
            return bad(format!("outside sequence of length {seq_len}"));
        }
        if c0 < a1 && a0 < c1 {
            return bad("context and question-output spans overlap".into());
        }
        if (a0..a1).contains(&self.bos) {
            return bad("BOS inside the question-output span".into());
        }
        Ok(())
    }
}

/// Attention rows of one head for the query tokens of the question-output
/// span, one row of length `seq_len` per token in `[a0, a1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub spans: Spans,
    pub rows: Tensor,
}

impl AttentionRecord {
    pub fn new(layer: usize, head: usize, spans: Spans, rows: Tensor) -> Result<Self> {
        Self::with_tolerance(layer, head, spans, rows, ROW_SUM_TOLERANCE)
    }

    fn with_tolerance(layer: usize, head: usize, spans: Spans, rows: Tensor, tolerance: f64) -> Result<Self> {
        let r = Self {
            layer,
            head,
            spans,
            rows,
        };
        r.check(tolerance)?;
        Ok(r)
    }

    pub fn seq_len(&self) -> usize {
        self.rows.cols()
    }

    pub fn validate(&self) -> Result<()> {
        self.check(ROW_SUM_TOLERANCE)
    }

    fn check(&self, tolerance: f64) -> Result<()> {
        if self.rows.shape().len() != 2 || self.rows.rows() == 0 {
            return Err(Error::Empty("attention rows"));
        }
        self.spans.validate(self.seq_len())?;
        let (a0, a1) = self.spans.answer;
        if self.rows.rows() != a1 - a0 {
            return Err(Error::Config(format!(
                "{} rows for a question-output span of {} tokens",
                self.rows.rows(),
                a1 - a0
            )));
        }
        for r in 0..self.rows.rows() {
            let row = self.rows.row(r);
            if let Some(w) = row.iter().find(|&&w| w < 0.0) {
                return Err(Error::OutOfRange(format!("negative attention weight {w} in row {r}")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > tolerance {
                return Err(Error::OutOfRange(format!("row {r} sums to {sum}")));
            }
        }
        Ok(())
    }

    /// Context mass of each row, BOS column excluded.
    fn row_masses(&self, renormalize_bos: bool) -> Vec<f64> {
        let (c0, c1) = self.spans.context;
        let bos = self.spans.bos;
        (0..self.rows.rows())
            .map(|r| {
                let row = self.rows.row(r);
                let mass: f64 = (c0..c1).filter(|&j| j != bos).map(|j| row[j]).sum();
                let mass = if renormalize_bos {
                    let rest = 1.0 - row[bos];
                    if rest > 0.0 {
                        mass / rest
                    } else {
                        0.0
                    }
                } else {
                    mass
                };
                mass.clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// Reads every record of an ATTN container; layer and head come from the
/// metadata.
pub fn records_from_file(file: &SnapshotFile) -> Result<Vec<AttentionRecord>> {
    if file.kind != RecordKind::Attention {
        return Err(Error::Config(format!("expected ATTN records, got {:?}", file.kind)));
    }
    let meta = file.metadata()?;
    let (layer, head) = (meta.layer.unwrap_or(0), meta.head.unwrap_or(0));
    file.records
        .iter()
        .map(|rec| {
            let Record::Attention(r) = rec else { unreachable!("kind checked above") };
            let rows = Tensor::matrix(
                r.n_rows as usize,
                r.seq_len as usize,
                r.rows.iter().map(|&x| x as f64).collect(),
            )?;
            AttentionRecord::with_tolerance(layer, head, Spans::from_raw(r.spans), rows, FILE_ROW_SUM_TOLERANCE)
        })
        .collect()
}

/// ATTN container for records of a single head.
pub fn records_to_file(records: &[AttentionRecord], model: Option<&str>) -> Result<SnapshotFile> {
    let first = records.first().ok_or(Error::Empty("attention records"))?;
    check_same_head(records)?;
    let meta = Metadata {
        model: model.map(str::to_owned),
        layer: Some(first.layer),
        head: Some(first.head),
        ..Metadata::default()
    };
    let recs = records
        .iter()
        .map(|r| {
            Record::Attention(AttnRecord {
                n_rows: r.rows.rows() as u32,
                seq_len: r.seq_len() as u32,
                spans: r.spans.to_raw(),
                rows: r.rows.data().iter().map(|&x| x as f32).collect(),
            })
        })
        .collect();
    SnapshotFile::new(RecordKind::Attention, &meta, recs)
}

fn check_same_head(records: &[AttentionRecord]) -> Result<()> {
    let first = &records[0];
    if let Some(r) = records.iter().find(|r| (r.layer, r.head) != (first.layer, first.head)) {
        return Err(Error::Config(format!(
            "records mix heads ({}, {}) and ({}, {})",
            first.layer, first.head, r.layer, r.head
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
    pub is_retrieval: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub threshold: f64,
    /// Divide each row's context mass by `1 - w_bos`.
    pub renormalize_bos: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            renormalize_bos: false,
        }
    }
}

/// Sums after sorting, so the result does not depend on input order.
fn ordered_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean context mass over rows, then over records.
pub fn score_head(records: &[AttentionRecord], options: &ScoreOptions) -> Result<HeadScore> {
    let first = records.first().ok_or(Error::Empty("attention records"))?;
    check_same_head(records)?;
    let mut per_record = Vec::with_capacity(records.len());
    for r in records {
        r.check(FILE_ROW_SUM_TOLERANCE)?;
        per_record.push(ordered_mean(r.row_masses(options.renormalize_bos)));
    }
    let score = ordered_mean(per_record);
    Ok(HeadScore {
        layer: first.layer,
        head: first.head,
        score,
        is_retrieval: score > options.threshold,
    })
}

/// Heads scoring strictly above `threshold`, as `(layer, head)`.
pub fn classify_heads(scores: &[HeadScore], threshold: f64) -> Vec<(usize, usize)> {
    scores
        .iter()
        .filter(|s| s.score > threshold)
        .map(|s| (s.layer, s.head))
        .collect()
}

/// `layer,head,score,is_retrieval`.
pub fn write_score_csv(out: impl Write, scores: &[HeadScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "head", "score", "is_retrieval"])?;
    for s in scores {
        w.write_record([
            s.layer.to_string(),
            s.head.to_string(),
            s.score.to_string(),
            s.is_retrieval.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Attention output of snapshot `index` with the first or last `n`
/// canonical query dimensions zeroed.
pub fn intervene_mask_dims(heads: &HeadSnapshots, index: usize, side: Side, n: usize) -> Result<Tensor> {
    heads.validate()?;
    let snap = heads
        .snapshots
        .get(index)
        .ok_or_else(|| Error::OutOfRange(format!("snapshot {index} of {}", heads.snapshots.len())))?;
    let d = snap.head_dim();
    let ordering = heads.ordering();
    let mut u = vec![1.0; d];
    for c in side.columns(n, d)? {
        u[ordering.storage_of(c)] = 0.0;
    }
    let input = crate::attention::AttentionInput {
        query: snap.query.clone(),
        keys: snap.keys.clone(),
        values: snap.values.clone(),
        positions: Some(snap.positions.clone()),
        query_position: snap.query_position,
        scale: heads.scale,
    };
    attend_masked(&input, &Tensor::vector(u)?, heads.rope.as_ref())
}

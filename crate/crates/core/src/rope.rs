//! Rotary position embedding.
//!
//! A head of width `2D` is split into `D` two-dimensional slices; slice `i`
//! is rotated by the angle `m * theta_i` at position `m`, with
//! `theta_i = base^(-2(i-1)/2D)`. Frequencies therefore decrease with the
//! slice index, and slice 1 always rotates at exactly one radian per token.
//!
//! Two storage layouts are supported. In [`Layout::AdjacentPairs`] slice `i`
//! occupies storage indices `(2i, 2i+1)`; in [`Layout::HalfSplit`] (the
//! layout used by LLaMA-style implementations) it occupies `(i, i+D)`.
//! Every analysis reports dimensions in *canonical* order, which sorts
//! slices by frequency, highest first, and keeps each slice's two
//! coordinates adjacent. Canonical order coincides with the adjacent-pairs
//! storage layout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    AdjacentPairs,
    HalfSplit,
}

impl Layout {
    pub fn tag(self) -> &'static str {
        match self {
            Layout::AdjacentPairs => "adjacent-pairs",
            Layout::HalfSplit => "half-split",
        }
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacent-pairs" | "adjacent" => Ok(Layout::AdjacentPairs),
            "half-split" | "half" => Ok(Layout::HalfSplit),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub base: f64,
    /// Number of rotated slices `D`; the head width is `2D`.
    pub pairs: usize,
    pub layout: Layout,
    pub max_position: usize,
}

impl RopeConfig {
    /// LLaMA defaults: base 10000, half-split layout, 2048 positions.
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_layout(head_dim, Layout::HalfSplit)
    }

    pub fn with_layout(head_dim: usize, layout: Layout) -> Result<Self> {
        let cfg = Self {
            base: 10_000.0,
            pairs: head_dim / 2,
            layout,
            max_position: 2048,
        };
        if !head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {head_dim} is odd")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 {
            return Err(Error::Config("RoPE needs at least one pair".into()));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("RoPE base {} must be positive", self.base)));
        }
        if self.max_position == 0 {
            return Err(Error::Config("max_position must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        2 * self.pairs
    }

    /// `theta_i` for every slice, highest frequency first.
    pub fn thetas(&self) -> Vec<f64> {
        let width = self.head_dim() as f64;
        (0..self.pairs)
            .map(|i| self.base.powf(-2.0 * i as f64 / width))
            .collect()
    }

    /// Storage indices of the two coordinates of slice `i` (0-based).
    pub fn pair(&self, i: usize) -> (usize, usize) {
        match self.layout {
            Layout::AdjacentPairs => (2 * i, 2 * i + 1),
            Layout::HalfSplit => (i, i + self.pairs),
        }
    }

    pub fn ordering(&self) -> DimOrdering {
        DimOrdering::for_layout(self.layout, self.pairs)
    }
}

pub fn frequencies(config: &RopeConfig) -> Result<Tensor> {
    config.validate()?;
    Tensor::vector(config.thetas())
}

/// Rotates `v` in place by `offset * theta_i` per slice. `offset` may be
/// negative; rotations by opposite offsets are mutually inverse.
pub(crate) fn rotate_slice(v: &mut [f64], offset: f64, config: &RopeConfig, thetas: &[f64]) {
    for (i, &theta) in thetas.iter().enumerate() {
        let (a, b) = config.pair(i);
        let (sin, cos) = (offset * theta).sin_cos();
        let (x, y) = (v[a], v[b]);
        v[a] = x * cos - y * sin;
        v[b] = x * sin + y * cos;
    }
}

fn check_width(v: &Tensor, config: &RopeConfig) -> Result<()> {
    if v.cols() != config.head_dim() {
        return Err(Error::shape(
            "rope",
            format!("width {} vs head dim {}", v.cols(), config.head_dim()),
        ));
    }
    Ok(())
}

fn warn_beyond(position: usize, config: &RopeConfig) {
    if position >= config.max_position {
        log::warn!(
            "position {position} is beyond the configured maximum {}",
            config.max_position
        );
    }
}

/// Applies the rotation for token position `position`.
pub fn rotate(v: &Tensor, position: usize, config: &RopeConfig) -> Result<Tensor> {
    check_width(v, config)?;
    warn_beyond(position, config);
    let thetas = config.thetas();
    let mut out = v.clone();
    for row in out.data_mut().chunks_mut(config.head_dim()) {
        rotate_slice(row, position as f64, config, &thetas);
    }
    Ok(out)
}

/// Rotation by a signed relative offset, i.e. `M_offset v`.
pub fn rotate_by_offset(v: &Tensor, offset: i64, config: &RopeConfig) -> Result<Tensor> {
    check_width(v, config)?;
    if v.shape().len() != 1 {
        return Err(Error::shape("rotate_by_offset", "expects a vector"));
    }
    let mut out = v.clone();
    rotate_slice(out.data_mut(), offset as f64, config, &config.thetas());
    Ok(out)
}

/// Rotates row `r` of `rows` by `positions[r]`.
pub fn rotate_rows(rows: &Tensor, positions: &[usize], config: &RopeConfig) -> Result<Tensor> {
    check_width(rows, config)?;
    if rows.shape().len() != 2 || rows.rows() != positions.len() {
        return Err(Error::shape(
            "rotate_rows",
            format!("{:?} with {} positions", rows.shape(), positions.len()),
        ));
    }
    let thetas = config.thetas();
    let mut out = rows.clone();
    for (r, &p) in positions.iter().enumerate() {
        warn_beyond(p, config);
        rotate_slice(out.row_mut(r), p as f64, config, &thetas);
    }
    Ok(out)
}

/// Attention logit between a query at position `m` and a key at position
/// `n`: `rotate(q, m) . rotate(k, n)`.
pub fn relative_dot(q: &Tensor, k: &Tensor, m: usize, n: usize, config: &RopeConfig) -> Result<f64> {
    if q.shape() != k.shape() {
        return Err(Error::shape(
            "relative_dot",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    rotate(q, m, config)?.dot(&rotate(k, n, config)?)
}

/// Permutation from storage indices to canonical (frequency-descending)
/// indices: `canonical[perm[s]] = storage[s]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DimOrdering {
    perm: Vec<usize>,
}

impl DimOrdering {
    pub fn new(perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        for &p in &perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Config(format!("{perm:?} is not a permutation")));
            }
        }
        Ok(Self { perm })
    }

    pub fn identity(width: usize) -> Self {
        Self {
            perm: (0..width).collect(),
        }
    }

    pub fn for_layout(layout: Layout, pairs: usize) -> Self {
        match layout {
            Layout::AdjacentPairs => Self::identity(2 * pairs),
            Layout::HalfSplit => {
                let mut perm = vec![0; 2 * pairs];
                for i in 0..pairs {
                    perm[i] = 2 * i;
                    perm[i + pairs] = 2 * i + 1;
                }
                Self { perm }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Canonical index of storage index `s`.
    pub fn canonical_of(&self, storage: usize) -> usize {
        self.perm[storage]
    }

    /// Storage index holding canonical index `c`.
    pub fn storage_of(&self, canonical: usize) -> usize {
        self.perm
            .iter()
            .position(|&p| p == canonical)
            .expect("valid permutation")
    }

    pub fn to_canonical_slice(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for (s, &x) in v.iter().enumerate() {
            out[self.perm[s]] = x;
        }
        out
    }

    pub fn from_canonical_slice(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&c| v[c]).collect()
    }
}

/// Reorders the last axis of `v` from storage to canonical layout.
pub fn to_canonical(v: &Tensor, ordering: &DimOrdering) -> Result<Tensor> {
    permute_last_axis(v, ordering, true)
}

pub fn from_canonical(v: &Tensor, ordering: &DimOrdering) -> Result<Tensor> {
    permute_last_axis(v, ordering, false)
}

fn permute_last_axis(v: &Tensor, ordering: &DimOrdering, forward: bool) -> Result<Tensor> {
    let width = *v.shape().last().unwrap_or(&1);
    if width != ordering.len() {
        return Err(Error::shape(
            "canonical reordering",
            format!("width {width} vs permutation of {}", ordering.len()),
        ));
    }
    let data: Vec<f64> = v
        .data()
        .chunks(width)
        .flat_map(|row| {
            if forward {
                ordering.to_canonical_slice(row)
            } else {
                ordering.from_canonical_slice(row)
            }
        })
        .collect();
    Ok(Tensor::from_raw(v.shape().to_vec(), data))
}

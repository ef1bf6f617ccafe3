//! Single-head attention with optional RoPE on keys and optional query masks.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rope::RopeConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScaleMode {
    /// Scores divided by `sqrt(head_dim)`.
    #[default]
    #[serde(rename = "inv-sqrt")]
    InverseSqrt,
    #[serde(rename = "none")]
    None,
}

impl ScaleMode {
    pub fn factor(self, head_dim: usize) -> f64 {
        match self {
            ScaleMode::InverseSqrt => 1.0 / (head_dim as f64).sqrt(),
            ScaleMode::None => 1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ScaleMode::InverseSqrt => "inv-sqrt",
            ScaleMode::None => "none",
        }
    }
}

impl std::str::FromStr for ScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inv-sqrt" | "inverse-sqrt" => Ok(ScaleMode::InverseSqrt),
            "none" => Ok(ScaleMode::None),
            other => Err(Error::Config(format!("unknown scale mode `{other}`"))),
        }
    }
}

/// One query against `s` key/value rows.
///
/// Keys sit at `positions` and the query at `query_position`; both are only
/// consulted when a [`RopeConfig`] is supplied. The toy task leaves the query
/// at position 0, i.e. unrotated.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput {
    pub query: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    pub positions: Option<Vec<usize>>,
    pub query_position: usize,
    pub scale: ScaleMode,
}

impl AttentionInput {
    pub fn new(query: Tensor, keys: Tensor, values: Tensor) -> Result<Self> {
        let input = Self {
            query,
            keys,
            values,
            positions: None,
            query_position: 0,
            scale: ScaleMode::default(),
        };
        input.validate()?;
        Ok(input)
    }

    pub fn with_positions(mut self, positions: Vec<usize>) -> Result<Self> {
        self.positions = Some(positions);
        self.validate()?;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: ScaleMode) -> Self {
        self.scale = scale;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.query.len()
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.query.shape().len() != 1 {
            return Err(Error::shape("attention", "query must be a vector"));
        }
        if self.keys.shape().len() != 2 || self.keys.rows() == 0 {
            return Err(Error::Empty("attention keys"));
        }
        if self.keys.cols() != self.query.len() {
            return Err(Error::shape(
                "attention",
                format!("query width {} vs key width {}", self.query.len(), self.keys.cols()),
            ));
        }
        if self.values.shape().len() != 2 || self.values.rows() != self.keys.rows() {
            return Err(Error::shape(
                "attention",
                format!("{} keys vs values {:?}", self.keys.rows(), self.values.shape()),
            ));
        }
        if let Some(p) = &self.positions {
            if p.len() != self.keys.rows() {
                return Err(Error::shape(
                    "attention",
                    format!("{} positions for {} keys", p.len(), self.keys.rows()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionNodes {
    pub scores: NodeId,
    pub weights: NodeId,
    pub output: NodeId,
}

/// Position information needed to build an attention node.
#[derive(Debug, Clone, Copy)]
pub struct Placement<'a> {
    pub positions: Option<&'a [usize]>,
    pub query_position: usize,
    pub rope: Option<&'a RopeConfig>,
    pub scale: ScaleMode,
}

/// Records attention of `query` (`[2D]`) over `keys` (`[s, 2D]`) and
/// `values` (`[s, dv]`) on `g`.
pub fn attend_graph(
    g: &mut Graph,
    query: NodeId,
    keys: NodeId,
    values: NodeId,
    at: Placement<'_>,
) -> Result<AttentionNodes> {
    let width = g.value(query).len();
    let s = g.value(keys).rows();
    let (q, k) = match at.rope {
        Some(cfg) => {
            let positions = at
                .positions
                .ok_or_else(|| Error::Config("RoPE attention needs key positions".into()))?;
            let k = g.rope(keys, positions, cfg)?;
            let q = if at.query_position == 0 {
                query
            } else {
                g.rope(query, &[at.query_position], cfg)?
            };
            (q, k)
        }
        None => (query, keys),
    };
    let q_col = g.reshape(q, &[width, 1])?;
    let raw = g.matmul(k, q_col)?;
    let raw = g.reshape(raw, &[s])?;
    let scores = match at.scale {
        ScaleMode::None => raw,
        mode => g.scale(raw, mode.factor(width))?,
    };
    let weights = g.softmax(scores)?;
    let w_row = g.reshape(weights, &[1, s])?;
    let out = g.matmul(w_row, values)?;
    let dv = g.value(values).cols();
    let output = g.reshape(out, &[dv])?;
    Ok(AttentionNodes {
        scores,
        weights,
        output,
    })
}

fn forward(input: &AttentionInput, mask: Option<&Tensor>, rope: Option<&RopeConfig>) -> Result<(Tensor, Tensor)> {
    input.validate()?;
    if let Some(cfg) = rope {
        if cfg.head_dim() != input.head_dim() {
            return Err(Error::shape(
                "attention",
                format!("RoPE head dim {} vs query width {}", cfg.head_dim(), input.head_dim()),
            ));
        }
        if input.positions.is_none() {
            return Err(Error::Config("RoPE attention needs key positions".into()));
        }
    }
    let mut g = Graph::new();
    let mut q = g.constant(input.query.clone())?;
    if let Some(u) = mask {
        let u = g.constant(u.clone())?;
        q = g.mul(q, u)?;
    }
    let k = g.constant(input.keys.clone())?;
    let v = g.constant(input.values.clone())?;
    let nodes = attend_graph(
        &mut g,
        q,
        k,
        v,
        Placement {
            positions: input.positions.as_deref(),
            query_position: input.query_position,
            rope,
            scale: input.scale,
        },
    )?;
    let out = Arc::unwrap_or_clone(g.shared_value(nodes.output));
    let w = Arc::unwrap_or_clone(g.shared_value(nodes.weights));
    Ok((out, w))
}

pub fn attend(input: &AttentionInput, rope: Option<&RopeConfig>) -> Result<Tensor> {
    forward(input, None, rope).map(|(o, _)| o)
}

pub(crate) fn check_mask(u: &Tensor, width: usize) -> Result<()> {
    if u.len() != width || u.shape().len() != 1 {
        return Err(Error::shape(
            "query mask",
            format!("mask {:?} for head dim {width}", u.shape()),
        ));
    }
    if let Some(x) = u.data().iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::OutOfRange(format!("mask entry {x} outside [0, 1]")));
    }
    Ok(())
}

/// Attention with the query replaced by `query ⊙ u`.
pub fn attend_masked(input: &AttentionInput, u: &Tensor, rope: Option<&RopeConfig>) -> Result<Tensor> {
    check_mask(u, input.head_dim())?;
    forward(input, Some(u), rope).map(|(o, _)| o)
}

pub fn attention_weights(input: &AttentionInput, rope: Option<&RopeConfig>) -> Result<Tensor> {
    forward(input, None, rope).map(|(_, w)| w)
}

//! The controlled retrieval task.
//!
//! `n` learnable tuples `(q_i, k_i, v_i)` are trained so that attending
//! with `q_i` over a random subset of key/value pairs (which always
//! contains pair `i`) yields an output `a` whose inner products with *all*
//! `n` values single out `v_i`:
//!
//! ```text
//! loss = -log softmax_j(a . v_j)[i],   a = Attention(q_i, K_S, V_S)
//! ```
//!
//! With RoPE enabled the subset's keys are rotated by random distinct
//! positions in `[0, max_position)` while the query stays unrotated.

use std::sync::Arc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{attend_graph, Placement, ScaleMode};
use crate::autodiff::{Gradient, Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rope::{DimOrdering, Layout, RopeConfig};
use crate::snapshot::{EmbRecord, Metadata, Record, RecordKind, SnapshotFile};
use crate::tensor::Tensor;

/// Episodes per autodiff graph. Gradients are summed chunk by chunk in a
/// fixed order, so results do not depend on the worker count.
const CHUNK: usize = 8;

/// What `samples_per_epoch` counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochUnit {
    /// Episodes; an epoch is `samples_per_epoch / batch_size` steps.
    Episodes,
    /// Optimizer steps.
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub n: usize,
    pub subset_size: usize,
    pub head_dim: usize,
    pub max_position: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub samples_per_epoch: usize,
    pub epochs: usize,
    pub rope_enabled: bool,
    pub seed: u64,
    pub scale_mode: ScaleMode,
    pub epoch_unit: EpochUnit,
    pub optimizer: OptimizerKind,
    pub layout: Layout,
    pub rope_base: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            subset_size: 128,
            head_dim: 128,
            max_position: 2048,
            batch_size: 64,
            learning_rate: 1e-3,
            samples_per_epoch: 10_000,
            epochs: 100,
            rope_enabled: true,
            seed: 0,
            scale_mode: ScaleMode::InverseSqrt,
            epoch_unit: EpochUnit::Episodes,
            optimizer: OptimizerKind::Adam,
            layout: Layout::HalfSplit,
            rope_base: 10_000.0,
        }
    }
}

impl TaskConfig {
    /// A laptop-sized variant of the default task.
    pub fn desk() -> Self {
        Self {
            n: 500,
            subset_size: 64,
            head_dim: 64,
            epochs: 20,
            samples_per_epoch: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n", self.n),
            ("subset_size", self.subset_size),
            ("head_dim", self.head_dim),
            ("max_position", self.max_position),
            ("batch_size", self.batch_size),
            ("samples_per_epoch", self.samples_per_epoch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if self.subset_size > self.n {
            return Err(Error::Config(format!(
                "subset_size {} exceeds n {}",
                self.subset_size, self.n
            )));
        }
        if self.subset_size > self.max_position {
            return Err(Error::Config(format!(
                "subset_size {} exceeds max_position {}",
                self.subset_size, self.max_position
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epoch_unit == EpochUnit::Episodes && self.samples_per_epoch < self.batch_size {
            return Err(Error::Config(
                "samples_per_epoch must cover at least one batch".into(),
            ));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        match self.epoch_unit {
            EpochUnit::Episodes => self.samples_per_epoch / self.batch_size,
            EpochUnit::Steps => self.samples_per_epoch,
        }
    }

    /// Rotation used on keys; `None` when RoPE is disabled.
    pub fn rope(&self) -> Option<RopeConfig> {
        self.rope_enabled.then_some(RopeConfig {
            base: self.rope_base,
            pairs: self.head_dim / 2,
            layout: self.layout,
            max_position: self.max_position,
        })
    }

    pub fn ordering(&self) -> DimOrdering {
        DimOrdering::for_layout(self.layout, self.head_dim / 2)
    }
}

/// The `n x 2D` query, key and value tables, stored in `layout`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    pub layout: Layout,
}

impl EmbeddingStore {
    pub fn new(queries: Tensor, keys: Tensor, values: Tensor, layout: Layout) -> Result<Self> {
        let shape = queries.shape().to_vec();
        if shape.len() != 2 || keys.shape() != shape || values.shape() != shape {
            return Err(Error::shape(
                "EmbeddingStore",
                format!("{:?} / {:?} / {:?}", queries.shape(), keys.shape(), values.shape()),
            ));
        }
        if !shape[1].is_multiple_of(2) {
            return Err(Error::shape("EmbeddingStore", "odd head dim"));
        }
        Ok(Self {
            queries,
            keys,
            values,
            layout,
        })
    }

    /// I.i.d. Gaussian entries with standard deviation `1/sqrt(2D)`, drawn
    /// for Q, then K, then V in row-major order.
    pub fn init(config: &TaskConfig, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (config.head_dim as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut table = || {
            let data = (0..config.n * config.head_dim).map(|_| normal.sample(rng)).collect();
            Tensor::matrix(config.n, config.head_dim, data)
        };
        let (q, k, v) = (table()?, table()?, table()?);
        Self::new(q, k, v, config.layout)
    }

    pub fn n(&self) -> usize {
        self.queries.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn ordering(&self) -> DimOrdering {
        DimOrdering::for_layout(self.layout, self.head_dim() / 2)
    }

    fn check(&self, config: &TaskConfig) -> Result<()> {
        if self.n() != config.n || self.head_dim() != config.head_dim {
            return Err(Error::shape(
                "EmbeddingStore",
                format!(
                    "store is {}x{}, config wants {}x{}",
                    self.n(),
                    self.head_dim(),
                    config.n,
                    config.head_dim
                ),
            ));
        }
        Ok(())
    }

    pub fn to_snapshot(&self, config: &TaskConfig) -> Result<SnapshotFile> {
        let mut extra = serde_json::Map::new();
        extra.insert("task".into(), serde_json::to_value(config)?);
        let meta = Metadata {
            model: Some("toy-retrieval".into()),
            layer: Some(0),
            head: Some(0),
            head_dim: Some(self.head_dim()),
            layout: Some(self.layout),
            rope_base: config.rope_enabled.then_some(config.rope_base),
            max_position: Some(config.max_position),
            scale: Some(config.scale_mode),
            extra,
            ..Default::default()
        };
        let record = EmbRecord {
            n: self.n() as u32,
            dim: self.head_dim() as u32,
            queries: self.queries.data().to_vec(),
            keys: self.keys.data().to_vec(),
            values: self.values.data().to_vec(),
        };
        SnapshotFile::new(RecordKind::Embedding, &meta, vec![Record::Embedding(record)])
    }

    /// Recovers the store and the task configuration it was trained with.
    pub fn from_snapshot(file: &SnapshotFile) -> Result<(Self, TaskConfig)> {
        if file.kind != RecordKind::Embedding || file.records.len() != 1 {
            return Err(Error::Config("checkpoint must hold exactly one EMB record".into()));
        }
        let meta = file.metadata()?;
        let config: TaskConfig = match meta.extra.get("task") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Config("checkpoint metadata lacks the task config".into())),
        };
        let Record::Embedding(r) = &file.records[0] else {
            unreachable!("kind checked above")
        };
        let (n, d) = (r.n as usize, r.dim as usize);
        let store = Self::new(
            Tensor::matrix(n, d, r.queries.clone())?,
            Tensor::matrix(n, d, r.keys.clone())?,
            Tensor::matrix(n, d, r.values.clone())?,
            meta.layout.unwrap_or(config.layout),
        )?;
        store.check(&config)?;
        Ok((store, config))
    }

    /// Copy with the given storage columns of Q (and optionally K) zeroed.
    pub fn with_zeroed_columns(&self, columns: &[usize], queries: bool, keys: bool) -> Self {
        let zero = |t: &Tensor| {
            let mut t = t.clone();
            let c = t.cols();
            for row in t.data_mut().chunks_mut(c) {
                for &col in columns {
                    row[col] = 0.0;
                }
            }
            t
        };
        Self {
            queries: if queries { zero(&self.queries) } else { self.queries.clone() },
            keys: if keys { zero(&self.keys) } else { self.keys.clone() },
            values: self.values.clone(),
            layout: self.layout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub target: usize,
    /// Pair indices in the sampled subset; `subset[0] == target`.
    pub subset: Vec<usize>,
    /// Key position of `subset[j]`.
    pub positions: Vec<usize>,
}

pub fn sample_episode(config: &TaskConfig, rng: &mut impl Rng) -> Episode {
    let target = rng.random_range(0..config.n);
    let mut subset = Vec::with_capacity(config.subset_size);
    subset.push(target);
    subset.extend(
        index::sample(rng, config.n - 1, config.subset_size - 1)
            .into_iter()
            .map(|j| if j >= target { j + 1 } else { j }),
    );
    let positions = index::sample(rng, config.max_position, config.subset_size).into_vec();
    Episode {
        target,
        subset,
        positions,
    }
}

/// Leaf nodes for the three tables.
#[derive(Debug, Clone, Copy)]
pub struct StoreNodes {
    pub queries: NodeId,
    pub keys: NodeId,
    pub values: NodeId,
}

/// Records the retrieval loss of one episode on `g`.
pub fn episode_loss_graph(
    g: &mut Graph,
    store: StoreNodes,
    episode: &Episode,
    config: &TaskConfig,
    rope: Option<&RopeConfig>,
) -> Result<NodeId> {
    let d = config.head_dim;
    let q = g.gather_rows(store.queries, &[episode.target])?;
    let q = g.reshape(q, &[d])?;
    let ks = g.gather_rows(store.keys, &episode.subset)?;
    let vs = g.gather_rows(store.values, &episode.subset)?;
    let att = attend_graph(
        g,
        q,
        ks,
        vs,
        Placement {
            positions: Some(&episode.positions),
            query_position: 0,
            rope,
            scale: config.scale_mode,
        },
    )?;
    let a = g.reshape(att.output, &[d, 1])?;
    let logits = g.matmul(store.values, a)?;
    let logits = g.reshape(logits, &[config.n])?;
    let log_probs = g.log_softmax(logits)?;
    let picked = g.pick(log_probs, episode.target)?;
    g.scale(picked, -1.0)
}

fn check_episode(episode: &Episode, config: &TaskConfig) -> Result<()> {
    if episode.subset.len() != episode.positions.len()
        || episode.subset.is_empty()
        || episode.subset.iter().any(|&j| j >= config.n)
        || !episode.subset.contains(&episode.target)
    {
        return Err(Error::Config("episode inconsistent with the store".into()));
    }
    Ok(())
}

fn shared(store: &EmbeddingStore) -> [Arc<Tensor>; 3] {
    [
        Arc::new(store.queries.clone()),
        Arc::new(store.keys.clone()),
        Arc::new(store.values.clone()),
    ]
}

fn loss_on(tables: &[Arc<Tensor>; 3], episode: &Episode, config: &TaskConfig) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = StoreNodes {
        queries: g.constant(Arc::clone(&tables[0]))?,
        keys: g.constant(Arc::clone(&tables[1]))?,
        values: g.constant(Arc::clone(&tables[2]))?,
    };
    let loss = episode_loss_graph(&mut g, nodes, episode, config, config.rope().as_ref())?;
    g.scalar_value(loss)
}

pub fn episode_loss(store: &EmbeddingStore, episode: &Episode, config: &TaskConfig) -> Result<f64> {
    store.check(config)?;
    check_episode(episode, config)?;
    loss_on(&shared(store), episode, config)
}

/// Mean loss over `episodes` freshly sampled episodes; no updates.
pub fn eval_loss(
    store: &EmbeddingStore,
    config: &TaskConfig,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("eval needs at least one episode".into()));
    }
    store.check(config)?;
    let tables = shared(store);
    let mut total = 0.0;
    for _ in 0..episodes {
        let ep = sample_episode(config, rng);
        total += loss_on(&tables, &ep, config)?;
    }
    Ok(total / episodes as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    /// Worker threads for chunked gradient evaluation; 1 runs inline.
    pub threads: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { threads: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: EmbeddingStore,
    pub initial: EmbeddingStore,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Summed episode losses and gradients (Q, K, V order) for a batch.
pub fn batch_gradients(
    tables: &[Arc<Tensor>; 3],
    episodes: &[Episode],
    config: &TaskConfig,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<Gradient>)> {
    let rope = config.rope();
    let chunk = |eps: &[Episode]| -> Result<(f64, Vec<Gradient>)> {
        let mut g = Graph::new();
        let nodes = StoreNodes {
            queries: g.param(ParamId(0), Arc::clone(&tables[0]))?,
            keys: g.param(ParamId(1), Arc::clone(&tables[1]))?,
            values: g.param(ParamId(2), Arc::clone(&tables[2]))?,
        };
        let mut total: Option<NodeId> = None;
        let mut value = 0.0;
        for ep in eps {
            let l = episode_loss_graph(&mut g, nodes, ep, config, rope.as_ref())?;
            value += g.scalar_value(l)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        let total = total.ok_or(Error::Empty("batch"))?;
        Ok((value, g.backward(total)?))
    };

    let parts: Vec<Result<(f64, Vec<Gradient>)>> = match pool {
        Some(pool) => pool.install(|| episodes.par_chunks(CHUNK).map(chunk).collect()),
        None => episodes.chunks(CHUNK).map(chunk).collect(),
    };
    let mut iter = parts.into_iter();
    let (mut loss, mut grads) = iter.next().ok_or(Error::Empty("batch"))??;
    for part in iter {
        let (l, gs) = part?;
        loss += l;
        for (acc, g) in grads.iter_mut().zip(&gs) {
            acc.value.add_assign(&g.value);
        }
    }
    Ok((loss, grads))
}

pub fn train(config: &TaskConfig) -> Result<TrainOutcome> {
    train_with(config, TrainOptions::default())
}

pub fn train_with(config: &TaskConfig, options: TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = EmbeddingStore::init(config, &mut rng)?;
    let mut optimizer = OptimizerState::new(config.optimizer, config.learning_rate)?;
    let pool = match options.threads {
        0 | 1 => None,
        t => Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        ),
    };

    let mut params = vec![
        initial.queries.clone(),
        initial.keys.clone(),
        initial.values.clone(),
    ];
    let steps_per_epoch = config.steps_per_epoch();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut epoch_total = 0.0;
        for _ in 0..steps_per_epoch {
            let batch: Vec<Episode> = (0..config.batch_size)
                .map(|_| sample_episode(config, &mut rng))
                .collect();
            let tables: [Arc<Tensor>; 3] = {
                let mut it = params.drain(..).map(Arc::new);
                [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
            };
            let (loss, mut grads) = batch_gradients(&tables, &batch, config, pool.as_ref())
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence {
                        step,
                        loss: f64::NAN,
                    },
                    e => e,
                })?;
            params = tables
                .into_iter()
                .map(|a| Arc::try_unwrap(a).expect("graphs dropped"))
                .collect();
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            let inv = 1.0 / config.batch_size as f64;
            for g in &mut grads {
                g.value = g.value.map(|x| x * inv);
            }
            optimizer.step(&mut params, &grads).map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { step, loss },
                e => e,
            })?;
            epoch_total += loss;
            step += 1;
        }
        let mean = epoch_total / (steps_per_epoch * config.batch_size) as f64;
        log::info!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }

    let mut it = params.into_iter();
    let store = EmbeddingStore::new(
        it.next().unwrap(),
        it.next().unwrap(),
        it.next().unwrap(),
        config.layout,
    )?;
    Ok(TrainOutcome {
        store,
        initial,
        epoch_losses,
        steps: step,
    })
}

//! Paired RoPE / no-RoPE runs of the retrieval task, with magnitude and
//! ablation trend checks over 16-dimension bands.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dims::{ablate, ablation_sweep, magnitude_profile, AblationOptions, AblationTarget, DimensionReport, Side};
use crate::error::{Error, Result};
use crate::toy::{eval_loss, train_with, EmbeddingStore, TaskConfig, TrainOptions};

/// Width of the first/last bands compared by the verdicts.
pub const BAND: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubSeeds {
    pub rope: u64,
    pub no_rope: u64,
    pub eval: u64,
}

impl SubSeeds {
    pub fn derive(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        Self {
            rope: rng.next_u64(),
            no_rope: rng.next_u64(),
            eval: rng.next_u64(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Options {
    /// Task settings shared by both runs; `rope_enabled` and `seed` are
    /// overridden per run.
    pub task: TaskConfig,
    pub master_seed: u64,
    pub eval_episodes: usize,
    pub ablate_ns: Vec<usize>,
    pub threads: usize,
}

impl Fig1Options {
    pub fn new(task: TaskConfig, master_seed: u64) -> Self {
        let d = task.head_dim;
        Self {
            task,
            master_seed,
            eval_episodes: 2000,
            ablate_ns: [0, 4, 8, 16, 24, 32, 48, 64, 96, 128]
                .into_iter()
                .filter(|&n| n <= d)
                .collect(),
            threads: 1,
        }
    }
}

/// First-`BAND` vs last-`BAND` query-only masking on one store.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub baseline: f64,
    pub first: f64,
    pub last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rope: bool,
    pub seed: u64,
    pub epoch_losses: Vec<f64>,
    pub report: DimensionReport,
    pub intervention: Intervention,
    #[serde(skip)]
    pub store: Option<EmbeddingStore>,
}

impl RunReport {
    /// Mean |q| and |k| over the first band divided by the last band.
    pub fn band_ratios(&self) -> (f64, f64) {
        let d = self.report.width();
        let ratio = |v: &[f64]| DimensionReport::band_mean(v, 0, BAND) / DimensionReport::band_mean(v, d - BAND, d);
        (ratio(&self.report.mean_abs_q), ratio(&self.report.mean_abs_k))
    }

    /// Loss increases from removing the first and last band.
    pub fn band_increases(&self) -> Result<(f64, f64)> {
        let get = |side, n| {
            self.report
                .ablation_loss(side, n)
                .ok_or_else(|| Error::Config(format!("ablation table lacks ({side:?}, {n})")))
        };
        let base = get(Side::First, 0)?;
        Ok((get(Side::First, BAND)? - base, get(Side::Last, BAND)? - base))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Verdict {
    /// With RoPE, first-band mean |q| and |k| are each below 0.8x the last band.
    pub magnitude_trend_rope: bool,
    /// Without RoPE, both ratios lie in [0.85, 1.15].
    pub magnitude_flat_no_rope: bool,
    /// With RoPE, removing the first band costs under a quarter of removing
    /// the last band, and removing the last 32 costs more than the last 16.
    pub ablation_asymmetry_rope: bool,
    /// Without RoPE, the two band removals cost within 2x of each other.
    pub ablation_symmetry_no_rope: bool,
    /// With RoPE, masking the first band of the query hurts strictly less
    /// than masking the last band.
    pub intervention_order_rope: bool,
    pub details: serde_json::Value,
}

impl Fig1Verdict {
    pub fn figure_passed(&self) -> bool {
        self.magnitude_trend_rope && self.magnitude_flat_no_rope && self.ablation_asymmetry_rope && self.ablation_symmetry_no_rope
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Report {
    pub seeds: SubSeeds,
    pub options: Fig1Options,
    pub rope: RunReport,
    pub no_rope: RunReport,
    pub verdict: Fig1Verdict,
}

fn intervention(store: &EmbeddingStore, config: &TaskConfig, episodes: usize, seed: u64) -> Result<Intervention> {
    let eval = |s: &EmbeddingStore| eval_loss(s, config, episodes, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(Intervention {
        baseline: eval(store)?,
        first: eval(&ablate(store, Side::First, BAND, AblationTarget::QueryOnly)?)?,
        last: eval(&ablate(store, Side::Last, BAND, AblationTarget::QueryOnly)?)?,
    })
}

fn run(options: &Fig1Options, rope: bool, seed: u64, eval_seed: u64) -> Result<RunReport> {
    let config = TaskConfig {
        rope_enabled: rope,
        seed,
        ..options.task.clone()
    };
    log::info!("training {} run (seed {seed})", if rope { "RoPE" } else { "no-RoPE" });
    let outcome = train_with(&config, TrainOptions { threads: options.threads })?;
    let mut ns = options.ablate_ns.clone();
    ns.extend([0, BAND, 2 * BAND]);
    let ablation_opts = AblationOptions {
        episodes: options.eval_episodes,
        seed: eval_seed,
        target: AblationTarget::QueryAndKey,
    };
    let mut report = magnitude_profile(&outcome.store);
    report.ablation = ablation_sweep(&outcome.store, &config, &[Side::First, Side::Last], &ns, &ablation_opts)?;
    let intervention = intervention(&outcome.store, &config, options.eval_episodes, eval_seed)?;
    Ok(RunReport {
        rope,
        seed,
        epoch_losses: outcome.epoch_losses,
        report,
        intervention,
        store: Some(outcome.store),
    })
}

/// Verdicts over a pair of finished runs.
pub fn judge(rope: &RunReport, no_rope: &RunReport) -> Result<Fig1Verdict> {
    let (rq, rk) = rope.band_ratios();
    let (nq, nk) = no_rope.band_ratios();
    let (r_first, r_last) = rope.band_increases()?;
    let (n_first, n_last) = no_rope.band_increases()?;
    let r_last16 = rope.report.ablation_loss(Side::Last, BAND);
    let r_last32 = rope.report.ablation_loss(Side::Last, 2 * BAND);
    let last32_gt_16 = matches!((r_last32, r_last16), (Some(a), Some(b)) if a > b);
    let flat = |r: f64| (0.85..=1.15).contains(&r);
    let within_2x = n_first > 0.0 && n_last > 0.0 && n_first.max(n_last) < 2.0 * n_first.min(n_last);
    let iv = rope.intervention;
    Ok(Fig1Verdict {
        magnitude_trend_rope: rq < 0.8 && rk < 0.8,
        magnitude_flat_no_rope: flat(nq) && flat(nk),
        ablation_asymmetry_rope: r_first < 0.25 * r_last && last32_gt_16,
        ablation_symmetry_no_rope: within_2x,
        intervention_order_rope: iv.first - iv.baseline < iv.last - iv.baseline,
        details: serde_json::json!({
            "rope_ratio_q": rq,
            "rope_ratio_k": rk,
            "no_rope_ratio_q": nq,
            "no_rope_ratio_k": nk,
            "rope_increase_first": r_first,
            "rope_increase_last": r_last,
            "rope_loss_last_16": r_last16,
            "rope_loss_last_32": r_last32,
            "no_rope_increase_first": n_first,
            "no_rope_increase_last": n_last,
            "rope_intervention": iv,
            "no_rope_intervention": no_rope.intervention,
        }),
    })
}

/// Trains both runs, with seeds derived from `options.master_seed`, and
/// judges them. Head dim must be at least `2 * BAND`.
pub fn reproduce(options: &Fig1Options) -> Result<Fig1Report> {
    options.task.validate()?;
    if options.task.head_dim < 2 * BAND {
        return Err(Error::Config(format!("head dim {} is below {}", options.task.head_dim, 2 * BAND)));
    }
    let seeds = SubSeeds::derive(options.master_seed);
    let rope = run(options, true, seeds.rope, seeds.eval)?;
    let no_rope = run(options, false, seeds.no_rope, seeds.eval)?;
    let verdict = judge(&rope, &no_rope)?;
    Ok(Fig1Report {
        seeds,
        options: options.clone(),
        rope,
        no_rope,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sub_seeds_are_distinct_and_stable() {
        let a = SubSeeds::derive(7);
        assert_eq!(a, SubSeeds::derive(7));
        assert_ne!(a.rope, a.no_rope);
        assert_ne!(a, SubSeeds::derive(8));
    }

    #[test]
    fn small_run_has_full_schema() {
        let task = TaskConfig {
            n: 20,
            subset_size: 6,
            head_dim: 32,
            max_position: 128,
            batch_size: 8,
            samples_per_epoch: 16,
            epochs: 1,
            ..TaskConfig::default()
        };
        let mut options = Fig1Options::new(task, 3);
        options.eval_episodes = 10;
        let report = reproduce(&options).unwrap();
        assert_eq!(report.rope.seed, report.seeds.rope);
        assert_eq!(report.no_rope.seed, report.seeds.no_rope);
        for side in [Side::First, Side::Last] {
            for n in [0, 16, 32] {
                assert!(report.rope.report.ablation_loss(side, n).is_some());
            }
        }
        let json = serde_json::to_value(&report.verdict).unwrap();
        for key in [
            "magnitude_trend_rope",
            "magnitude_flat_no_rope",
            "ablation_asymmetry_rope",
            "ablation_symmetry_no_rope",
        ] {
            assert!(json[key].is_boolean(), "{key}");
        }
        assert_eq!(
            report.rope.intervention.baseline,
            report.rope.report.ablation_loss(Side::First, 0).unwrap()
        );
    }

    #[test]
    fn narrow_heads_rejected() {
        let task = TaskConfig {
            head_dim: 16,
            ..TaskConfig::desk()
        };
        assert!(reproduce(&Fig1Options::new(task, 0)).is_err());
    }
}

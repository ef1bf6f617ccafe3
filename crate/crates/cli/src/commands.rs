use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use rope_probe_core::dims::{self, AblationOptions, Side};
use rope_probe_core::fig1::{self, Fig1Options, Fig1Report, RunReport};
use rope_probe_core::heads::{self, ScoreOptions};
use rope_probe_core::mask::{self, HeadSnapshots, MaskFitConfig, MaskSummary, UtilityMask};
use rope_probe_core::rope::to_canonical;
use rope_probe_core::snapshot::{read_snapshots, write_snapshots};
use rope_probe_core::toy::{train_with, TrainOptions};
use rope_probe_core::{EmbeddingStore, Error, Result, TaskConfig, Tensor};

use crate::args::{AnalyzeArgs, Fig1Args, HeadScoreArgs, MaskFitArgs, TrainArgs};
use crate::manifest::RunManifest;
use crate::svg::{line_chart, Series};

pub const CHECKPOINT: &str = "checkpoint.rprb";

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Runs `body` between manifest start and finish.
fn with_manifest(
    out: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    body: impl FnOnce(&mut RunManifest) -> Result<()>,
) -> Result<()> {
    let mut manifest = RunManifest::start(out, command, seed, config)?;
    let result = body(&mut manifest);
    manifest.finish(&result)?;
    result
}

fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["epoch", "mean_loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn write_checkpoint(path: &Path, store: &EmbeddingStore, config: &TaskConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_snapshots(path, &store.to_snapshot(config)?)
}

pub fn train(args: &TrainArgs, threads: usize) -> Result<()> {
    let config = args.config();
    config.validate()?;
    with_manifest(&args.out, "train", config.seed, serde_json::to_value(&config)?, |m| {
        let outcome = train_with(&config, TrainOptions { threads })?;
        write_checkpoint(&m.output(CHECKPOINT), &outcome.store, &config)?;
        write_loss_csv(&m.output("loss.csv"), &outcome.epoch_losses)?;
        if let Some(last) = outcome.epoch_losses.last() {
            println!("trained {} steps; final epoch loss {last:.6}", outcome.steps);
        } else {
            println!("wrote initialization (0 epochs)");
        }
        Ok(())
    })
}

/// Puts the path into I/O error messages.
fn at_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read_checkpoint(path: &Path) -> Result<(EmbeddingStore, TaskConfig)> {
    let outcome = at_path(path, read_snapshots(path))?;
    for w in &outcome.warnings {
        log::warn!("{}: {w}", path.display());
    }
    EmbeddingStore::from_snapshot(&outcome.file)
}

fn read_matrix(path: &Path) -> Result<Tensor> {
    let reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path);
    let mut reader = at_path(path, reader.map_err(Error::from))?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: `{x}`: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

fn default_ns(width: usize) -> Vec<usize> {
    [0, 4, 8, 16, 24, 32, 48, 64, 96, 128]
        .into_iter()
        .filter(|&n| n <= width)
        .chain([width])
        .collect()
}

fn magnitude_chart(title: &str, runs: &[(&str, &dims::DimensionReport)]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .flat_map(|(label, r)| {
            let idx = |v: &[f64]| v.iter().enumerate().map(|(i, &m)| (i as f64, m)).collect();
            [
                Series {
                    label: format!("{label}query"),
                    points: idx(&r.mean_abs_q),
                },
                Series {
                    label: format!("{label}key"),
                    points: idx(&r.mean_abs_k),
                },
            ]
        })
        .collect();
    line_chart(title, "dimension (high to low frequency)", "mean |x|", &series)
}

fn ablation_chart(title: &str, runs: &[(&str, &[dims::AblationRow])]) -> String {
    let series: Vec<Series> = runs
        .iter()
        .flat_map(|(label, rows)| {
            [Side::First, Side::Last].map(|side| Series {
                label: format!("{label}{}", side.tag()),
                points: rows
                    .iter()
                    .filter(|r| r.side == side)
                    .map(|r| (r.n_removed as f64, r.eval_loss))
                    .collect(),
            })
        })
        .collect();
    line_chart(title, "removed dimensions", "eval loss", &series)
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let (store, config) = read_checkpoint(&args.checkpoint)?;
    let ns = args.ablate_ns.clone().unwrap_or_else(|| default_ns(store.head_dim()));
    let sides: Vec<Side> = args.sides.iter().map(|&s| s.into()).collect();
    let options = AblationOptions {
        episodes: args.episodes,
        seed: args.eval_seed,
        target: args.target.into(),
    };
    let settings = json!({
        "checkpoint": args.checkpoint,
        "task": config,
        "ablate_ns": ns,
        "sides": sides,
        "ablation": options,
        "weights": args.weights,
        "svg": args.svg.on(),
    });
    with_manifest(&args.out, "analyze", args.eval_seed, settings, |m| {
        let mut report = dims::magnitude_profile(&store);
        report.ablation = dims::ablation_sweep(&store, &config, &sides, &ns, &options)?;
        if let Some(path) = &args.weights {
            let w = read_matrix(path)?;
            if w.rows() != store.head_dim() {
                return Err(Error::Config(format!(
                    "weights have {} rows for head dim {}",
                    w.rows(),
                    store.head_dim()
                )));
            }
            let canonical = to_canonical(&w.transpose()?, &store.ordering())?.transpose()?;
            report.l1_row_norm = Some(dims::l1_row_norms(&canonical)?);
        }
        dims::write_magnitude_csv(create(&m.output("magnitude.csv"))?, &report)?;
        dims::write_ablation_csv(create(&m.output("ablation.csv"))?, &report.ablation)?;
        if args.svg.on() {
            write_text(&m.output("magnitude.svg"), &magnitude_chart("Mean magnitude per dimension", &[("", &report)]))?;
            write_text(
                &m.output("ablation.svg"),
                &ablation_chart("Loss after removing dimensions", &[("", &report.ablation)]),
            )?;
        }
        let base = report.ablation.first().map_or(f64::NAN, |r| r.eval_loss);
        println!("baseline eval loss {base:.6} over {} episodes", args.episodes);
        Ok(())
    })
}

fn load_heads(args: &MaskFitArgs) -> Result<Vec<HeadSnapshots>> {
    if let Some(path) = &args.from_checkpoint {
        let (store, config) = read_checkpoint(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        return Ok(vec![HeadSnapshots::from_store(&store, &config, args.count, &mut rng)?]);
    }
    if args.snapshots.is_empty() {
        return Err(Error::Config("no snapshots: pass --snapshots or --from-checkpoint".into()));
    }
    args.snapshots
        .iter()
        .map(|p| {
            let outcome = at_path(p, read_snapshots(p))?;
            for w in &outcome.warnings {
                log::warn!("{}: {w}", p.display());
            }
            HeadSnapshots::from_file(&outcome.file)
        })
        .collect()
}

pub fn mask_fit(args: &MaskFitArgs) -> Result<()> {
    let config = MaskFitConfig {
        alpha: args.alpha,
        learning_rate: args.lr,
        steps: args.steps,
        init: args.init,
        snapshots_per_head: args.per_head,
        seed: args.seed,
    };
    config.validate()?;
    let heads = load_heads(args)?;
    let settings = json!({
        "fit": config,
        "snapshots": args.snapshots,
        "from_checkpoint": args.from_checkpoint,
        "count": args.count,
    });
    with_manifest(&args.out, "mask-fit", args.seed, settings, |m| {
        let fits: Vec<UtilityMask> = heads
            .par_iter()
            .map(|h| mask::fit_mask(h, &config))
            .collect::<Result<_>>()?;
        let rows: Vec<(usize, usize, &UtilityMask)> = heads.iter().zip(&fits).map(|(h, f)| (h.layer, h.head, f)).collect();
        mask::write_utility_csv(create(&m.output("utility.csv"))?, &rows)?;
        let summaries: Vec<MaskSummary> = heads.iter().zip(&fits).map(|(h, f)| MaskSummary::new(h, f)).collect();
        write_json(&m.output("summary.json"), &summaries)?;
        for s in &summaries {
            println!(
                "layer {} head {}: objective {:.3e}, distortion {:.3e}, {} dims below 0.5",
                s.layer, s.head, s.objective, s.distortion, s.masked_dims
            );
        }
        Ok(())
    })
}

pub fn head_score(args: &HeadScoreArgs) -> Result<()> {
    let options = ScoreOptions {
        threshold: args.threshold,
        renormalize_bos: args.renormalize_bos.on(),
    };
    let mut groups: BTreeMap<(usize, usize), Vec<heads::AttentionRecord>> = BTreeMap::new();
    for path in &args.attn {
        let outcome = at_path(path, read_snapshots(path))?;
        for w in &outcome.warnings {
            log::warn!("{}: {w}", path.display());
        }
        for rec in heads::records_from_file(&outcome.file)? {
            groups.entry((rec.layer, rec.head)).or_default().push(rec);
        }
    }
    let settings = json!({ "attn": args.attn, "options": options });
    with_manifest(&args.out, "head-score", 0, settings, |m| {
        let scores = groups
            .values()
            .map(|recs| heads::score_head(recs, &options))
            .collect::<Result<Vec<_>>>()?;
        heads::write_score_csv(create(&m.output("scores.csv"))?, &scores)?;
        let retrieval = heads::classify_heads(&scores, args.threshold);
        println!("{} of {} heads score above {}", retrieval.len(), scores.len(), args.threshold);
        Ok(())
    })
}

fn write_run(m: &mut RunManifest, tag: &str, run: &RunReport, task: &TaskConfig) -> Result<()> {
    let config = TaskConfig {
        rope_enabled: run.rope,
        seed: run.seed,
        ..task.clone()
    };
    if let Some(store) = &run.store {
        write_checkpoint(&m.output(&format!("{tag}/{CHECKPOINT}")), store, &config)?;
    }
    write_loss_csv(&m.output(&format!("{tag}/loss.csv")), &run.epoch_losses)?;
    dims::write_magnitude_csv(create(&m.output(&format!("{tag}/magnitude.csv")))?, &run.report)?;
    dims::write_ablation_csv(create(&m.output(&format!("{tag}/ablation.csv")))?, &run.report.ablation)?;
    Ok(())
}

pub fn verdict_lines(report: &Fig1Report) -> Vec<String> {
    let v = &report.verdict;
    let d = |k: &str| v.details[k].as_f64().unwrap_or(f64::NAN);
    let mark = |ok: bool| if ok { "PASS" } else { "FAIL" };
    vec![
        format!(
            "{} magnitude trend with RoPE: first/last ratio q {:.3}, k {:.3} (< 0.8)",
            mark(v.magnitude_trend_rope),
            d("rope_ratio_q"),
            d("rope_ratio_k")
        ),
        format!(
            "{} magnitude flat without RoPE: ratio q {:.3}, k {:.3} (in [0.85, 1.15])",
            mark(v.magnitude_flat_no_rope),
            d("no_rope_ratio_q"),
            d("no_rope_ratio_k")
        ),
        format!(
            "{} ablation asymmetry with RoPE: +{:.3e} first vs +{:.3e} last; last 32 {:.6} vs last 16 {:.6}",
            mark(v.ablation_asymmetry_rope),
            d("rope_increase_first"),
            d("rope_increase_last"),
            d("rope_loss_last_32"),
            d("rope_loss_last_16")
        ),
        format!(
            "{} ablation symmetry without RoPE: +{:.3e} first vs +{:.3e} last",
            mark(v.ablation_symmetry_no_rope),
            d("no_rope_increase_first"),
            d("no_rope_increase_last")
        ),
        format!(
            "{} query intervention with RoPE: first 16 hurts less than last 16",
            mark(v.intervention_order_rope)
        ),
    ]
}

pub fn reproduce_fig1(args: &Fig1Args, threads: usize) -> Result<()> {
    let mut options = Fig1Options::new(args.scale_preset.config(), args.seed);
    options.eval_episodes = args.episodes;
    options.threads = threads;
    let settings = json!({
        "preset": format!("{:?}", args.scale_preset).to_lowercase(),
        "options": options,
        "sub_seeds": fig1::SubSeeds::derive(args.seed),
        "svg": args.svg.on(),
    });
    with_manifest(&args.out, "reproduce-fig1", args.seed, settings, |m| {
        let report = fig1::reproduce(&options)?;
        write_run(m, "rope", &report.rope, &options.task)?;
        write_run(m, "no_rope", &report.no_rope, &options.task)?;
        write_json(&m.output("report.json"), &report)?;
        write_json(&m.output("verdict.json"), &report.verdict)?;
        if args.svg.on() {
            let mags = [("RoPE ", &report.rope.report), ("no RoPE ", &report.no_rope.report)];
            write_text(&m.output("magnitude.svg"), &magnitude_chart("Mean magnitude per dimension", &mags))?;
            let abl = [
                ("RoPE ", report.rope.report.ablation.as_slice()),
                ("no RoPE ", report.no_rope.report.ablation.as_slice()),
            ];
            write_text(&m.output("ablation.svg"), &ablation_chart("Loss after removing dimensions", &abl))?;
        }
        for line in verdict_lines(&report) {
            println!("{line}");
        }
        Ok(())
    })
}

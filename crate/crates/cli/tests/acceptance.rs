//! End-to-end acceptance checks A1-A8. Prints one PASS/FAIL line per
//! criterion and fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use rope_probe_core::gradcheck::finite_difference_check_precise;
use rope_probe_core::heads::{records_from_file, records_to_file, score_head, AttentionRecord, ScoreOptions, Spans};
use rope_probe_core::mask::{fit_mask, AttentionSnapshot, HeadSnapshots, MaskFitConfig, MaskObjective};
use rope_probe_core::precise::{self, HeadInstance};
use rope_probe_core::rope::{relative_dot, rotate_by_offset};
use rope_probe_core::snapshot::{decode, encode, write_snapshots};
use rope_probe_core::toy::{episode_loss_graph, sample_episode, StoreNodes};
use rope_probe_core::{EmbeddingStore, Graph, Layout, ParamId, RopeConfig, ScaleMode, TaskConfig, Tensor};

const BIN: &str = env!("CARGO_BIN_EXE_rope-probe");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit: Duration) -> String {
    format!("{:.1}s (limit {}s)", elapsed.as_secs_f64(), limit.as_secs())
}

fn a1_rope_identity() -> Outcome {
    let start = Instant::now();
    let cfg = RopeConfig::new(128).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let q = Tensor::vector((0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let k = Tensor::vector((0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let m = rng.random_range(0..=2048usize);
        let n = rng.random_range(0..=2048usize);
        let lhs = relative_dot(&q, &k, m, n, &cfg).unwrap();
        let rhs = q.dot(&rotate_by_offset(&k, n as i64 - m as i64, &cfg).unwrap()).unwrap();
        worst = worst.max((lhs - rhs).abs());
    }
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(10);
    outcome(
        worst < 1e-10 && elapsed < limit,
        format!("max |difference| {worst:.2e} over 10000 draws; {}", within(elapsed, limit)),
    )
}

fn toy_gradcheck(seed: u64) -> f64 {
    let c = TaskConfig {
        n: 8,
        subset_size: 4,
        head_dim: 8,
        max_position: 64,
        rope_enabled: seed.is_multiple_of(2),
        ..TaskConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = EmbeddingStore::init(&c, &mut rng).unwrap();
    let ep = sample_episode(&c, &mut rng);
    let mut g = Graph::new();
    let nodes = StoreNodes {
        queries: g.param(ParamId(0), store.queries.clone()).unwrap(),
        keys: g.param(ParamId(1), store.keys.clone()).unwrap(),
        values: g.param(ParamId(2), store.values.clone()).unwrap(),
    };
    let loss = episode_loss_graph(&mut g, nodes, &ep, &c, c.rope().as_ref()).unwrap();
    let analytic: Vec<Tensor> = g.backward(loss).unwrap().into_iter().map(|g| g.value).collect();
    finite_difference_check_precise(
        |x| precise::toy_loss(&x[0], &x[1], &x[2], &ep, &c),
        &[store.queries, store.keys, store.values],
        &analytic,
        1e-6,
    )
    .unwrap()
}

fn random_head(seed: u64, s: usize, d: usize, rope: bool) -> HeadSnapshots {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |n: usize| (0..n).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
    let snapshots = (0..3)
        .map(|_| AttentionSnapshot {
            query: Tensor::vector(draw(d)).unwrap(),
            keys: Tensor::matrix(s, d, draw(s * d)).unwrap(),
            values: Tensor::matrix(s, d, draw(s * d)).unwrap(),
            positions: (0..s).map(|j| 5 * j).collect(),
            query_position: 5 * s,
        })
        .collect();
    HeadSnapshots {
        layer: 0,
        head: 0,
        rope: rope.then(|| RopeConfig::new(d).unwrap()),
        layout: Layout::HalfSplit,
        scale: ScaleMode::InverseSqrt,
        snapshots,
    }
}

fn mask_gradcheck(seed: u64) -> f64 {
    let heads = random_head(seed, 4, 8, seed.is_multiple_of(2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let u = Tensor::vector((0..8).map(|_| rng.random_range(0.05..0.95)).collect()).unwrap();
    let alpha = 1.0 / 8.0;
    let (_, _, grad) = MaskObjective::new(&heads, vec![0, 1, 2], alpha).unwrap().evaluate(&u).unwrap();
    let inst: Vec<HeadInstance<'_>> = heads
        .snapshots
        .iter()
        .map(|s| HeadInstance {
            query: s.query.data(),
            keys: s.keys.data(),
            values: s.values.data(),
            positions: &s.positions,
            query_position: s.query_position,
            rope: heads.rope.as_ref(),
            scale: heads.scale,
        })
        .collect();
    finite_difference_check_precise(|x| precise::mask_objective(&x[0], &inst, alpha), &[u], &[grad], 1e-6).unwrap()
}

fn a2_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let loss_worst = (0..100).map(toy_gradcheck).fold(0.0, f64::max);
    let mask_worst = (0..100).map(mask_gradcheck).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(60);
    outcome(
        loss_worst < 1e-5 && mask_worst < 1e-5 && elapsed < limit,
        format!(
            "max relative error: loss {loss_worst:.2e}, mask objective {mask_worst:.2e} over 100 seeds; {}",
            within(elapsed, limit)
        ),
    )
}

/// Head whose K columns `dead` are zero; large values make every live
/// dimension costly to shrink.
fn dead_column_head(seed: u64, dead: &[usize]) -> HeadSnapshots {
    let mut h = random_head(seed, 6, 8, false);
    for s in &mut h.snapshots {
        s.values = s.values.map(|x| 3e4 * x);
        let d = s.keys.cols();
        let mut data = s.keys.data().to_vec();
        for row in data.chunks_mut(d) {
            for &c in dead {
                row[c] = 0.0;
            }
        }
        s.keys = Tensor::matrix(s.keys.rows(), d, data).unwrap();
    }
    h
}

fn a5_mask_oracle() -> Outcome {
    let start = Instant::now();
    let mut passed = 0;
    let mut worst: f64 = 0.0;
    for z in [1usize, 2, 4] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 * z as u64 + seed);
            let dead = rand::seq::index::sample(&mut rng, 8, z).into_vec();
            let heads = dead_column_head(seed, &dead);
            let m = fit_mask(&heads, &MaskFitConfig::default()).unwrap();
            worst = worst.max(m.distortion);
            let ok = (0..8).all(|c| (m.u[c] < 0.5) == dead.contains(&c)) && m.distortion < 1e-6;
            passed += ok as usize;
        }
    }
    let elapsed = start.elapsed();
    let limit = Duration::from_secs(120);
    outcome(
        passed == 60 && elapsed < limit,
        format!("{passed}/60 fits exact (20 seeds x z in {{1,2,4}}); max distortion {worst:.2e}; {}", within(elapsed, limit)),
    )
}

fn a6_head_scores() -> Outcome {
    let opts = ScoreOptions::default();
    let spans = |c1: usize, t: usize| Spans {
        bos: 0,
        context: (0, c1),
        answer: (c1, t),
    };
    let record = |sp: Spans, t: usize, row: &dyn Fn(usize) -> Vec<f64>| {
        let n = sp.answer.1 - sp.answer.0;
        AttentionRecord::new(2, 5, sp, Tensor::matrix(n, t, (0..n).flat_map(row).collect()).unwrap()).unwrap()
    };
    let all_context = record(spans(9, 14), 14, &|i| {
        let mut w = vec![0.0; 14];
        w[1 + i % 8] = 0.75;
        w[8] += 0.25;
        w
    });
    let all = score_head(&[all_context], &opts).unwrap().score;

    let t = 37;
    let c = 23;
    let uniform = record(spans(c + 1, t), t, &|_| vec![1.0 / t as f64; t]);
    let uni = score_head(&[uniform], &opts).unwrap().score;

    let bos_only = record(spans(20, 25), 25, &|_| {
        let mut w = vec![0.0; 25];
        w[0] = 1.0;
        w
    });
    let bos = score_head(&[bos_only], &opts).unwrap().score;

    // The same closed form through the container (1/32 is exact in f32).
    let file = records_to_file(&[record(spans(12, 32), 32, &|_| vec![1.0 / 32.0; 32])], None).unwrap();
    let back = decode(&encode(&file).unwrap()[..], Default::default()).unwrap();
    let via_file = score_head(&records_from_file(&back.file).unwrap(), &opts).unwrap().score;

    let pass = (all - 1.0).abs() <= 1e-12
        && (uni - c as f64 / t as f64).abs() <= 1e-9
        && bos == 0.0
        && (via_file - 11.0 / 32.0).abs() <= 1e-9;
    outcome(
        pass,
        format!(
            "all-context {all}, uniform {uni:.12} (c/T = {:.12}), BOS-only {bos}, container {via_file}",
            c as f64 / t as f64
        ),
    )
}

fn run_bin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`rope-probe {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn same_bytes(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between reruns"));
        }
    }
    Ok(())
}

fn a7_determinism(dir: &Path) -> Outcome {
    let run = || -> Result<(), String> {
        let train = |out: &Path| {
            run_bin(&[
                "train", "--rope", "on", "--seed", "11", "--epochs", "3", "--n", "60", "--dim", "16", "--subset", "12",
                "--max-pos", "256", "--batch", "16", "--samples-per-epoch", "128", "--threads", "1", "--out",
                out.to_str().unwrap(),
            ])
        };
        let (t1, t2) = (dir.join("train1"), dir.join("train2"));
        train(&t1)?;
        train(&t2)?;
        same_bytes(&t1, &t2, &["checkpoint.rprb", "loss.csv"])?;

        let fixture = dir.join("head.rprb");
        write_snapshots(&fixture, &random_head(4, 6, 8, true).to_file(Some("fixture")).unwrap()).map_err(|e| e.to_string())?;
        let fit = |out: &Path, source: &[&str]| {
            let mut args = vec!["mask-fit", "--seed", "5", "--steps", "300", "--threads", "1", "--out", out.to_str().unwrap()];
            args.extend_from_slice(source);
            run_bin(&args)
        };
        let ckpt = t1.join("checkpoint.rprb");
        for (name, source) in [
            ("snap", vec!["--snapshots", fixture.to_str().unwrap()]),
            ("ckpt", vec!["--from-checkpoint", ckpt.to_str().unwrap(), "--count", "8"]),
        ] {
            let (m1, m2) = (dir.join(format!("{name}1")), dir.join(format!("{name}2")));
            fit(&m1, &source)?;
            fit(&m2, &source)?;
            same_bytes(&m1, &m2, &["utility.csv", "summary.json"])?;
        }
        Ok(())
    };
    match run() {
        Ok(()) => outcome(true, "train and mask-fit reruns byte-identical (checkpoint, loss, utility, summary)".into()),
        Err(e) => outcome(false, e),
    }
}

/// One desk-preset paired run through the binary, shared by A3, A4, A8.
fn fig1_verdict(dir: &Path) -> Result<(serde_json::Value, Duration), String> {
    let start = Instant::now();
    let out = dir.join("fig1");
    let stdout = run_bin(&["reproduce-fig1", "--scale-preset", "desk", "--seed", "0", "--svg", "on", "--out", out.to_str().unwrap()])?;
    for line in stdout.lines() {
        println!("    {line}");
    }
    let text = std::fs::read_to_string(out.join("verdict.json")).map_err(|e| e.to_string())?;
    let v = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    Ok((v, start.elapsed()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(&str, &str, Outcome)> = vec![
        ("A1", "RoPE relative-position identity", a1_rope_identity()),
        ("A2", "gradient fidelity", a2_gradient_fidelity()),
    ];

    let limit = Duration::from_secs(15 * 60);
    match fig1_verdict(dir.path()) {
        Ok((v, elapsed)) => {
            let b = |k: &str| v[k].as_bool().unwrap_or(false);
            let d = &v["details"];
            results.push((
                "A3",
                "magnitude trend at desk preset",
                outcome(
                    b("magnitude_trend_rope") && b("magnitude_flat_no_rope") && elapsed < limit,
                    format!(
                        "RoPE first/last q {:.3} k {:.3}; no-RoPE q {:.3} k {:.3}; {}",
                        d["rope_ratio_q"].as_f64().unwrap_or(f64::NAN),
                        d["rope_ratio_k"].as_f64().unwrap_or(f64::NAN),
                        d["no_rope_ratio_q"].as_f64().unwrap_or(f64::NAN),
                        d["no_rope_ratio_k"].as_f64().unwrap_or(f64::NAN),
                        within(elapsed, limit)
                    ),
                ),
            ));
            results.push((
                "A4",
                "ablation trend at desk preset",
                outcome(
                    b("ablation_asymmetry_rope") && b("ablation_symmetry_no_rope"),
                    format!(
                        "RoPE +{:.2e} first vs +{:.2e} last, last32 {:.6} > last16 {:.6}; no-RoPE +{:.2e} vs +{:.2e}",
                        d["rope_increase_first"].as_f64().unwrap_or(f64::NAN),
                        d["rope_increase_last"].as_f64().unwrap_or(f64::NAN),
                        d["rope_loss_last_32"].as_f64().unwrap_or(f64::NAN),
                        d["rope_loss_last_16"].as_f64().unwrap_or(f64::NAN),
                        d["no_rope_increase_first"].as_f64().unwrap_or(f64::NAN),
                        d["no_rope_increase_last"].as_f64().unwrap_or(f64::NAN),
                    ),
                ),
            ));
            let iv = &d["rope_intervention"];
            let f = |k: &str| iv[k].as_f64().unwrap_or(f64::NAN);
            results.push((
                "A8",
                "query-dimension intervention ordering",
                outcome(
                    b("intervention_order_rope"),
                    format!(
                        "eval loss +{:.2e} masking first 16 vs +{:.2e} masking last 16",
                        f("first") - f("baseline"),
                        f("last") - f("baseline")
                    ),
                ),
            ));
        }
        Err(e) => {
            for (id, name) in [("A3", "magnitude trend"), ("A4", "ablation trend"), ("A8", "intervention ordering")] {
                results.push((id, name, outcome(false, e.clone())));
            }
        }
    }

    results.push(("A5", "utility-mask oracle", a5_mask_oracle()));
    results.push(("A6", "head-score closed forms", a6_head_scores()));
    results.push(("A7", "determinism", a7_determinism(dir.path())));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{id} {} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += !o.pass as usize;
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

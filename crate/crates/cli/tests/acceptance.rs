//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so that every verdict is printed even
//! under output capture. Training artefacts are kept under
//! `$CARGO_TARGET_TMPDIR/acceptance` for inspection; set
//! `ACCEPTANCE_REUSE=1` to resume finished runs instead of starting over.
//! `ACCEPTANCE_ONLY=1,4,9` restricts the run to the listed criteria.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use siamseg::data::{enumerate_holdout_splits, generate_set, load_dataset, write_dataset, ClassSplit, Episode, GenParams};
use siamseg::eval::{classify_by_iou, evaluate_with, read_learning_curve, EvalOptions, Prediction};
use siamseg::gradcheck::{self, GradCheckReport, Tolerance};
use siamseg::losses::{cosine_distance, soft_iou_loss, vector_spread_loss};
use siamseg::optim::{sample_batch, TrainConfig, Trainer};
use siamseg::segnet::{NetworkConfig, SegNet, SelectorWeights};
use siamseg::Tensor;
use siamseg_cli::commands::{self, TrainOptions};
use siamseg_cli::RunConfig;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let tol = Tolerance::default();
    let mut total = GradCheckReport::default();
    let mut failed = Vec::new();
    for seed in 0..100u64 {
        let mut cases = primitive_cases(seed);
        for g in 0..3u64 {
            let (_, case) = smooth_random_graph(seed * 3 + g, 3 + ((seed + g) % 6) as usize, 1e-2);
            cases.push(case);
        }
        for case in cases {
            let report = gradcheck::check(&case.inputs, &case.build, tol).map_err(err)?;
            if !report.passed() {
                failed.push(format!("seed {seed} {}", case.name));
            }
            total.merge(&report);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        failed.is_empty() && secs < 60.0,
        format!("{} elements over 100 seeds, {} failing cases {:?}, {secs:.1}s", total.checked, failed.len(), failed.first()),
    )
}

fn loss_properties() -> Verdict {
    let x = [0.7, -0.2, 1.5, 0.1];
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let examples = [
        cosine_distance(&x, &x).map_err(err)?,
        cosine_distance(&[1.0, 0.0, 2.0], &[0.0, 5.0, 0.0]).map_err(err)?,
        cosine_distance(&x, &neg).map_err(err)?,
    ];
    let examples_ok = examples[0] == 0.0 && (examples[1] - 0.5).abs() < 1e-15 && examples[2] == 1.0;
    let mut r = rng(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = r.random_range(1..=4);
        let n = r.random_range(1..=5);
        let f: Vec<Vec<f64>> = (0..b).map(|_| (0..n).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let c: Vec<u32> = (0..b).map(|_| r.random_range(1..=3)).collect();
        worst = worst.max((vector_spread_loss(&f, &c).map_err(err)? - vector_spread_oracle(&f, &c)).abs());
    }
    check(
        examples_ok && worst <= 1e-10,
        format!("cosine examples {examples:?}; vector spread worst error {worst:.1e} over 1000 cases"),
    )
}

fn soft_iou_vs_discrete() -> Verdict {
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = r.random_range(1..256);
        let (pa, pb) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let a: Vec<f64> = (0..len).map(|_| r.random_bool(pa) as u8 as f64).collect();
        let b: Vec<f64> = (0..len).map(|_| r.random_bool(pb) as u8 as f64).collect();
        let ta = Tensor::new(&[1, 1, len], a.clone()).map_err(err)?;
        let tb = Tensor::new(&[1, 1, len], b.clone()).map_err(err)?;
        worst = worst.max((soft_iou_loss(&ta, &tb).map_err(err)? - (1.0 - discrete_iou(&a, &b))).abs());
    }
    check(worst <= 1e-10, format!("worst error {worst:.1e} over 1000 mask pairs"))
}

fn gating_identity() -> Verdict {
    let cfg = NetworkConfig::desk();
    let mut net = SegNet::new(cfg.clone(), &mut rng(4)).map_err(err)?;
    let mut r = rng(5);
    for p in net.params_mut() {
        if p.rank() == 1 {
            *p = Tensor::uniform(p.shape(), -0.1, 0.1, &mut r);
        }
    }
    let ones = SelectorWeights::uniform(&cfg, 1.0);
    let mut mismatched = 0;
    for i in 0..50 {
        let x = Tensor::uniform(&[cfg.in_channels, cfg.input_h, cfg.input_w], 0.0, 1.0, &mut rng(100 + i));
        let a = net.forward_gated(&x, &ones, false, &mut rng(0)).map_err(err)?;
        let b = net.forward_ungated(&x, false, &mut rng(0)).map_err(err)?;
        let same = a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
        mismatched += usize::from(!same);
    }
    check(mismatched == 0, format!("{mismatched} of 50 images differ bitwise"))
}

fn overfit_check() -> Verdict {
    let start = Instant::now();
    let eps = generate_set(&ClassSplit::train(&[12, 13]), &GenParams::default(), 6, 5).map_err(err)?;
    let batch: Vec<&Episode> = eps.iter().collect();
    let net = SegNet::new(NetworkConfig::desk(), &mut rng(0)).map_err(err)?;
    let mut trainer = Trainer::new(net, TrainConfig::desk()).map_err(err)?;
    let mut best = f64::INFINITY;
    for i in 0..2000 {
        let report = trainer.train_iteration(&batch).map_err(err)?;
        best = best.min(report.bundle.task1_iou_loss());
        if best < 0.1 {
            let secs = start.elapsed().as_secs_f64();
            return check(secs < 600.0, format!("task-1 loss {best:.4} at iteration {}, {secs:.0}s", i + 1));
        }
    }
    Err(format!("task-1 loss still {best:.4} after 2000 iterations"))
}

/// Full multi-task run on six classes; the spread is tracked as a
/// 100-iteration moving average of the batch value.
fn spread_dynamics() -> Verdict {
    let classes: Vec<u32> = (1..=6).collect();
    let split = ClassSplit { needle: classes.clone(), distractor: classes, required: Vec::new() };
    let pool = generate_set(&split, &GenParams::default(), 3000, 6).map_err(err)?;
    let net = SegNet::new(NetworkConfig::desk(), &mut rng(0)).map_err(err)?;
    let mut trainer = Trainer::new(net, TrainConfig::desk()).map_err(err)?;
    let (mut window, mut best, mut first) = (Vec::with_capacity(100), f64::INFINITY, f64::NAN);
    for i in 0..3000u64 {
        let idx = sample_batch(pool.len(), 6, 0, i).map_err(err)?;
        let batch: Vec<&Episode> = idx.iter().map(|&j| &pool[j]).collect();
        let report = trainer.train_iteration(&batch).map_err(err)?;
        window.push(report.bundle.vector_spread_loss());
        if window.len() > 100 {
            window.remove(0);
        }
        if window.len() == 100 {
            let mean = window.iter().sum::<f64>() / 100.0;
            if first.is_nan() {
                first = mean;
            }
            best = best.min(mean);
            if mean < 0.1 {
                return Ok(format!("spread average {mean:.4} at iteration {}", i + 1));
            }
        }
    }
    Err(format!("spread average fell from {first:.4} to a minimum of {best:.4} in 3000 iterations; never below 0.1"))
}

struct Runs {
    root: PathBuf,
    data: PathBuf,
}

impl Runs {
    fn config(&self, name: &str, tasks: &str) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::desk();
        cfg.data_dir = self.data.clone();
        cfg.out_dir = self.root.join(name);
        cfg.training.set("tasks", tasks).map_err(err)?;
        Ok(cfg)
    }

    fn train(&self, name: &str, tasks: &str) -> Result<RunConfig, String> {
        let cfg = self.config(name, tasks)?;
        if !cfg.train_dir().exists() {
            commands::make_data(&cfg).map_err(err)?;
        }
        commands::train(&cfg, &TrainOptions { stop_after: None, verbose: false }).map_err(err)?;
        Ok(cfg)
    }
}

fn chance_of(dir: &Path) -> Result<f64, String> {
    let text = fs::read_to_string(dir.join("run_info.txt")).map_err(err)?;
    text.lines()
        .find_map(|l| l.strip_prefix("chance="))
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| "run_info.txt has no chance line".to_string())
}

fn one_shot(runs: &Runs) -> Verdict {
    let start = Instant::now();
    let cfg = runs.train("tasks-1-4", "1-4")?;
    let eval = load_dataset(&cfg.eval_dir()).map_err(err)?;
    let min_objects = eval.iter().map(|e| e.objects.len()).min().unwrap_or(0);
    let curve = read_learning_curve(&cfg.curve_path()).map_err(err)?;
    let last = curve.last().ok_or("empty learning curve")?;
    let chance = chance_of(&cfg.out_dir)?;
    check(
        last.iteration == 10_000 && eval.len() == 200 && min_objects >= 4 && last.accuracy >= 2.0 * chance,
        format!(
            "accuracy {:.3} at iteration {} vs 2 x chance {:.3} ({} episodes, >= {min_objects} objects), {:.0}s",
            last.accuracy,
            last.iteration,
            2.0 * chance,
            eval.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn ablation(runs: &Runs) -> Verdict {
    runs.train("only-iou", "1")?;
    runs.train("tasks-1-3", "1-3")?;
    runs.train("tasks-1-4", "1-4")?;
    let dirs: Vec<PathBuf> = ["only-iou", "tasks-1-3", "tasks-1-4"].iter().map(|n| runs.root.join(n)).collect();
    let report = commands::report(&dirs).map_err(err)?;
    let table = report.to_csv();
    fs::write(runs.root.join("report.csv"), &table).map_err(err)?;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "{}: converged {:?}, plateau {:.3} vs chance {:.3}",
                r.tasks,
                r.iterations_to_converge,
                r.plateau_accuracy.unwrap_or(f64::NAN),
                r.chance.unwrap_or(f64::NAN)
            )
        })
        .collect();
    let converged = report.rows.len() == 3
        && table.lines().count() == 4
        && report.rows.iter().all(|r| r.status == "complete" && r.above_chance() == Some(true));
    let trend = report.trend().unwrap_or_else(|| "trend unavailable".into());
    check(converged, format!("{}; {trend}", rows.join("; ")))
}

fn pipeline_consistency(runs: Option<&Runs>) -> Verdict {
    let eps = generate_set(&ClassSplit::eval(&[12, 13]), &GenParams { min_objects: 4, ..GenParams::default() }, 100, 9)
        .map_err(err)?;
    let oracle = evaluate_with(&eps, 0, &EvalOptions::default(), |ep| {
        Ok(Prediction {
            belief_t1: ep.needle_object().mask.clone(),
            belief_t2: ep.union_mask(),
            belief_t3: ep.needle_mask.clone(),
            features: vec![f64::from(ep.needle_class), 1.0],
        })
    })
    .map_err(err)?;
    let mut r = rng(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let (h, w) = (r.random_range(2..10), r.random_range(2..10));
        let n = r.random_range(1..6);
        let mut ids: Vec<u32> = (1..=13).collect();
        ids.shuffle(&mut r);
        let masks: Vec<Tensor> = (0..n)
            .map(|_| {
                let d = r.random_range(0.05..0.6);
                Tensor::from_fn(&[1, h, w], |_| r.random_bool(d) as u8 as f32)
            })
            .collect();
        let cands: Vec<(u32, &Tensor)> = ids[..n].iter().copied().zip(masks.iter()).collect();
        let belief = Tensor::from_fn(&[1, h, w], |_| r.random::<f32>());
        let got = classify_by_iou(&belief, &cands).map_err(err)?;
        mismatches += usize::from((got.class, got.iou) != brute_force_classify(&belief, &cands));
    }
    let mut consistent = vec![oracle.is_consistent()];
    if let Some(runs) = runs {
        for name in ["only-iou", "tasks-1-3", "tasks-1-4"] {
            let cfg = runs.config(name, "1-4")?;
            let cfg = RunConfig::from_text(&fs::read_to_string(cfg.out_dir.join("config.txt")).map_err(err)?)
                .map_err(err)?;
            let report = commands::eval(&cfg, None).map_err(err)?;
            let trace = report.confusion.trace() as f64 / report.confusion.total() as f64;
            consistent.push(report.is_consistent() && trace == report.accuracy);
        }
    }
    check(
        oracle.accuracy == 1.0 && oracle.mean_iou == 1.0 && mismatches == 0 && consistent.iter().all(|&c| c),
        format!(
            "oracle accuracy {} mean IoU {}; {mismatches} of 100 argmax mismatches; trace/total consistent on {} reports",
            oracle.accuracy,
            oracle.mean_iou,
            consistent.iter().filter(|&&c| c).count()
        ),
    )
}

fn protocol_conformance(root: &Path) -> Verdict {
    let splits = enumerate_holdout_splits(13, 2).map_err(err)?;
    let params = GenParams { min_objects: 4, ..GenParams::default() };
    let mut violations = 0;
    for (i, split) in splits.iter().enumerate() {
        let eval = generate_set(&ClassSplit::eval(split), &params, 20, i as u64).map_err(err)?;
        let train = generate_set(&ClassSplit::train(split), &GenParams::default(), 20, i as u64).map_err(err)?;
        for ep in &eval {
            let trained_needle = !split.contains(&ep.needle_class);
            let missing_holdout = split.iter().any(|h| !ep.objects.iter().any(|o| o.class == *h));
            violations += usize::from(trained_needle || missing_holdout);
        }
        for ep in &train {
            violations += usize::from(ep.objects.iter().any(|o| split.contains(&o.class)));
        }
    }
    let trained_distractors = generate_set(&ClassSplit::eval(&[12, 13]), &params, 50, 10)
        .map_err(err)?
        .iter()
        .any(|e| e.objects.iter().any(|o| o.class < 12));
    let eps = generate_set(&ClassSplit::eval(&[3, 7]), &params, 10, 11).map_err(err)?;
    let dir = root.join("roundtrip");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(err)?;
    }
    write_dataset(&eps, &dir).map_err(err)?;
    let back = load_dataset(&dir).map_err(err)?;
    let bit_exact = back.len() == eps.len()
        && back.iter().zip(&eps).all(|(a, b)| {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            a == b
                && bits(&a.haystack_image) == bits(&b.haystack_image)
                && bits(&a.needle_image) == bits(&b.needle_image)
        });
    check(
        splits.len() == 78 && violations == 0 && trained_distractors && bit_exact,
        format!(
            "{} splits; {violations} contract violations over {} episodes; trained distractors present {trained_distractors}; round trip bit-exact {bit_exact}",
            splits.len(),
            splits.len() * 40
        ),
    )
}

type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Verdict + 'a>);

fn main() -> ExitCode {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    if std::env::var_os("ACCEPTANCE_REUSE").is_none() && root.exists() {
        fs::remove_dir_all(&root).expect("clear acceptance directory");
    }
    fs::create_dir_all(&root).expect("create acceptance directory");
    let runs = Runs { data: root.join("data"), root: root.clone() };
    let trained = wanted(7) || wanted(8);

    let criteria: Vec<Criterion> = vec![
        (1, "gradient suite", Box::new(gradient_suite)),
        (2, "loss properties", Box::new(loss_properties)),
        (3, "soft IoU vs discrete IoU", Box::new(soft_iou_vs_discrete)),
        (4, "gating identity", Box::new(gating_identity)),
        (5, "overfit one batch", Box::new(overfit_check)),
        (6, "vector-spread dynamics", Box::new(spread_dynamics)),
        (7, "one-shot generalization", Box::new(|| one_shot(&runs))),
        (8, "ablation runs and report", Box::new(|| ablation(&runs))),
        (9, "evaluation pipeline consistency", Box::new(|| pipeline_consistency(trained.then_some(&runs)))),
        (10, "protocol conformance", Box::new(|| protocol_conformance(&root))),
    ];
    let mut failures = 0;
    for (n, name, run) in &criteria {
        if !wanted(*n) {
            continue;
        }
        match run() {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

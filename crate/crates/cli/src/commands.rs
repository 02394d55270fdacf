//! The four subcommands, callable as library functions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use siamseg::checkpoint::{self, Checkpoint};
use siamseg::data::{generate_set, load_dataset, write_dataset, ClassSplit, Episode};
use siamseg::eval::{
    chance_accuracy, evaluate, read_learning_curve, summarize_curve, write_learning_curve, CurveRow, EvalOptions,
    EvalReport,
};
use siamseg::optim::{sample_batch, Trainer};
use siamseg::segnet::SegNet;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

const CONFIG_FILE: &str = "config.txt";
const INFO_FILE: &str = "run_info.txt";

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MakeDataSummary {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub eval_needle_classes: Vec<u32>,
    pub mean_eval_objects: f64,
}

/// Checks the held-out contract on generated or loaded sets.
pub fn check_split_contract(train: &[Episode], eval: &[Episode], holdout: &[u32], dir: &Path) -> CliResult<()> {
    let fail = |detail: String| Err(CliError::Contract { path: dir.to_path_buf(), detail });
    for ep in train {
        if let Some(o) = ep.objects.iter().find(|o| holdout.contains(&o.class)) {
            return fail(format!("training episode {} contains held-out class {}", ep.id, o.class));
        }
    }
    for ep in eval {
        if !holdout.contains(&ep.needle_class) {
            return fail(format!("eval episode {} has trained needle class {}", ep.id, ep.needle_class));
        }
        if let Some(h) = holdout.iter().find(|h| !ep.objects.iter().any(|o| o.class == **h)) {
            return fail(format!("eval episode {} lacks held-out class {h}", ep.id));
        }
    }
    Ok(())
}

/// Generates the training and evaluation datasets.
pub fn make_data(cfg: &RunConfig) -> CliResult<MakeDataSummary> {
    cfg.validate()?;
    let train = generate_set(&ClassSplit::train(&cfg.holdout), &cfg.gen_params(), cfg.train_episodes, cfg.data_seed)?;
    let eval = generate_set(
        &ClassSplit::eval(&cfg.holdout),
        &cfg.eval_gen_params(),
        cfg.eval_episodes,
        cfg.data_seed.wrapping_add(1 << 32),
    )?;
    check_split_contract(&train, &eval, &cfg.holdout, &cfg.data_dir)?;
    for dir in [cfg.train_dir(), cfg.eval_dir()] {
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
    }
    write_dataset(&train, &cfg.train_dir())?;
    write_dataset(&eval, &cfg.eval_dir())?;
    let mut needles: Vec<u32> = eval.iter().map(|e| e.needle_class).collect();
    needles.sort_unstable();
    needles.dedup();
    Ok(MakeDataSummary {
        train_dir: cfg.train_dir(),
        eval_dir: cfg.eval_dir(),
        train_episodes: train.len(),
        eval_episodes: eval.len(),
        eval_needle_classes: needles,
        mean_eval_objects: 1.0 / chance_accuracy(&eval),
    })
}

fn check_shapes(cfg: &RunConfig, episodes: &[Episode], dir: &Path) -> CliResult<()> {
    let want = [cfg.network.in_channels, cfg.network.input_h, cfg.network.input_w];
    match episodes.iter().find(|e| e.haystack_image.shape() != want) {
        Some(e) => Err(CliError::Contract {
            path: dir.to_path_buf(),
            detail: format!("episode {} has images {:?}, network expects {want:?}", e.id, e.haystack_image.shape()),
        }),
        None => Ok(()),
    }
}

/// Loads and checks both datasets for a run.
pub fn load_data(cfg: &RunConfig) -> CliResult<(Vec<Episode>, Vec<Episode>)> {
    let train = load_dataset(&cfg.train_dir())?;
    let eval = load_dataset(&cfg.eval_dir())?;
    check_shapes(cfg, &train, &cfg.train_dir())?;
    check_shapes(cfg, &eval, &cfg.eval_dir())?;
    check_split_contract(&train, &eval, &cfg.holdout, &cfg.data_dir)?;
    if train.is_empty() || eval.is_empty() {
        return Err(CliError::Contract { path: cfg.data_dir.clone(), detail: "empty dataset".into() });
    }
    Ok((train, eval))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Stop once this many iterations are complete, as if interrupted.
    pub stop_after: Option<u64>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub resumed_from: Option<u64>,
    pub final_iteration: u64,
    pub curve: Vec<CurveRow>,
    pub skipped_steps: u64,
}

fn eval_row(trainer: &Trainer, eval: &[Episode]) -> CliResult<EvalReport> {
    let mut report = evaluate(&trainer.net, eval, trainer.iteration, &EvalOptions::default())?;
    report.weights = trainer.current_weights()?;
    Ok(report)
}

/// Trains, evaluating and checkpointing every `eval_interval` iterations.
/// An existing checkpoint in the output directory is resumed.
pub fn train(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<TrainSummary> {
    cfg.validate()?;
    create_dir(&cfg.out_dir)?;
    let ckpt_path = cfg.checkpoint_path();
    let resumed = if ckpt_path.exists() {
        let ck = checkpoint::load(&ckpt_path)?;
        ck.check_config(&ckpt_path, &cfg.network, Some(&cfg.training))?;
        Some(ck.trainer.ok_or_else(|| CliError::Config(format!("{} holds no trainer state", ckpt_path.display())))?)
    } else {
        None
    };
    let (train_set, eval_set) = load_data(cfg)?;
    write_file(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;
    write_file(&cfg.out_dir.join(INFO_FILE), &format!("chance={}\n", chance_accuracy(&eval_set)))?;

    let resumed_from = resumed.as_ref().map(|t| t.iteration);
    let (mut trainer, mut curve) = match resumed {
        Some(t) => {
            let mut rows = if cfg.curve_path().exists() { read_learning_curve(&cfg.curve_path())? } else { Vec::new() };
            rows.retain(|r| r.iteration <= t.iteration);
            (t, rows)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.network.seed);
            let net = SegNet::new(cfg.network.clone(), &mut rng)?;
            (Trainer::new(net, cfg.training.clone())?, Vec::new())
        }
    };
    if curve.is_empty() && trainer.iteration == 0 {
        curve.push(eval_row(&trainer, &eval_set)?.curve_row());
        write_learning_curve(&curve, &cfg.curve_path())?;
        checkpoint::save_trainer(&trainer, &ckpt_path)?;
    }
    let stop = opts.stop_after.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut skipped = 0;
    while trainer.iteration < stop {
        let idx = sample_batch(train_set.len(), cfg.training.batch_size, cfg.training.seed, trainer.iteration)?;
        let batch: Vec<&Episode> = idx.iter().map(|&i| &train_set[i]).collect();
        let step = trainer.train_iteration(&batch)?;
        skipped += u64::from(!step.step.applied());
        if trainer.iteration % cfg.eval_interval == 0 {
            let report = eval_row(&trainer, &eval_set)?;
            if opts.verbose {
                eprintln!(
                    "iteration {}: accuracy {:.3}, mean IoU {:.3}, train losses {:.3?}, weights {:.3?}",
                    trainer.iteration, report.accuracy, report.mean_iou, step.bundle.losses, report.weights
                );
            }
            curve.push(report.curve_row());
            write_learning_curve(&curve, &cfg.curve_path())?;
            checkpoint::save_trainer(&trainer, &ckpt_path)?;
        }
    }
    Ok(TrainSummary { resumed_from, final_iteration: trainer.iteration, curve, skipped_steps: skipped })
}

/// Evaluates a checkpoint on the evaluation set and writes the report and
/// confusion matrix under `<out_dir>/eval`.
pub fn eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> CliResult<EvalReport> {
    cfg.validate()?;
    let path = checkpoint_path.map_or_else(|| cfg.checkpoint_path(), Path::to_path_buf);
    let ck: Checkpoint = checkpoint::load(&path)?;
    ck.check_config(&path, &cfg.network, Some(&cfg.training))?;
    let eval_set = load_dataset(&cfg.eval_dir())?;
    check_shapes(cfg, &eval_set, &cfg.eval_dir())?;
    let report = match &ck.trainer {
        Some(t) => eval_row(t, &eval_set)?,
        None => evaluate(&ck.net, &eval_set, 0, &EvalOptions::default())?,
    };
    let dir = cfg.out_dir.join("eval");
    create_dir(&dir)?;
    write_file(&dir.join("report.txt"), &report.to_text())?;
    write_file(&dir.join("confusion.csv"), &report.confusion.to_csv())?;
    Ok(report)
}

/// One row of the ablation comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub tasks: String,
    pub iterations_to_converge: Option<u64>,
    pub plateau_accuracy: Option<f64>,
    pub chance: Option<f64>,
    pub final_iteration: Option<u64>,
    /// `complete`, or `incomplete: <reason>`.
    pub status: String,
}

impl ReportRow {
    pub fn above_chance(&self) -> Option<bool> {
        Some(self.plateau_accuracy? > self.chance?)
    }
}

fn read_chance(dir: &Path) -> Option<f64> {
    let text = fs::read_to_string(dir.join(INFO_FILE)).ok()?;
    text.lines().find_map(|l| l.strip_prefix("chance=")).and_then(|v| v.trim().parse().ok())
}

fn report_row(dir: &Path) -> ReportRow {
    let mut row = ReportRow {
        run: dir.display().to_string(),
        tasks: String::new(),
        iterations_to_converge: None,
        plateau_accuracy: None,
        chance: read_chance(dir),
        final_iteration: None,
        status: String::new(),
    };
    let cfg = match fs::read_to_string(dir.join(CONFIG_FILE)).map_err(|e| e.to_string()).and_then(|t| {
        RunConfig::from_text(&t).map_err(|e| e.to_string())
    }) {
        Ok(c) => c,
        Err(e) => {
            row.status = format!("incomplete: no readable {CONFIG_FILE} ({e})");
            return row;
        }
    };
    row.tasks = cfg.training.tasks.label();
    let rows = match read_learning_curve(&dir.join("curve.csv")) {
        Ok(r) => r,
        Err(e) => {
            row.status = format!("incomplete: {e}");
            return row;
        }
    };
    let Some(summary) = summarize_curve(&rows) else {
        row.status = "incomplete: empty learning curve".into();
        return row;
    };
    row.iterations_to_converge = Some(summary.converged_at);
    row.plateau_accuracy = Some(summary.plateau);
    row.final_iteration = Some(summary.final_iteration);
    row.status = if summary.final_iteration < cfg.iterations {
        format!("incomplete: {} of {} iterations", summary.final_iteration, cfg.iterations)
    } else {
        "complete".into()
    };
    row
}

/// Comparison table over several runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        let mut s = String::from("run,tasks,iterations_to_converge,plateau_accuracy,chance,above_chance,final_iteration,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.run.replace(',', ";"),
                r.tasks,
                opt(r.iterations_to_converge.map(|v| v.to_string())),
                opt(r.plateau_accuracy.map(|v| format!("{v:.4}"))),
                opt(r.chance.map(|v| format!("{v:.4}"))),
                opt(r.above_chance().map(|v| v.to_string())),
                opt(r.final_iteration.map(|v| v.to_string())),
                r.status.replace(',', ";"),
            ));
        }
        s
    }

    /// Whether the full multi-task run converged no later than the
    /// IoU-only run; `None` unless both are present and complete.
    pub fn trend(&self) -> Option<String> {
        let find = |label: &str| {
            self.rows
                .iter()
                .find(|r| r.tasks == label && r.status == "complete")
                .and_then(|r| r.iterations_to_converge)
        };
        let (all, iou) = (find("Tasks 1-4")?, find("Only IoU")?);
        let verdict = if all <= iou { "holds" } else { "does not hold" };
        Some(format!(
            "Tasks 1-4 converged at iteration {all}, Only IoU at {iou}: the multi-task speed-up {verdict}"
        ))
    }
}

pub fn report(run_dirs: &[PathBuf]) -> CliResult<Report> {
    if run_dirs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    Ok(Report { rows: run_dirs.iter().map(|d| report_row(d)).collect() })
}

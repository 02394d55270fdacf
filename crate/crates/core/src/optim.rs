//! Adam and the training iteration.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Var};
use crate::aux_weighter::{AuxNet, LossStats};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::kernels::FlushDenormals;
use crate::losses::{assemble_total, vector_spread_with_grad, LossBundle, TASKS};
use crate::segnet::SegNet;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied,
    /// The step was not taken; parameters and moments are unchanged.
    Skipped { reason: String },
}

impl StepOutcome {
    pub fn applied(&self) -> bool {
        matches!(self, StepOutcome::Applied)
    }
}

/// Adam moments and hyper-parameters for one list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the whole gradient to at most this L2 norm before the step.
    pub clip_norm: Option<f64>,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 1e-5;

    pub fn new<T: Real>(params: &[Tensor<T>], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients skip the step.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<StepOutcome> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters, {} gradients, {} moment buffers", params.len(), grads.len(), self.m.len()),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("parameter {i} has {} elements, gradient {}", p.len(), g.len()),
                ));
            }
        }
        let mut sq = 0.0f64;
        for (i, g) in grads.iter().enumerate() {
            for (j, v) in g.iter().enumerate() {
                let v = v.as_f64();
                if !v.is_finite() {
                    return Ok(StepOutcome::Skipped { reason: format!("non-finite gradient at parameter {i}[{j}]") });
                }
                sq += v * v;
            }
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c => c / sq.sqrt(),
            _ => 1.0,
        };
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64() * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.epsilon);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Which of the four losses contribute to training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSet {
    pub enabled: [bool; TASKS],
}

impl TaskSet {
    pub const fn iou_only() -> Self {
        Self { enabled: [true, false, false, false] }
    }

    pub const fn tasks_1_3() -> Self {
        Self { enabled: [true, true, true, false] }
    }

    pub const fn all() -> Self {
        Self { enabled: [true; TASKS] }
    }

    /// Row label used in ablation reports.
    pub fn label(&self) -> String {
        match self.enabled {
            [true, false, false, false] => "Only IoU".into(),
            [true, true, true, false] => "Tasks 1-3".into(),
            [true, true, true, true] => "Tasks 1-4".into(),
            e => {
                let on: Vec<String> = (0..TASKS).filter(|&i| e[i]).map(|i| (i + 1).to_string()).collect();
                format!("Tasks {}", on.join("+"))
            }
        }
    }

    /// Parses `iou`, `1-3`, `1-4` or a comma list such as `1,2,4`.
    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim();
        let set = match t {
            "iou" | "iou-only" | "1" => Self::iou_only(),
            "1-3" => Self::tasks_1_3(),
            "1-4" | "all" => Self::all(),
            _ => {
                let mut enabled = [false; TASKS];
                for part in t.split(',') {
                    let k: usize = part
                        .trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("task set '{text}': '{part}' is not a task number")))?;
                    if !(1..=TASKS).contains(&k) {
                        return Err(Error::Config(format!("task set '{text}': task {k} out of range 1..={TASKS}")));
                    }
                    enabled[k - 1] = true;
                }
                Self { enabled }
            }
        };
        if !set.enabled.iter().any(|&e| e) {
            return Err(Error::Config(format!("task set '{text}' enables no task")));
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let on: Vec<String> = (0..TASKS).filter(|&i| self.enabled[i]).map(|i| (i + 1).to_string()).collect();
        on.join(",")
    }
}

/// How the four task weights are chosen each iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    /// Produced by the auxiliary network, which trains alongside.
    Aux,
    /// Equal weights over the enabled tasks.
    Uniform,
    /// Constant weights; must be zero on disabled tasks and sum to one.
    Fixed([f64; TASKS]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub aux_lr: f64,
    pub aux_hidden: usize,
    pub stats_decay: f64,
    pub tasks: TaskSet,
    pub weighting: Weighting,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 6,
            lr: AdamState::DEFAULT_LR,
            aux_lr: AdamState::DEFAULT_LR,
            aux_hidden: 64,
            stats_decay: 0.99,
            tasks: TaskSet::all(),
            weighting: Weighting::Aux,
            clip_norm: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Desk-scale settings: the main network trains at 1e-3, the weighter
    /// keeps the default rate.
    pub fn desk() -> Self {
        Self { lr: 1e-3, ..Self::default() }
    }

    /// Canonical `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let weighting = match self.weighting {
            Weighting::Aux => "aux".to_string(),
            Weighting::Uniform => "uniform".to_string(),
            Weighting::Fixed(w) => w.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        };
        let clip = self.clip_norm.map_or_else(|| "none".to_string(), |c| c.to_string());
        format!(
            "batch_size={}\nlr={}\naux_lr={}\naux_hidden={}\nstats_decay={}\ntasks={}\nweighting={}\nclip_norm={}\ntrain_seed={}\n",
            self.batch_size,
            self.lr,
            self.aux_lr,
            self.aux_hidden,
            self.stats_decay,
            self.tasks.to_text(),
            weighting,
            clip,
            self.seed
        )
    }

    /// Sets one field from its textual value. Returns `Ok(false)` when the
    /// key is not a training field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let v = value.trim();
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
        let real = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(&e));
        match key {
            "batch_size" => self.batch_size = v.parse().map_err(|e| bad(&e))?,
            "lr" => self.lr = real(v)?,
            "aux_lr" => self.aux_lr = real(v)?,
            "aux_hidden" => self.aux_hidden = v.parse().map_err(|e| bad(&e))?,
            "stats_decay" => self.stats_decay = real(v)?,
            "tasks" => self.tasks = TaskSet::parse(v)?,
            "weighting" => {
                self.weighting = match v {
                    "aux" => Weighting::Aux,
                    "uniform" => Weighting::Uniform,
                    _ => {
                        let w = v.split(',').map(real).collect::<Result<Vec<_>>>()?;
                        let w: [f64; TASKS] = w
                            .try_into()
                            .map_err(|_| bad(&"expected aux, uniform or four comma-separated weights"))?;
                        Weighting::Fixed(w)
                    }
                }
            }
            "clip_norm" => self.clip_norm = if v == "none" { None } else { Some(real(v)?) },
            "train_seed" => self.seed = v.parse().map_err(|e| bad(&e))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
            if !cfg.set(k.trim(), v)? {
                return Err(Error::Config(format!("unknown key {:?}", k.trim())));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fields that differ from `other`, as `key (ours vs theirs)`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.to_text(), other.to_text());
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| {
                let (k, xv) = x.split_once('=').unwrap_or((x, ""));
                let yv = y.split_once('=').map_or("", |p| p.1);
                format!("{k} ({xv} vs {yv})")
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.aux_lr >= 0.0 && self.aux_lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be finite and non-negative ({}, {})", self.lr, self.aux_lr)));
        }
        if self.aux_hidden == 0 {
            return Err(Error::Config("aux_hidden must be positive".into()));
        }
        if !self.tasks.enabled.iter().any(|&e| e) {
            return Err(Error::Config("no task is enabled".into()));
        }
        if let Weighting::Fixed(w) = self.weighting {
            assemble_total([0.0; TASKS], w).map_err(|e| Error::Config(format!("fixed weights: {e}")))?;
            if let Some(i) = (0..TASKS).find(|&i| !self.tasks.enabled[i] && w[i] != 0.0) {
                return Err(Error::Config(format!("fixed weight for disabled task {} must be zero", i + 1)));
            }
        }
        Ok(())
    }
}

/// Outcome of one training iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationReport {
    /// Zero-based index of the iteration that produced this report.
    pub iteration: u64,
    /// Batch-mean losses, with disabled image tasks reported as zero.
    pub bundle: LossBundle,
    pub step: StepOutcome,
    pub aux_step: Option<StepOutcome>,
}

/// Random stream for episode `episode` of iteration `iteration`.
pub fn iteration_rng(seed: u64, iteration: u64, episode: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    key[16] = 1;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(episode);
    rng
}

/// Distinct indices into a pool of `pool` episodes for one iteration's
/// batch, or a with-replacement draw when the pool is smaller than the batch.
pub fn sample_batch(pool: usize, batch: usize, seed: u64, iteration: u64) -> Result<Vec<usize>> {
    if pool == 0 {
        return Err(Error::invalid("sample_batch", "empty episode pool"));
    }
    let mut rng = iteration_rng(seed, iteration, u64::MAX);
    if pool >= batch {
        Ok(sample(&mut rng, pool, batch).into_vec())
    } else {
        use rand::Rng;
        Ok((0..batch).map(|_| rng.random_range(0..pool)).collect())
    }
}

struct EpisodeGraph {
    tape: Tape<f32>,
    params: Vec<Var>,
    losses: [Option<Var>; 3],
    features: Var,
}

/// Main network, auxiliary weighter and all optimiser state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: SegNet,
    pub aux: AuxNet,
    pub opt: AdamState,
    pub aux_opt: AdamState,
    pub stats: LossStats,
    pub config: TrainConfig,
    /// Number of completed iterations.
    pub iteration: u64,
}

impl Trainer {
    pub fn new(net: SegNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = iteration_rng(config.seed, u64::MAX, 0);
        let aux = AuxNet::new(config.aux_hidden, &mut rng);
        let mut opt = AdamState::new(net.params(), config.lr);
        opt.clip_norm = config.clip_norm;
        let aux_opt = AdamState::new(aux.params(), config.aux_lr);
        let stats = LossStats::new(config.stats_decay)?;
        Ok(Self { net, aux, opt, aux_opt, stats, config, iteration: 0 })
    }

    /// Weights the next iteration would use with the current statistics.
    pub fn current_weights(&self) -> Result<[f64; TASKS]> {
        let enabled = self.config.tasks.enabled;
        match self.config.weighting {
            Weighting::Aux => self.aux.compute_weights(&self.stats, enabled),
            Weighting::Uniform => {
                let n = enabled.iter().filter(|&&e| e).count() as f64;
                Ok(std::array::from_fn(|i| if enabled[i] { 1.0 / n } else { 0.0 }))
            }
            Weighting::Fixed(w) => Ok(w),
        }
    }

    fn forward_episode(&self, ep: &Episode, index: usize) -> Result<EpisodeGraph> {
        let _ftz = FlushDenormals::new();
        let enabled = self.config.tasks.enabled;
        let mut rng = iteration_rng(self.config.seed, self.iteration, index as u64);
        let mut tape = Tape::<f32>::new();
        let bound = self.net.bind(&mut tape, true);
        let needle = tape.constant(ep.needle_image.clone());
        let haystack = tape.constant(ep.haystack_image.clone());
        let nv = bound.needle(&mut tape, needle, true, &mut rng)?;
        let mut losses = [None; 3];
        let b1 = bound.haystack(&mut tape, haystack, Some(nv.gates), true, &mut rng)?;
        let t1 = tape.constant(ep.needle_object().mask.clone());
        losses[0] = Some(tape.soft_iou_loss(b1, t1)?);
        if enabled[1] {
            let b2 = bound.haystack(&mut tape, haystack, None, true, &mut rng)?;
            let t2 = tape.constant(ep.union_mask());
            losses[1] = Some(tape.soft_iou_loss(b2, t2)?);
        }
        if enabled[2] {
            let b3 = bound.haystack(&mut tape, needle, Some(nv.gates), true, &mut rng)?;
            let t3 = tape.constant(ep.needle_mask.clone());
            losses[2] = Some(tape.soft_iou_loss(b3, t3)?);
        }
        let params = bound.vars().to_vec();
        Ok(EpisodeGraph { tape, params, losses, features: nv.features })
    }

    /// One optimisation step on `batch`: forward every episode on its own
    /// tape, update the loss statistics, fetch the weights, backpropagate
    /// the weighted total, step Adam, then train the weighter.
    pub fn train_iteration(&mut self, batch: &[&Episode]) -> Result<IterationReport> {
        let b = batch.len();
        if b != self.config.batch_size {
            return Err(Error::invalid(
                "train_iteration",
                format!("batch of {b} episodes, configured size is {}", self.config.batch_size),
            ));
        }
        let graphs: Vec<EpisodeGraph> = batch
            .par_iter()
            .enumerate()
            .map(|(i, ep)| self.forward_episode(ep, i))
            .collect::<Result<_>>()?;

        let mut observed = [0.0; TASKS];
        for g in &graphs {
            for (k, l) in g.losses.iter().enumerate() {
                if let Some(v) = l {
                    observed[k] += g.tape.value(*v).data()[0].as_f64() / b as f64;
                }
            }
        }
        let features: Vec<Vec<f64>> = graphs
            .iter()
            .map(|g| g.tape.value(g.features).data().iter().map(|v| v.as_f64()).collect())
            .collect();
        let classes: Vec<u32> = batch.iter().map(|e| e.needle_class).collect();
        let (spread, spread_grad) = vector_spread_with_grad(&features, &classes)?;
        observed[3] = spread;

        let iteration = self.iteration;
        self.iteration += 1;
        if let Some(v) = observed.iter().find(|v| !v.is_finite()) {
            let bundle = assemble_total(observed, self.current_weights()?)?;
            return Ok(IterationReport {
                iteration,
                bundle,
                step: StepOutcome::Skipped { reason: format!("non-finite loss {v}") },
                aux_step: None,
            });
        }
        self.stats.update(observed)?;
        let weights = self.current_weights()?;
        let bundle = assemble_total(observed, weights)?;

        let per_episode: Vec<Vec<Vec<f32>>> = graphs
            .par_iter()
            .zip(spread_grad.par_iter())
            .map(|(g, sg)| {
                let _ftz = FlushDenormals::new();
                let mut seeds = Vec::new();
                for (k, l) in g.losses.iter().enumerate() {
                    if let Some(v) = l {
                        if weights[k] != 0.0 {
                            seeds.push((*v, vec![(weights[k] / b as f64) as f32]));
                        }
                    }
                }
                if weights[3] != 0.0 {
                    seeds.push((g.features, sg.iter().map(|d| (weights[3] * d) as f32).collect()));
                }
                let grads = g.tape.backward_seeded(seeds)?;
                Ok(g
                    .params
                    .iter()
                    .zip(self.net.params())
                    .map(|(v, p)| grads.get(*v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
                    .collect())
            })
            .collect::<Result<_>>()?;
        drop(graphs);

        let mut total: Vec<Vec<f32>> = self.net.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for ep in &per_episode {
            for (acc, g) in total.iter_mut().zip(ep) {
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += v);
            }
        }
        let step = self.opt.step(self.net.params_mut(), &total)?;
        let aux_step = match self.config.weighting {
            Weighting::Aux => Some(self.aux.train_step(&self.stats, self.config.tasks.enabled, &mut self.aux_opt)?),
            _ => None,
        };
        Ok(IterationReport { iteration, bundle, step, aux_step })
    }
}

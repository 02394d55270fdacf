//! Held-out evaluation: classification by IoU, pickup points, confusion
//! matrices and learning curves.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Episode, SceneObject};
use crate::error::{Error, Result};
use crate::kernels::FlushDenormals;
use crate::losses::{soft_iou_loss, vector_spread_loss, TASKS};
use crate::segnet::SegNet;
use crate::tensor::Tensor;

pub const BELIEF_THRESHOLD: f64 = 0.5;

/// Outcome of classifying one belief map against the haystack objects.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Classification {
    pub class: u32,
    pub iou: f64,
    /// No candidate overlaps the thresholded belief at all.
    pub degenerate: bool,
}

fn binarize(belief: &Tensor, threshold: f64) -> Vec<bool> {
    belief.data().iter().map(|&v| v as f64 >= threshold).collect()
}

/// IoU of two binary masks; zero when both are empty.
fn binary_iou(a: &[bool], b: &Tensor) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.data()) {
        let y = y >= 0.5;
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Class whose mask has the highest IoU with the belief thresholded at 0.5.
/// Ties go to the lowest class id, so candidate order does not matter.
pub fn classify_by_iou(belief: &Tensor, candidates: &[(u32, &Tensor)]) -> Result<Classification> {
    classify_thresholded(&binarize(belief, BELIEF_THRESHOLD), belief.shape(), candidates)
}

fn classify_thresholded(mask: &[bool], shape: &[usize], candidates: &[(u32, &Tensor)]) -> Result<Classification> {
    if candidates.is_empty() {
        return Err(Error::invalid("classify_by_iou", "no candidate objects"));
    }
    let mut best: Option<(u32, f64)> = None;
    for &(class, m) in candidates {
        if m.shape() != shape {
            return Err(Error::shape(
                "classify_by_iou",
                format!("belief {:?} vs mask of class {class} {:?}", shape, m.shape()),
            ));
        }
        let iou = binary_iou(mask, m);
        best = match best {
            Some((c, b)) if b > iou || (b == iou && c < class) => Some((c, b)),
            _ => Some((class, iou)),
        };
    }
    let (class, iou) = best.expect("non-empty candidates");
    Ok(Classification { class, iou, degenerate: iou == 0.0 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pickup {
    /// Centroid `(x, y)` of the largest blob; `None` for an empty belief.
    pub point: Option<(f64, f64)>,
    pub success: bool,
}

/// Pixels of the largest 4-connected component of `mask`; ties go to the
/// component met first in raster order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<usize> {
    let mut seen = vec![false; mask.len()];
    let mut best: Vec<usize> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

/// Pickup point predicted from a belief map and whether it lands within
/// `radius` of the labelled pickup of the object of `predicted_class`.
pub fn pickup_metrics(belief: &Tensor, predicted_class: u32, objects: &[SceneObject], radius: f64) -> Result<Pickup> {
    let target = objects
        .iter()
        .find(|o| o.class == predicted_class)
        .ok_or_else(|| Error::invalid("pickup_metrics", format!("class {predicted_class} is not in the haystack")))?;
    let (h, w) = match *belief.shape() {
        [1, h, w] => (h, w),
        _ => return Err(Error::shape("pickup_metrics", format!("belief must be [1, H, W], got {:?}", belief.shape()))),
    };
    let comp = largest_component(&binarize(belief, BELIEF_THRESHOLD), h, w);
    if comp.is_empty() {
        return Ok(Pickup { point: None, success: false });
    }
    let n = comp.len() as f64;
    let cx = comp.iter().map(|&i| (i % w) as f64 + 0.5).sum::<f64>() / n;
    let cy = comp.iter().map(|&i| (i / w) as f64 + 0.5).sum::<f64>() / n;
    let d = ((cx - target.pickup.0).powi(2) + (cy - target.pickup.1).powi(2)).sqrt();
    Ok(Pickup { point: Some((cx, cy)), success: d <= radius })
}

/// Counts of true class (rows) against predicted class (columns).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: Vec<u32>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(mut classes: Vec<u32>) -> Self {
        classes.sort_unstable();
        classes.dedup();
        let k = classes.len();
        Self { classes, counts: vec![vec![0; k]; k] }
    }

    fn index(&self, class: u32) -> Result<usize> {
        self.classes
            .binary_search(&class)
            .map_err(|_| Error::invalid("confusion", format!("class {class} is not tracked")))
    }

    pub fn record(&mut self, truth: u32, predicted: u32) -> Result<()> {
        let (r, c) = (self.index(truth)?, self.index(predicted)?);
        self.counts[r][c] += 1;
        Ok(())
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            t => self.trace() as f64 / t as f64,
        }
    }

    /// Correct predictions over all predictions of the class; `None` when
    /// the class was never predicted.
    pub fn precision(&self, i: usize) -> Option<f64> {
        let col: u64 = self.counts.iter().map(|r| r[i]).sum();
        (col > 0).then(|| self.counts[i][i] as f64 / col as f64)
    }

    /// Correct predictions over all episodes of the class; `None` when the
    /// class never appeared as the needle.
    pub fn recall(&self, i: usize) -> Option<f64> {
        let row: u64 = self.counts[i].iter().sum();
        (row > 0).then(|| self.counts[i][i] as f64 / row as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for c in &self.classes {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
        for (c, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(s, "{c}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iteration: u64,
    pub episodes: usize,
    pub accuracy: f64,
    /// Mean IoU between the thresholded task-1 belief and the needle's mask.
    pub mean_iou: f64,
    pub confusion: ConfusionMatrix,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    /// Episodes classified correctly whose pickup point lands on the object.
    pub pickup_success_rate: f64,
    /// Episodes whose belief overlaps no object; counted as misclassified.
    pub degenerate: usize,
    /// Eval-set losses in task order.
    pub losses: [f64; TASKS],
    /// Task weights in effect when the evaluation ran.
    pub weights: [f64; TASKS],
}

impl EvalReport {
    /// Accuracy, precision and recall recomputed from the confusion matrix
    /// agree with the stored values.
    pub fn is_consistent(&self) -> bool {
        let k = self.confusion.classes.len();
        self.confusion.total() == self.episodes as u64
            && self.confusion.accuracy() == self.accuracy
            && self.precision.len() == k
            && self.recall.len() == k
            && (0..k).all(|i| self.precision[i] == self.confusion.precision(i) && self.recall[i] == self.confusion.recall(i))
    }

    pub fn curve_row(&self) -> CurveRow {
        CurveRow {
            iteration: self.iteration,
            loss_task1: self.losses[0],
            loss_task2: self.losses[1],
            loss_task3: self.losses[2],
            loss_spread: self.losses[3],
            weight_task1: self.weights[0],
            weight_task2: self.weights[1],
            weight_task3: self.weights[2],
            weight_spread: self.weights[3],
            accuracy: self.accuracy,
            mean_iou: self.mean_iou,
            pickup_rate: self.pickup_success_rate,
        }
    }

    /// Canonical `key=value` text, one entry per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iteration={}", self.iteration);
        let _ = writeln!(s, "episodes={}", self.episodes);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "mean_iou={}", self.mean_iou);
        let _ = writeln!(s, "pickup_success_rate={}", self.pickup_success_rate);
        let _ = writeln!(s, "degenerate={}", self.degenerate);
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "loss_task{}={l}", i + 1);
        }
        for (i, w) in self.weights.iter().enumerate() {
            let _ = writeln!(s, "weight_task{}={w}", i + 1);
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| v.to_string());
        for (i, c) in self.confusion.classes.iter().enumerate() {
            let _ = writeln!(s, "precision_class{c}={}", fmt(self.precision[i]));
            let _ = writeln!(s, "recall_class{c}={}", fmt(self.recall[i]));
        }
        s
    }
}

/// What a predictor produces for one episode.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub belief_t1: Tensor,
    pub belief_t2: Tensor,
    pub belief_t3: Tensor,
    pub features: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Largest pickup error that still counts as a successful grasp.
    pub pickup_radius: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { pickup_radius: crate::data::GenParams::default().mask_radius() }
    }
}

struct EpisodeScore {
    truth: u32,
    predicted: Classification,
    needle_iou: f64,
    pickup: bool,
    losses: [f64; 3],
    features: Vec<f64>,
}

/// Chance-level accuracy: one over the mean number of haystack objects.
pub fn chance_accuracy(episodes: &[Episode]) -> f64 {
    let mean = episodes.iter().map(|e| e.objects.len()).sum::<usize>() as f64 / episodes.len().max(1) as f64;
    1.0 / mean
}

/// Runs the network in eval mode (dropout off) over every episode.
pub fn evaluate(net: &SegNet, episodes: &[Episode], iteration: u64, options: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(episodes, iteration, options, |ep| {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let out = net.episode_forward(&ep.needle_image, &ep.haystack_image, false, &mut rng)?;
        Ok(Prediction {
            belief_t1: out.belief_t1,
            belief_t2: out.belief_t2,
            belief_t3: out.belief_t3,
            features: out.features.data().iter().map(|&v| v as f64).collect(),
        })
    })
}

/// Evaluation against an arbitrary predictor. Weights in the report are
/// zero; callers that train fill them in.
pub fn evaluate_with<F>(episodes: &[Episode], iteration: u64, options: &EvalOptions, predict: F) -> Result<EvalReport>
where
    F: Fn(&Episode) -> Result<Prediction> + Sync,
{
    if episodes.is_empty() {
        return Err(Error::invalid("evaluate", "empty evaluation set"));
    }
    let scores: Vec<EpisodeScore> = episodes
        .par_iter()
        .map(|ep| {
            let _ftz = FlushDenormals::new();
            let p = predict(ep)?;
            let needle = ep.needle_object();
            let candidates: Vec<(u32, &Tensor)> = ep.objects.iter().map(|o| (o.class, &o.mask)).collect();
            let mask = binarize(&p.belief_t1, BELIEF_THRESHOLD);
            let predicted = classify_thresholded(&mask, p.belief_t1.shape(), &candidates)?;
            let pickup = predicted.class == ep.needle_class
                && pickup_metrics(&p.belief_t1, predicted.class, &ep.objects, options.pickup_radius)?.success;
            let losses = [
                soft_iou_loss(&p.belief_t1, &needle.mask)?,
                soft_iou_loss(&p.belief_t2, &ep.union_mask())?,
                soft_iou_loss(&p.belief_t3, &ep.needle_mask)?,
            ];
            Ok(EpisodeScore {
                truth: ep.needle_class,
                predicted,
                needle_iou: binary_iou(&mask, &needle.mask),
                pickup,
                losses,
                features: p.features,
            })
        })
        .collect::<Result<_>>()?;

    let mut classes: Vec<u32> = episodes.iter().flat_map(|e| e.objects.iter().map(|o| o.class)).collect();
    classes.extend(episodes.iter().map(|e| e.needle_class));
    let mut confusion = ConfusionMatrix::new(classes);
    let n = scores.len() as f64;
    let mut losses = [0.0; TASKS];
    let (mut iou, mut pickups, mut degenerate) = (0.0, 0usize, 0usize);
    for s in &scores {
        confusion.record(s.truth, s.predicted.class)?;
        iou += s.needle_iou;
        pickups += s.pickup as usize;
        degenerate += s.predicted.degenerate as usize;
        for k in 0..3 {
            losses[k] += s.losses[k] / n;
        }
    }
    let features: Vec<Vec<f64>> = scores.iter().map(|s| s.features.clone()).collect();
    let truths: Vec<u32> = scores.iter().map(|s| s.truth).collect();
    losses[3] = vector_spread_loss(&features, &truths)?;
    let k = confusion.classes.len();
    Ok(EvalReport {
        iteration,
        episodes: scores.len(),
        accuracy: confusion.accuracy(),
        mean_iou: iou / n,
        precision: (0..k).map(|i| confusion.precision(i)).collect(),
        recall: (0..k).map(|i| confusion.recall(i)).collect(),
        confusion,
        pickup_success_rate: pickups as f64 / n,
        degenerate,
        losses,
        weights: [0.0; TASKS],
    })
}

/// One learning-curve row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: u64,
    pub loss_task1: f64,
    pub loss_task2: f64,
    pub loss_task3: f64,
    pub loss_spread: f64,
    pub weight_task1: f64,
    pub weight_task2: f64,
    pub weight_task3: f64,
    pub weight_spread: f64,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub pickup_rate: f64,
}

fn format_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format { path: path.to_path_buf(), detail: e.to_string() }
}

pub fn write_learning_curve(rows: &[CurveRow], path: &Path) -> Result<()> {
    if rows.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
        return Err(Error::invalid("write_learning_curve", "iterations must increase strictly"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| format_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| format_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_learning_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| format_error(path, e))).collect()
}

/// Plateau and convergence point of a learning curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveSummary {
    /// Mean accuracy over the last quarter of the rows (at least one).
    pub plateau: f64,
    /// First iteration whose accuracy reaches 95% of the plateau.
    pub converged_at: u64,
    pub final_iteration: u64,
}

pub fn summarize_curve(rows: &[CurveRow]) -> Option<CurveSummary> {
    let last = rows.last()?;
    let tail = rows.len().div_ceil(4);
    let plateau = rows[rows.len() - tail..].iter().map(|r| r.accuracy).sum::<f64>() / tail as f64;
    let converged_at = rows
        .iter()
        .find(|r| r.accuracy >= 0.95 * plateau)
        .map_or(last.iteration, |r| r.iteration);
    Some(CurveSummary { plateau, converged_at, final_iteration: last.iteration })
}

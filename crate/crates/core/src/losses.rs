//! The four task losses and their weighted sum.
//!
//! Tasks 1-3 are soft-IoU losses on the three belief maps of an episode;
//! task 4 is the vector-spread loss over the needle features of a batch.

use crate::autodiff::{cosine_distance_with_grad, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const TASKS: usize = 4;

/// `1 - sum(p*g) / sum(p + g - p*g)`, accumulated in f64. Zero when both
/// maps are empty.
pub fn soft_iou_loss<T: Real>(belief: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if belief.shape() != target.shape() {
        return Err(Error::shape(
            "soft_iou_loss",
            format!("belief {:?} vs target {:?}", belief.shape(), target.shape()),
        ));
    }
    let (mut inter, mut union) = (0.0f64, 0.0f64);
    for (&p, &g) in belief.data().iter().zip(target.data()) {
        let (p, g) = (p.as_f64(), g.as_f64());
        inter += p * g;
        union += p + g - p * g;
    }
    Ok(if union > 0.0 { 1.0 - inter / union } else { 0.0 })
}

/// Angle between `x` and `y` divided by pi. Norms are floored at 1e-12, so
/// a zero vector yields 0.5 against anything.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::shape("cosine_distance", format!("lengths {} and {}", x.len(), y.len())));
    }
    Ok(cosine_distance_with_grad(x, y).0)
}

fn check_batch(op: &'static str, b: usize, classes: &[u32]) -> Result<()> {
    if b == 0 {
        return Err(Error::invalid(op, "empty batch"));
    }
    if classes.len() != b {
        return Err(Error::shape(op, format!("{b} feature vectors but {} class ids", classes.len())));
    }
    Ok(())
}

/// Mean over all `b*b` ordered pairs of the cosine distance for same-class
/// pairs and one minus it for different-class pairs. Diagonal pairs are
/// included.
pub fn vector_spread_loss(features: &[Vec<f64>], classes: &[u32]) -> Result<f64> {
    let (value, _) = vector_spread_with_grad(features, classes)?;
    Ok(value)
}

/// Vector-spread loss and its gradient with respect to each feature vector.
pub fn vector_spread_with_grad(features: &[Vec<f64>], classes: &[u32]) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = features.len();
    check_batch("vector_spread_loss", b, classes)?;
    let n = features[0].len();
    if n == 0 || features.iter().any(|f| f.len() != n) {
        return Err(Error::shape("vector_spread_loss", "feature vectors must share a positive length"));
    }
    let scale = 1.0 / (b * b) as f64;
    let mut total = 0.0;
    let mut grads = vec![vec![0.0; n]; b];
    for i in 0..b {
        for j in 0..b {
            let (d, gi, gj) = cosine_distance_with_grad(&features[i], &features[j]);
            let sign = if classes[i] == classes[j] { 1.0 } else { -1.0 };
            total += if sign > 0.0 { d } else { 1.0 - d };
            for k in 0..n {
                grads[i][k] += sign * scale * gi[k];
                grads[j][k] += sign * scale * gj[k];
            }
        }
    }
    Ok((total * scale, grads))
}

/// Tape form of [`vector_spread_loss`].
pub fn vector_spread<T: Real>(tape: &mut Tape<T>, features: &[Var], classes: &[u32]) -> Result<Var> {
    let b = features.len();
    check_batch("vector_spread", b, classes)?;
    let mut acc: Option<Var> = None;
    let mut different = 0usize;
    for i in 0..b {
        for j in 0..b {
            let d = tape.cosine_distance(features[i], features[j])?;
            let term = if classes[i] == classes[j] {
                d
            } else {
                different += 1;
                tape.scale(d, -T::one())
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
    }
    let offset = tape.constant(Tensor::scalar(T::lit(different as f64)));
    let sum = tape.add(acc.expect("non-empty batch"), offset)?;
    Ok(tape.scale(sum, T::lit(1.0 / (b * b) as f64)))
}

/// The four task losses, their weights and the weighted total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub losses: [f64; TASKS],
    pub weights: [f64; TASKS],
    pub total: f64,
}

impl LossBundle {
    pub fn task1_iou_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn task2_iou_loss(&self) -> f64 {
        self.losses[1]
    }

    pub fn task3_iou_loss(&self) -> f64 {
        self.losses[2]
    }

    pub fn vector_spread_loss(&self) -> f64 {
        self.losses[3]
    }
}

fn check_weights(weights: &[f64; TASKS]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::invalid("assemble_total", format!("weights must be non-negative, got {weights:?}")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("assemble_total", format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

pub fn assemble_total(losses: [f64; TASKS], weights: [f64; TASKS]) -> Result<LossBundle> {
    check_weights(&weights)?;
    let total = losses.iter().zip(&weights).map(|(l, w)| l * w).sum();
    Ok(LossBundle { losses, weights, total })
}

/// Weighted total on the tape. Weights enter as constants, so gradient
/// reaches the losses but not the weights.
pub fn weighted_total<T: Real>(tape: &mut Tape<T>, losses: [Var; TASKS], weights: [f64; TASKS]) -> Result<Var> {
    check_weights(&weights)?;
    let mut acc = tape.scale(losses[0], T::lit(weights[0]));
    for (&l, &w) in losses.iter().zip(&weights).skip(1) {
        let term = tape.scale(l, T::lit(w));
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn soft_iou_examples() {
        let g = t(&[1, 2, 2], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(soft_iou_loss(&g, &g).unwrap(), 0.0);
        assert_eq!(soft_iou_loss(&t(&[1, 2, 2], &[0.0, 0.0, 1.0, 1.0]), &g).unwrap(), 1.0);
        assert_eq!(soft_iou_loss(&t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]), &g).unwrap(), 0.5);
        let empty = Tensor::<f64>::zeros(&[1, 2, 2]);
        assert_eq!(soft_iou_loss(&empty, &empty).unwrap(), 0.0);
        assert_eq!(soft_iou_loss(&g, &empty).unwrap(), 1.0);
    }

    #[test]
    fn cosine_distance_examples() {
        let x = [1.0, -2.0, 0.5];
        assert_eq!(cosine_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.5);
        assert_eq!(cosine_distance(&x, &[-1.0, 2.0, -0.5]).unwrap(), 1.0);
        assert!(cosine_distance(&x, &[1.0]).is_err());
    }

    #[test]
    fn vector_spread_examples() {
        let same = vec![vec![1.0, 2.0]; 3];
        assert_eq!(vector_spread_loss(&same, &[4, 4, 4]).unwrap(), 0.0);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(vector_spread_loss(&ortho, &[1, 2]).unwrap(), 0.25);
        assert_eq!(vector_spread_loss(&ortho, &[1, 1]).unwrap(), 0.25);
        assert!(vector_spread_loss(&ortho, &[1]).is_err());
    }

    #[test]
    fn tape_and_direct_vector_spread_agree() {
        let f = vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7], vec![-0.4, 0.9, 0.1]];
        let classes = [1, 2, 1];
        let (direct, grads) = vector_spread_with_grad(&f, &classes).unwrap();
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = f.iter().map(|v| tape.param(&Tensor::new(&[3], v.clone()).unwrap())).collect();
        let loss = vector_spread(&mut tape, &vars, &classes).unwrap();
        assert!((tape.value(loss).data()[0] - direct).abs() < 1e-14);
        let g = tape.backward(loss).unwrap();
        for (v, want) in vars.iter().zip(&grads) {
            for (a, b) in g.get(*v).unwrap().iter().zip(want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn assemble_examples() {
        let l = [0.2, 0.4, 0.6, 0.8];
        assert_eq!(assemble_total(l, [1.0, 0.0, 0.0, 0.0]).unwrap().total, 0.2);
        assert!((assemble_total(l, [0.25; 4]).unwrap().total - 0.5).abs() < 1e-15);
        let b = assemble_total([0.3; 4], [0.1, 0.2, 0.3, 0.4]).unwrap();
        assert!((b.total - 0.3).abs() < 1e-15);
        assert!(assemble_total(l, [0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(assemble_total(l, [1.5, -0.5, 0.0, 0.0]).is_err());
    }

    #[test]
    fn weighted_total_routes_gradient_to_losses() {
        let mut tape = Tape::<f64>::new();
        let ls: Vec<Var> = [0.2, 0.4, 0.6, 0.8].iter().map(|&v| tape.param(&Tensor::scalar(v))).collect();
        let w = [0.1, 0.2, 0.3, 0.4];
        let total = weighted_total(&mut tape, [ls[0], ls[1], ls[2], ls[3]], w).unwrap();
        assert!((tape.value(total).data()[0] - 0.6).abs() < 1e-15);
        let g = tape.backward(total).unwrap();
        for (v, want) in ls.iter().zip(w) {
            assert!((g.get(*v).unwrap()[0] - want).abs() < 1e-15);
        }
    }
}

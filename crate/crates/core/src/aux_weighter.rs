//! Auxiliary network mapping loss statistics to the four task weights.
//!
//! Inputs are the current value, moving average and moving variance of
//! each loss (12 numbers). Two leaky-ReLU hidden layers feed a 4-unit
//! output whose softmax over the enabled tasks gives the weights. The
//! output layer starts at zero, so training begins from uniform weights.
//!
//! The network is trained to minimise `sum w_i * current_i / (ema_i + eps)`
//! plus a small `sum w_i ln w_i` entropy term that keeps it from collapsing
//! onto a single task.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::TASKS;
use crate::optim::{AdamState, StepOutcome};
use crate::tensor::Tensor;

pub const INPUTS: usize = 3 * TASKS;
const RATIO_EPS: f64 = 1e-8;
const AUX_ALPHA: f64 = 0.02;

/// Moving statistics of the four losses.
#[derive(Clone, Debug, PartialEq)]
pub struct LossStats {
    pub current: [f64; TASKS],
    pub ema: [f64; TASKS],
    pub variance: [f64; TASKS],
    pub decay: f64,
    /// False until the first observation, which seeds the averages.
    pub initialized: bool,
}

impl LossStats {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid("LossStats", format!("decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self {
            current: [0.0; TASKS],
            ema: [0.0; TASKS],
            variance: [0.0; TASKS],
            decay,
            initialized: false,
        })
    }

    /// Stats with an explicit prior state, as if already observed.
    pub fn with_state(ema: [f64; TASKS], variance: [f64; TASKS], decay: f64) -> Result<Self> {
        let mut s = Self::new(decay)?;
        s.current = ema;
        s.ema = ema;
        s.variance = variance;
        s.initialized = true;
        Ok(s)
    }

    pub fn update(&mut self, observed: [f64; TASKS]) -> Result<()> {
        if let Some(v) = observed.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("update_stats", format!("non-finite observation {v}")));
        }
        self.current = observed;
        if !self.initialized {
            self.ema = observed;
            self.variance = [0.0; TASKS];
            self.initialized = true;
            return Ok(());
        }
        let d = self.decay;
        for i in 0..TASKS {
            self.ema[i] = d * self.ema[i] + (1.0 - d) * observed[i];
            let dev = observed[i] - self.ema[i];
            self.variance[i] = d * self.variance[i] + (1.0 - d) * dev * dev;
        }
        Ok(())
    }

    /// Network input: currents, then averages, then variances.
    pub fn features(&self) -> [f64; INPUTS] {
        let mut f = [0.0; INPUTS];
        f[..TASKS].copy_from_slice(&self.current);
        f[TASKS..2 * TASKS].copy_from_slice(&self.ema);
        f[2 * TASKS..].copy_from_slice(&self.variance);
        f
    }

    /// `current / (ema + eps)` per task.
    pub fn normalized(&self) -> [f64; TASKS] {
        std::array::from_fn(|i| self.current[i] / (self.ema[i] + RATIO_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct AuxNet {
    /// `[w1, b1, w2, b2, w3, b3]`, dense weights stored `[out, in]`.
    params: Vec<Tensor<f64>>,
    pub entropy_beta: f64,
}

impl AuxNet {
    /// He-initialised hidden layers of `hidden` units; zero output layer.
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let he = |out: usize, fan_in: usize, rng: &mut R| {
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(&[out, fan_in], |_| n.sample(rng))
        };
        let params = vec![
            he(hidden, INPUTS, rng),
            Tensor::zeros(&[hidden]),
            he(hidden, hidden, rng),
            Tensor::zeros(&[hidden]),
            Tensor::zeros(&[TASKS, hidden]),
            Tensor::zeros(&[TASKS]),
        ];
        Self { params, entropy_beta: 0.01 }
    }

    pub fn from_params(params: Vec<Tensor<f64>>, entropy_beta: f64) -> Result<Self> {
        let shapes_ok = params.len() == 6
            && params[0].rank() == 2
            && params[0].shape()[1] == INPUTS
            && params[4].shape() == [TASKS, params[2].shape()[0]]
            && params[5].shape() == [TASKS];
        if !shapes_ok {
            return Err(Error::invalid("AuxNet", "parameters do not describe a 12 -> h -> h -> 4 network"));
        }
        Ok(Self { params, entropy_beta })
    }

    pub fn params(&self) -> &[Tensor<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<f64>] {
        &mut self.params
    }

    fn logits(&self, tape: &mut Tape<f64>, stats: &LossStats) -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.param(p)).collect();
        let x = tape.constant(Tensor::new(&[INPUTS], stats.features().to_vec())?);
        let h = tape.dense(x, vars[0], vars[1])?;
        let h = tape.leaky_relu(h, AUX_ALPHA);
        let h = tape.dense(h, vars[2], vars[3])?;
        let h = tape.leaky_relu(h, AUX_ALPHA);
        let z = tape.dense(h, vars[4], vars[5])?;
        Ok((vars, z))
    }

    /// Task weights: softmax of the outputs over the enabled tasks, zero
    /// for disabled ones.
    pub fn compute_weights(&self, stats: &LossStats, enabled: [bool; TASKS]) -> Result<[f64; TASKS]> {
        let mut tape = Tape::new();
        let (_, z) = self.logits(&mut tape, stats)?;
        masked_softmax(tape.value(z).data(), enabled)
    }

    /// Meta-objective value at the current parameters.
    pub fn meta_objective(&self, stats: &LossStats, enabled: [bool; TASKS]) -> Result<f64> {
        let w = self.compute_weights(stats, enabled)?;
        Ok(objective(&w, &stats.normalized(), enabled, self.entropy_beta))
    }

    /// Meta-objective and its gradient for every parameter tensor.
    pub fn meta_gradient(&self, stats: &LossStats, enabled: [bool; TASKS]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let (vars, z) = self.logits(&mut tape, stats)?;
        let w = masked_softmax(tape.value(z).data(), enabled)?;
        let r = stats.normalized();
        let value = objective(&w, &r, enabled, self.entropy_beta);
        // dJ/dw_i = r_i + beta (ln w_i + 1); chain through the softmax.
        let dw: Vec<f64> = (0..TASKS)
            .map(|i| if enabled[i] { r[i] + self.entropy_beta * (w[i].ln() + 1.0) } else { 0.0 })
            .collect();
        let mean: f64 = (0..TASKS).map(|i| w[i] * dw[i]).sum();
        let dz: Vec<f64> = (0..TASKS).map(|i| if enabled[i] { w[i] * (dw[i] - mean) } else { 0.0 }).collect();
        let grads = tape.backward_seeded(vec![(z, dz)])?;
        let out = vars
            .iter()
            .zip(&self.params)
            .map(|(v, p)| grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();
        Ok((value, out))
    }

    /// One Adam step on the meta-objective. The main network is untouched.
    pub fn train_step(&mut self, stats: &LossStats, enabled: [bool; TASKS], opt: &mut AdamState) -> Result<StepOutcome> {
        let (_, grads) = self.meta_gradient(stats, enabled)?;
        opt.step(&mut self.params, &grads)
    }
}

fn masked_softmax(z: &[f64], enabled: [bool; TASKS]) -> Result<[f64; TASKS]> {
    if !enabled.iter().any(|&e| e) {
        return Err(Error::invalid("compute_weights", "no task is enabled"));
    }
    let max = (0..TASKS).filter(|&i| enabled[i]).map(|i| z[i]).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = (0..TASKS).map(|i| if enabled[i] { (z[i] - max).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    Ok(std::array::from_fn(|i| e[i] / s))
}

fn objective(w: &[f64; TASKS], r: &[f64; TASKS], enabled: [bool; TASKS], beta: f64) -> f64 {
    (0..TASKS)
        .filter(|&i| enabled[i])
        .map(|i| w[i] * r[i] + beta * w[i] * w[i].ln())
        .sum()
}

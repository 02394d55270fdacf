//! The selector-gated Siamese encoder/decoder.
//!
//! One encoder serves both images. The needle pass runs it ungated, closes
//! the bottleneck with a global max pool and maps the last stack's output
//! through a 1x1 selector head to one gate logit per encoder filter. The
//! haystack pass multiplies each stack's output by its slice of the gates,
//! keeps the spatial map through the last stack and decodes it with
//! stride-2 transposed convolutions back to a full-resolution belief map.

use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub stack_filters: Vec<usize>,
    pub convs_per_stack: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub dropout_rate: f64,
    /// Zero-based index of the first stack followed by dropout.
    pub dropout_from: usize,
    pub leaky_alpha: f64,
    pub decoder_filters: Vec<usize>,
    pub decoder_kernel: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetworkConfig {
    /// Four stacks over 64x64 RGB.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            input_h: 64,
            input_w: 64,
            stack_filters: vec![8, 16, 16, 24],
            convs_per_stack: vec![2; 4],
            kernel_sizes: vec![3, 3, 3, 1],
            dropout_rate: 0.15,
            dropout_from: 2,
            leaky_alpha: 0.02,
            decoder_filters: vec![16, 16, 8],
            decoder_kernel: 4,
            seed: 0,
        }
    }

    /// Eight stacks whose filter counts sum to 4,544, over 256x256 RGB-D.
    pub fn paper() -> Self {
        let stack_filters = vec![64, 128, 256, 512, 512, 1024, 1024, 1024];
        let decoder_filters = stack_filters[..7].iter().rev().copied().collect();
        Self {
            in_channels: 4,
            input_h: 256,
            input_w: 256,
            stack_filters,
            convs_per_stack: vec![2; 8],
            kernel_sizes: vec![3, 3, 3, 3, 3, 3, 3, 1],
            dropout_rate: 0.15,
            dropout_from: 2,
            leaky_alpha: 0.02,
            decoder_filters,
            decoder_kernel: 4,
            seed: 0,
        }
    }

    pub fn stacks(&self) -> usize {
        self.stack_filters.len()
    }

    /// Length of the selector weight vector: one gate per encoder filter.
    pub fn selector_len(&self) -> usize {
        self.stack_filters.iter().sum()
    }

    /// Range of the selector vector that gates each stack.
    pub fn partition(&self) -> Vec<Range<usize>> {
        let mut off = 0;
        self.stack_filters
            .iter()
            .map(|&f| {
                off += f;
                off - f..off
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.stacks();
        let fail = |msg: String| Err(Error::Config(msg));
        if n < 2 {
            return fail(format!("need at least 2 stacks, got {n}"));
        }
        if self.convs_per_stack.len() != n || self.kernel_sizes.len() != n {
            return fail(format!(
                "stack_filters, convs_per_stack and kernel_sizes must all have {n} entries (got {}, {})",
                self.convs_per_stack.len(),
                self.kernel_sizes.len()
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if let Some(i) = self.stack_filters.iter().position(|&f| f == 0) {
            return fail(format!("stack_filters[{i}] must be positive"));
        }
        if let Some(i) = self.convs_per_stack.iter().position(|&c| c == 0) {
            return fail(format!("convs_per_stack[{i}] must be positive"));
        }
        if self.kernel_sizes[n - 1] != 1 {
            return fail(format!("the last stack must use 1x1 kernels, got {}", self.kernel_sizes[n - 1]));
        }
        if let Some(i) = self.kernel_sizes.iter().position(|&k| k % 2 == 0) {
            return fail(format!("kernel_sizes[{i}] = {} must be odd for same padding", self.kernel_sizes[i]));
        }
        let factor = 1usize << (n - 1);
        for (name, d) in [("input_h", self.input_h), ("input_w", self.input_w)] {
            if d == 0 || d % factor != 0 {
                return fail(format!(
                    "{name} = {d} must stay even at every pooled stage (divisible by {factor})"
                ));
            }
        }
        if self.decoder_filters.len() != n - 1 {
            return fail(format!(
                "decoder_filters needs one entry per pooling stage ({}), got {}",
                n - 1,
                self.decoder_filters.len()
            ));
        }
        if let Some(i) = self.decoder_filters.iter().position(|&f| f == 0) {
            return fail(format!("decoder_filters[{i}] must be positive"));
        }
        if self.decoder_kernel < 2 {
            return fail(format!("decoder_kernel must be at least 2, got {}", self.decoder_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.leaky_alpha.is_finite() && self.leaky_alpha >= 0.0) {
            return fail(format!("leaky_alpha must be non-negative, got {}", self.leaky_alpha));
        }
        Ok(())
    }

    /// Canonical `key=value` lines, one per field, in declaration order.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "in_channels={}", self.in_channels);
        let _ = writeln!(s, "input_h={}", self.input_h);
        let _ = writeln!(s, "input_w={}", self.input_w);
        let _ = writeln!(s, "stack_filters={}", list(&self.stack_filters));
        let _ = writeln!(s, "convs_per_stack={}", list(&self.convs_per_stack));
        let _ = writeln!(s, "kernel_sizes={}", list(&self.kernel_sizes));
        let _ = writeln!(s, "dropout_rate={}", self.dropout_rate);
        let _ = writeln!(s, "dropout_from={}", self.dropout_from);
        let _ = writeln!(s, "leaky_alpha={}", self.leaky_alpha);
        let _ = writeln!(s, "decoder_filters={}", list(&self.decoder_filters));
        let _ = writeln!(s, "decoder_kernel={}", self.decoder_kernel);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    /// Sets one field from its textual value. Returns `Ok(false)` when the
    /// key is not a network field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = |e: String| Error::Config(format!("{key}={value}: {e}"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|e| bad(e.to_string()));
        let real = |v: &str| v.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
        let list = |v: &str| v.split(',').map(num).collect::<Result<Vec<_>>>();
        match key {
            "in_channels" => self.in_channels = num(value)?,
            "input_h" => self.input_h = num(value)?,
            "input_w" => self.input_w = num(value)?,
            "stack_filters" => self.stack_filters = list(value)?,
            "convs_per_stack" => self.convs_per_stack = list(value)?,
            "kernel_sizes" => self.kernel_sizes = list(value)?,
            "dropout_rate" => self.dropout_rate = real(value)?,
            "dropout_from" => self.dropout_from = num(value)?,
            "leaky_alpha" => self.leaky_alpha = real(value)?,
            "decoder_filters" => self.decoder_filters = list(value)?,
            "decoder_kernel" => self.decoder_kernel = num(value)?,
            "seed" => self.seed = value.trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parses canonical text, rejecting unknown keys. Missing keys keep
    /// their desk defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
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

    /// Names of fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let (a, b) = (self.to_text(), other.to_text());
        a.lines()
            .zip(b.lines())
            .filter(|(x, y)| x != y)
            .map(|(x, y)| {
                let key = x.split('=').next().unwrap_or_default();
                format!("{key} ({} vs {})", &x[key.len() + 1..], &y[key.len() + 1..])
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    kernel: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    encoder: Vec<Vec<Layer>>,
    selector: Layer,
    decoder: Vec<Layer>,
    head: Layer,
}

/// A parameter tensor with its He fan-in.
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: Option<usize>,
}

fn plan(cfg: &NetworkConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs = Vec::new();
    let layer = |specs: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, fan_in: usize, out: usize| {
        specs.push(ParamSpec { name: format!("{name}.kernel"), shape, fan_in: Some(fan_in) });
        specs.push(ParamSpec { name: format!("{name}.bias"), shape: vec![out], fan_in: None });
        Layer { kernel: specs.len() - 2, bias: specs.len() - 1 }
    };
    let mut c = cfg.in_channels;
    let mut encoder = Vec::new();
    for (s, (&f, (&convs, &k))) in cfg
        .stack_filters
        .iter()
        .zip(cfg.convs_per_stack.iter().zip(&cfg.kernel_sizes))
        .enumerate()
    {
        let mut stack = Vec::new();
        for j in 0..convs {
            stack.push(layer(&mut specs, format!("stack{s}.conv{j}"), vec![f, c, k, k], c * k * k, f));
            c = f;
        }
        encoder.push(stack);
    }
    let f_total = cfg.selector_len();
    let selector = layer(&mut specs, "selector".into(), vec![f_total, c, 1, 1], c, f_total);
    let k = cfg.decoder_kernel;
    let mut decoder = Vec::new();
    for (l, &f) in cfg.decoder_filters.iter().enumerate() {
        // Each output pixel of a stride-2 transposed conv sees c*k*k/4 taps.
        let fan_in = (c * k * k / 4).max(1);
        decoder.push(layer(&mut specs, format!("decoder{l}"), vec![c, f, k, k], fan_in, f));
        c = f;
    }
    let head = layer(&mut specs, "head".into(), vec![1, c, 1, 1], c, 1);
    (Layout { encoder, selector, decoder, head }, specs)
}

/// Per-filter gates derived from a needle image.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorWeights {
    pub values: Vec<f32>,
    pub partition: Vec<Range<usize>>,
}

impl SelectorWeights {
    pub fn uniform(config: &NetworkConfig, value: f32) -> Self {
        Self { values: vec![value; config.selector_len()], partition: config.partition() }
    }

    pub fn slice(&self, stack: usize) -> &[f32] {
        &self.values[self.partition[stack].clone()]
    }
}

/// Belief maps and needle features of one episode, as plain tensors.
#[derive(Clone, Debug)]
pub struct EpisodeOutput {
    pub belief_t1: Tensor,
    pub belief_t2: Tensor,
    pub belief_t3: Tensor,
    pub features: Tensor,
    pub weights: SelectorWeights,
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: NetworkConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl SegNet {
    /// He-initialised network: kernels ~ N(0, 2 / fan_in), biases zero.
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let t = match spec.fan_in {
                Some(fan_in) => he_normal(&spec.shape, fan_in, rng),
                None => Tensor::zeros(&spec.shape),
            };
            names.push(spec.name);
            params.push(t);
        }
        Ok(Self { config, layout, names, params })
    }

    /// Parameters with the given values, which must match the config's
    /// declared shapes in order.
    pub fn from_params(config: NetworkConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        if specs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for (spec, p) in specs.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        let names = specs.into_iter().map(|s| s.name).collect();
        Ok(Self { config, layout, names, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Indices of the encoder kernels and biases, shared by both images.
    pub fn encoder_param_indices(&self) -> Vec<usize> {
        self.layout.encoder.iter().flatten().flat_map(|l| [l.kernel, l.bias]).collect()
    }

    /// Records every parameter on `tape`, trainable or frozen.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: bool) -> BoundNet<'_> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.cast::<T>();
                if trainable {
                    tape.param(&t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        BoundNet { net: self, vars }
    }

    fn check_image<T: Real>(&self, op: &'static str, image: &Tensor<T>) -> Result<()> {
        let want = [self.config.in_channels, self.config.input_h, self.config.input_w];
        if image.shape() != want {
            return Err(Error::shape(op, format!("image shape {:?}, network expects {want:?}", image.shape())));
        }
        Ok(())
    }

    pub fn forward_needle(
        &self,
        needle: &Tensor,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<(SelectorWeights, Tensor)> {
        self.check_image("forward_needle", needle)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(needle.clone());
        let out = bound.needle(&mut tape, x, training, rng)?;
        let weights = SelectorWeights {
            values: tape.value(out.gates).data().to_vec(),
            partition: self.config.partition(),
        };
        Ok((weights, tape.value(out.features).clone()))
    }

    pub fn forward_gated(
        &self,
        image: &Tensor,
        weights: &SelectorWeights,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Tensor> {
        self.check_image("forward_gated", image)?;
        if weights.partition != self.config.partition() || weights.values.len() != self.config.selector_len() {
            return Err(Error::shape(
                "forward_gated",
                format!(
                    "selector partition {:?} does not match the network's {:?}",
                    weights.partition,
                    self.config.partition()
                ),
            ));
        }
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let w = tape.constant(Tensor::new(&[weights.values.len()], weights.values.clone())?);
        let y = bound.haystack(&mut tape, x, Some(w), training, rng)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_ungated(&self, image: &Tensor, training: bool, rng: &mut dyn RngCore) -> Result<Tensor> {
        self.check_image("forward_ungated", image)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = bound.haystack(&mut tape, x, None, training, rng)?;
        Ok(tape.value(y).clone())
    }

    /// Pre-gate output of every encoder stack on the haystack path.
    pub fn pre_gate_activations(&self, image: &Tensor, weights: Option<&SelectorWeights>) -> Result<Vec<Tensor>> {
        self.check_image("pre_gate_activations", image)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let w = match weights {
            Some(w) => Some(tape.constant(Tensor::new(&[w.values.len()], w.values.clone())?)),
            None => None,
        };
        let mut trace = Vec::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        bound.encode(&mut tape, x, w, false, false, &mut rng, Some(&mut trace))?;
        Ok(trace.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    /// All three belief maps and the needle features, from one tape.
    pub fn episode_forward(
        &self,
        needle: &Tensor,
        haystack: &Tensor,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<EpisodeOutput> {
        self.check_image("episode_forward", needle)?;
        self.check_image("episode_forward", haystack)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.bind(&mut tape, false);
        let n = tape.constant(needle.clone());
        let h = tape.constant(haystack.clone());
        let ep = bound.episode(&mut tape, n, h, training, rng)?;
        Ok(EpisodeOutput {
            belief_t1: tape.value(ep.belief_t1).clone(),
            belief_t2: tape.value(ep.belief_t2).clone(),
            belief_t3: tape.value(ep.belief_t3).clone(),
            features: tape.value(ep.features).clone(),
            weights: SelectorWeights {
                values: tape.value(ep.gates).data().to_vec(),
                partition: self.config.partition(),
            },
        })
    }
}

fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    Tensor::from_fn(shape, |_| normal.sample(rng) as f32)
}

pub struct NeedleVars {
    /// Sigmoid-squashed gates in (0, 1), length `selector_len`.
    pub gates: Var,
    /// Raw selector-head output, used by the vector-spread loss.
    pub features: Var,
}

pub struct EpisodeVars {
    pub belief_t1: Var,
    pub belief_t2: Var,
    pub belief_t3: Var,
    pub gates: Var,
    pub features: Var,
}

/// A network whose parameters have been recorded on a tape.
pub struct BoundNet<'a> {
    net: &'a SegNet,
    vars: Vec<Var>,
}

impl BoundNet<'_> {
    /// Tape handle of each parameter, in [`SegNet::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn conv<T: Real>(&self, tape: &mut Tape<T>, x: Var, l: Layer, k: usize) -> Result<Var> {
        let y = tape.conv2d(x, self.vars[l.kernel], Some(self.vars[l.bias]), 1, (k - 1) / 2)?;
        Ok(y)
    }

    /// Runs the encoder. The needle path collapses to 1x1 before the last
    /// stack; gates, when given, scale each stack's output before dropout
    /// and pooling.
    #[allow(clippy::too_many_arguments)]
    fn encode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        mut x: Var,
        gates: Option<Var>,
        needle: bool,
        training: bool,
        rng: &mut dyn RngCore,
        mut trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let cfg = &self.net.config;
        let alpha = T::lit(cfg.leaky_alpha);
        let n = cfg.stacks();
        let partition = cfg.partition();
        for (s, stack) in self.net.layout.encoder.iter().enumerate() {
            if needle && s == n - 1 {
                let shape = tape.value(x).shape().to_vec();
                if shape[1] * shape[2] > 1 {
                    x = tape.global_max_pool(x)?;
                }
            }
            for &layer in stack {
                let y = self.conv(tape, x, layer, cfg.kernel_sizes[s])?;
                x = tape.leaky_relu(y, alpha);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(x);
            }
            if let Some(g) = gates {
                let r = &partition[s];
                let slice = tape.narrow(g, r.start, r.len())?;
                x = tape.channel_scale(x, slice)?;
            }
            if s >= cfg.dropout_from {
                x = tape.dropout(x, cfg.dropout_rate, training, rng)?;
            }
            if s + 1 < n {
                x = tape.maxpool2x2(x)?;
            }
        }
        Ok(x)
    }

    pub fn needle<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<NeedleVars> {
        let z = self.encode(tape, image, None, true, training, rng, None)?;
        let sel = self.net.layout.selector;
        let f = tape.conv2d(z, self.vars[sel.kernel], Some(self.vars[sel.bias]), 1, 0)?;
        let features = tape.reshape(f, &[self.net.config.selector_len()])?;
        let gates = tape.sigmoid(features);
        Ok(NeedleVars { gates, features })
    }

    /// Belief map of `image`, gated when `gates` is given.
    pub fn haystack<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        gates: Option<Var>,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let cfg = &self.net.config;
        let alpha = T::lit(cfg.leaky_alpha);
        let mut x = self.encode(tape, image, gates, false, training, rng, None)?;
        for &l in &self.net.layout.decoder {
            let y = tape.conv2d_transpose(x, self.vars[l.kernel], Some(self.vars[l.bias]), 2)?;
            x = tape.leaky_relu(y, alpha);
        }
        let head = self.net.layout.head;
        let logits = tape.conv2d(x, self.vars[head.kernel], Some(self.vars[head.bias]), 1, 0)?;
        Ok(tape.sigmoid(logits))
    }

    /// Needle pass, then gated haystack, ungated haystack and gated needle,
    /// all on one tape.
    pub fn episode<T: Real>(
        &self,
        tape: &mut Tape<T>,
        needle: Var,
        haystack: Var,
        training: bool,
        rng: &mut dyn RngCore,
    ) -> Result<EpisodeVars> {
        let nv = self.needle(tape, needle, training, rng)?;
        let belief_t1 = self.haystack(tape, haystack, Some(nv.gates), training, rng)?;
        let belief_t2 = self.haystack(tape, haystack, None, training, rng)?;
        let belief_t3 = self.haystack(tape, needle, Some(nv.gates), training, rng)?;
        Ok(EpisodeVars { belief_t1, belief_t2, belief_t3, gates: nv.gates, features: nv.features })
    }
}

//! Independent reference implementations shared by the integration and
//! acceptance suites. Nothing here calls into the tape's backward rules.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use siamseg::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct nested-loop cross-correlation with zero padding.
pub fn conv2d_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for c in 0..ci {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((o * ci + c) * kk + ky) * kk + kx]
                                * x.at3(c, iy as usize, ix as usize);
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(&[co, oh, ow], out).unwrap()
}

/// Transposed convolution built as the adjoint of [`conv2d_oracle`]:
/// every input cell scatters its kernel footprint into the output.
pub fn conv2d_transpose_oracle(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    stride: usize,
) -> Tensor<f64> {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kk) = (k.shape()[1], k.shape()[2]);
    let pad = (kk - 1) / 2;
    let (oh, ow) = (h * stride, w * stride);
    let mut out = vec![0.0; co * oh * ow];
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..w {
                let v = x.at3(c, y, xx);
                for o in 0..co {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let ty = (y * stride + ky) as isize - pad as isize;
                            let tx = (xx * stride + kx) as isize - pad as isize;
                            if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                continue;
                            }
                            out[(o * oh + ty as usize) * ow + tx as usize] +=
                                v * k.data()[((c * co + o) * kk + ky) * kk + kx];
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for o in 0..co {
            for v in &mut out[o * oh * ow..(o + 1) * oh * ow] {
                *v += b.data()[o];
            }
        }
    }
    Tensor::new(&[co, oh, ow], out).unwrap()
}

pub fn maxpool_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Tensor::from_fn(&[c, h / 2, w / 2], |i| {
        let (ch, rem) = (i / ((h / 2) * (w / 2)), i % ((h / 2) * (w / 2)));
        let (oy, ox) = (rem / (w / 2), rem % (w / 2));
        let mut m = f64::NEG_INFINITY;
        for dy in 0..2 {
            for dx in 0..2 {
                m = m.max(x.at3(ch, 2 * oy + dy, 2 * ox + dx));
            }
        }
        m
    })
}

pub fn channel_scale_oracle(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let plane = x.shape()[1] * x.shape()[2];
    let mut out = x.data().to_vec();
    for c in 0..x.shape()[0] {
        for i in 0..plane {
            out[c * plane + i] = x.data()[c * plane + i] * w.data()[c];
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

pub fn matvec_oracle(w: &Tensor<f64>, x: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    Tensor::from_fn(&[m], |i| {
        let mut acc = b.data()[i];
        for j in 0..n {
            acc += w.data()[i * n + j] * x.data()[j];
        }
        acc
    })
}

/// |A and B| / |A or B| for binary masks (values > 0.5 count as set).
pub fn discrete_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&p, &q) in a.iter().zip(b) {
        let (p, q) = (p > 0.5, q > 0.5);
        i += (p && q) as usize;
        u += (p || q) as usize;
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

/// arccos(x.y / sqrt(|x|^2 |y|^2)) / pi, straight from the definition.
pub fn cosine_distance_oracle(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sx: f64 = x.iter().map(|a| a * a).sum();
    let sy: f64 = y.iter().map(|a| a * a).sum();
    (dot / (sx * sy).sqrt()).clamp(-1.0, 1.0).acos() / std::f64::consts::PI
}

/// Enumerates every ordered pair (i, j), i and j over the whole batch.
pub fn vector_spread_oracle(features: &[Vec<f64>], classes: &[u32]) -> f64 {
    let b = features.len();
    let mut total = 0.0;
    for i in 0..b {
        for j in 0..b {
            let d = cosine_distance_oracle(&features[i], &features[j]);
            total += if classes[i] == classes[j] { d } else { 1.0 - d };
        }
    }
    total / (b * b) as f64
}

/// Values with pairwise gaps of at least `gap`, in random order, centred
/// around zero and kept away from zero itself.
pub fn spaced_values(n: usize, gap: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.into_iter()
        .map(|i| {
            let v = (i as f64 - n as f64 / 2.0 + 0.5) * gap + rng.random_range(-0.1..0.1) * gap;
            if v.abs() < 0.25 * gap {
                v + 0.5 * gap
            } else {
                v
            }
        })
        .collect()
}

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Contract the output with a fixed random tensor so every output element
/// contributes to the checked scalar.
fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn case(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> GradCase {
    let proj = randn(out_shape, rng);
    GradCase {
        name: name.to_string(),
        inputs,
        build: Box::new(move |t, v| {
            let out = f(t, v)?;
            project(t, out, &proj)
        }),
    }
}

/// One gradient case per differentiable primitive, drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut r = rng(seed);
    let mut cases = Vec::new();

    let (ci, co) = (r.random_range(1..=3), r.random_range(1..=3));
    let (h, w) = (r.random_range(3..=6), r.random_range(3..=6));
    cases.push(case(
        "conv2d k3 pad1",
        vec![randn(&[ci, h, w], &mut r), randn(&[co, ci, 3, 3], &mut r), randn(&[co], &mut r)],
        &[co, h, w],
        &mut r,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    ));
    let oh = (h + 2 - 3) / 2 + 1;
    let ow = (w + 2 - 3) / 2 + 1;
    cases.push(case(
        "conv2d k3 stride2",
        vec![randn(&[ci, h, w], &mut r), randn(&[co, ci, 3, 3], &mut r)],
        &[co, oh, ow],
        &mut r,
        |t, v| t.conv2d(v[0], v[1], None, 2, 1),
    ));
    cases.push(case(
        "conv2d k1",
        vec![randn(&[ci, h, w], &mut r), randn(&[co, ci, 1, 1], &mut r), randn(&[co], &mut r)],
        &[co, h, w],
        &mut r,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0),
    ));
    for k in [2usize, 3, 4] {
        let (hh, ww) = (r.random_range(1..=3), r.random_range(1..=3));
        cases.push(case(
            &format!("conv2d_transpose k{k} stride2"),
            vec![randn(&[ci, hh, ww], &mut r), randn(&[ci, co, k, k], &mut r), randn(&[co], &mut r)],
            &[co, 2 * hh, 2 * ww],
            &mut r,
            |t, v| t.conv2d_transpose(v[0], v[1], Some(v[2]), 2),
        ));
    }
    let (c, ph, pw) = (r.random_range(1..=2), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    let pool_in = Tensor::new(&[c, ph, pw], spaced_values(c * ph * pw, 0.05, &mut r)).unwrap();
    cases.push(case("maxpool2x2", vec![pool_in.clone()], &[c, ph / 2, pw / 2], &mut r, |t, v| {
        t.maxpool2x2(v[0])
    }));
    cases.push(case("global_max_pool", vec![pool_in], &[c, 1, 1], &mut r, |t, v| {
        t.global_max_pool(v[0])
    }));
    let n = r.random_range(2..=12);
    let lr_in = Tensor::new(&[n], spaced_values(n, 0.1, &mut r)).unwrap();
    cases.push(case("leaky_relu", vec![lr_in], &[n], &mut r, |t, v| Ok(t.leaky_relu(v[0], 0.02))));
    cases.push(case("sigmoid", vec![randn(&[n], &mut r)], &[n], &mut r, |t, v| Ok(t.sigmoid(v[0]))));
    let dseed = r.random::<u64>();
    cases.push(case("dropout", vec![randn(&[n], &mut r)], &[n], &mut r, move |t, v| {
        t.dropout(v[0], 0.3, true, &mut rng(dseed))
    }));
    cases.push(case(
        "channel_scale",
        vec![randn(&[ci, h, w], &mut r), randn(&[ci], &mut r)],
        &[ci, h, w],
        &mut r,
        |t, v| t.channel_scale(v[0], v[1]),
    ));
    let m = r.random_range(1..=5);
    cases.push(case(
        "dense",
        vec![randn(&[n], &mut r), randn(&[m, n], &mut r), randn(&[m], &mut r)],
        &[m],
        &mut r,
        |t, v| t.dense(v[0], v[1], v[2]),
    ));
    cases.push(case("add", vec![randn(&[n], &mut r), randn(&[n], &mut r)], &[n], &mut r, |t, v| {
        t.add(v[0], v[1])
    }));
    cases.push(case("sub", vec![randn(&[n], &mut r), randn(&[n], &mut r)], &[n], &mut r, |t, v| {
        t.sub(v[0], v[1])
    }));
    cases.push(case("mul", vec![randn(&[n], &mut r), randn(&[n], &mut r)], &[n], &mut r, |t, v| {
        t.mul(v[0], v[1])
    }));
    let f = r.random_range(-2.0..2.0);
    cases.push(case("scale", vec![randn(&[n], &mut r)], &[n], &mut r, move |t, v| Ok(t.scale(v[0], f))));
    cases.push(case("sum", vec![randn(&[n], &mut r)], &[1], &mut r, |t, v| Ok(t.sum(v[0]))));
    cases.push(case("mean", vec![randn(&[n], &mut r)], &[1], &mut r, |t, v| Ok(t.mean(v[0]))));
    cases.push(case("reshape", vec![randn(&[2, n], &mut r)], &[n, 2], &mut r, move |t, v| {
        t.reshape(v[0], &[n, 2])
    }));
    let start = r.random_range(0..n);
    let len = r.random_range(1..=n - start);
    cases.push(case("narrow", vec![randn(&[n], &mut r)], &[len], &mut r, move |t, v| {
        t.narrow(v[0], start, len)
    }));
    cases.push(case("softmax", vec![randn(&[n], &mut r)], &[n], &mut r, |t, v| t.softmax(v[0])));
    let pos = Tensor::uniform(&[n], 0.2, 3.0, &mut r);
    cases.push(case("log", vec![pos], &[n], &mut r, |t, v| t.log(v[0])));
    let (bh, bw) = (r.random_range(2..=5), r.random_range(2..=5));
    cases.push(case(
        "soft_iou_loss",
        vec![
            Tensor::uniform(&[1, bh, bw], 0.05, 0.95, &mut r),
            Tensor::uniform(&[1, bh, bw], 0.05, 0.95, &mut r),
        ],
        &[1],
        &mut r,
        |t, v| t.soft_iou_loss(v[0], v[1]),
    ));
    cases.push(case(
        "cosine_distance",
        vec![randn(&[n], &mut r), randn(&[n], &mut r)],
        &[1],
        &mut r,
        |t, v| t.cosine_distance(v[0], v[1]),
    ));
    cases
}

#[derive(Clone, Debug)]
enum Step {
    Conv { k: usize, c_out: usize, kernel: usize, bias: usize },
    ConvT { k: usize, kernel: usize, bias: usize },
    Pool,
    Leaky,
    Sigmoid,
    Gate { weights: usize },
    Dropout { seed: u64 },
    Collapse,
    Dense { weight: usize, bias: usize },
    Softmax,
    Cosine { other: usize },
}

/// A random composition of `depth` primitives over a small image, ending
/// in a scalar. The graph passes through spatial ops and may collapse to a
/// vector tail (global pool, dense, softmax, cosine distance).
pub fn random_graph_case(seed: u64, depth: usize) -> GradCase {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut c, mut h, mut w) = (r.random_range(1..=3), 2 * r.random_range(1..=3), 2 * r.random_range(1..=3));
    let mut inputs = vec![randn(&[c, h, w], &mut r)];
    let mut steps = Vec::new();
    let mut vector: Option<usize> = None;
    for _ in 0..depth {
        let choice = r.random_range(0..10);
        match (vector, choice) {
            (None, 0 | 1) => {
                let k = if r.random_bool(0.5) { 3 } else { 1 };
                let c_out = r.random_range(1..=3);
                inputs.push(Tensor::randn(&[c_out, c, k, k], (1.0 / (c * k * k) as f64).sqrt(), &mut r));
                inputs.push(randn(&[c_out], &mut r));
                steps.push(Step::Conv { k, c_out, kernel: inputs.len() - 2, bias: inputs.len() - 1 });
                c = c_out;
            }
            (None, 2) if h * w <= 16 => {
                let k = [2, 3, 4][r.random_range(0..3)];
                let c_out = r.random_range(1..=3);
                inputs.push(Tensor::randn(&[c, c_out, k, k], 0.7, &mut r));
                inputs.push(randn(&[c_out], &mut r));
                steps.push(Step::ConvT { k, kernel: inputs.len() - 2, bias: inputs.len() - 1 });
                c = c_out;
                h *= 2;
                w *= 2;
            }
            (None, 3) if h % 2 == 0 && w % 2 == 0 => {
                steps.push(Step::Pool);
                h /= 2;
                w /= 2;
            }
            (None, 4) => {
                inputs.push(randn(&[c], &mut r));
                steps.push(Step::Gate { weights: inputs.len() - 1 });
            }
            (None, 5) => {
                steps.push(Step::Collapse);
                vector = Some(c);
            }
            (Some(n), 0..=2) => {
                let m = r.random_range(1..=4);
                inputs.push(Tensor::randn(&[m, n], 0.8, &mut r));
                inputs.push(randn(&[m], &mut r));
                steps.push(Step::Dense { weight: inputs.len() - 2, bias: inputs.len() - 1 });
                vector = Some(m);
            }
            (Some(_), 3) => steps.push(Step::Softmax),
            (Some(n), 4) if n >= 2 => {
                inputs.push(randn(&[n], &mut r));
                steps.push(Step::Cosine { other: inputs.len() - 1 });
                vector = Some(1);
            }
            (_, 6 | 7) => steps.push(Step::Leaky),
            (_, 8) => steps.push(Step::Sigmoid),
            _ => steps.push(Step::Dropout { seed: r.random() }),
        }
    }
    let out_shape = match vector {
        Some(n) => vec![n],
        None => vec![c, h, w],
    };
    let proj = randn(&out_shape, &mut r);
    let name = format!("random graph seed {seed}: {steps:?}");
    GradCase {
        name,
        inputs,
        build: Box::new(move |t, v| {
            let mut x = v[0];
            for s in &steps {
                x = match *s {
                    Step::Conv { k, kernel, bias, .. } => t.conv2d(x, v[kernel], Some(v[bias]), 1, (k - 1) / 2)?,
                    Step::ConvT { kernel, bias, .. } => t.conv2d_transpose(x, v[kernel], Some(v[bias]), 2)?,
                    Step::Pool => t.maxpool2x2(x)?,
                    Step::Leaky => t.leaky_relu(x, 0.02),
                    Step::Sigmoid => t.sigmoid(x),
                    Step::Gate { weights } => t.channel_scale(x, v[weights])?,
                    Step::Dropout { seed } => t.dropout(x, 0.2, true, &mut rng(seed))?,
                    Step::Collapse => {
                        let g = t.global_max_pool(x)?;
                        let n = t.value(g).len();
                        t.reshape(g, &[n])?
                    }
                    Step::Dense { weight, bias } => t.dense(x, v[weight], v[bias])?,
                    Step::Softmax => t.softmax(x)?,
                    Step::Cosine { other } => t.cosine_distance(x, v[other])?,
                };
            }
            project(t, x, &proj)
        }),
    }
}

/// Kink margin of a case's forward pass at its nominal inputs.
pub fn case_margin(case: &GradCase) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t)).collect();
    match (case.build)(&mut tape, &vars) {
        Ok(_) => tape.kink_margin(),
        Err(_) => 0.0,
    }
}

/// First random graph at or after `seed` whose forward pass keeps every
/// non-smooth op at least `margin` away from a branch switch.
pub fn smooth_random_graph(seed: u64, depth: usize, margin: f64) -> (u64, GradCase) {
    let mut s = seed;
    loop {
        let case = random_graph_case(s, depth);
        if case_margin(&case) >= margin {
            return (s, case);
        }
        s = s.wrapping_add(1_000_003);
    }
}

/// IoU of two maps thresholded at 0.5; an empty union scores 0.
pub fn thresholded_iou(a: &Tensor, b: &Tensor) -> f64 {
    let (mut i, mut u) = (0.0, 0.0);
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let (p, q) = (p >= 0.5, q >= 0.5);
        i += (p && q) as u8 as f64;
        u += (p || q) as u8 as f64;
    }
    if u == 0.0 {
        0.0
    } else {
        i / u
    }
}

/// Every candidate's IoU, then the maximum, then the smallest id among the
/// maxima.
pub fn brute_force_classify(belief: &Tensor, candidates: &[(u32, &Tensor)]) -> (u32, f64) {
    let scores: Vec<(u32, f64)> = candidates.iter().map(|&(c, m)| (c, thresholded_iou(belief, m))).collect();
    let best = scores.iter().map(|s| s.1).fold(f64::MIN, f64::max);
    let class = scores.iter().filter(|s| s.1 == best).map(|s| s.0).min().expect("non-empty candidates");
    (class, best)
}

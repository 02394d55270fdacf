//! Procedural needle/haystack episodes and their on-disk format.
//!
//! Every object is a coloured silhouette from one of 13 shape families.
//! Its label is a filled disc of fixed radius around the pickup point, so
//! all objects carry the same number of mask pixels. Each episode draws one
//! instance colour per object; the needle image shows the same instance as
//! its haystack counterpart under different lighting, position and pose.
//!
//! Class ids run from 1 to 13. Image values are multiples of 1/255 so PNG
//! storage is lossless.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const NUM_CLASSES: u32 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Disc,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
    Star,
    LPiece,
    TPiece,
    Hexagon,
    Diamond,
    Crescent,
    Chevron,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 13] = [
        ShapeFamily::Disc,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Bar,
        ShapeFamily::Star,
        ShapeFamily::LPiece,
        ShapeFamily::TPiece,
        ShapeFamily::Hexagon,
        ShapeFamily::Diamond,
        ShapeFamily::Crescent,
        ShapeFamily::Chevron,
    ];

    /// Membership in object coordinates, where the shape spans roughly the
    /// unit disc.
    pub fn contains(self, u: f64, v: f64) -> bool {
        let r = u.hypot(v);
        match self {
            ShapeFamily::Disc => r <= 1.0,
            ShapeFamily::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            ShapeFamily::Triangle => (-0.5..=1.0).contains(&v) && u.abs() <= (1.0 - v) * 0.6,
            ShapeFamily::Ring => (0.55..=1.0).contains(&r),
            ShapeFamily::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeFamily::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
            ShapeFamily::Star => r <= 0.5 + 0.5 * (5.0 * v.atan2(u)).cos().powi(2),
            ShapeFamily::LPiece => {
                ((-0.8..=-0.2).contains(&u) && v.abs() <= 0.9) || ((0.3..=0.9).contains(&v) && u.abs() <= 0.8)
            }
            ShapeFamily::TPiece => {
                (u.abs() <= 0.9 && (-0.9..=-0.4).contains(&v)) || (u.abs() <= 0.25 && v.abs() <= 0.9)
            }
            ShapeFamily::Hexagon => (u.abs() * 0.866 + v.abs() * 0.5).max(v.abs()) <= 0.65,
            ShapeFamily::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeFamily::Crescent => r <= 1.0 && (u - 0.45).hypot(v) > 0.75,
            ShapeFamily::Chevron => {
                let k = v - u.abs() * 0.9;
                u.abs() <= 0.9 && (-0.3..=0.4).contains(&k)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectClass {
    /// 1-based class id.
    pub id: u32,
    pub family: ShapeFamily,
    /// Centre of the class hue range, in turns.
    pub hue: f64,
    /// Object radius as a multiple of the mask radius.
    pub scale: (f64, f64),
    /// Height above the table in the depth channel.
    pub depth_height: f64,
}

/// The 13 classes, indexed by `id - 1`.
pub fn catalog() -> Vec<ObjectClass> {
    ShapeFamily::ALL
        .iter()
        .enumerate()
        .map(|(i, &family)| ObjectClass {
            id: i as u32 + 1,
            family,
            hue: ((i * 5) % 13) as f64 / 13.0,
            scale: (1.2, 1.6),
            depth_height: 0.15 + 0.05 * (i % 4) as f64,
        })
        .collect()
}

pub fn object_class(id: u32) -> Result<ObjectClass> {
    if !(1..=NUM_CLASSES).contains(&id) {
        return Err(Error::invalid("object_class", format!("class id {id} outside 1..={NUM_CLASSES}")));
    }
    Ok(catalog()[id as usize - 1])
}

/// All `C(num_classes, holdout)` class-id combinations, lexicographic.
pub fn enumerate_holdout_splits(num_classes: u32, holdout: u32) -> Result<Vec<Vec<u32>>> {
    if holdout == 0 || holdout >= num_classes {
        return Err(Error::invalid(
            "enumerate_holdout_splits",
            format!("need 0 < holdout < num_classes, got {holdout} of {num_classes}"),
        ));
    }
    let mut out = Vec::new();
    let mut cur: Vec<u32> = (1..=holdout).collect();
    loop {
        out.push(cur.clone());
        // Advance the rightmost position that still has room.
        let k = holdout as usize;
        let Some(i) = (0..k).rev().find(|&i| cur[i] < num_classes - (k - 1 - i) as u32) else {
            return Ok(out);
        };
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub height: usize,
    pub width: usize,
    /// 3 for RGB, 4 adds a depth channel.
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub mask_radius_frac: f64,
    /// Instance hues are drawn within this many turns of the class hue.
    pub hue_spread: f64,
    /// Minimum hue distance between haystack instances, when achievable.
    pub min_hue_gap: f64,
    pub light: (f64, f64),
    /// Class whose objects barely rise above the table in depth.
    pub flat_depth_class: Option<u32>,
    pub placement_retries: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            min_objects: 2,
            max_objects: 6,
            mask_radius_frac: 0.07,
            hue_spread: 0.5,
            min_hue_gap: 0.08,
            light: (0.8, 1.2),
            flat_depth_class: Some(4),
            placement_retries: 200,
        }
    }
}

impl GenParams {
    pub fn mask_radius(&self) -> f64 {
        self.mask_radius_frac * self.height as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.channels != 3 && self.channels != 4 {
            return fail(format!("channels must be 3 or 4, got {}", self.channels));
        }
        if self.min_objects < 2 || self.min_objects > self.max_objects {
            return fail(format!("object range {}..={} must start at 2 or more", self.min_objects, self.max_objects));
        }
        if self.max_objects > NUM_CLASSES as usize {
            return fail(format!("at most {NUM_CLASSES} objects (one per class), got {}", self.max_objects));
        }
        if !(self.mask_radius_frac > 0.0 && self.mask_radius_frac < 0.25) {
            return fail(format!("mask_radius_frac {} outside (0, 0.25)", self.mask_radius_frac));
        }
        let reach = 1.6 * self.mask_radius() + 1.0;
        if self.height as f64 <= 2.0 * reach || self.width as f64 <= 2.0 * reach {
            return fail(format!("canvas {}x{} too small for objects of radius {reach:.1}", self.height, self.width));
        }
        Ok(())
    }
}

/// Which classes may appear where.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub needle: Vec<u32>,
    pub distractor: Vec<u32>,
    /// Classes every haystack must contain besides the needle.
    pub required: Vec<u32>,
}

impl ClassSplit {
    /// Training split: needles and distractors from the non-held-out classes.
    pub fn train(holdout: &[u32]) -> Self {
        let known: Vec<u32> = (1..=NUM_CLASSES).filter(|c| !holdout.contains(c)).collect();
        Self { needle: known.clone(), distractor: known, required: Vec::new() }
    }

    /// Evaluation split: held-out needles, every held-out class in each
    /// haystack, trained classes as distractors.
    pub fn eval(holdout: &[u32]) -> Self {
        Self {
            needle: holdout.to_vec(),
            distractor: (1..=NUM_CLASSES).collect(),
            required: holdout.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: u32,
    /// `[1, H, W]`, 1 inside the disc and 0 outside.
    pub mask: Tensor,
    /// Pixel coordinates `(x, y)`; pixel `(row, col)` is centred at
    /// `(col + 0.5, row + 0.5)`.
    pub pickup: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub seed: u64,
    pub needle_image: Tensor,
    pub needle_mask: Tensor,
    pub needle_pickup: (f64, f64),
    pub needle_class: u32,
    pub haystack_image: Tensor,
    pub objects: Vec<SceneObject>,
}

impl Episode {
    /// The haystack object of the needle's class.
    pub fn needle_object(&self) -> &SceneObject {
        self.objects
            .iter()
            .find(|o| o.class == self.needle_class)
            .expect("episode invariant: needle class is in the haystack")
    }

    /// Union of all haystack object masks.
    pub fn union_mask(&self) -> Tensor {
        let mut out = self.objects[0].mask.clone();
        for o in &self.objects[1..] {
            for (a, &b) in out.data_mut().iter_mut().zip(o.mask.data()) {
                *a = a.max(b);
            }
        }
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Dataset { episode: self.id.clone(), detail: m });
        if self.objects.len() < 2 {
            return fail(format!("{} haystack objects, need at least 2", self.objects.len()));
        }
        if !self.objects.iter().any(|o| o.class == self.needle_class) {
            return fail(format!("needle class {} missing from the haystack", self.needle_class));
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if a.mask.data().iter().zip(b.mask.data()).any(|(&x, &y)| x > 0.5 && y > 0.5) {
                    return fail(format!("masks of classes {} and {} overlap", a.class, b.class));
                }
            }
        }
        Ok(())
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f32 / 255.0
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn hue_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Smooth low-frequency texture: a coarse random grid, bilinearly upsampled.
fn background<R: Rng + ?Sized>(p: &GenParams, rng: &mut R) -> Vec<f64> {
    const GRID: usize = 5;
    let (h, w) = (p.height, p.width);
    let base = 0.25 + 0.3 * rng.random::<f64>();
    let mut img = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let coarse: Vec<f64> = (0..GRID * GRID).map(|_| rng.random()).collect();
        for y in 0..h {
            let gy = y as f64 / (h - 1) as f64 * (GRID - 1) as f64;
            let y0 = (gy as usize).min(GRID - 2);
            let fy = gy - y0 as f64;
            for x in 0..w {
                let gx = x as f64 / (w - 1) as f64 * (GRID - 1) as f64;
                let x0 = (gx as usize).min(GRID - 2);
                let fx = gx - x0 as f64;
                let at = |yy: usize, xx: usize| coarse[yy * GRID + xx];
                let v = at(y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + at(y0, x0 + 1) * (1.0 - fy) * fx
                    + at(y0 + 1, x0) * fy * (1.0 - fx)
                    + at(y0 + 1, x0 + 1) * fy * fx;
                img[(c * h + y) * w + x] = base + 0.15 * (v - 0.5);
            }
        }
    }
    img
}

struct Placed {
    class: ObjectClass,
    colour: [f64; 3],
    centre: (f64, f64),
    radius: f64,
    rotation: f64,
}

/// Places objects with non-overlapping bounding circles, restarting the
/// whole layout when a single object cannot be fitted.
fn place<R: Rng + ?Sized>(
    specs: &[(ObjectClass, [f64; 3])],
    p: &GenParams,
    rng: &mut R,
) -> Result<Vec<Placed>> {
    let r_mask = p.mask_radius();
    for _ in 0..20 {
        let mut placed: Vec<Placed> = Vec::with_capacity(specs.len());
        for &(class, colour) in specs {
            let radius = r_mask * rng.random_range(class.scale.0..=class.scale.1);
            let mut spot = None;
            for _ in 0..p.placement_retries {
                let cx = rng.random_range(radius + 1.0..p.width as f64 - radius - 1.0);
                let cy = rng.random_range(radius + 1.0..p.height as f64 - radius - 1.0);
                let free = placed
                    .iter()
                    .all(|o| (cx - o.centre.0).hypot(cy - o.centre.1) > 1.15 * (radius + o.radius) + 1.0);
                if free {
                    spot = Some((cx, cy));
                    break;
                }
            }
            let Some(centre) = spot else { break };
            placed.push(Placed { class, colour, centre, radius, rotation: rng.random_range(0.0..2.0 * PI) });
        }
        if placed.len() == specs.len() {
            return Ok(placed);
        }
    }
    Err(Error::Generation(format!(
        "could not place {} objects on a {}x{} canvas",
        specs.len(),
        p.height,
        p.width
    )))
}

fn disc_mask(centre: (f64, f64), radius: f64, p: &GenParams) -> Tensor {
    let (h, w) = (p.height, p.width);
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
        if (x - centre.0).hypot(y - centre.1) <= radius {
            1.0
        } else {
            0.0
        }
    })
}

/// Renders placed objects over a fresh background; returns the quantized
/// image and one disc mask per object.
fn render<R: Rng + ?Sized>(objects: &[Placed], p: &GenParams, rng: &mut R) -> (Tensor, Vec<Tensor>) {
    let (h, w) = (p.height, p.width);
    let mut img = background(p, rng);
    let light = rng.random_range(p.light.0..=p.light.1);
    let mut depth: Vec<f64> = if p.channels == 4 {
        let tilt = rng.random_range(-0.1..0.1);
        (0..h * w).map(|i| 0.3 + tilt * ((i / w) as f64 / h as f64 - 0.5)).collect()
    } else {
        Vec::new()
    };
    for o in objects {
        let (c, s) = (o.rotation.cos(), o.rotation.sin());
        let reach = 1.3 * o.radius;
        let y_lo = (o.centre.1 - reach).floor().max(0.0) as usize;
        let y_hi = ((o.centre.1 + reach).ceil() as usize).min(h);
        let x_lo = (o.centre.0 - reach).floor().max(0.0) as usize;
        let x_hi = ((o.centre.0 + reach).ceil() as usize).min(w);
        let height = if p.flat_depth_class == Some(o.class.id) { 0.01 } else { o.class.depth_height };
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let (dx, dy) = (x as f64 + 0.5 - o.centre.0, y as f64 + 0.5 - o.centre.1);
                let u = (c * dx + s * dy) / o.radius;
                let v = (-s * dx + c * dy) / o.radius;
                if o.class.family.contains(u, v) {
                    for ch in 0..3 {
                        img[(ch * h + y) * w + x] = o.colour[ch];
                    }
                    if p.channels == 4 {
                        depth[y * w + x] += height;
                    }
                }
            }
        }
    }
    let mut data: Vec<f32> = img.iter().map(|&v| quantize(v * light)).collect();
    data.extend(depth.iter().map(|&v| quantize(v)));
    let masks = objects.iter().map(|o| disc_mask(o.centre, p.mask_radius(), p)).collect();
    (Tensor::new(&[p.channels, h, w], data).expect("consistent image size"), masks)
}

/// Draws one episode: a needle class, a haystack of distinct classes that
/// contains it and every required class, and the matching
/// needle image.
pub fn generate_episode<R: Rng + ?Sized>(
    split: &ClassSplit,
    params: &GenParams,
    id: impl Into<String>,
    seed: u64,
    rng: &mut R,
) -> Result<Episode> {
    params.validate()?;
    if split.needle.is_empty() || split.distractor.is_empty() {
        return Err(Error::Generation("needle and distractor class sets must be non-empty".into()));
    }
    let needle_class = *split.needle.choose(rng).expect("non-empty");
    let mut classes = vec![needle_class];
    for &c in &split.required {
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    let mut pool: Vec<u32> = split.distractor.iter().copied().filter(|c| !classes.contains(c)).collect();
    pool.sort_unstable();
    pool.dedup();
    let lo = params.min_objects.max(classes.len());
    let hi = params.max_objects.max(lo).min(classes.len() + pool.len());
    if hi < lo || hi < 2 {
        return Err(Error::Generation(format!(
            "only {} distinct classes available for a haystack of at least {lo}",
            classes.len() + pool.len()
        )));
    }
    let n = rng.random_range(lo..=hi);
    pool.shuffle(rng);
    classes.extend_from_slice(&pool[..n - classes.len()]);
    classes.shuffle(rng);

    let mut hues: Vec<f64> = Vec::with_capacity(classes.len());
    let mut specs = Vec::with_capacity(classes.len());
    for &c in &classes {
        let class = object_class(c)?;
        let mut hue = 0.0;
        for attempt in 0..100 {
            hue = (class.hue + rng.random_range(-params.hue_spread..=params.hue_spread)).rem_euclid(1.0);
            if attempt == 99 || hues.iter().all(|&o| hue_distance(hue, o) >= params.min_hue_gap) {
                break;
            }
        }
        hues.push(hue);
        let colour = hsv(hue, rng.random_range(0.5..0.9), rng.random_range(0.7..1.0));
        specs.push((class, colour));
    }
    let placed = place(&specs, params, rng)?;
    let (haystack_image, masks) = render(&placed, params, rng);
    let objects: Vec<SceneObject> = placed
        .iter()
        .zip(masks)
        .map(|(o, mask)| SceneObject { class: o.class.id, mask, pickup: o.centre })
        .collect();

    let needle_spec = specs[classes.iter().position(|&c| c == needle_class).expect("needle in haystack")];
    let needle = place(&[needle_spec], params, rng)?;
    let (needle_image, mut needle_masks) = render(&needle, params, rng);

    let ep = Episode {
        id: id.into(),
        seed,
        needle_image,
        needle_mask: needle_masks.remove(0),
        needle_pickup: needle[0].centre,
        needle_class,
        haystack_image,
        objects,
    };
    ep.check_invariants()?;
    Ok(ep)
}

/// Generator for episode `index` of a dataset: an independent stream of
/// the dataset seed.
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// `count` episodes, generated in parallel, deterministic in `seed`.
pub fn generate_set(split: &ClassSplit, params: &GenParams, count: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = episode_rng(seed, i as u64);
            generate_episode(split, params, format!("{i:06}"), seed, &mut rng)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectMeta {
    class: u32,
    pickup: [f64; 2],
    mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeMeta {
    id: String,
    seed: u64,
    channels: usize,
    height: usize,
    width: usize,
    needle_class: u32,
    needle_pickup: [f64; 2],
    objects: Vec<ObjectMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    episodes: Vec<String>,
}

fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let mut bytes = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            bytes[i * c + ch] = (t.data()[ch * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        4 => image::ExtendedColorType::Rgba8,
        _ => return Err(Error::invalid("save_png", format!("{c} channels"))),
    };
    image::save_buffer_with_format(path, &bytes, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Generation(format!("{}: {e}", path.display())))
}

fn load_png(path: &Path, channels: usize, h: usize, w: usize) -> std::result::Result<Tensor, String> {
    let img = image::ImageReader::open(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .with_guessed_format()
        .map_err(|e| format!("{}: {e}", path.display()))?
        .decode()
        .map_err(|e| format!("{}: {e}", path.display()))?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(format!("{} is {}x{}, expected {h}x{w}", path.display(), img.height(), img.width()));
    }
    let bytes = match channels {
        1 => img.into_luma8().into_raw(),
        3 => img.into_rgb8().into_raw(),
        4 => img.into_rgba8().into_raw(),
        _ => return Err(format!("unsupported channel count {channels}")),
    };
    let mut data = vec![0f32; channels * h * w];
    for ch in 0..channels {
        for i in 0..h * w {
            data[ch * h * w + i] = bytes[i * channels + ch] as f32 / 255.0;
        }
    }
    Tensor::new(&[channels, h, w], data).map_err(|e| e.to_string())
}

fn write_io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Writes `dataset.json` plus `episodes/<id>/` holding `needle.png`,
/// `needle_mask.png`, `haystack.png`, `mask_<k>.png` and `meta.json`.
pub fn write_dataset(episodes: &[Episode], dir: &Path) -> Result<()> {
    let root = dir.join("episodes");
    write_io(&root, fs::create_dir_all(&root))?;
    for ep in episodes {
        let ed = root.join(&ep.id);
        write_io(&ed, fs::create_dir_all(&ed))?;
        save_png(&ed.join("needle.png"), &ep.needle_image)?;
        save_png(&ed.join("needle_mask.png"), &ep.needle_mask)?;
        save_png(&ed.join("haystack.png"), &ep.haystack_image)?;
        let mut objects = Vec::with_capacity(ep.objects.len());
        for (k, o) in ep.objects.iter().enumerate() {
            let name = format!("mask_{k}.png");
            save_png(&ed.join(&name), &o.mask)?;
            objects.push(ObjectMeta { class: o.class, pickup: [o.pickup.0, o.pickup.1], mask: name });
        }
        let s = ep.haystack_image.shape();
        let meta = EpisodeMeta {
            id: ep.id.clone(),
            seed: ep.seed,
            channels: s[0],
            height: s[1],
            width: s[2],
            needle_class: ep.needle_class,
            needle_pickup: [ep.needle_pickup.0, ep.needle_pickup.1],
            objects,
        };
        let text = serde_json::to_string_pretty(&meta).expect("serialisable");
        let path = ed.join("meta.json");
        write_io(&path, fs::write(&path, text))?;
    }
    let manifest = DatasetManifest { episodes: episodes.iter().map(|e| e.id.clone()).collect() };
    let path = dir.join("dataset.json");
    write_io(&path, fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serialisable")))
}

fn load_episode(dir: &Path, id: &str) -> Result<Episode> {
    let fail = |detail: String| Error::Dataset { episode: id.to_string(), detail };
    let ed = dir.join("episodes").join(id);
    let text = fs::read_to_string(ed.join("meta.json")).map_err(|e| fail(format!("meta.json: {e}")))?;
    let meta: EpisodeMeta = serde_json::from_str(&text).map_err(|e| fail(format!("malformed meta.json: {e}")))?;
    if meta.id != id {
        return Err(fail(format!("meta.json names episode {:?}", meta.id)));
    }
    let (c, h, w) = (meta.channels, meta.height, meta.width);
    let png = |name: &str, ch: usize| load_png(&ed.join(name), ch, h, w).map_err(fail);
    let objects = meta
        .objects
        .iter()
        .map(|o| {
            Ok(SceneObject { class: o.class, mask: png(&o.mask, 1)?, pickup: (o.pickup[0], o.pickup[1]) })
        })
        .collect::<Result<Vec<_>>>()?;
    let ep = Episode {
        id: id.to_string(),
        seed: meta.seed,
        needle_image: png("needle.png", c)?,
        needle_mask: png("needle_mask.png", 1)?,
        needle_pickup: (meta.needle_pickup[0], meta.needle_pickup[1]),
        needle_class: meta.needle_class,
        haystack_image: png("haystack.png", c)?,
        objects,
    };
    ep.check_invariants()?;
    Ok(ep)
}

/// Loads every episode listed in `dataset.json`, in listed order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Episode>> {
    let path = dir.join("dataset.json");
    let text = write_io(&path, fs::read_to_string(&path))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        episode: "<manifest>".into(),
        detail: format!("malformed dataset.json: {e}"),
    })?;
    manifest.episodes.par_iter().map(|id| load_episode(dir, id)).collect()
}

/// Number of mask files and manifest objects for one stored episode.
pub fn stored_mask_counts(dir: &Path, id: &str) -> Result<(usize, usize)> {
    let ed: PathBuf = dir.join("episodes").join(id);
    let text = write_io(&ed, fs::read_to_string(ed.join("meta.json")))?;
    let meta: EpisodeMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset { episode: id.into(), detail: e.to_string() })?;
    let files = write_io(&ed, fs::read_dir(&ed))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let n = e.file_name().to_string_lossy().into_owned();
            n.starts_with("mask_") && n.ends_with(".png")
        })
        .count();
    Ok((meta.objects.len(), files))
}

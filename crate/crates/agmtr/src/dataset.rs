//! Synthetic shape benchmark: deterministic dataset generation, fold
//! splitting, episodic sampling, and weak-label mask degradation.
//!
//! Each class is a distinct shape family drawn in a class-specific hue with
//! two-tone shading, over cluttered textured backgrounds. Shapes have real
//! parts (arms, lobes, bars) so local agents have something to specialize
//! on.

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Tensor};

pub const SHAPE_FAMILIES: [&str; 12] = [
    "disc", "ring", "bar", "cross", "ell", "tee", "u", "aitch", "wedge", "diamond", "star",
    "blob",
];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub image_size: usize,
    /// Hue jitter around the class hue, in degrees.
    pub hue_jitter: f64,
    /// Per-pixel value noise amplitude.
    pub texture_jitter: f64,
    /// Expected clutter shapes per image.
    pub clutter_density: f64,
    /// Fraction of images drawn as off-hue renditions of their class,
    /// modelling strong intra-class appearance variation.
    pub outlier_rate: f64,
    /// Expected clutter shapes hugging the foreground (inside its bounding
    /// box but outside the mask).
    pub halo_clutter: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            n_classes: 12,
            images_per_class: 200,
            image_size: 64,
            hue_jitter: 12.0,
            texture_jitter: 0.10,
            clutter_density: 3.0,
            outlier_rate: 0.0,
            halo_clutter: 2.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub class: usize,
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticDatasetSpec,
    pub images: Vec<ManifestEntry>,
}

/// 8-bit RGB image kept compact in memory; converted to a float tensor per
/// episode.
#[derive(Clone)]
pub struct ImageData {
    pub size: usize,
    pub rgb: Vec<u8>,
}

impl ImageData {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(
            vec![self.size, self.size, 3],
            self.rgb.iter().map(|&v| v as f64 / 255.0).collect(),
        )
    }
}

pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<ImageData>,
    pub masks: Vec<BinaryMask>,
    by_class: Vec<Vec<usize>>,
}

struct Geometry {
    cx: f64,
    cy: f64,
    r: f64,
    theta: f64,
}

fn inside(family: usize, x: f64, y: f64, geo: &Geometry) -> bool {
    let dx = x - geo.cx;
    let dy = y - geo.cy;
    let (sin, cos) = geo.theta.sin_cos();
    let u = (dx * cos + dy * sin) / geo.r;
    let v = (-dx * sin + dy * cos) / geo.r;
    let rho2 = u * u + v * v;
    match family {
        0 => rho2 <= 1.0,                                   // disc
        1 => (0.42 * 0.42..=1.0).contains(&rho2),           // ring
        2 => u.abs() <= 1.0 && v.abs() <= 0.48,             // bar
        3 => (u.abs() <= 1.0 && v.abs() <= 0.42) || (v.abs() <= 1.0 && u.abs() <= 0.42), // cross
        4 => {
            // L: vertical stroke plus bottom stroke
            (u >= -1.0 && u <= -0.15 && v.abs() <= 1.0)
                || (u.abs() <= 1.0 && v >= 0.2 && v <= 1.0)
        }
        5 => {
            // T: top stroke plus stem
            (v >= -1.0 && v <= -0.2 && u.abs() <= 1.0) || (u.abs() <= 0.42 && v.abs() <= 1.0)
        }
        6 => {
            // U: two stems plus bottom
            ((u - 0.62).abs() <= 0.38 && v.abs() <= 1.0)
                || ((u + 0.62).abs() <= 0.38 && v.abs() <= 1.0)
                || (u.abs() <= 1.0 && v >= 0.25 && v <= 1.0)
        }
        7 => {
            // H: two stems plus crossbar
            ((u - 0.62).abs() <= 0.38 && v.abs() <= 1.0)
                || ((u + 0.62).abs() <= 0.38 && v.abs() <= 1.0)
                || (u.abs() <= 1.0 && v.abs() <= 0.35)
        }
        8 => v.abs() <= 1.0 && u.abs() <= (v + 1.0) / 2.0,       // wedge
        9 => u.abs() + v.abs() <= 1.0,                           // diamond
        10 => {
            // five-lobed star
            let rho = rho2.sqrt();
            let phi = v.atan2(u);
            rho <= 0.62 + 0.38 * (0.5 + 0.5 * (5.0 * phi).cos())
        }
        11 => {
            // blob: chain of three discs
            let d = |ox: f64, oy: f64, rr: f64| {
                let du = u - ox;
                let dv = v - oy;
                du * du + dv * dv <= rr * rr
            };
            d(-0.4, 0.0, 0.65) || d(0.0, 0.18, 0.65) || d(0.4, -0.12, 0.65)
        }
        _ => unreachable!("unknown shape family"),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as usize % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

fn class_hue(class: usize, n_classes: usize) -> f64 {
    class as f64 * 360.0 / n_classes as f64
}

/// Draw one image and its mask for a class.
fn draw_image(
    spec: &SyntheticDatasetSpec,
    class: usize,
    rng: &mut ChaCha20Rng,
) -> (Vec<u8>, BinaryMask) {
    let size = spec.image_size;
    let family = class % SHAPE_FAMILIES.len();
    let mut hue = class_hue(class, spec.n_classes)
        + rng.gen_range(-spec.hue_jitter..=spec.hue_jitter);
    if spec.outlier_rate > 0.0 && rng.gen_bool(spec.outlier_rate) {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        hue += sign * rng.gen_range(25.0..40.0);
    }

    loop {
        let mut rgb = vec![0f64; size * size * 3];

        // textured background
        let bg_val = rng.gen_range(0.25..0.5);
        let bg_sat = rng.gen_range(0.0..0.18);
        let bg_hue = rng.gen_range(0.0..360.0);
        for p in 0..size * size {
            let noise = rng.gen_range(-spec.texture_jitter..=spec.texture_jitter);
            let c = hsv_to_rgb(bg_hue, bg_sat, (bg_val + noise).clamp(0.0, 1.0));
            rgb[p * 3..p * 3 + 3].copy_from_slice(&c);
        }

        // clutter in hues well away from the class hue
        let clutter_n = rng.gen_range(0.0..=2.0 * spec.clutter_density).round() as usize;
        for _ in 0..clutter_n {
            let mut ch = rng.gen_range(0.0..360.0);
            while circular_distance(ch, hue) < 25.0 {
                ch = rng.gen_range(0.0..360.0);
            }
            let cr = size as f64 * rng.gen_range(0.03..0.08);
            let ccx = rng.gen_range(0.0..size as f64);
            let ccy = rng.gen_range(0.0..size as f64);
            let color = hsv_to_rgb(ch, rng.gen_range(0.4..0.7), rng.gen_range(0.3..0.8));
            let rect = rng.gen_bool(0.5);
            for y in 0..size {
                for x in 0..size {
                    let dx = x as f64 - ccx;
                    let dy = y as f64 - ccy;
                    let hit = if rect {
                        dx.abs() <= cr && dy.abs() <= cr
                    } else {
                        dx * dx + dy * dy <= cr * cr
                    };
                    if hit {
                        rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
                    }
                }
            }
        }

        // foreground shape with two-tone shading; orientations stay near the
        // grid axes so straight edges survive the patch-grid quantization
        let r = size as f64 * rng.gen_range(0.30..0.40);
        let margin = (1.15 * r + 1.0).min(size as f64 / 2.0 - 1.0);
        let quarter = rng.gen_range(0..4u8) as f64;
        let geo = Geometry {
            cx: rng.gen_range(margin..size as f64 - margin),
            cy: rng.gen_range(margin..size as f64 - margin),
            r,
            theta: quarter * std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.05..0.05),
        };
        let sat = rng.gen_range(0.6..0.9);
        let val = rng.gen_range(0.65..0.95);
        let split = rng.gen_range(0.0..std::f64::consts::TAU);
        let (split_sin, split_cos) = split.sin_cos();

        let mut mask = BinaryMask::zeros(size, size);
        for y in 0..size {
            for x in 0..size {
                if inside(family, x as f64, y as f64, &geo) {
                    mask.set(y, x, 1);
                    let side = (x as f64 - geo.cx) * split_cos + (y as f64 - geo.cy) * split_sin;
                    let shade: f64 = if side >= 0.0 { val } else { (val - 0.22).max(0.1) };
                    let noise = rng.gen_range(-spec.texture_jitter..=spec.texture_jitter) * 0.5;
                    let c = hsv_to_rgb(hue, sat, (shade + noise).clamp(0.0, 1.0));
                    rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&c);
                }
            }
        }

        // distractors hugging the shape: inside its bounding box, never on it
        let halo_n = rng.gen_range(0.0..=2.0 * spec.halo_clutter).round() as usize;
        for _ in 0..halo_n {
            let mut ch = rng.gen_range(0.0..360.0);
            while circular_distance(ch, hue) < 25.0 {
                ch = rng.gen_range(0.0..360.0);
            }
            let cr = size as f64 * rng.gen_range(0.03..0.06);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let dist = rng.gen_range(0.5..1.05) * geo.r;
            let ccx = geo.cx + dist * angle.cos();
            let ccy = geo.cy + dist * angle.sin();
            let color = hsv_to_rgb(ch, rng.gen_range(0.5..0.8), rng.gen_range(0.4..0.8));
            for y in 0..size {
                for x in 0..size {
                    if mask.get(y, x) == 1 {
                        continue;
                    }
                    let dx = x as f64 - ccx;
                    let dy = y as f64 - ccy;
                    if dx * dx + dy * dy <= cr * cr {
                        rgb[(y * size + x) * 3..(y * size + x) * 3 + 3].copy_from_slice(&color);
                    }
                }
            }
        }

        if mask.count_ones() >= 12 {
            let bytes = rgb
                .into_iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            return (bytes, mask);
        }
        // degenerate geometry; redraw
    }
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Generate the dataset on disk: PNG images, PNG masks, and a JSON manifest.
/// Identical specs produce byte-identical outputs.
pub fn generate_dataset(spec: &SyntheticDatasetSpec, out: &Path) -> Result<Manifest> {
    if spec.n_classes > SHAPE_FAMILIES.len() {
        return Err(Error::Config(format!(
            "at most {} classes (one shape family each), got {}",
            SHAPE_FAMILIES.len(),
            spec.n_classes
        )));
    }
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    let mut id = 0;
    for class in 0..spec.n_classes {
        // one stream per class so classes are independent of each other
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b9).wrapping_add(class as u64));
        for _ in 0..spec.images_per_class {
            let (rgb, mask) = draw_image(spec, class, &mut rng);
            let image_name = format!("img_{id:05}.png");
            let mask_name = format!("msk_{id:05}.png");
            let size = spec.image_size as u32;
            RgbImage::from_raw(size, size, rgb)
                .expect("buffer size matches")
                .save(out.join(&image_name))?;
            GrayImage::from_raw(size, size, mask.data().iter().map(|&v| v * 255).collect())
                .expect("buffer size matches")
                .save(out.join(&mask_name))?;
            entries.push(ManifestEntry { id, class, image: image_name, mask: mask_name });
            id += 1;
        }
    }
    let manifest = Manifest { spec: spec.clone(), images: entries };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let mut images = Vec::with_capacity(manifest.images.len());
        let mut masks = Vec::with_capacity(manifest.images.len());
        let size = manifest.spec.image_size;
        for entry in &manifest.images {
            let img = image::open(dir.join(&entry.image))?.into_rgb8();
            images.push(ImageData { size, rgb: img.into_raw() });
            let m = image::open(dir.join(&entry.mask))?.into_luma8();
            masks.push(BinaryMask::new(
                size,
                size,
                m.into_raw().into_iter().map(|v| (v > 127) as u8).collect(),
            )?);
        }
        let mut by_class = vec![Vec::new(); manifest.spec.n_classes];
        for entry in &manifest.images {
            by_class[entry.class].push(entry.id);
        }
        Ok(Self { manifest, images, masks, by_class })
    }

    /// Generate directly into memory (tests and other throwaway runs).
    pub fn generate_in_memory(spec: &SyntheticDatasetSpec) -> Result<Self> {
        if spec.n_classes > SHAPE_FAMILIES.len() {
            return Err(Error::Config("too many classes".into()));
        }
        let mut entries = Vec::new();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut id = 0;
        for class in 0..spec.n_classes {
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b9).wrapping_add(class as u64));
            for _ in 0..spec.images_per_class {
                let (rgb, mask) = draw_image(spec, class, &mut rng);
                images.push(ImageData { size: spec.image_size, rgb });
                masks.push(mask);
                entries.push(ManifestEntry {
                    id,
                    class,
                    image: String::new(),
                    mask: String::new(),
                });
                id += 1;
            }
        }
        let mut by_class = vec![Vec::new(); spec.n_classes];
        for entry in &entries {
            by_class[entry.class].push(entry.id);
        }
        Ok(Self {
            manifest: Manifest { spec: spec.clone(), images: entries },
            images,
            masks,
            by_class,
        })
    }

    pub fn class_images(&self, class: usize) -> &[usize] {
        &self.by_class[class]
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.spec.n_classes
    }
}

/// Unseen classes per fold; every class is unseen in exactly one fold and
/// remainders spread over the leading folds.
pub fn split_folds(n_classes: usize, n_folds: usize) -> Vec<Vec<usize>> {
    assert!(n_folds >= 1 && n_folds <= n_classes);
    let base = n_classes / n_folds;
    let rem = n_classes % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut next = 0;
    for f in 0..n_folds {
        let len = base + usize::from(f < rem);
        folds.push((next..next + len).collect());
        next += len;
    }
    folds
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskScheme {
    Dense,
    Bbox,
    Scribble,
}

/// One few-shot task.
pub struct Episode {
    pub class_id: usize,
    pub fold_id: usize,
    pub support: Vec<(Tensor, BinaryMask)>,
    pub unlabeled: Vec<Tensor>,
    pub query_image: Tensor,
    pub query_mask: BinaryMask,
    pub item_ids: Vec<usize>,
}

/// Sample a task: a class from the phase's pool, then K supports, one query,
/// and N_u unlabeled images of the same class, all distinct.
pub fn sample_episode(
    dataset: &Dataset,
    folds: &[Vec<usize>],
    fold: usize,
    phase: Phase,
    k: usize,
    n_unlabeled: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Episode> {
    let unseen = &folds[fold];
    let pool: Vec<usize> = match phase {
        Phase::Test => unseen.clone(),
        Phase::Train => (0..dataset.n_classes()).filter(|c| !unseen.contains(c)).collect(),
    };
    let class = *pool.choose(rng).expect("class pool is never empty");
    let candidates = dataset.class_images(class);
    let needed = k + 1 + n_unlabeled;
    if candidates.len() < needed {
        return Err(Error::InsufficientImages {
            class,
            available: candidates.len(),
            needed,
        });
    }
    let mut picked = candidates.to_vec();
    picked.shuffle(rng);
    picked.truncate(needed);

    let support = picked[..k]
        .iter()
        .map(|&id| (dataset.images[id].to_tensor(), dataset.masks[id].clone()))
        .collect();
    let query_id = picked[k];
    let unlabeled = picked[k + 1..]
        .iter()
        .map(|&id| dataset.images[id].to_tensor())
        .collect();
    Ok(Episode {
        class_id: class,
        fold_id: fold,
        support,
        unlabeled,
        query_image: dataset.images[query_id].to_tensor(),
        query_mask: dataset.masks[query_id].clone(),
        item_ids: picked,
    })
}

/// Replace a dense mask by a cheaper annotation scheme.
pub fn degrade_mask(mask: &BinaryMask, scheme: MaskScheme, rng: &mut ChaCha20Rng) -> Result<BinaryMask> {
    if mask.count_ones() == 0 {
        return Err(Error::EmptyMask);
    }
    match scheme {
        MaskScheme::Dense => Ok(mask.clone()),
        MaskScheme::Bbox => {
            let (h, w) = (mask.height(), mask.width());
            let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
            for y in 0..h {
                for x in 0..w {
                    if mask.get(y, x) == 1 {
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
            let mut out = BinaryMask::zeros(h, w);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    out.set(y, x, 1);
                }
            }
            Ok(out)
        }
        MaskScheme::Scribble => {
            let (h, w) = (mask.height(), mask.width());
            let fg: Vec<(usize, usize)> = (0..h * w)
                .filter(|&p| mask.data()[p] == 1)
                .map(|p| (p / w, p % w))
                .collect();
            let target_len = ((fg.len() as f64 * 0.2).round() as usize).max(1);
            let mut out = BinaryMask::zeros(h, w);
            let (mut y, mut x) = *fg.choose(rng).expect("nonempty foreground");
            out.set(y, x, 1);
            let mut drawn = 1;
            let mut since_restart = 0;
            while drawn < target_len {
                // stroke segments: wander preferring fresh ground, hop to a
                // new start every so often so the scribble spans the object
                if since_restart >= 30 {
                    let &(ny, nx) = fg.choose(rng).expect("nonempty foreground");
                    y = ny;
                    x = nx;
                    since_restart = 0;
                }
                let mut fresh: Vec<(usize, usize)> = Vec::with_capacity(4);
                let mut any: Vec<(usize, usize)> = Vec::with_capacity(4);
                let mut consider = |ny: usize, nx: usize, mask: &BinaryMask, out: &BinaryMask| {
                    if mask.get(ny, nx) == 1 {
                        if out.get(ny, nx) == 0 {
                            fresh.push((ny, nx));
                        }
                        any.push((ny, nx));
                    }
                };
                if y > 0 {
                    consider(y - 1, x, mask, &out);
                }
                if y + 1 < h {
                    consider(y + 1, x, mask, &out);
                }
                if x > 0 {
                    consider(y, x - 1, mask, &out);
                }
                if x + 1 < w {
                    consider(y, x + 1, mask, &out);
                }
                let step = if !fresh.is_empty() {
                    fresh.choose(rng)
                } else {
                    any.choose(rng)
                };
                match step {
                    Some(&(ny, nx)) => {
                        y = ny;
                        x = nx;
                        since_restart += 1;
                    }
                    None => {
                        let &(ny, nx) = fg.choose(rng).expect("nonempty foreground");
                        y = ny;
                        x = nx;
                        since_restart = 0;
                    }
                }
                if out.get(y, x) == 0 {
                    out.set(y, x, 1);
                    drawn += 1;
                }
            }
            Ok(out)
        }
    }
}

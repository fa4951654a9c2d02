//! Procedural street scenes, bootstrapped training samples and the on-disk
//! dataset layout.

use crate::geometry::BBox;
use crate::raster::{self, paste, to_u8};
use image::{ImageBuffer, Rgb, Rgb32FImage, RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const VEHICLE: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["vehicle", "pedestrian"];
pub const ANNOTATION_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid scene configuration: {0}")]
    InvalidConfig(String),
    #[error("seed {seed}: could only place {placed} of {requested} objects")]
    Unsatisfiable {
        seed: u64,
        placed: usize,
        requested: usize,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: field `{field}`: {message}", path.display())]
    Annotation {
        path: PathBuf,
        field: String,
        message: String,
    },
    #[error("{}: unsupported format_version {found} (supported: {supported})", path.display())]
    UnsupportedVersion {
        path: PathBuf,
        found: u64,
        supported: u32,
    },
    #[error("{}: {reason}", path.display())]
    Invalid { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class: usize,
}

/// An object removed from the scene, kept as an RGBA patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub patch: RgbaImage,
    pub bbox: BBox,
    pub class: usize,
}

impl Target {
    pub fn object(&self) -> SceneObject {
        SceneObject {
            bbox: self.bbox,
            class: self.class,
        }
    }
}

/// Object-subtracted image with the remaining objects, the removed targets
/// and the hole left by each target (`holes[k]` belongs to `targets[k]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    pub background: RgbImage,
    pub scene_objects: Vec<SceneObject>,
    pub targets: Vec<Target>,
    pub holes: Vec<BBox>,
}

/// One training input: the background with a subset of targets pasted back.
/// Pasted targets join the scene objects; the rest remain to be placed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: RgbImage,
    pub scene_objects: Vec<SceneObject>,
    pub targets: Vec<Target>,
    pub recomposed: Vec<usize>,
}

/// Horizontal bands of a street scene as fractions of the image height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLayout {
    pub building_bottom: f64,
    pub upper_walk_bottom: f64,
    pub lane_split: f64,
    pub road_bottom: f64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            building_bottom: 0.25,
            upper_walk_bottom: 0.40,
            lane_split: 0.64,
            road_bottom: 0.88,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Anchor {
    /// The whole box lies between `top` and `bottom`.
    Inside { top: f64, bottom: f64 },
    /// The bottom edge lies between `min` and `max`.
    Feet { min: f64, max: f64 },
}

/// Where objects of one class may stand and how large they are there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub class: usize,
    anchor: Anchor,
    height: (f64, f64),
    aspect: (f64, f64),
}

impl Band {
    /// Whether `bbox` is a plausible placement in this band, allowing one
    /// pixel of slack for rounding.
    pub fn admits(&self, bbox: &BBox, class: usize, image_size: u32) -> bool {
        if class != self.class {
            return false;
        }
        let eps = 1.0 / image_size as f64 + 1e-9;
        let c = bbox.to_corners();
        let height_ok = bbox.h >= self.height.0 - eps && bbox.h <= self.height.1 + eps;
        let place_ok = match self.anchor {
            Anchor::Inside { top, bottom } => c.y0 >= top - eps && c.y1 <= bottom + eps,
            Anchor::Feet { min, max } => c.y1 >= min - eps && c.y1 <= max + eps,
        };
        height_ok && place_ok
    }
}

impl SceneLayout {
    pub fn bands(&self) -> Vec<Band> {
        let lane_h = |a: f64, b: f64| b - a;
        let far = lane_h(self.upper_walk_bottom, self.lane_split);
        let near = lane_h(self.lane_split, self.road_bottom);
        let walk = self.upper_walk_bottom - self.building_bottom;
        vec![
            Band {
                class: PEDESTRIAN,
                anchor: Anchor::Feet {
                    min: self.upper_walk_bottom - 0.4 * walk,
                    max: self.upper_walk_bottom,
                },
                height: (0.22, 0.28),
                aspect: (0.38, 0.5),
            },
            Band {
                class: VEHICLE,
                anchor: Anchor::Inside {
                    top: self.upper_walk_bottom,
                    bottom: self.lane_split,
                },
                height: (0.58 * far, 0.8 * far),
                aspect: (1.6, 2.2),
            },
            Band {
                class: VEHICLE,
                anchor: Anchor::Inside {
                    top: self.lane_split,
                    bottom: self.road_bottom,
                },
                height: (0.75 * near, 0.96 * near),
                aspect: (1.6, 2.2),
            },
            Band {
                class: PEDESTRIAN,
                anchor: Anchor::Feet {
                    min: 1.0 - 0.5 * (1.0 - self.road_bottom),
                    max: 1.0,
                },
                height: (0.26, 0.33),
                aspect: (0.38, 0.5),
            },
        ]
    }

    /// Whether any band of `class` admits `bbox`.
    pub fn admits(&self, bbox: &BBox, class: usize, image_size: u32) -> bool {
        self.bands()
            .iter()
            .any(|b| b.admits(bbox, class, image_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    pub image_size: u32,
    /// Inclusive range of removed targets per scene.
    pub targets: [usize; 2],
    /// Inclusive range of objects left in the scene.
    pub scene_objects: [usize; 2],
    pub vehicle_fraction: f64,
    /// Pixels by which each hole extends beyond its target.
    pub hole_dilation: u32,
    /// Blur applied to the reconstructed background inside holes.
    pub fill_blur: f64,
    /// Amplitude of the uniform noise left inside holes.
    pub fill_noise: f64,
    /// Blur applied to the whole object-subtracted image.
    pub smoothing_sigma: f64,
    pub max_attempts: usize,
    /// Fresh layouts tried before giving up on a seed.
    pub layout_restarts: usize,
    pub layout: SceneLayout,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            targets: [1, 3],
            scene_objects: [0, 2],
            vehicle_fraction: 0.55,
            hole_dilation: 1,
            fill_blur: 1.0,
            fill_noise: 0.15,
            smoothing_sigma: 0.5,
            max_attempts: 200,
            layout_restarts: 20,
            layout: SceneLayout::default(),
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.image_size < 16 {
            return bad(format!(
                "image_size must be at least 16, got {}",
                self.image_size
            ));
        }
        if self.targets[0] < 1 || self.targets[0] > self.targets[1] {
            return bad(format!(
                "targets range {:?} must satisfy 1 <= min <= max",
                self.targets
            ));
        }
        if self.scene_objects[0] > self.scene_objects[1] {
            return bad(format!(
                "scene_objects range {:?} has min > max",
                self.scene_objects
            ));
        }
        if !(0.0..=1.0).contains(&self.vehicle_fraction) {
            return bad(format!(
                "vehicle_fraction {} outside [0,1]",
                self.vehicle_fraction
            ));
        }
        for (name, v) in [
            ("fill_blur", self.fill_blur),
            ("fill_noise", self.fill_noise),
            ("smoothing_sigma", self.smoothing_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        let l = &self.layout;
        let ordered = 0.0 < l.building_bottom
            && l.building_bottom < l.upper_walk_bottom
            && l.upper_walk_bottom < l.lane_split
            && l.lane_split < l.road_bottom
            && l.road_bottom < 1.0;
        if !ordered {
            return bad("layout bands must be strictly increasing inside (0,1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelRect {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
}

impl PixelRect {
    fn grown(&self, by: u32, size: u32) -> PixelRect {
        PixelRect {
            x0: self.x0.saturating_sub(by),
            y0: self.y0.saturating_sub(by),
            x1: (self.x1 + by).min(size),
            y1: (self.y1 + by).min(size),
        }
    }

    fn overlaps(&self, o: &PixelRect) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }

    fn bbox(&self, size: u32) -> BBox {
        BBox::from_pixel_rect(self.x0, self.y0, self.x1, self.y1, size, size)
            .expect("rect inside image")
    }
}

struct Placed {
    rect: PixelRect,
    class: usize,
    patch: RgbaImage,
}

fn sample_rect(band: &Band, size: u32, rng: &mut ChaCha8Rng) -> Option<PixelRect> {
    let s = size as f64;
    let h = (rng.random_range(band.height.0..=band.height.1) * s)
        .round()
        .max(2.0) as u32;
    let w = ((h as f64 * rng.random_range(band.aspect.0..=band.aspect.1)).round() as u32).max(2);
    if w >= size || h >= size {
        return None;
    }
    let (lo, hi) = match band.anchor {
        Anchor::Inside { top, bottom } => {
            let lo = (top * s).ceil() as i64;
            (lo, (bottom * s).floor() as i64 - h as i64)
        }
        Anchor::Feet { min, max } => {
            let lo = ((min * s).ceil() as i64 - h as i64).max(0);
            (lo, (max * s).floor() as i64 - h as i64)
        }
    };
    if hi < lo {
        return None;
    }
    let y0 = rng.random_range(lo..=hi) as u32;
    let x0 = rng.random_range(0..=size - w);
    Some(PixelRect {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    })
}

fn palette_color(rng: &mut ChaCha8Rng, palette: &[[f32; 3]]) -> [f32; 3] {
    let base = palette[rng.random_range(0..palette.len())];
    let jitter: f32 = rng.random_range(-0.05..0.05);
    base.map(|v| (v + jitter).clamp(0.0, 1.0))
}

fn rgba(c: [f32; 3]) -> Rgba<u8> {
    Rgba([
        (c[0] * 255.0).round() as u8,
        (c[1] * 255.0).round() as u8,
        (c[2] * 255.0).round() as u8,
        255,
    ])
}

fn render_vehicle(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbaImage {
    const BODY: [[f32; 3]; 7] = [
        [0.75, 0.12, 0.10],
        [0.12, 0.25, 0.70],
        [0.92, 0.92, 0.90],
        [0.10, 0.10, 0.12],
        [0.90, 0.75, 0.10],
        [0.15, 0.50, 0.20],
        [0.60, 0.62, 0.65],
    ];
    let body = palette_color(rng, &BODY);
    let cabin = rng.random_range(0.12..0.25f64);
    RgbaImage::from_fn(w, h, |x, y| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        if v < 0.4 && !(cabin..=1.0 - cabin).contains(&u) {
            return Rgba([0, 0, 0, 0]);
        }
        if (0.08..0.36).contains(&v)
            && (cabin + 0.06..0.94 - cabin).contains(&u)
            && !(0.47..0.53).contains(&u)
        {
            return rgba([0.55, 0.68, 0.82]);
        }
        if v > 0.78 && ((0.1..0.3).contains(&u) || (0.7..0.9).contains(&u)) {
            return rgba([0.06, 0.06, 0.06]);
        }
        let shade = 0.85 + 0.15 * (1.0 - v) as f32;
        rgba(body.map(|c| c * shade))
    })
}

fn render_pedestrian(w: u32, h: u32, rng: &mut ChaCha8Rng) -> RgbaImage {
    const SKIN: [[f32; 3]; 3] = [[0.95, 0.80, 0.65], [0.70, 0.50, 0.35], [0.45, 0.30, 0.20]];
    const CLOTH: [[f32; 3]; 6] = [
        [0.85, 0.20, 0.20],
        [0.20, 0.35, 0.80],
        [0.95, 0.95, 0.95],
        [0.15, 0.15, 0.15],
        [0.90, 0.80, 0.20],
        [0.30, 0.65, 0.35],
    ];
    let skin = palette_color(rng, &SKIN);
    let shirt = palette_color(rng, &CLOTH);
    let pants = palette_color(rng, &CLOTH);
    RgbaImage::from_fn(w, h, |x, y| {
        let u = (x as f64 + 0.5) / w as f64;
        let v = (y as f64 + 0.5) / h as f64;
        if v < 0.2 {
            return if (0.28..=0.72).contains(&u) {
                rgba(skin)
            } else {
                Rgba([0, 0, 0, 0])
            };
        }
        if v < 0.58 {
            return rgba(shirt);
        }
        if (0.1..0.46).contains(&u) || (0.54..0.9).contains(&u) {
            rgba(pants)
        } else {
            Rgba([0, 0, 0, 0])
        }
    })
}

fn render_background(layout: &SceneLayout, size: u32, rng: &mut ChaCha8Rng) -> Rgb32FImage {
    let s = size as f64;
    let row = |f: f64| (f * s).round() as u32;
    let (bb, wb, ls, rb) = (
        row(layout.building_bottom),
        row(layout.upper_walk_bottom),
        row(layout.lane_split),
        row(layout.road_bottom),
    );
    let sky: [f32; 3] = [
        rng.random_range(0.55..0.7),
        rng.random_range(0.7..0.8),
        rng.random_range(0.85..0.95),
    ];
    let mut buildings = Vec::new();
    let mut x = 0u32;
    while x < size {
        let w = rng.random_range(size / 8..=size / 3).max(2);
        let top = rng.random_range(0.0..0.6 * layout.building_bottom);
        let tone: f32 = rng.random_range(0.3..0.7);
        let warm: f32 = rng.random_range(-0.08..0.08);
        buildings.push((x, x + w, row(top), [tone + warm, tone, tone - warm]));
        x += w;
    }
    let walk: f32 = rng.random_range(0.58..0.68);
    let road: f32 = rng.random_range(0.22..0.32);
    let dash_offset = rng.random_range(0..10u32);
    let tile_offset = rng.random_range(0..8u32);
    let mut img = ImageBuffer::from_fn(size, size, |x, y| {
        let c: [f32; 3] = if y < bb {
            match buildings
                .iter()
                .find(|(x0, x1, _, _)| (*x0..*x1).contains(&x))
            {
                Some(&(x0, _, top, color)) if y >= top => {
                    let window = (x - x0) % 4 >= 2 && (y - top) % 5 >= 2 && x - x0 >= 1;
                    if window {
                        [0.85, 0.85, 0.65]
                    } else {
                        color
                    }
                }
                _ => {
                    let t = y as f32 / bb.max(1) as f32;
                    sky.map(|v| v + 0.08 * t)
                }
            }
        } else if y < wb || y >= rb {
            let seam = (x + tile_offset) % 8 == 0 || y == wb - 1 || y == rb;
            let v = if seam { walk - 0.12 } else { walk };
            [v, v, v - 0.02]
        } else if y == ls && (x + dash_offset) % 10 < 6 {
            [0.9, 0.9, 0.85]
        } else {
            [road, road, road + 0.02]
        };
        Rgb(c)
    });
    for p in img.pixels_mut() {
        let n: f32 = rng.random_range(-0.02..0.02);
        p.0 = p.0.map(|v| (v + n).clamp(0.0, 1.0));
    }
    img
}

fn paste_float(img: &mut Rgb32FImage, patch: &RgbaImage, x0: u32, y0: u32) {
    for (px, py, p) in patch.enumerate_pixels() {
        let a = p[3] as f32 / 255.0;
        let dst = img.get_pixel_mut(x0 + px, y0 + py);
        for c in 0..3 {
            dst[c] = a * p[c] as f32 / 255.0 + (1.0 - a) * dst[c];
        }
    }
}

/// Places `requested` non-overlapping objects, or reports how many fit.
fn place_objects(
    config: &SyntheticSceneConfig,
    bands: &[Band],
    requested: usize,
    rng: &mut ChaCha8Rng,
) -> std::result::Result<Vec<Placed>, usize> {
    let size = config.image_size;
    let gap = 2 * config.hole_dilation + 1;
    let mut placed: Vec<Placed> = Vec::with_capacity(requested);
    for _ in 0..requested {
        let class = if rng.random_bool(config.vehicle_fraction) {
            VEHICLE
        } else {
            PEDESTRIAN
        };
        let candidates: Vec<&Band> = bands.iter().filter(|b| b.class == class).collect();
        let mut found = None;
        for _ in 0..config.max_attempts {
            let band = candidates[rng.random_range(0..candidates.len())];
            let Some(rect) = sample_rect(band, size, rng) else {
                continue;
            };
            let grown = rect.grown(gap, size);
            if placed.iter().all(|p| !p.rect.overlaps(&grown)) {
                found = Some(rect);
                break;
            }
        }
        let Some(rect) = found else {
            return Err(placed.len());
        };
        let (w, h) = (rect.x1 - rect.x0, rect.y1 - rect.y0);
        let patch = match class {
            VEHICLE => render_vehicle(w, h, rng),
            _ => render_pedestrian(w, h, rng),
        };
        placed.push(Placed { rect, class, patch });
    }
    Ok(placed)
}

/// Renders a street scene, removes the target objects and fills their
/// holes with an imperfect reconstruction of the background.
pub fn generate_scene(config: &SyntheticSceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_targets = rng.random_range(config.targets[0]..=config.targets[1]);
    let n_scene = rng.random_range(config.scene_objects[0]..=config.scene_objects[1]);
    let requested = n_targets + n_scene;
    let bands = config.layout.bands();
    let mut best = 0;
    let mut layout = None;
    for _ in 0..config.layout_restarts.max(1) {
        match place_objects(config, &bands, requested, &mut rng) {
            Ok(p) => {
                layout = Some(p);
                break;
            }
            Err(placed) => best = best.max(placed),
        }
    }
    let Some(placed) = layout else {
        return Err(DataError::Unsatisfiable {
            seed,
            placed: best,
            requested,
        });
    };

    let clean = render_background(&config.layout, size, &mut rng);
    let mut original = clean.clone();
    for p in &placed {
        paste_float(&mut original, &p.patch, p.rect.x0, p.rect.y0);
    }
    let fill =
        raster::gaussian_smooth(&clean, config.fill_blur).map_err(DataError::InvalidArgument)?;
    let mut filled = original;
    let mut holes = Vec::with_capacity(n_targets);
    for p in &placed[..n_targets] {
        let hole = p.rect.grown(config.hole_dilation, size);
        for y in hole.y0..hole.y1 {
            for x in hole.x0..hole.x1 {
                let n: f32 = rng.random_range(-1.0..1.0) * config.fill_noise as f32;
                let tint: [f32; 3] = [
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                ];
                let src = fill.get_pixel(x, y).0;
                let mut out = [0.0f32; 3];
                for c in 0..3 {
                    out[c] = (src[c] + n * (1.0 + tint[c])).clamp(0.0, 1.0);
                }
                filled.put_pixel(x, y, Rgb(out));
            }
        }
        holes.push(hole.bbox(size));
    }
    let background = to_u8(
        &raster::gaussian_smooth(&filled, config.smoothing_sigma)
            .map_err(DataError::InvalidArgument)?,
    );
    let targets = placed[..n_targets]
        .iter()
        .map(|p| Target {
            patch: p.patch.clone(),
            bbox: p.rect.bbox(size),
            class: p.class,
        })
        .collect();
    let scene_objects = placed[n_targets..]
        .iter()
        .map(|p| SceneObject {
            bbox: p.rect.bbox(size),
            class: p.class,
        })
        .collect();
    Ok(Scene {
        id: format!("seed-{seed}"),
        background,
        scene_objects,
        targets,
        holes,
    })
}

/// Generates `count` scenes with ids `000000, 000001, ...`; scene `i` uses
/// seed `base_seed + i`.
pub fn generate_dataset(
    config: &SyntheticSceneConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<Scene>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut scene = generate_scene(config, base_seed.wrapping_add(i as u64))?;
            scene.id = format!("{i:06}");
            Ok(scene)
        })
        .collect()
}

/// Pastes the targets listed in `subset` back into their original boxes.
pub fn recompose(scene: &Scene, subset: &[usize]) -> Result<TrainingSample> {
    let mut chosen = vec![false; scene.targets.len()];
    for &k in subset {
        if k >= chosen.len() {
            return Err(DataError::InvalidArgument(format!(
                "target index {k} out of range for {} targets",
                chosen.len()
            )));
        }
        chosen[k] = true;
    }
    let mut image = scene.background.clone();
    let mut scene_objects = scene.scene_objects.clone();
    let mut targets = Vec::new();
    let mut recomposed = Vec::new();
    for (k, t) in scene.targets.iter().enumerate() {
        if chosen[k] {
            paste(&mut image, &t.patch, &t.bbox);
            scene_objects.push(t.object());
            recomposed.push(k);
        } else {
            targets.push(t.clone());
        }
    }
    Ok(TrainingSample {
        image,
        scene_objects,
        targets,
        recomposed,
    })
}

/// Recomposes a subset drawn uniformly from all subsets of the targets
/// except the full set, so at least one target always remains.
pub fn bootstrap_augment(scene: &Scene, rng: &mut impl Rng) -> Result<TrainingSample> {
    let t = scene.targets.len();
    let options = enumerate_augmentations(t)?;
    let mask = rng.random_range(0..options);
    let subset: Vec<usize> = (0..t).filter(|k| mask >> k & 1 == 1).collect();
    recompose(scene, &subset)
}

/// Number of distinct training samples one scene with `t` targets yields.
pub fn enumerate_augmentations(t: usize) -> Result<u64> {
    if t < 1 {
        return Err(DataError::InvalidArgument(
            "a scene needs at least one target to augment".into(),
        ));
    }
    if t > 63 {
        return Err(DataError::InvalidArgument(format!(
            "{t} targets overflow the subset count"
        )));
    }
    Ok((1u64 << t) - 1)
}

/// Gaussian smoothing of a float image with clamped edges.
pub fn gaussian_smooth<P>(
    img: &ImageBuffer<P, Vec<f32>>,
    sigma: f64,
) -> Result<ImageBuffer<P, Vec<f32>>>
where
    P: image::Pixel<Subpixel = f32>,
{
    raster::gaussian_smooth(img, sigma).map_err(DataError::InvalidArgument)
}

#[derive(Serialize, Deserialize)]
struct AnnotationTarget {
    patch: String,
    #[serde(rename = "box")]
    bbox: BBox,
    class: usize,
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    format_version: u32,
    image_size: [u32; 2],
    scene_objects: Vec<SceneObject>,
    targets: Vec<AnnotationTarget>,
    holes: Vec<BBox>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn img_err(path: &Path) -> impl FnOnce(image::ImageError) -> DataError + '_ {
    move |source| DataError::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `scenes/<id>/{background.png, objects/<k>.png, annotation.json}`.
pub fn save_dataset(dir: &Path, scenes: &[Scene]) -> Result<()> {
    for scene in scenes {
        let root = dir.join("scenes").join(&scene.id);
        let objects = root.join("objects");
        std::fs::create_dir_all(&objects).map_err(io_err(&objects))?;
        let bg = root.join("background.png");
        scene.background.save(&bg).map_err(img_err(&bg))?;
        let mut targets = Vec::with_capacity(scene.targets.len());
        for (k, t) in scene.targets.iter().enumerate() {
            let rel = format!("objects/{k}.png");
            let path = root.join(&rel);
            t.patch.save(&path).map_err(img_err(&path))?;
            targets.push(AnnotationTarget {
                patch: rel,
                bbox: t.bbox,
                class: t.class,
            });
        }
        let ann = Annotation {
            format_version: ANNOTATION_VERSION,
            image_size: [scene.background.width(), scene.background.height()],
            scene_objects: scene.scene_objects.clone(),
            targets,
            holes: scene.holes.clone(),
        };
        let path = root.join("annotation.json");
        let text = serde_json::to_string_pretty(&ann).expect("annotation serializes");
        std::fs::write(&path, text + "\n").map_err(io_err(&path))?;
    }
    Ok(())
}

fn read_png(path: &Path) -> Result<image::DynamicImage> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    image::open(path).map_err(img_err(path))
}

/// Loads one scene directory.
pub fn load_scene(root: &Path) -> Result<Scene> {
    let path = root.join("annotation.json");
    if !path.is_file() {
        return Err(DataError::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| DataError::Annotation {
            path: path.clone(),
            field: "<root>".into(),
            message: e.to_string(),
        })?;
    match value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
    {
        Some(v) if v == ANNOTATION_VERSION as u64 => {}
        Some(found) => {
            return Err(DataError::UnsupportedVersion {
                path,
                found,
                supported: ANNOTATION_VERSION,
            })
        }
        None => {
            return Err(DataError::Annotation {
                path,
                field: "format_version".into(),
                message: "missing or not an unsigned integer".into(),
            })
        }
    }
    let ann: Annotation =
        serde_path_to_error::deserialize(value).map_err(|e| DataError::Annotation {
            path: path.clone(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    if ann.holes.len() != ann.targets.len() {
        return Err(DataError::Invalid {
            path,
            reason: format!(
                "{} holes for {} targets",
                ann.holes.len(),
                ann.targets.len()
            ),
        });
    }
    let bg_path = root.join("background.png");
    let background = read_png(&bg_path)?.to_rgb8();
    if [background.width(), background.height()] != ann.image_size {
        return Err(DataError::Invalid {
            path: bg_path,
            reason: format!(
                "image is {}x{} but annotation says {}x{}",
                background.width(),
                background.height(),
                ann.image_size[0],
                ann.image_size[1]
            ),
        });
    }
    let mut targets = Vec::with_capacity(ann.targets.len());
    for t in ann.targets {
        let patch = read_png(&root.join(&t.patch))?.to_rgba8();
        targets.push(Target {
            patch,
            bbox: t.bbox,
            class: t.class,
        });
    }
    let id = root
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    Ok(Scene {
        id,
        background,
        scene_objects: ann.scene_objects,
        targets,
        holes: ann.holes,
    })
}

/// Loads every scene under `dir/scenes`, ordered by id.
pub fn load_dataset(dir: &Path) -> Result<Vec<Scene>> {
    let scenes_dir = dir.join("scenes");
    if !scenes_dir.is_dir() {
        return Err(DataError::MissingFile(scenes_dir));
    }
    let mut roots: Vec<PathBuf> = std::fs::read_dir(&scenes_dir)
        .map_err(io_err(&scenes_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    roots.sort();
    roots.iter().map(|r| load_scene(r)).collect()
}

//! Placement quality metrics and attention export.

use crate::data::{Scene, SceneObject, Target};
use crate::geometry::{iou, BBox};
use crate::model::{rank_placements, ModelError, PlacementModel};
use bootplace_autograd::Float;
use image::{GrayImage, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("k must be in 1..={max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error("scene {scene} has {holes} hole annotations for {targets} targets")]
    MissingHoles {
        scene: String,
        holes: usize,
        targets: usize,
    },
    #[error("{0}")]
    Invalid(String),
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

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Objects to place into a background that already holds `scene_objects`.
#[derive(Debug, Clone, Copy)]
pub struct PlacementQuery<'a> {
    pub background: &'a RgbImage,
    pub scene_objects: &'a [SceneObject],
    pub objects: &'a [Target],
}

/// Anything that proposes ranked boxes for objects.
pub trait Placer: Sync {
    /// Largest `k` this placer can serve.
    fn capacity(&self) -> usize;

    /// For each object, up to `k` boxes, best first.
    fn rank(&self, query: &PlacementQuery, k: usize) -> Result<Vec<Vec<BBox>>>;
}

impl<T: Float> Placer for PlacementModel<T> {
    fn capacity(&self) -> usize {
        self.config.num_queries
    }

    fn rank(&self, query: &PlacementQuery, k: usize) -> Result<Vec<Vec<BBox>>> {
        let boxes: Vec<BBox> = query.scene_objects.iter().map(|o| o.bbox).collect();
        let patches: Vec<_> = query.objects.iter().map(|t| t.patch.clone()).collect();
        let (proposals, assoc) = self.associate(query.background, &boxes, &patches)?;
        assoc
            .probabilities
            .iter()
            .map(|row| {
                Ok(rank_placements(row, k)?
                    .into_iter()
                    .map(|i| proposals[i].bbox)
                    .collect())
            })
            .collect()
    }
}

/// Answers every query with the object's own annotated box, `k` times.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePlacer;

impl Placer for OraclePlacer {
    fn capacity(&self) -> usize {
        usize::MAX
    }

    fn rank(&self, query: &PlacementQuery, k: usize) -> Result<Vec<Vec<BBox>>> {
        Ok(query.objects.iter().map(|t| vec![t.bbox; k]).collect())
    }
}

fn check_k(placer: &dyn Placer, k: usize) -> Result<()> {
    if k == 0 || k > placer.capacity() {
        return Err(EvalError::InvalidK {
            k,
            max: placer.capacity(),
        });
    }
    Ok(())
}

fn repose_query(scene: &Scene) -> PlacementQuery<'_> {
    PlacementQuery {
        background: &scene.background,
        scene_objects: &scene.scene_objects,
        objects: &scene.targets,
    }
}

/// Best IoU with the object's own box among its top-`k`, for every target of
/// every scene, in scene order.
pub fn best_overlaps(placer: &dyn Placer, scenes: &[Scene], k: usize) -> Result<Vec<f64>> {
    check_k(placer, k)?;
    let per_scene: Vec<Vec<f64>> = scenes
        .par_iter()
        .map(|s| {
            let ranked = placer.rank(&repose_query(s), k)?;
            Ok(s.targets
                .iter()
                .zip(&ranked)
                .map(|(t, boxes)| {
                    boxes
                        .iter()
                        .take(k)
                        .map(|b| iou(b, &t.bbox))
                        .fold(0.0, f64::max)
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Mean over objects of the best IoU among the top-`k` placements.
pub fn iou_at_k(placer: &dyn Placer, scenes: &[Scene], k: usize) -> Result<f64> {
    Ok(mean(&best_overlaps(placer, scenes, k)?))
}

/// Fraction of objects whose best IoU among the top-`k` is at least 0.5.
pub fn iou50_at_k(placer: &dyn Placer, scenes: &[Scene], k: usize) -> Result<f64> {
    let best = best_overlaps(placer, scenes, k)?;
    Ok(fraction_at_least(&best, 0.5))
}

fn fraction_at_least(v: &[f64], t: f64) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().filter(|&&x| x >= t).count() as f64 / v.len() as f64
    }
}

/// Best IoU between every top-`k` placement and any hole of the background,
/// when objects of scene `i` are placed into the background of scene `i+1`.
fn foreign_overlaps(placer: &dyn Placer, scenes: &[Scene], k: usize) -> Result<Vec<f64>> {
    check_k(placer, k)?;
    if scenes.len() < 2 {
        return Err(EvalError::Invalid(
            "cross-scene placement needs at least two scenes".into(),
        ));
    }
    for s in scenes {
        if s.holes.len() != s.targets.len() {
            return Err(EvalError::MissingHoles {
                scene: s.id.clone(),
                holes: s.holes.len(),
                targets: s.targets.len(),
            });
        }
    }
    let per_pair: Vec<Vec<f64>> = (0..scenes.len())
        .into_par_iter()
        .map(|i| {
            let (a, b) = (&scenes[i], &scenes[(i + 1) % scenes.len()]);
            if a.targets.is_empty() {
                return Ok(Vec::new());
            }
            let query = PlacementQuery {
                background: &b.background,
                scene_objects: &b.scene_objects,
                objects: &a.targets,
            };
            let ranked = placer.rank(&query, k)?;
            Ok(ranked
                .iter()
                .flat_map(|boxes| boxes.iter().take(k))
                .map(|p| b.holes.iter().map(|h| iou(p, h)).fold(0.0, f64::max))
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_pair.into_iter().flatten().collect())
}

/// For each threshold, the fraction of top-`k` placements of foreign
/// objects whose IoU with some hole exceeds it.
pub fn overfit_rate(
    placer: &dyn Placer,
    scenes: &[Scene],
    k: usize,
    thresholds: &[f64],
) -> Result<Vec<f64>> {
    let overlaps = foreign_overlaps(placer, scenes, k)?;
    Ok(thresholds
        .iter()
        .map(|&t| {
            if overlaps.is_empty() {
                0.0
            } else {
                overlaps.iter().filter(|&&v| v > t).count() as f64 / overlaps.len() as f64
            }
        })
        .collect())
}

/// Spread of the top placements, averaged over objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    /// Standard deviation of `sqrt(w * h)`.
    pub scale: f64,
    pub cx: f64,
    pub cy: f64,
    /// Mean of the three.
    pub mean: f64,
}

fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    mean(&v.iter().map(|x| (x - m).powi(2)).collect::<Vec<_>>()).sqrt()
}

fn spread(boxes: &[BBox]) -> [f64; 3] {
    let scale: Vec<f64> = boxes.iter().map(|b| b.area().sqrt()).collect();
    let cx: Vec<f64> = boxes.iter().map(|b| b.cx).collect();
    let cy: Vec<f64> = boxes.iter().map(|b| b.cy).collect();
    [std_dev(&scale), std_dev(&cx), std_dev(&cy)]
}

fn summarize(rows: &[[f64; 3]]) -> DiversityStats {
    let col = |j: usize| mean(&rows.iter().map(|r| r[j]).collect::<Vec<_>>());
    let (scale, cx, cy) = (col(0), col(1), col(2));
    DiversityStats {
        scale,
        cx,
        cy,
        mean: (scale + cx + cy) / 3.0,
    }
}

/// Population standard deviations over the top-`k` boxes of each object.
pub fn diversity_stats(placer: &dyn Placer, scenes: &[Scene], k: usize) -> Result<DiversityStats> {
    check_k(placer, k)?;
    let per_scene: Vec<Vec<[f64; 3]>> = scenes
        .par_iter()
        .map(|s| {
            let ranked = placer.rank(&repose_query(s), k)?;
            Ok(ranked.iter().map(|boxes| spread(boxes)).collect())
        })
        .collect::<Result<_>>()?;
    let all: Vec<[f64; 3]> = per_scene.into_iter().flatten().collect();
    Ok(summarize(&all))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitEntry {
    pub k: usize,
    pub threshold: f64,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub objects: usize,
    pub iou_at_k: BTreeMap<usize, f64>,
    pub iou50_at_k: BTreeMap<usize, f64>,
    pub overfit: Vec<OverfitEntry>,
    pub diversity: DiversityStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub ks: Vec<usize>,
    pub overfit_ks: Vec<usize>,
    pub overfit_thresholds: Vec<f64>,
    pub diversity_k: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            overfit_ks: vec![1, 5],
            overfit_thresholds: vec![0.5, 0.75],
            diversity_k: 5,
        }
    }
}

/// Runs every metric of `spec`, ranking each scene once at the largest `k`.
pub fn evaluate(placer: &dyn Placer, scenes: &[Scene], spec: &EvalSpec) -> Result<EvalReport> {
    let kmax = spec
        .ks
        .iter()
        .chain([&spec.diversity_k])
        .copied()
        .max()
        .unwrap_or(1);
    check_k(placer, kmax)?;
    let ranked: Vec<Vec<Vec<BBox>>> = scenes
        .par_iter()
        .map(|s| placer.rank(&repose_query(s), kmax))
        .collect::<Result<_>>()?;
    let mut iou_at_k = BTreeMap::new();
    let mut iou50_at_k = BTreeMap::new();
    for &k in &spec.ks {
        check_k(placer, k)?;
        let best: Vec<f64> = scenes
            .iter()
            .zip(&ranked)
            .flat_map(|(s, r)| {
                s.targets.iter().zip(r).map(move |(t, boxes)| {
                    boxes
                        .iter()
                        .take(k)
                        .map(|b| iou(b, &t.bbox))
                        .fold(0.0, f64::max)
                })
            })
            .collect();
        iou_at_k.insert(k, mean(&best));
        iou50_at_k.insert(k, fraction_at_least(&best, 0.5));
    }
    let all: Vec<[f64; 3]> = ranked
        .iter()
        .flatten()
        .map(|boxes| spread(&boxes[..boxes.len().min(spec.diversity_k)]))
        .collect();
    let mut overfit = Vec::new();
    if scenes.len() >= 2 {
        for &k in &spec.overfit_ks {
            let rates = overfit_rate(placer, scenes, k, &spec.overfit_thresholds)?;
            for (&threshold, rate) in spec.overfit_thresholds.iter().zip(rates) {
                overfit.push(OverfitEntry { k, threshold, rate });
            }
        }
    }
    Ok(EvalReport {
        scenes: scenes.len(),
        objects: scenes.iter().map(|s| s.targets.len()).sum(),
        iou_at_k,
        iou50_at_k,
        overfit,
        diversity: summarize(&all),
    })
}

/// Writes one heat map per decoder query (`query_000.png`, ...) scaled to
/// the image size, brightest where the query attends most.
pub fn export_attention<T: Float>(
    model: &PlacementModel<T>,
    scene: &Scene,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let boxes: Vec<BBox> = scene.scene_objects.iter().map(|o| o.bbox).collect();
    let maps = model.decoder_attention(&scene.background, &boxes)?;
    let size = model.config.image_size as u32;
    let mut written = Vec::with_capacity(maps.len());
    for (q, map) in maps.iter().enumerate() {
        let peak = map.weights.iter().copied().fold(0.0, f64::max);
        let cell = size / map.cols as u32;
        let img = GrayImage::from_fn(size, size, |x, y| {
            let (r, c) = ((y / cell) as usize, (x / cell) as usize);
            let v = if peak > 0.0 {
                map.weights[r * map.cols + c] / peak
            } else {
                0.0
            };
            Luma([(v * 255.0).round() as u8])
        });
        let path = dir.join(format!("query_{q:03}.png"));
        img.save(&path).map_err(|source| EvalError::Image {
            path: path.clone(),
            source,
        })?;
        written.push(path);
    }
    Ok(written)
}

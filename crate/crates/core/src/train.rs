//! Losses over matched proposals and the bootstrapped training loop.

use crate::checkpoint::{load_checkpoint, save_checkpoint, Moments, TrainingState};
use crate::data::{bootstrap_augment, recompose, DataError, Scene, TrainingSample};
use crate::geometry::{BBox, BoxLossWeights};
use crate::matcher::{hungarian, match_cost, Assignment, MatchError};
use crate::model::{image_tensor, patch_tensor, ModelError, PlacementModel};
use bootplace_autograd::{AdamW, AdamWConfig, Bound, Float, Graph, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Probabilities below this are clamped before taking the log.
pub const PROBABILITY_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: u64 },
    #[error("model produced non-finite outputs")]
    NonFiniteOutput,
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub backbone_lr: f64,
    pub weight_decay: f64,
    /// Multiplier of the box loss in the total.
    pub box_weight: f64,
    /// Multiplier of the association loss in the total.
    pub association_weight: f64,
    /// Classification weight of proposals matched to nothing.
    pub eos_weight: f64,
    pub box_loss: BoxLossWeights,
    /// Recompose a random subset of targets for every sample.
    pub augment: bool,
    /// Clip the global gradient norm to this value.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub log_every: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 1,
            lr: 4e-4,
            backbone_lr: 5e-5,
            weight_decay: 1e-4,
            box_weight: 5.0,
            association_weight: 1.0,
            eos_weight: 0.1,
            box_loss: BoxLossWeights::default(),
            augment: true,
            grad_clip: None,
            seed: 0,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Schedule for the small model on one CPU core. The backbone is trained
    /// from scratch, so it shares the main learning rate.
    pub fn desk() -> Self {
        Self {
            steps: 5000,
            batch_size: 2,
            lr: 2e-4,
            backbone_lr: 2e-4,
            grad_clip: Some(1.0),
            checkpoint_every: 1000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("lr", self.lr),
            ("backbone_lr", self.backbone_lr),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.eos_weight) {
            return bad(format!("eos_weight {} outside [0,1]", self.eos_weight));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Weighted cross-entropy over all `N` proposals, averaged over proposals.
/// `log_probs` is `[N, C+1]`; proposal `assignment[k]` is labelled
/// `gt_classes[k]`, every other proposal the no-object class with weight
/// `eos_weight`.
pub fn classification_loss<T: Float>(
    g: &mut Graph<T>,
    log_probs: Var,
    assignment: &[usize],
    gt_classes: &[usize],
    eos_weight: f64,
) -> Result<Var> {
    let (n, c1) = (g.shape(log_probs)[0], g.shape(log_probs)[1]);
    if assignment.len() != gt_classes.len() {
        return Err(TrainError::Config(format!(
            "{} assignments for {} classes",
            assignment.len(),
            gt_classes.len()
        )));
    }
    let mut labels = vec![c1 - 1; n];
    let mut weights = vec![eos_weight; n];
    for (&i, &c) in assignment.iter().zip(gt_classes) {
        if i >= n || c + 1 >= c1 {
            return Err(MatchError::ClassOutOfRange {
                class: c,
                num_classes: c1 - 1,
            }
            .into());
        }
        labels[i] = c;
        weights[i] = 1.0;
    }
    let flat: Vec<usize> = labels
        .iter()
        .enumerate()
        .map(|(i, &c)| i * c1 + c)
        .collect();
    let picked = g.select(log_probs, &flat)?;
    let w = g.constant(Tensor::from_f64(vec![n], &weights)?);
    let weighted = g.mul(picked, w)?;
    let s = g.sum(weighted);
    Ok(g.scale(s, T::lit(-1.0 / n as f64)))
}

/// `-sum_k log max(P[k][assignment[k]], floor)` and how many entries hit the
/// floor.
pub fn association_loss<T: Float>(
    g: &mut Graph<T>,
    probs: Var,
    assignment: &[usize],
) -> Result<(Var, usize)> {
    let cols = g.shape(probs)[1];
    let flat: Vec<usize> = assignment
        .iter()
        .enumerate()
        .map(|(k, &i)| k * cols + i)
        .collect();
    let picked = g.select(probs, &flat)?;
    let floor = T::lit(PROBABILITY_FLOOR);
    let clamped = g
        .value(picked)
        .data()
        .iter()
        .filter(|&&v| v < floor)
        .count();
    let safe = g.clamp_min(picked, floor);
    let logs = g.log(safe);
    let s = g.sum(logs);
    Ok((g.neg(s), clamped))
}

fn column<T: Float>(g: &mut Graph<T>, x: Var, c: usize) -> Result<Var> {
    Ok(g.slice_cols(x, c, 1)?)
}

/// Per-row GIoU between predicted `[T, 4]` boxes and constant targets.
pub fn giou_rows<T: Float>(g: &mut Graph<T>, pred: Var, gt: &[BBox]) -> Result<Var> {
    let t = gt.len();
    let col = |g: &mut Graph<T>, f: &dyn Fn(&BBox) -> f64| {
        let v: Vec<f64> = gt.iter().map(f).collect();
        g.constant(Tensor::from_f64(vec![t, 1], &v).expect("sized"))
    };
    let gx0 = col(g, &|b| b.to_corners().x0);
    let gy0 = col(g, &|b| b.to_corners().y0);
    let gx1 = col(g, &|b| b.to_corners().x1);
    let gy1 = col(g, &|b| b.to_corners().y1);
    let garea = col(g, &|b| b.area());
    let cx = column(g, pred, 0)?;
    let cy = column(g, pred, 1)?;
    let w = column(g, pred, 2)?;
    let h = column(g, pred, 3)?;
    let hw = g.scale(w, T::lit(0.5));
    let hh = g.scale(h, T::lit(0.5));
    let x0 = g.sub(cx, hw)?;
    let x1 = g.add(cx, hw)?;
    let y0 = g.sub(cy, hh)?;
    let y1 = g.add(cy, hh)?;
    let ix = {
        let a = g.minimum(x1, gx1)?;
        let b = g.maximum(x0, gx0)?;
        let d = g.sub(a, b)?;
        g.relu(d)
    };
    let iy = {
        let a = g.minimum(y1, gy1)?;
        let b = g.maximum(y0, gy0)?;
        let d = g.sub(a, b)?;
        g.relu(d)
    };
    let inter = g.mul(ix, iy)?;
    let parea = g.mul(w, h)?;
    let sum = g.add(parea, garea)?;
    let union = g.sub(sum, inter)?;
    let iou = g.div(inter, union)?;
    let hx = {
        let a = g.maximum(x1, gx1)?;
        let b = g.minimum(x0, gx0)?;
        g.sub(a, b)?
    };
    let hy = {
        let a = g.maximum(y1, gy1)?;
        let b = g.minimum(y0, gy0)?;
        g.sub(a, b)?
    };
    let hull = g.mul(hx, hy)?;
    let gap = g.sub(hull, union)?;
    let frac = g.div(gap, hull)?;
    Ok(g.sub(iou, frac)?)
}

/// Mean over matched pairs of `l1 * |pred - gt|_1 + giou * (1 - GIoU)`.
pub fn box_regression_loss<T: Float>(
    g: &mut Graph<T>,
    boxes: Var,
    assignment: &[usize],
    gt: &[BBox],
    weights: BoxLossWeights,
) -> Result<Var> {
    let t = gt.len();
    let pred = g.select_rows(boxes, assignment)?;
    let flat: Vec<f64> = gt.iter().flat_map(BBox::to_array).collect();
    let target = g.constant(Tensor::from_f64(vec![t, 4], &flat)?);
    let diff = g.sub(pred, target)?;
    let l1 = g.abs(diff);
    let l1 = g.sum(l1);
    let gi = giou_rows(g, pred, gt)?;
    let gi = g.sum(gi);
    let l1 = g.scale(l1, T::lit(weights.l1));
    let gi = g.scale(gi, T::lit(-weights.giou));
    let s = g.add(l1, gi)?;
    let s = g.add_scalar(s, T::lit(weights.giou * t as f64));
    Ok(g.scale(s, T::lit(1.0 / t as f64)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_box: f64,
    pub l_asso: f64,
    pub total: f64,
    /// Association probabilities that fell below the log floor.
    pub clamped: usize,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub assignment: Assignment,
}

/// Builds the full objective for one sample on `g`.
pub fn total_loss<T: Float>(
    model: &PlacementModel<T>,
    g: &mut Graph<T>,
    p: &Bound,
    sample: &TrainingSample,
    config: &TrainConfig,
) -> Result<LossOutput> {
    if sample.targets.is_empty() {
        return Err(TrainError::Config(
            "a training sample needs at least one target".into(),
        ));
    }
    let scene_boxes: Vec<BBox> = sample.scene_objects.iter().map(|o| o.bbox).collect();
    let det = model.forward_detect(g, p, &image_tensor(&sample.image), &scene_boxes)?;
    let patches: Vec<Tensor<T>> = sample
        .targets
        .iter()
        .map(|t| patch_tensor(&t.patch, model.config.patch_size))
        .collect();
    let queries = model.forward_objects(g, p, &patches)?;
    let (_, probs) = model.forward_association(g, queries, det.features)?;

    let boxes = g.value(det.boxes);
    let class_probs = g.value(det.class_probs);
    if !boxes
        .data()
        .iter()
        .chain(class_probs.data())
        .all(|v| v.is_finite())
    {
        return Err(TrainError::NonFiniteOutput);
    }
    let n = boxes.shape()[0];
    let pred: Vec<BBox> = (0..n)
        .map(|i| {
            let r: Vec<f64> = boxes
                .row(i)
                .iter()
                .map(|v| v.as_f64().clamp(0.0, 1.0))
                .collect();
            BBox::new(r[0], r[1], r[2], r[3]).expect("squashed box")
        })
        .collect();
    let mut cost = Vec::with_capacity(sample.targets.len());
    for t in &sample.targets {
        let mut row = Vec::with_capacity(n);
        for (i, b) in pred.iter().enumerate() {
            let cp: Vec<f64> = class_probs.row(i).iter().map(|v| v.as_f64()).collect();
            row.push(match_cost(Some(t.class), &t.bbox, &cp, b, config.box_loss)?);
        }
        cost.push(row);
    }
    let assignment = hungarian(&cost)?;
    let a = &assignment.assignment;
    let classes: Vec<usize> = sample.targets.iter().map(|t| t.class).collect();
    let gt: Vec<BBox> = sample.targets.iter().map(|t| t.bbox).collect();
    let l_cls = classification_loss(g, det.class_log_probs, a, &classes, config.eos_weight)?;
    let l_box = box_regression_loss(g, det.boxes, a, &gt, config.box_loss)?;
    let (l_asso, clamped) = association_loss(g, probs, a)?;
    let wb = g.scale(l_box, T::lit(config.box_weight));
    let wa = g.scale(l_asso, T::lit(config.association_weight));
    let s = g.add(l_cls, wb)?;
    let total = g.add(s, wa)?;
    let breakdown = LossBreakdown {
        l_cls: g.scalar_value(l_cls).as_f64(),
        l_box: g.scalar_value(l_box).as_f64(),
        l_asso: g.scalar_value(l_asso).as_f64(),
        total: g.scalar_value(total).as_f64(),
        clamped,
    };
    Ok(LossOutput {
        total,
        breakdown,
        assignment,
    })
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_cls: f64,
    pub l_box: f64,
    pub l_asso: f64,
    pub total: f64,
    pub lr: f64,
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    pub model: PlacementModel<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: PlacementModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            &model.params,
        )
        .with_group("backbone.", config.backbone_lr);
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    /// Continues from a training checkpoint. `config` replaces the saved one
    /// except for the step count, which comes from the checkpoint.
    pub fn resume(dir: &Path, config: TrainConfig) -> Result<Self> {
        let (model, state) = load_checkpoint(dir)?;
        let Some((state, moments)) = state else {
            return Err(ModelError::Incompatible {
                path: dir.to_path_buf(),
                reason: "checkpoint has no optimizer state".into(),
            }
            .into());
        };
        let mut trainer = Self::new(model, config)?;
        trainer
            .optimizer
            .restore(state.step, moments.first, moments.second)?;
        Ok(trainer)
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.optimizer.step_count()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let (first, second) = self.optimizer.moments();
        let moments = Moments {
            first: first.to_vec(),
            second: second.to_vec(),
        };
        let state = TrainingState {
            step: self.step(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
        };
        save_checkpoint(dir, &self.model, Some((&state, &moments)))?;
        Ok(())
    }

    /// Draws the samples for optimizer step `step`; depends only on the
    /// seed and the step.
    pub fn samples_for_step(
        &self,
        scenes: &[Scene],
        step: u64,
    ) -> Result<(Vec<TrainingSample>, u64)> {
        let mut rng = step_rng(self.config.seed, step);
        let mut out = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let scene = &scenes[rng.random_range(0..scenes.len())];
            out.push(if self.config.augment {
                bootstrap_augment(scene, &mut rng)?
            } else {
                recompose(scene, &[])?
            });
        }
        Ok((out, rng.random()))
    }

    pub fn train_step(&mut self, scenes: &[Scene]) -> Result<StepRecord> {
        if scenes.is_empty() {
            return Err(TrainError::Config("no training scenes".into()));
        }
        let step = self.step();
        let (samples, dropout_seed) = self.samples_for_step(scenes, step)?;
        let b = samples.len() as f64;
        self.model.params.zero_grads();
        let mut sum = LossBreakdown {
            l_cls: 0.0,
            l_box: 0.0,
            l_asso: 0.0,
            total: 0.0,
            clamped: 0,
        };
        for (j, sample) in samples.iter().enumerate() {
            let mut g = Graph::new(true, dropout_seed.wrapping_add(j as u64));
            let p = g.bind(&self.model.params);
            let out = match total_loss(&self.model, &mut g, &p, sample, &self.config) {
                Err(TrainError::NonFiniteOutput) => {
                    return Err(TrainError::NonFinite { step: step + 1 })
                }
                other => other?,
            };
            if !out.breakdown.total.is_finite() {
                return Err(TrainError::NonFinite { step: step + 1 });
            }
            let grads = g.backward(out.total)?;
            self.model
                .params
                .accumulate_grads(&grads.for_params(&p), 1.0 / b as f32)?;
            sum.l_cls += out.breakdown.l_cls / b;
            sum.l_box += out.breakdown.l_box / b;
            sum.l_asso += out.breakdown.l_asso / b;
            sum.total += out.breakdown.total / b;
        }
        if let Some(max_norm) = self.config.grad_clip {
            clip_gradients(&mut self.model, max_norm);
        }
        let finite = self.model.params.iter().all(|p| {
            p.tensor
                .grad()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
        });
        if !finite {
            return Err(TrainError::NonFinite { step: step + 1 });
        }
        self.optimizer.step(&mut self.model.params)?;
        Ok(StepRecord {
            step: step + 1,
            l_cls: sum.l_cls,
            l_box: sum.l_box,
            l_asso: sum.l_asso,
            total: sum.total,
            lr: self.config.lr,
        })
    }

    /// Trains until `config.steps` optimizer steps are done. With `out`,
    /// metrics are appended to `out/metrics.jsonl` every `log_every` steps
    /// and checkpoints go to `out/checkpoint`. A non-finite loss aborts
    /// before anything is written for that step, so the last checkpoint
    /// stays intact.
    pub fn run(
        &mut self,
        scenes: &[Scene],
        out: Option<&Path>,
        mut on_step: impl FnMut(&StepRecord),
    ) -> Result<()> {
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
                    path: dir.to_path_buf(),
                    source,
                })?;
                let path = dir.join("metrics.jsonl");
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|source| TrainError::Io {
                        path: path.clone(),
                        source,
                    })?;
                Some((file, path))
            }
            None => None,
        };
        while self.step() < self.config.steps {
            let record = self.train_step(scenes)?;
            on_step(&record);
            if let Some((file, path)) = log.as_mut() {
                let every = self.config.log_every.max(1);
                if record.step % every == 0 || record.step == self.config.steps {
                    let line = serde_json::to_string(&record).expect("record serializes");
                    writeln!(file, "{line}").map_err(|source| TrainError::Io {
                        path: path.clone(),
                        source,
                    })?;
                }
            }
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if (every > 0 && record.step % every == 0) || record.step == self.config.steps {
                    self.save(&dir.join("checkpoint"))?;
                }
            }
        }
        Ok(())
    }
}

fn clip_gradients(model: &mut PlacementModel<f32>, max_norm: f64) {
    let norm: f64 = model
        .params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .flat_map(|g| g.iter().map(|&v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt();
    if norm <= max_norm || !norm.is_finite() {
        return;
    }
    let scale = (max_norm / norm) as f32;
    for p in model.params.iter_mut() {
        if let Some(g) = p.tensor.grad() {
            let scaled: Vec<f32> = g.iter().map(|v| v * scale).collect();
            p.tensor.set_grad(scaled).expect("same length");
        }
    }
}

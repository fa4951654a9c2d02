//! Detection-style placement model. A convolutional backbone and a
//! transformer turn the background image plus the boxes of objects already in
//! the scene into a fixed set of region proposals. A small CNN embeds each
//! object patch, and the two are linked by a temperature-scaled association
//! matrix with an extra no-match column.

use crate::geometry::BBox;
use crate::raster::letterbox_rect;
use bootplace_autograd::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use bootplace_autograd::{
    init, Bound, Float, Graph, ParamId, ParamStore, Tensor, TensorError, Var,
};
use image::imageops::{self, FilterType};
use image::{RgbImage, Rgba, Rgba32FImage, RgbaImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use thiserror::Error;

pub use crate::raster::composite;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("{given} scene objects exceed the limit of {max}")]
    TooManySceneObjects { given: usize, max: usize },
    #[error("incompatible checkpoint {}: {reason}", path.display())]
    Incompatible { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// How boxes of existing scene objects reach the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationMode {
    /// Embedded boxes join the encoder sequence as extra tokens.
    Tokens,
    /// Embedded boxes are pooled into a multiplicative gate on the box head.
    Gating,
}

/// Sign applied to the scaled similarity in the association scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSign {
    Negative,
    Positive,
}

impl ScoreSign {
    fn factor(self) -> f64 {
        match self {
            ScoreSign::Negative => -1.0,
            ScoreSign::Positive => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of the stride-2 backbone convolutions.
    pub backbone_channels: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub num_queries: usize,
    pub max_scene_objects: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub temperature: f64,
    pub patch_size: usize,
    /// Output channels of the stride-2 object encoder convolutions.
    pub object_channels: Vec<usize>,
    pub location_mode: LocationMode,
    pub score_sign: ScoreSign,
    /// Seed of the parameter initialization.
    pub seed: u64,
}

impl ModelConfig {
    /// Small model sized for a single CPU core on 64x64 scenes.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            backbone_channels: vec![16, 32, 64],
            d_model: 64,
            heads: 4,
            encoder_blocks: 2,
            decoder_blocks: 2,
            ffn_dim: 256,
            dropout: 0.0,
            num_queries: 16,
            max_scene_objects: 8,
            num_classes: 2,
            feature_dim: 64,
            temperature: 0.07,
            patch_size: 32,
            object_channels: vec![16, 32, 64],
            location_mode: LocationMode::Tokens,
            score_sign: ScoreSign::Negative,
            seed: 0,
        }
    }

    /// Full-width transformer with 100 queries. Its stride-8 convolutional
    /// backbone stands in for a residual network.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            backbone_channels: vec![64, 128, 256],
            d_model: 256,
            heads: 8,
            encoder_blocks: 6,
            decoder_blocks: 6,
            ffn_dim: 2048,
            dropout: 0.1,
            num_queries: 100,
            max_scene_objects: 120,
            num_classes: 2,
            feature_dim: 256,
            temperature: 0.07,
            patch_size: 64,
            object_channels: vec![32, 64, 128],
            location_mode: LocationMode::Tokens,
            score_sign: ScoreSign::Negative,
            seed: 0,
        }
    }

    /// Tiny model for gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            backbone_channels: vec![4, 8],
            d_model: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ffn_dim: 16,
            dropout: 0.0,
            num_queries: 4,
            max_scene_objects: 4,
            num_classes: 2,
            feature_dim: 8,
            temperature: 0.07,
            patch_size: 8,
            object_channels: vec![4, 8],
            location_mode: LocationMode::Tokens,
            score_sign: ScoreSign::Negative,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn feature_grid(&self) -> usize {
        self.image_size >> self.backbone_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.backbone_channels.is_empty() || self.object_channels.is_empty() {
            return bad("backbone_channels and object_channels must be non-empty".into());
        }
        let scale = 1usize << self.backbone_channels.len();
        if self.image_size == 0 || self.image_size % scale != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of {scale}",
                self.image_size
            ));
        }
        let pscale = 1usize << self.object_channels.len();
        if self.patch_size == 0 || self.patch_size % pscale != 0 {
            return bad(format!(
                "patch_size {} must be a positive multiple of {pscale}",
                self.patch_size
            ));
        }
        if self.d_model == 0 || self.d_model % 4 != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of 4",
                self.d_model
            ));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.num_queries == 0
            || self.num_classes == 0
            || self.feature_dim == 0
            || self.ffn_dim == 0
        {
            return bad(
                "num_queries, num_classes, feature_dim and ffn_dim must be positive".into(),
            );
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }
}

/// One detector output slot.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionProposal {
    pub bbox: BBox,
    /// Probabilities over the classes followed by the no-object class.
    pub class_probs: Vec<f64>,
    /// Unit-norm region feature.
    pub feature: Vec<f64>,
}

impl RegionProposal {
    /// Most likely real class and its probability.
    pub fn best_class(&self) -> (usize, f64) {
        let real = &self.class_probs[..self.class_probs.len() - 1];
        real.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
    }
}

/// Unit-norm embedding of one object patch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectQueryEmbedding {
    pub vector: Vec<f64>,
}

/// `T x (N + 1)` association scores; the last column is the no-match slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub scores: Vec<Vec<f64>>,
}

/// Scores together with their row-wise softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMatrix {
    pub scores: Vec<Vec<f64>>,
    pub probabilities: Vec<Vec<f64>>,
}

impl AssociationMatrix {
    pub fn num_proposals(&self) -> usize {
        self.probabilities.first().map_or(0, |r| r.len() - 1)
    }
}

/// `G[k][i] = sign * (q_k . f_i) / temperature`, with a zero no-match column.
pub fn association_scores(
    queries: &[Vec<f64>],
    features: &[Vec<f64>],
    temperature: f64,
    sign: ScoreSign,
) -> Result<ScoreMatrix> {
    if !(temperature > 0.0) {
        return Err(ModelError::Input(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let dim = features.first().map(Vec::len);
    for v in queries.iter().chain(features) {
        if Some(v.len()) != dim {
            return Err(ModelError::Input(format!(
                "embedding width {} does not match feature width {:?}",
                v.len(),
                dim
            )));
        }
    }
    let scores = queries
        .iter()
        .map(|q| {
            let mut row: Vec<f64> = features
                .iter()
                .map(|f| {
                    sign.factor() * q.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / temperature
                })
                .collect();
            row.push(0.0);
            row
        })
        .collect();
    Ok(ScoreMatrix { scores })
}

/// Numerically stable softmax of every score row.
pub fn association_probabilities(scores: &ScoreMatrix) -> AssociationMatrix {
    let probabilities = scores
        .scores
        .iter()
        .map(|row| {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect();
    AssociationMatrix {
        scores: scores.scores.clone(),
        probabilities,
    }
}

/// Proposal indices ordered by association probability for one object,
/// best first, ties broken by lower index. The no-match column is excluded.
pub fn rank_placements(probabilities: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(ModelError::Input("k must be at least 1".into()));
    }
    let n = probabilities.len().saturating_sub(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]));
    order.truncate(k);
    Ok(order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignPolicy {
    /// Every object takes its own best column; objects may share a proposal.
    Independent,
    /// Highest-probability pairs first, each proposal used at most once.
    GreedyDistinct,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub proposal: usize,
    pub bbox: BBox,
    pub probability: f64,
}

/// Chooses a proposal for every object, or `None` when the no-match column
/// wins.
pub fn assign_objects(
    proposals: &[RegionProposal],
    association: &AssociationMatrix,
    policy: AssignPolicy,
) -> Result<Vec<Option<Placement>>> {
    let n = proposals.len();
    if association.probabilities.iter().any(|r| r.len() != n + 1) {
        return Err(ModelError::Input(format!(
            "association rows must have {} columns",
            n + 1
        )));
    }
    let place = |k: usize, i: usize| {
        (i < n).then(|| Placement {
            proposal: i,
            bbox: proposals[i].bbox,
            probability: association.probabilities[k][i],
        })
    };
    match policy {
        AssignPolicy::Independent => Ok(association
            .probabilities
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
                place(k, best)
            })
            .collect()),
        AssignPolicy::GreedyDistinct => {
            let mut pairs: Vec<(usize, usize, f64)> = association
                .probabilities
                .iter()
                .enumerate()
                .flat_map(|(k, row)| row.iter().enumerate().map(move |(i, &p)| (k, i, p)))
                .collect();
            pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut out = vec![None; association.probabilities.len()];
            let mut done = vec![false; out.len()];
            let mut used = vec![false; n];
            for (k, i, _) in pairs {
                if done[k] || (i < n && used[i]) {
                    continue;
                }
                done[k] = true;
                if i < n {
                    used[i] = true;
                }
                out[k] = place(k, i);
            }
            Ok(out)
        }
    }
}

/// Fixed 2-D sine/cosine encoding of a `rows x cols` grid, `[rows*cols, dim]`.
pub fn sine_positions(rows: usize, cols: usize, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols * dim);
    for i in 0..rows {
        for j in 0..cols {
            out.extend(sine_embedding(
                (i + 1) as f64 / rows as f64,
                (j + 1) as f64 / cols as f64,
                dim,
            ));
        }
    }
    out
}

/// Sine embedding of one normalized `(y, x)` location.
pub fn sine_embedding(y: f64, x: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let tau = std::f64::consts::TAU;
    let mut out = Vec::with_capacity(dim);
    for coord in [y * tau, x * tau] {
        for k in 0..half {
            let freq = 10000f64.powf((2 * (k / 2)) as f64 / half as f64);
            let v = coord / freq;
            out.push(if k % 2 == 0 { v.sin() } else { v.cos() });
        }
    }
    out
}

/// Query anchor centers `(cx, cy)` laid out on the smallest square grid
/// holding `n` points, row by row.
pub fn anchor_centers(n: usize) -> Vec<(f64, f64)> {
    let side = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(side.max(1));
    (0..n)
        .map(|q| {
            (
                ((q % side) as f64 + 0.5) / side as f64,
                ((q / side) as f64 + 0.5) / rows as f64,
            )
        })
        .collect()
}

const ANCHOR_SIZE: f64 = 0.2;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Normalizes 8-bit color to roughly unit scale around zero.
fn normalize(v: u8) -> f64 {
    (v as f64 / 255.0 - 0.5) / 0.25
}

pub fn image_tensor<T: Float>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * w * h + y as usize * w + x as usize] = T::lit(normalize(p[c]));
        }
    }
    Tensor::new(vec![3, h, w], data).expect("sized buffer")
}

/// Letterboxed RGBA patch as `[4, size, size]` with color weighted by alpha.
/// Weighting happens before resampling so hidden color never bleeds in.
pub fn patch_tensor<T: Float>(patch: &RgbaImage, size: usize) -> Tensor<T> {
    let n = size * size;
    let mut data = vec![T::zero(); 4 * n];
    if let Some((nw, nh, ox, oy)) = letterbox_rect(patch.dimensions(), size as u32) {
        let premul = Rgba32FImage::from_fn(patch.width(), patch.height(), |x, y| {
            let p = patch.get_pixel(x, y);
            let a = p[3] as f64 / 255.0;
            let c = |i: usize| (normalize(p[i]) * a) as f32;
            Rgba([c(0), c(1), c(2), a as f32])
        });
        let resized = if (nw, nh) == premul.dimensions() {
            premul
        } else {
            imageops::resize(&premul, nw, nh, FilterType::Triangle)
        };
        for (x, y, p) in resized.enumerate_pixels() {
            let at = (y + oy) as usize * size + (x + ox) as usize;
            for c in 0..4 {
                data[c * n + at] = T::lit(p[c] as f64);
            }
        }
    }
    Tensor::new(vec![4, size, size], data).expect("sized buffer")
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

/// Graph outputs of the detector for one image.
#[derive(Debug, Clone)]
pub struct Detection {
    /// `[N, 4]` boxes in `(cx, cy, w, h)`, squashed into `(0,1)`.
    pub boxes: Var,
    pub class_logits: Var,
    pub class_log_probs: Var,
    pub class_probs: Var,
    /// `[N, D]` unit-norm region features.
    pub features: Var,
    /// Last decoder layer cross-attention per head, `[N, S]`; the first
    /// `image_tokens` columns attend to image positions.
    pub cross_attention: Vec<Var>,
    pub image_tokens: usize,
}

/// Head-averaged attention of one query over the feature grid, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PlacementModel<T: Float> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    backbone: Vec<bootplace_autograd::nn::Conv2d>,
    input_proj: Linear,
    location_fc1: Linear,
    location_fc2: Linear,
    location_type: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    decoder_norm: LayerNorm,
    query_pos: ParamId,
    query_size: ParamId,
    token_centers: Tensor<T>,
    class_head: Linear,
    box_head: [Linear; 3],
    feature_head: Linear,
    object_convs: Vec<bootplace_autograd::nn::Conv2d>,
    object_proj: Linear,
    positions: Tensor<T>,
}

const NORM_EPS: f64 = 1e-8;

impl<T: Float> PlacementModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        use bootplace_autograd::nn::Conv2d;
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let s = &mut store;
        let mut cin = 3;
        let mut backbone = Vec::new();
        for (i, &c) in config.backbone_channels.iter().enumerate() {
            backbone.push(Conv2d::new(
                s,
                &format!("backbone.conv{i}"),
                cin,
                c,
                3,
                2,
                1,
                &mut rng,
            )?);
            cin = c;
        }
        let input_proj = Linear::new(s, "backbone.proj", cin, d, &mut rng)?;
        let location_fc1 = Linear::new(s, "location.fc1", 4, d, &mut rng)?;
        let location_fc2 = Linear::new(s, "location.fc2", d, d, &mut rng)?;
        let location_type = s.add("location.type", init::uniform(vec![d], 1.0, &mut rng))?;
        let mut encoder = Vec::new();
        for i in 0..config.encoder_blocks {
            let n = format!("encoder.{i}");
            encoder.push(EncoderBlock {
                attn: MultiHeadAttention::new(s, &format!("{n}.attn"), d, config.heads, &mut rng)?,
                ffn: FeedForward::new(
                    s,
                    &format!("{n}.ffn"),
                    d,
                    config.ffn_dim,
                    config.dropout,
                    &mut rng,
                )?,
                norm1: LayerNorm::new(s, &format!("{n}.norm1"), d)?,
                norm2: LayerNorm::new(s, &format!("{n}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::new();
        for i in 0..config.decoder_blocks {
            let n = format!("decoder.{i}");
            decoder.push(DecoderBlock {
                self_attn: MultiHeadAttention::new(
                    s,
                    &format!("{n}.self_attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                cross_attn: MultiHeadAttention::new(
                    s,
                    &format!("{n}.cross_attn"),
                    d,
                    config.heads,
                    &mut rng,
                )?,
                ffn: FeedForward::new(
                    s,
                    &format!("{n}.ffn"),
                    d,
                    config.ffn_dim,
                    config.dropout,
                    &mut rng,
                )?,
                norm1: LayerNorm::new(s, &format!("{n}.norm1"), d)?,
                norm2: LayerNorm::new(s, &format!("{n}.norm2"), d)?,
                norm3: LayerNorm::new(s, &format!("{n}.norm3"), d)?,
            });
        }
        let decoder_norm = LayerNorm::new(s, "decoder.norm", d)?;
        let g = config.feature_grid();
        let anchors = anchor_centers(config.num_queries);
        let half_cell = 0.5 / g as f64;
        let qpos: Vec<f64> = anchors
            .iter()
            .flat_map(|&(cx, cy)| sine_embedding(cy + half_cell, cx + half_cell, d))
            .collect();
        let query_pos = s.add(
            "query_pos",
            Tensor::from_f64(vec![config.num_queries, d], &qpos)?,
        )?;
        let query_size = s.add(
            "query_size",
            Tensor::full(vec![config.num_queries, 2], T::lit(logit(ANCHOR_SIZE))),
        )?;
        let class_head = Linear::new(s, "head.class", d, config.num_classes + 1, &mut rng)?;
        let box_head = [
            Linear::new(s, "head.box.0", d, d, &mut rng)?,
            Linear::new(s, "head.box.1", d, d, &mut rng)?,
            Linear::new(s, "head.box.2", d, 4, &mut rng)?,
        ];
        if let Some(w) = s.by_name_mut("head.box.2.weight") {
            w.tensor = Tensor::zeros(vec![d, 4]);
        }
        let feature_head = Linear::new(s, "head.feature", d, config.feature_dim, &mut rng)?;
        let mut cin = 4;
        let mut object_convs = Vec::new();
        for (i, &c) in config.object_channels.iter().enumerate() {
            object_convs.push(Conv2d::new(
                s,
                &format!("object.conv{i}"),
                cin,
                c,
                3,
                2,
                1,
                &mut rng,
            )?);
            cin = c;
        }
        let side = config.patch_size >> config.object_channels.len();
        let object_proj = Linear::new(
            s,
            "object.proj",
            cin * side * side,
            config.feature_dim,
            &mut rng,
        )?;
        let centers: Vec<f64> = (0..g * g)
            .flat_map(|t| {
                [
                    ((t % g) as f64 + 0.5) / g as f64,
                    ((t / g) as f64 + 0.5) / g as f64,
                ]
            })
            .collect();
        let token_centers = Tensor::from_f64(vec![g * g, 2], &centers)?;
        let positions = Tensor::from_f64(vec![g * g, d], &sine_positions(g, g, d))?;
        Ok(Self {
            config,
            params: store,
            backbone,
            input_proj,
            location_fc1,
            location_fc2,
            location_type,
            encoder,
            decoder,
            decoder_norm,
            query_pos,
            query_size,
            token_centers,
            class_head,
            box_head,
            feature_head,
            object_convs,
            object_proj,
            positions,
        })
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Float>(&self) -> PlacementModel<U> {
        let mut out =
            PlacementModel::<U>::new(self.config.clone()).expect("config already validated");
        out.params = self.params.cast();
        out
    }

    /// Embeds scene-object boxes as `[K, d]` tokens; `None` when empty.
    pub fn encode_locations(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        boxes: &[BBox],
    ) -> Result<Option<Var>> {
        if boxes.len() > self.config.max_scene_objects {
            return Err(ModelError::TooManySceneObjects {
                given: boxes.len(),
                max: self.config.max_scene_objects,
            });
        }
        if boxes.is_empty() {
            return Ok(None);
        }
        let flat: Vec<f64> = boxes.iter().flat_map(BBox::to_array).collect();
        let x = g.constant(Tensor::from_f64(vec![boxes.len(), 4], &flat)?);
        let h = self.location_fc1.forward(g, p, x)?;
        let h = g.relu(h);
        Ok(Some(self.location_fc2.forward(g, p, h)?))
    }

    /// Backbone feature tokens `[HW, d]` for a `[3, H, W]` image.
    pub fn backbone_forward(&self, g: &mut Graph<T>, p: &Bound, image: &Tensor<T>) -> Result<Var> {
        let size = self.config.image_size;
        if image.shape() != [3, size, size] {
            return Err(ModelError::Input(format!(
                "expected a [3, {size}, {size}] image, got {:?}",
                image.shape()
            )));
        }
        let mut h = g.constant(image.clone());
        for conv in &self.backbone {
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
        }
        let c = *self.config.backbone_channels.last().expect("non-empty");
        let grid = self.config.feature_grid();
        let h = g.reshape(h, vec![c, grid * grid])?;
        let h = g.transpose(h)?;
        Ok(self.input_proj.forward(g, p, h)?)
    }

    pub fn forward_detect(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        image: &Tensor<T>,
        scene_boxes: &[BBox],
    ) -> Result<Detection> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let src = self.backbone_forward(g, p, image)?;
        let image_tokens = g.shape(src)[0];
        let img_pos = g.constant(self.positions.clone());
        let loc = self.encode_locations(g, p, scene_boxes)?;
        let (mut memory, pos, gate) = match (cfg.location_mode, loc) {
            (LocationMode::Tokens, Some(l)) => {
                let k = g.shape(l)[0];
                let zeros = g.constant(Tensor::zeros(vec![k, d]));
                let type_pos = g.add_row(zeros, p[self.location_type])?;
                (
                    g.concat_rows(&[src, l])?,
                    g.concat_rows(&[img_pos, type_pos])?,
                    None,
                )
            }
            (LocationMode::Tokens, None) => (src, img_pos, None),
            (LocationMode::Gating, l) => {
                let gate = match l {
                    Some(l) => {
                        let k = g.shape(l)[0];
                        let pooled = g.sum_axis(l, 0)?;
                        let pooled = g.scale(pooled, T::lit(1.0 / k as f64));
                        let s = g.sigmoid(pooled);
                        g.scale(s, T::lit(2.0))
                    }
                    None => g.constant(Tensor::full(vec![d], T::one())),
                };
                (src, img_pos, Some(gate))
            }
        };
        memory = g.add(memory, pos)?;
        for blk in &self.encoder {
            let qk = g.add(memory, pos)?;
            let a = blk.attn.forward(g, p, qk, qk, memory)?;
            let a = g.dropout(a.output, cfg.dropout)?;
            let x = g.add(memory, a)?;
            let x = blk.norm1.forward(g, p, x)?;
            let f = blk.ffn.forward(g, p, x)?;
            let f = g.dropout(f, cfg.dropout)?;
            let x = g.add(x, f)?;
            memory = blk.norm2.forward(g, p, x)?;
        }
        let keys = g.add(memory, pos)?;
        let qpos = p[self.query_pos];
        let mut tgt = g.constant(Tensor::zeros(vec![cfg.num_queries, d]));
        let mut cross_attention = Vec::new();
        for blk in &self.decoder {
            let q = g.add(tgt, qpos)?;
            let a = blk.self_attn.forward(g, p, q, q, tgt)?;
            let a = g.dropout(a.output, cfg.dropout)?;
            let x = g.add(tgt, a)?;
            let x = blk.norm1.forward(g, p, x)?;
            let q = g.add(x, qpos)?;
            let a = blk.cross_attn.forward(g, p, q, keys, memory)?;
            cross_attention = a.weights;
            let a = g.dropout(a.output, cfg.dropout)?;
            let x = g.add(x, a)?;
            let x = blk.norm2.forward(g, p, x)?;
            let f = blk.ffn.forward(g, p, x)?;
            let f = g.dropout(f, cfg.dropout)?;
            let x = g.add(x, f)?;
            tgt = blk.norm3.forward(g, p, x)?;
        }
        let hs = self.decoder_norm.forward(g, p, tgt)?;
        let class_logits = self.class_head.forward(g, p, hs)?;
        let class_log_probs = g.log_softmax(class_logits, 1)?;
        let class_probs = g.softmax(class_logits, 1)?;
        let mut b = match gate {
            Some(gate) => g.mul_row(hs, gate)?,
            None => hs,
        };
        for (i, layer) in self.box_head.iter().enumerate() {
            b = layer.forward(g, p, b)?;
            if i + 1 < self.box_head.len() {
                b = g.relu(b);
            }
        }
        let boxes = self.box_logits(g, p, b, &cross_attention, image_tokens)?;
        let boxes = g.sigmoid(boxes);
        let f = self.feature_head.forward(g, p, hs)?;
        let features = g.l2_normalize(f, 1, T::lit(NORM_EPS))?;
        Ok(Detection {
            boxes,
            class_logits,
            class_log_probs,
            class_probs,
            features,
            cross_attention,
            image_tokens,
        })
    }

    /// Box centers are offsets from the attention-weighted image location of
    /// each query; sizes are offsets from a learned per-query prior.
    fn box_logits(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        delta: Var,
        attention: &[Var],
        image_tokens: usize,
    ) -> Result<Var> {
        let mut a = g.slice_cols(attention[0], 0, image_tokens)?;
        for &w in &attention[1..] {
            let w = g.slice_cols(w, 0, image_tokens)?;
            a = g.add(a, w)?;
        }
        let centers = g.constant(self.token_centers.clone());
        let ones = g.constant(Tensor::full(vec![image_tokens, 2], T::one()));
        let num = g.matmul(a, centers)?;
        let den = g.matmul(a, ones)?;
        let e = g.div(num, den)?;
        let le = g.log(e);
        let ne = g.neg(e);
        let rest = g.add_scalar(ne, T::one());
        let lr = g.log(rest);
        let center = g.sub(le, lr)?;
        let dc = g.slice_cols(delta, 0, 2)?;
        let center = g.add(center, dc)?;
        let ds = g.slice_cols(delta, 2, 2)?;
        let size = g.add(ds, p[self.query_size])?;
        Ok(g.concat_cols(&[center, size])?)
    }

    /// `[T, D]` unit-norm embeddings of object patches.
    pub fn forward_objects(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        patches: &[Tensor<T>],
    ) -> Result<Var> {
        if patches.is_empty() {
            return Err(ModelError::Input(
                "at least one object patch is required".into(),
            ));
        }
        let size = self.config.patch_size;
        let mut rows = Vec::with_capacity(patches.len());
        for patch in patches {
            if patch.shape() != [4, size, size] {
                return Err(ModelError::Input(format!(
                    "expected a [4, {size}, {size}] patch, got {:?}",
                    patch.shape()
                )));
            }
            let mut h = g.constant(patch.clone());
            for conv in &self.object_convs {
                h = conv.forward(g, p, h)?;
                h = g.relu(h);
            }
            let n = g.shape(h).iter().product();
            let h = g.reshape(h, vec![1, n])?;
            rows.push(self.object_proj.forward(g, p, h)?);
        }
        let q = if rows.len() == 1 {
            rows[0]
        } else {
            g.concat_rows(&rows)?
        };
        Ok(g.l2_normalize(q, 1, T::lit(NORM_EPS))?)
    }

    /// Association scores `[T, N+1]` and their row softmax.
    pub fn forward_association(
        &self,
        g: &mut Graph<T>,
        queries: Var,
        features: Var,
    ) -> Result<(Var, Var)> {
        let sim = g.matmul_nt(queries, features)?;
        let factor = self.config.score_sign.factor() / self.config.temperature;
        let sim = g.scale(sim, T::lit(factor));
        let t = g.shape(queries)[0];
        let none = g.constant(Tensor::zeros(vec![t, 1]));
        let scores = g.concat_cols(&[sim, none])?;
        let probs = g.softmax(scores, 1)?;
        Ok((scores, probs))
    }

    fn check_image(&self, image: &RgbImage) -> Result<()> {
        let s = self.config.image_size as u32;
        if image.dimensions() != (s, s) {
            return Err(ModelError::Input(format!(
                "expected a {s}x{s} image, got {:?}",
                image.dimensions()
            )));
        }
        Ok(())
    }

    fn proposals(g: &Graph<T>, det: &Detection) -> Vec<RegionProposal> {
        let boxes = g.value(det.boxes);
        let probs = g.value(det.class_probs);
        let feats = g.value(det.features);
        (0..boxes.shape()[0])
            .map(|i| {
                let b: Vec<f64> = boxes
                    .row(i)
                    .iter()
                    .map(|v| v.as_f64().clamp(0.0, 1.0))
                    .collect();
                RegionProposal {
                    bbox: BBox::new(b[0], b[1], b[2], b[3]).expect("squashed box is valid"),
                    class_probs: probs.row(i).iter().map(|v| v.as_f64()).collect(),
                    feature: feats.row(i).iter().map(|v| v.as_f64()).collect(),
                }
            })
            .collect()
    }

    /// Exactly `num_queries` proposals for a background and its scene objects.
    pub fn detect(&self, image: &RgbImage, scene_boxes: &[BBox]) -> Result<Vec<RegionProposal>> {
        self.check_image(image)?;
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let det = self.forward_detect(&mut g, &p, &image_tensor(image), scene_boxes)?;
        Ok(Self::proposals(&g, &det))
    }

    pub fn encode_object(&self, patch: &RgbaImage) -> Result<ObjectQueryEmbedding> {
        Ok(self.encode_objects(std::slice::from_ref(patch))?.remove(0))
    }

    pub fn encode_objects(&self, patches: &[RgbaImage]) -> Result<Vec<ObjectQueryEmbedding>> {
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let tensors: Vec<Tensor<T>> = patches
            .iter()
            .map(|x| patch_tensor(x, self.config.patch_size))
            .collect();
        let q = self.forward_objects(&mut g, &p, &tensors)?;
        let v = g.value(q);
        Ok((0..patches.len())
            .map(|k| ObjectQueryEmbedding {
                vector: v.row(k).iter().map(|x| x.as_f64()).collect(),
            })
            .collect())
    }

    /// Proposals for the scene and the association of every patch with them.
    pub fn associate(
        &self,
        image: &RgbImage,
        scene_boxes: &[BBox],
        patches: &[RgbaImage],
    ) -> Result<(Vec<RegionProposal>, AssociationMatrix)> {
        let proposals = self.detect(image, scene_boxes)?;
        let queries = self.encode_objects(patches)?;
        let q: Vec<Vec<f64>> = queries.into_iter().map(|e| e.vector).collect();
        let f: Vec<Vec<f64>> = proposals.iter().map(|r| r.feature.clone()).collect();
        let scores = association_scores(&q, &f, self.config.temperature, self.config.score_sign)?;
        Ok((proposals, association_probabilities(&scores)))
    }

    /// Last-layer decoder attention over the feature grid for every query,
    /// averaged over heads and renormalized over image positions.
    pub fn decoder_attention(
        &self,
        image: &RgbImage,
        scene_boxes: &[BBox],
    ) -> Result<Vec<AttentionMap>> {
        self.check_image(image)?;
        let mut g = Graph::inference();
        let p = g.bind(&self.params);
        let det = self.forward_detect(&mut g, &p, &image_tensor(image), scene_boxes)?;
        let grid = self.config.feature_grid();
        let heads = det.cross_attention.len() as f64;
        let n = self.config.num_queries;
        let mut maps = Vec::with_capacity(n);
        for q in 0..n {
            let mut w = vec![0.0f64; det.image_tokens];
            for &a in &det.cross_attention {
                for (acc, v) in w.iter_mut().zip(g.value(a).row(q)) {
                    *acc += v.as_f64() / heads;
                }
            }
            let s: f64 = w.iter().sum();
            if s > 0.0 {
                w.iter_mut().for_each(|v| *v /= s);
            }
            maps.push(AttentionMap {
                rows: grid,
                cols: grid,
                weights: w,
            });
        }
        Ok(maps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_association() {
        let q = vec![vec![1.0, 0.0]];
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = association_scores(&q, &f, 0.07, ScoreSign::Negative).unwrap();
        assert!((s.scores[0][0] + 1.0 / 0.07).abs() < 1e-12);
        assert_eq!(&s.scores[0][1..], &[0.0, 0.0]);
        let a = association_probabilities(&s);
        let e = (-1.0f64 / 0.07).exp();
        let expect = [e / (2.0 + e), 1.0 / (2.0 + e), 1.0 / (2.0 + e)];
        for (p, x) in a.probabilities[0].iter().zip(expect) {
            assert!((p - x).abs() < 1e-15);
        }
        assert!(association_scores(&q, &f, 0.0, ScoreSign::Negative).is_err());
        assert!(association_scores(&[vec![1.0]], &f, 0.07, ScoreSign::Negative).is_err());
    }

    #[test]
    fn ranking_is_stable_and_skips_no_match() {
        let probs = [0.1, 0.3, 0.3, 0.05, 0.25];
        assert_eq!(rank_placements(&probs, 3).unwrap(), vec![1, 2, 0]);
        assert_eq!(rank_placements(&probs, 10).unwrap(), vec![1, 2, 0, 3]);
        assert!(rank_placements(&probs, 0).is_err());
    }

    fn proposal(cx: f64) -> RegionProposal {
        RegionProposal {
            bbox: BBox::new(cx, 0.5, 0.1, 0.1).unwrap(),
            class_probs: vec![0.5, 0.3, 0.2],
            feature: vec![1.0],
        }
    }

    #[test]
    fn assignment_policies() {
        let props = vec![proposal(0.2), proposal(0.6)];
        let assoc = AssociationMatrix {
            scores: vec![vec![0.0; 3]; 3],
            probabilities: vec![
                vec![0.7, 0.2, 0.1],
                vec![0.6, 0.3, 0.1],
                vec![0.1, 0.1, 0.8],
            ],
        };
        let ind = assign_objects(&props, &assoc, AssignPolicy::Independent).unwrap();
        assert_eq!(ind[0].unwrap().proposal, 0);
        assert_eq!(ind[1].unwrap().proposal, 0);
        assert!(ind[2].is_none());
        let greedy = assign_objects(&props, &assoc, AssignPolicy::GreedyDistinct).unwrap();
        assert_eq!(greedy[0].unwrap().proposal, 0);
        assert_eq!(greedy[1].unwrap().proposal, 1);
        assert!(greedy[2].is_none());
    }

    #[test]
    fn positions_are_bounded_and_distinct() {
        let p = sine_positions(4, 4, 8);
        assert_eq!(p.len(), 16 * 8);
        assert!(p.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&p[0..8], &p[8..16]);
    }

    #[test]
    fn presets_validate() {
        for name in ["desk", "paper", "toy"] {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        let bad = ModelConfig {
            heads: 3,
            ..ModelConfig::toy()
        };
        assert!(matches!(bad.validate(), Err(ModelError::Config(_))));
    }
}

//! Temporal consistency head: pooled windowed features, the time MLP,
//! fusion with per-segment embeddings, region classification and presence
//! supervision.
//!
//! The head is trained on top of a frozen per-frame baseline: only regions
//! kept by the baseline's inference strategy are classified, their labels
//! come from the baseline's matched assignment against ground truth, and at
//! apply time the temporal logits replace the baseline class probabilities
//! while masks stay untouched.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softmax_rows_in_place, Graph, Var};
use crate::inference::{select, InferenceConfig, SelectedRegion};
use crate::mask::ClassId;
use crate::matching::{set_criterion, MatchWeights};
use crate::metrics::{FrameAnnotation, FramePredictions};
use crate::model::train::{clip_global_norm, AdamW, TrainConfig, TrainReport};
use crate::model::{ImageTensor, ParamSet, ToyModel};
use crate::synth::Video;

/// Temporal module configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalConfig {
    /// Window size W (frames).
    pub window: usize,
    /// Stride s between window frames.
    pub stride: usize,
    /// Time-feature width.
    pub d_t: usize,
    /// Segment-embedding width (must match the baseline's embed dim).
    pub d_s: usize,
    /// Hidden width of the time and presence MLPs.
    pub d_h: usize,
    pub lambda_presence: f64,
    /// Wiring flags of the ablation grid.
    pub time_mlp: bool,
    pub presence: bool,
    pub pool: PoolKind,
    /// Spatial pooling grid of the per-frame features.
    pub pool_h: usize,
    pub pool_w: usize,
    pub seed: u64,
    /// Blend weight of the baseline probabilities at apply time
    /// (0 = replace entirely with temporal probabilities).
    pub blend: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
}

impl TemporalConfig {
    pub fn new(d_s: usize) -> Self {
        Self {
            window: 8,
            stride: 1,
            d_t: 32,
            d_s,
            d_h: 32.max(d_s),
            lambda_presence: 1.0,
            time_mlp: true,
            presence: true,
            pool: PoolKind::Mean,
            pool_h: 16,
            pool_w: 16,
            seed: 0,
            blend: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 1 || self.stride < 1 {
            return Err(Error::ConfigInvalid("window and stride must be >= 1".into()));
        }
        if self.d_t < 1 || self.d_s < 1 || self.d_h < 1 {
            return Err(Error::ConfigInvalid("feature widths must be >= 1".into()));
        }
        if self.lambda_presence < 0.0 {
            return Err(Error::ConfigInvalid("lambda_presence must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.blend) {
            return Err(Error::ConfigInvalid("blend must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Width of the raw pooled per-frame feature vector.
    pub fn pool_dim(&self) -> usize {
        3 * self.pool_h * self.pool_w
    }
}

/// Frame indices of the window centered on keyframe `t`:
/// `t + s*(i - floor(W/2))` for `i in 0..W`, clamped into the video.
pub fn window_indices(t: usize, window: usize, stride: usize, video_len: usize) -> Vec<usize> {
    let half = (window / 2) as i64;
    (0..window as i64)
        .map(|i| {
            let idx = t as i64 + stride as i64 * (i - half);
            idx.clamp(0, video_len as i64 - 1) as usize
        })
        .collect()
}

/// Arithmetic mean over the window rows. Column sums run over sorted values
/// so the result is bit-identical under any frame permutation.
pub fn pool_time(features: &Array2<f64>) -> Array2<f64> {
    let w = features.nrows() as f64;
    let mut out = Array2::zeros((1, features.ncols()));
    let mut column: Vec<f64> = Vec::with_capacity(features.nrows());
    for j in 0..features.ncols() {
        column.clear();
        column.extend(features.column(j).iter().copied());
        column.sort_by(f64::total_cmp);
        out[(0, j)] = column.iter().sum::<f64>() / w;
    }
    out
}

/// Max-pool variant, selectable by configuration.
pub fn pool_time_max(features: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((1, features.ncols()));
    for j in 0..features.ncols() {
        out[(0, j)] = features.column(j).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    }
    out
}

/// Parameters of the fused region classifier, in plain array form for the
/// pure functions.
#[derive(Debug, Clone)]
pub struct FuseParams {
    pub time_w1: Array2<f64>,
    pub time_b1: Array2<f64>,
    pub time_w2: Array2<f64>,
    pub time_b2: Array2<f64>,
    pub seg_w: Array2<f64>,
    pub seg_b: Array2<f64>,
    pub cls_w: Array2<f64>,
    pub cls_b: Array2<f64>,
    pub time_mlp: bool,
}

/// Fused classification: `u = TimeMLP(pooled)` (identity when the time MLP
/// is ablated), `r_q = Linear(seg_q)`, `logits_q = Classifier(concat(u, r_q))`
/// with `u` shared across all regions. Row-wise, so query permutations
/// permute the logits bit-exactly.
pub fn fuse_classify(pooled: &Array2<f64>, seg: &Array2<f64>, params: &FuseParams) -> Array2<f64> {
    let u = if params.time_mlp {
        let hidden = row_linear(pooled, &params.time_w1, &params.time_b1).mapv(f64::tanh);
        row_linear(&hidden, &params.time_w2, &params.time_b2)
    } else {
        pooled.clone()
    };
    let n = seg.nrows();
    let classes = params.cls_w.ncols();
    let mut logits = Array2::zeros((n, classes));
    for q in 0..n {
        let seg_row = seg.row(q);
        let mut fused: Vec<f64> = u.row(0).to_vec();
        for j in 0..params.seg_w.ncols() {
            let mut acc = params.seg_b[(0, j)];
            for k in 0..params.seg_w.nrows() {
                acc += seg_row[k] * params.seg_w[(k, j)];
            }
            fused.push(acc);
        }
        for c in 0..classes {
            let mut acc = params.cls_b[(0, c)];
            for (k, &f) in fused.iter().enumerate() {
                acc += f * params.cls_w[(k, c)];
            }
            logits[(q, c)] = acc;
        }
    }
    logits
}

fn row_linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), w.ncols()));
    for i in 0..x.nrows() {
        for j in 0..w.ncols() {
            let mut acc = b[(0, j)];
            for k in 0..w.nrows() {
                acc += x[(i, k)] * w[(k, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PresenceParams {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

/// Multi-label presence probabilities: logistic of a 2-layer MLP on the
/// pooled time features; entries are independent, not a softmax.
pub fn presence_head(pooled: &Array2<f64>, params: &PresenceParams) -> Vec<f64> {
    let hidden = row_linear(pooled, &params.w1, &params.b1).mapv(f64::tanh);
    let logits = row_linear(&hidden, &params.w2, &params.b2);
    logits.row(0).iter().map(|&l| sigmoid(l)).collect()
}

const PROB_CLAMP: f64 = 1e-12;

/// Region cross-entropy plus weighted presence BCE:
/// `CE(region logits, labels) + lambda * mean_c BCE(presence, target)`.
pub fn temporal_loss(
    region_logits: &Array2<f64>,
    labels: &[usize],
    presence_probs: &[f64],
    presence_target: &[u8],
    lambda_presence: f64,
) -> Result<f64> {
    if region_logits.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            region_logits.nrows(),
            labels.len()
        )));
    }
    if presence_probs.len() != presence_target.len() {
        return Err(Error::ShapeMismatch("presence probs vs target".into()));
    }
    let mut ce = 0.0;
    for (row, &label) in region_logits.rows().into_iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[label];
    }
    if !labels.is_empty() {
        ce /= labels.len() as f64;
    }
    let mut bce = 0.0;
    for (&p, &t) in presence_probs.iter().zip(presence_target) {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= if t == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    if !presence_probs.is_empty() {
        bce /= presence_probs.len() as f64;
    }
    let loss = ce + lambda_presence * bce;
    if !loss.is_finite() {
        return Err(Error::NonFiniteInput("temporal loss".into()));
    }
    Ok(loss)
}

/// Fixed average pooling of a frame to the configured grid, rounded to f32
/// so the in-process path and the feature-cache file agree bit-for-bit.
pub fn pool_frame_features(image: &ImageTensor, pool_h: usize, pool_w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(3 * pool_h * pool_w);
    for c in 0..image.channels {
        for py in 0..pool_h {
            for px in 0..pool_w {
                let y0 = py * image.height / pool_h;
                let y1 = ((py + 1) * image.height / pool_h).max(y0 + 1);
                let x0 = px * image.width / pool_w;
                let x1 = ((px + 1) * image.width / pool_w).max(x0 + 1);
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += image.get(c, y, x);
                    }
                }
                out.push((sum / ((y1 - y0) * (x1 - x0)) as f64) as f32);
            }
        }
    }
    out
}

/// Pooled per-frame features of one video.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub frames: Vec<Vec<f32>>,
}

pub fn pool_video(video: &Video, cfg: &TemporalConfig) -> VideoFeatures {
    VideoFeatures {
        frames: video
            .frames
            .iter()
            .map(|(image, _)| pool_frame_features(image, cfg.pool_h, cfg.pool_w))
            .collect(),
    }
}

/// Window-independent training material for one keyframe: the baseline's
/// selected regions, their segment embeddings, the matched labels (class
/// index or `C` for no-object) and the presence target.
#[derive(Debug, Clone)]
pub struct KeyframeRecord {
    pub video: usize,
    pub t: usize,
    pub frame: String,
    pub regions: Vec<SelectedRegion>,
    /// Segment embeddings of the selected regions, one row per region.
    pub seg: Array2<f64>,
    pub labels: Vec<usize>,
    pub presence: Vec<u8>,
}

/// Run the frozen baseline over every video frame and collect the training
/// records: selected regions, their embeddings, matched labels, presence.
pub fn build_keyframe_records(
    videos: &[Video],
    baseline: &ToyModel,
    infer_cfg: &InferenceConfig,
    weights: &MatchWeights,
) -> Result<Vec<KeyframeRecord>> {
    let num_classes = baseline.cfg.num_classes;
    let mut records = Vec::new();
    for (vi, video) in videos.iter().enumerate() {
        for (t, (image, ann)) in video.frames.iter().enumerate() {
            let (set, segments) = baseline.forward(&ann.frame, image)?;
            let regions = select(&set, infer_cfg)?;
            let assignment = set_criterion(&set, ann, weights)?.assignment;
            let mut class_for_query = vec![num_classes; set.len()];
            for (col, &row) in assignment.row_for_col.iter().enumerate() {
                class_for_query[row] = (ann.instances[col].0 .0 - 1) as usize;
            }
            let labels: Vec<usize> = regions.iter().map(|r| class_for_query[r.query]).collect();
            let mut seg = Array2::zeros((regions.len(), baseline.cfg.embed_dim));
            for (i, region) in regions.iter().enumerate() {
                seg.row_mut(i).assign(&segments.0.row(region.query));
            }
            let mut presence = vec![0u8; num_classes];
            for class in ann.present_classes() {
                presence[(class.0 - 1) as usize] = 1;
            }
            records.push(KeyframeRecord {
                video: vi,
                t,
                frame: ann.frame.clone(),
                regions,
                seg,
                labels,
                presence,
            });
        }
    }
    Ok(records)
}

/// Trainable temporal module: per-frame projection with positional
/// embeddings, two temporal self-attention blocks, pooling, the time and
/// presence MLPs and the fused classifier.
pub struct TemporalModel {
    pub cfg: TemporalConfig,
    pub num_classes: usize,
    pub params: ParamSet,
}

impl TemporalModel {
    pub fn new(cfg: TemporalConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamSet::default();
        let dt = cfg.d_t;
        // Fan-in-scaled init keeps attention logits and gradients away from
        // the numerical noise floor at this module's small widths.
        let randn = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            let normal = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("valid std");
            Array2::from_shape_fn((r, c), |_| normal.sample(rng))
        };

        params.register("frame_proj.w", randn(&mut rng, cfg.pool_dim(), dt), true);
        params.register("frame_proj.b", Array2::zeros((1, dt)), false);
        params.register("pos_embed", randn(&mut rng, cfg.window, dt), false);
        for l in 0..2 {
            let p = format!("time.{l}");
            params.register(&format!("{p}.ln_attn.g"), Array2::from_elem((1, dt), 1.0), false);
            params.register(&format!("{p}.ln_attn.b"), Array2::zeros((1, dt)), false);
            for name in ["q", "v", "out"] {
                params.register(&format!("{p}.attn.{name}.w"), randn(&mut rng, dt, dt), true);
                params.register(&format!("{p}.attn.{name}.b"), Array2::zeros((1, dt)), false);
            }
            // No key bias: a shared key offset cancels inside the softmax.
            params.register(&format!("{p}.attn.k.w"), randn(&mut rng, dt, dt), true);
            params.register(&format!("{p}.ln_ffn.g"), Array2::from_elem((1, dt), 1.0), false);
            params.register(&format!("{p}.ln_ffn.b"), Array2::zeros((1, dt)), false);
            params.register(&format!("{p}.ffn.w1.w"), randn(&mut rng, dt, 2 * dt), true);
            params.register(&format!("{p}.ffn.w1.b"), Array2::zeros((1, 2 * dt)), false);
            params.register(&format!("{p}.ffn.w2.w"), randn(&mut rng, 2 * dt, dt), true);
            params.register(&format!("{p}.ffn.w2.b"), Array2::zeros((1, dt)), false);
        }
        if cfg.time_mlp {
            params.register("time_mlp.w1", randn(&mut rng, dt, cfg.d_h), true);
            params.register("time_mlp.b1", Array2::zeros((1, cfg.d_h)), false);
            params.register("time_mlp.w2", randn(&mut rng, cfg.d_h, dt), true);
            params.register("time_mlp.b2", Array2::zeros((1, dt)), false);
        }
        params.register("seg_proj.w", randn(&mut rng, cfg.d_s, dt), true);
        params.register("seg_proj.b", Array2::zeros((1, dt)), false);
        params.register("classifier.w", randn(&mut rng, 2 * dt, num_classes + 1), true);
        params.register("classifier.b", Array2::zeros((1, num_classes + 1)), false);
        if cfg.presence {
            params.register("presence.w1", randn(&mut rng, dt, cfg.d_h), true);
            params.register("presence.b1", Array2::zeros((1, cfg.d_h)), false);
            params.register("presence.w2", randn(&mut rng, cfg.d_h, num_classes), true);
            params.register("presence.b2", Array2::zeros((1, num_classes)), false);
        }
        Ok(Self { cfg, num_classes, params })
    }

    pub fn from_parts(cfg: TemporalConfig, num_classes: usize, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, num_classes, params })
    }

    /// Assemble the W x pool_dim constant input for a keyframe.
    pub fn window_features(&self, features: &VideoFeatures, t: usize) -> Array2<f64> {
        let indices = window_indices(t, self.cfg.window, self.cfg.stride, features.frames.len());
        let dim = self.cfg.pool_dim();
        let mut out = Array2::zeros((indices.len(), dim));
        for (row, &idx) in indices.iter().enumerate() {
            for (col, &v) in features.frames[idx].iter().enumerate() {
                out[(row, col)] = v as f64;
            }
        }
        out
    }

    /// Record the encoder and heads on the tape. Returns the region logits
    /// (None when the keyframe has no regions) and the presence logits.
    fn build(
        &self,
        g: &mut Graph,
        leaves: &[Var],
        window: &Array2<f64>,
        seg: &Array2<f64>,
    ) -> (Option<Var>, Option<Var>) {
        let cfg = &self.cfg;
        let var_of = |name: &str| leaves[self.params.index_of(name)];
        let scale = 1.0 / (cfg.d_t as f64).sqrt();

        let input = g.leaf(window.clone());
        let proj = g.matmul(input, var_of("frame_proj.w"));
        let proj = g.add_row(proj, var_of("frame_proj.b"));
        let mut h = g.add(proj, var_of("pos_embed"));
        for l in 0..2 {
            let p = format!("time.{l}");
            let t = g.layer_norm(h, var_of(&format!("{p}.ln_attn.g")), var_of(&format!("{p}.ln_attn.b")));
            let q = {
                let m = g.matmul(t, var_of(&format!("{p}.attn.q.w")));
                g.add_row(m, var_of(&format!("{p}.attn.q.b")))
            };
            let k = g.matmul(t, var_of(&format!("{p}.attn.k.w")));
            let v = {
                let m = g.matmul(t, var_of(&format!("{p}.attn.v.w")));
                g.add_row(m, var_of(&format!("{p}.attn.v.b")))
            };
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled, None);
            let mixed = g.matmul(attn, v);
            let out = {
                let m = g.matmul(mixed, var_of(&format!("{p}.attn.out.w")));
                g.add_row(m, var_of(&format!("{p}.attn.out.b")))
            };
            h = g.add(h, out);
            let t = g.layer_norm(h, var_of(&format!("{p}.ln_ffn.g")), var_of(&format!("{p}.ln_ffn.b")));
            let f1 = {
                let m = g.matmul(t, var_of(&format!("{p}.ffn.w1.w")));
                g.add_row(m, var_of(&format!("{p}.ffn.w1.b")))
            };
            let act = g.tanh(f1);
            let f2 = {
                let m = g.matmul(act, var_of(&format!("{p}.ffn.w2.w")));
                g.add_row(m, var_of(&format!("{p}.ffn.w2.b")))
            };
            h = g.add(h, f2);
        }
        let pooled = g.mean_rows(h);

        let u = if cfg.time_mlp {
            let h1 = {
                let m = g.matmul(pooled, var_of("time_mlp.w1"));
                g.add_row(m, var_of("time_mlp.b1"))
            };
            let act = g.tanh(h1);
            let m = g.matmul(act, var_of("time_mlp.w2"));
            g.add_row(m, var_of("time_mlp.b2"))
        } else {
            pooled
        };

        let region_logits = if seg.nrows() > 0 {
            let seg_var = g.leaf(seg.clone());
            let r = {
                let m = g.matmul(seg_var, var_of("seg_proj.w"));
                g.add_row(m, var_of("seg_proj.b"))
            };
            let wide = g.broadcast_rows(u, seg.nrows());
            let fused = g.concat_cols(wide, r);
            let m = g.matmul(fused, var_of("classifier.w"));
            Some(g.add_row(m, var_of("classifier.b")))
        } else {
            None
        };

        let presence_logits = if cfg.presence {
            let h1 = {
                let m = g.matmul(pooled, var_of("presence.w1"));
                g.add_row(m, var_of("presence.b1"))
            };
            let act = g.tanh(h1);
            let m = g.matmul(act, var_of("presence.w2"));
            Some(g.add_row(m, var_of("presence.b2")))
        } else {
            None
        };

        (region_logits, presence_logits)
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        region_logits: Option<Var>,
        presence_logits: Option<Var>,
        labels: &[usize],
        presence: &[u8],
    ) -> Var {
        let mut loss = match region_logits {
            Some(logits) if !labels.is_empty() => {
                g.ce_rows(logits, labels.to_vec(), vec![1.0; labels.len()])
            }
            _ => g.leaf(Array2::zeros((1, 1))),
        };
        if let Some(p_logits) = presence_logits {
            let target = std::rc::Rc::new(Array2::from_shape_fn((1, presence.len()), |(_, j)| {
                presence[j] as f64
            }));
            let bce = g.bce_logits(p_logits, target, 1.0 / presence.len() as f64);
            let weighted = g.scale(bce, self.cfg.lambda_presence);
            loss = g.add(loss, weighted);
        }
        loss
    }

    /// Loss and gradients for one keyframe record.
    pub fn loss_and_grads(
        &self,
        window: &Array2<f64>,
        record: &KeyframeRecord,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let leaves: Vec<Var> =
            self.params.entries().iter().map(|e| g.leaf(e.value.clone())).collect();
        let (region_logits, presence_logits) = self.build(&mut g, &leaves, window, &record.seg);
        let loss =
            self.build_loss(&mut g, region_logits, presence_logits, &record.labels, &record.presence);
        let value = g.scalar(loss);
        let grads = g.backward(loss);
        Ok((value, leaves.iter().map(|v| grads[v.0].clone()).collect()))
    }

    pub fn loss_value(&self, window: &Array2<f64>, record: &KeyframeRecord) -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> =
            self.params.entries().iter().map(|e| g.leaf(e.value.clone())).collect();
        let (region_logits, presence_logits) = self.build(&mut g, &leaves, window, &record.seg);
        let loss =
            self.build_loss(&mut g, region_logits, presence_logits, &record.labels, &record.presence);
        Ok(g.scalar(loss))
    }

    /// Temporal class probabilities for a keyframe's regions (rows sum to 1).
    pub fn classify(&self, window: &Array2<f64>, seg: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let leaves: Vec<Var> =
            self.params.entries().iter().map(|e| g.leaf(e.value.clone())).collect();
        let (region_logits, _) = self.build(&mut g, &leaves, window, seg);
        let logits = match region_logits {
            Some(v) => g.value(v).clone(),
            None => Array2::zeros((0, self.num_classes + 1)),
        };
        let mut probs = logits;
        softmax_rows_in_place(&mut probs);
        Ok(probs)
    }
}

/// Train the temporal module over keyframe records; the baseline stays
/// frozen throughout.
pub fn train_temporal(
    model: &mut TemporalModel,
    records: &[KeyframeRecord],
    features: &[VideoFeatures],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::ConfigInvalid("no keyframe records".into()));
    }
    let mut optimizer = AdamW::new(&model.params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;

    for _epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut acc: Option<Vec<Array2<f64>>> = None;
            let mut batch_loss = 0.0;
            for &idx in batch {
                let record = &records[idx];
                let window = model.window_features(&features[record.video], record.t);
                let (loss, grads) = model.loss_and_grads(&window, record)?;
                if !loss.is_finite() {
                    return Err(Error::DivergenceDetected(steps));
                }
                batch_loss += loss;
                match &mut acc {
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            *x += y;
                        }
                    }
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                *g *= scale;
            }
            if let Some(clip) = cfg.clip_norm {
                clip_global_norm(&mut grads, clip);
            }
            optimizer.step(&mut model.params, &grads);
            steps += 1;
            epoch_sum += batch_loss * scale;
        }
        let batches = order.chunks(cfg.batch_size.max(1)).len();
        epoch_losses.push(epoch_sum / batches as f64);
    }
    Ok(TrainReport { epoch_losses, steps })
}

/// Apply the trained head: replace (or blend) the class decision of every
/// selected region with the temporal prediction; masks are untouched.
/// Regions whose final argmax is no-object are dropped.
pub fn relabel_keyframe(
    model: &TemporalModel,
    record: &KeyframeRecord,
    features: &VideoFeatures,
) -> Result<FramePredictions> {
    let window = model.window_features(features, record.t);
    let probs = model.classify(&window, &record.seg)?;
    let mut regions = Vec::new();
    for (i, region) in record.regions.iter().enumerate() {
        let temporal_row = probs.row(i);
        let blended: Vec<f64> = if model.cfg.blend > 0.0 {
            // Reconstruct a degenerate baseline vector from the region's
            // class and score for blending.
            let mut base = vec![0.0; model.num_classes + 1];
            base[(region.class.0 - 1) as usize] = region.score;
            base[model.num_classes] = 1.0 - region.score;
            temporal_row
                .iter()
                .zip(&base)
                .map(|(&t, &b)| model.cfg.blend * b + (1.0 - model.cfg.blend) * t)
                .collect()
        } else {
            temporal_row.to_vec()
        };
        let (best_idx, best) = blended[..model.num_classes]
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.partial_cmp(b).unwrap().then(ib.cmp(ia)))
            .expect("at least one class");
        if *best <= blended[model.num_classes] {
            continue;
        }
        regions.push((ClassId(best_idx as u32 + 1), region.mask.clone(), *best));
    }
    Ok(FramePredictions { frame: record.frame.clone(), regions })
}

/// The four wiring variants of the ablation grid.
pub fn ablation_variants(base: &TemporalConfig) -> Vec<TemporalConfig> {
    [(false, false), (true, false), (false, true), (true, true)]
        .iter()
        .map(|&(time_mlp, presence)| TemporalConfig {
            time_mlp,
            presence,
            lambda_presence: if presence { base.lambda_presence } else { 0.0 },
            ..base.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn window_indices_examples() {
        assert_eq!(window_indices(10, 8, 1, 100), vec![6, 7, 8, 9, 10, 11, 12, 13]);
        assert_eq!(window_indices(0, 8, 1, 100), vec![0, 0, 0, 0, 0, 1, 2, 3]);
        assert_eq!(window_indices(10, 4, 2, 100), vec![6, 8, 10, 12]);
        // Always exactly W indices, keyframe at floor(W/2) for interior t.
        let idx = window_indices(50, 8, 1, 100);
        assert_eq!(idx.len(), 8);
        assert_eq!(idx[4], 50);
        // Clamping at the tail.
        assert_eq!(window_indices(99, 8, 1, 100), vec![95, 96, 97, 98, 99, 99, 99, 99]);
    }

    #[test]
    fn pool_time_mean_properties() {
        let row = array![[1.0, -2.0, 0.5]];
        let stacked = ndarray::concatenate(ndarray::Axis(0), &[row.view(), row.view()]).unwrap();
        assert_eq!(pool_time(&stacked), row);

        let v = array![[1.0, -3.0], [-1.0, 3.0]];
        assert_eq!(pool_time(&v), array![[0.0, 0.0]]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = Array2::from_shape_fn((8, 16), |_| rng.random_range(-2.0..2.0));
        let pooled = pool_time(&features);
        for j in 0..16 {
            let mut sorted: Vec<f64> = features.column(j).to_vec();
            sorted.sort_by(f64::total_cmp);
            let mean = sorted.iter().sum::<f64>() / 8.0;
            assert_eq!(pooled[(0, j)], mean);
        }

        // Bit-identical under frame permutation.
        let mut permuted = features.clone();
        for (dst, &src) in [5, 2, 7, 0, 3, 6, 1, 4].iter().enumerate() {
            permuted.row_mut(dst).assign(&features.row(src));
        }
        assert_eq!(pool_time(&features), pool_time(&permuted));

        assert_eq!(pool_time_max(&v), array![[1.0, 3.0]]);
    }

    fn seeded_fuse_params(
        rng: &mut ChaCha8Rng,
        d_t: usize,
        d_s: usize,
        classes: usize,
    ) -> FuseParams {
        let mut randn =
            |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-0.5..0.5));
        FuseParams {
            time_w1: randn(d_t, d_t),
            time_b1: randn(1, d_t),
            time_w2: randn(d_t, d_t),
            time_b2: randn(1, d_t),
            seg_w: randn(d_s, d_t),
            seg_b: randn(1, d_t),
            cls_w: randn(2 * d_t, classes + 1),
            cls_b: randn(1, classes + 1),
            time_mlp: true,
        }
    }

    #[test]
    fn fuse_classify_identical_rows_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = seeded_fuse_params(&mut rng, 4, 6, 3);
        let pooled = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0));
        let row = Array2::from_shape_fn((1, 6), |_| rng.random_range(-1.0..1.0));
        let seg = ndarray::concatenate(ndarray::Axis(0), &[row.view(), row.view()]).unwrap();
        let logits = fuse_classify(&pooled, &seg, &params);
        assert_eq!(logits.row(0), logits.row(1));

        let seg3 = Array2::from_shape_fn((3, 6), |_| rng.random_range(-1.0..1.0));
        let base = fuse_classify(&pooled, &seg3, &params);
        let mut permuted = seg3.clone();
        for (dst, &src) in [2, 0, 1].iter().enumerate() {
            permuted.row_mut(dst).assign(&seg3.row(src));
        }
        let out = fuse_classify(&pooled, &permuted, &params);
        for (dst, &src) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(out.row(dst), base.row(src));
        }
    }

    #[test]
    fn fuse_classify_matches_hand_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = seeded_fuse_params(&mut rng, 3, 4, 2);
        let pooled = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let seg = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let logits = fuse_classify(&pooled, &seg, &params);

        // Hand-composed: u = tanh(pooled W1 + b1) W2 + b2; fused = [u, seg W + b].
        let hidden = row_linear(&pooled, &params.time_w1, &params.time_b1).mapv(f64::tanh);
        let u = row_linear(&hidden, &params.time_w2, &params.time_b2);
        for q in 0..2 {
            let seg_row = seg.row(q).insert_axis(ndarray::Axis(0)).to_owned();
            let r = row_linear(&seg_row, &params.seg_w, &params.seg_b);
            for c in 0..3 {
                let mut acc = params.cls_b[(0, c)];
                for k in 0..3 {
                    acc += u[(0, k)] * params.cls_w[(k, c)];
                }
                for k in 0..3 {
                    acc += r[(0, k)] * params.cls_w[(3 + k, c)];
                }
                assert!((logits[(q, c)] - acc).abs() < 1e-9);
            }
        }

        // Time MLP off: the pooled features pass through unchanged.
        let mut no_mlp = params.clone();
        no_mlp.time_mlp = false;
        let direct = fuse_classify(&pooled, &seg, &no_mlp);
        for q in 0..2 {
            let seg_row = seg.row(q).insert_axis(ndarray::Axis(0)).to_owned();
            let r = row_linear(&seg_row, &no_mlp.seg_w, &no_mlp.seg_b);
            for c in 0..3 {
                let mut acc = no_mlp.cls_b[(0, c)];
                for k in 0..3 {
                    acc += pooled[(0, k)] * no_mlp.cls_w[(k, c)];
                }
                for k in 0..3 {
                    acc += r[(0, k)] * no_mlp.cls_w[(3 + k, c)];
                }
                assert!((direct[(q, c)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn presence_head_behaviour() {
        let zero = PresenceParams {
            w1: Array2::zeros((4, 5)),
            b1: Array2::zeros((1, 5)),
            w2: Array2::zeros((5, 3)),
            b2: Array2::zeros((1, 3)),
        };
        let pooled = Array2::from_elem((1, 4), 0.3);
        assert_eq!(presence_head(&pooled, &zero), vec![0.5, 0.5, 0.5]);

        let saturated = PresenceParams { b2: Array2::from_elem((1, 3), 40.0), ..zero.clone() };
        for p in presence_head(&pooled, &saturated) {
            assert!(p > 0.999999);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = PresenceParams {
            w1: Array2::from_shape_fn((4, 5), |_| rng.random_range(-0.7..0.7)),
            b1: Array2::from_shape_fn((1, 5), |_| rng.random_range(-0.3..0.3)),
            w2: Array2::from_shape_fn((5, 3), |_| rng.random_range(-0.7..0.7)),
            b2: Array2::from_shape_fn((1, 3), |_| rng.random_range(-0.3..0.3)),
        };
        let probs = presence_head(&pooled, &params);
        let hidden = row_linear(&pooled, &params.w1, &params.b1).mapv(f64::tanh);
        let logits = row_linear(&hidden, &params.w2, &params.b2);
        for (p, &l) in probs.iter().zip(logits.row(0).iter()) {
            assert!((p - sigmoid(l)).abs() < 1e-9);
        }
    }

    #[test]
    fn temporal_loss_examples() {
        // Confident perfect logits and perfect presence drive the loss to 0.
        let logits = array![[30.0, 0.0, 0.0], [0.0, 30.0, 0.0]];
        let loss = temporal_loss(&logits, &[0, 1], &[1.0 - 1e-12, 1e-12], &[1, 0], 1.0).unwrap();
        assert!(loss < 1e-9, "loss {loss}");

        // lambda = 0 reduces to the pure region cross entropy.
        let logits = array![[1.0, -0.5, 0.2], [0.3, 0.8, -1.0]];
        let ce_only = temporal_loss(&logits, &[0, 2], &[0.9, 0.1], &[0, 1], 0.0).unwrap();
        let lse = |row: [f64; 3]| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let expected = ((lse([1.0, -0.5, 0.2]) - 1.0) + (lse([0.3, 0.8, -1.0]) - -1.0)) / 2.0;
        assert!((ce_only - expected).abs() < 1e-12);

        // Hand-built 2-region 3-class instance with presence supervision.
        let probs = [0.8, 0.3, 0.6];
        let target = [1u8, 0, 1];
        let full = temporal_loss(&logits, &[0, 2], &probs, &target, 2.0).unwrap();
        let bce = -(0.8f64.ln() + 0.7f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((full - (expected + 2.0 * bce)).abs() < 1e-12);

        // Label count mismatch is an error.
        assert!(temporal_loss(&logits, &[0], &probs, &target, 1.0).is_err());
    }

    fn toy_record(seed: u64, n_regions: usize, d_s: usize, classes: usize) -> KeyframeRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let regions = (0..n_regions)
            .map(|q| SelectedRegion { class: ClassId(1), mask: mask.clone(), score: 0.9, query: q })
            .collect();
        KeyframeRecord {
            video: 0,
            t: 3,
            frame: "v/3".into(),
            regions,
            seg: Array2::from_shape_fn((n_regions, d_s), |_| rng.random_range(-1.0..1.0)),
            labels: (0..n_regions).map(|i| i % (classes + 1)).collect(),
            presence: (0..classes).map(|i| (i % 2) as u8).collect(),
        }
    }

    fn toy_features(cfg: &TemporalConfig, len: usize, seed: u64) -> VideoFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoFeatures {
            frames: (0..len)
                .map(|_| (0..cfg.pool_dim()).map(|_| rng.random_range(0.0f32..1.0)).collect())
                .collect(),
        }
    }

    fn small_cfg() -> TemporalConfig {
        let mut cfg = TemporalConfig::new(6);
        cfg.pool_h = 2;
        cfg.pool_w = 2;
        cfg.d_t = 5;
        cfg.d_h = 7;
        cfg.window = 4;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn temporal_gradients_pass_finite_differences() {
        let cfg = small_cfg();
        let model = TemporalModel::new(cfg.clone(), 3).unwrap();
        let record = toy_record(1, 3, 6, 3);
        let features = toy_features(&cfg, 10, 2);
        let window = model.window_features(&features, record.t);

        let report = crate::model::grad::grad_check(
            &model.params,
            1e-5,
            250,
            11,
            &|p| {
                let probe = TemporalModel::from_parts(cfg.clone(), 3, p.clone()).unwrap();
                probe.loss_value(&window, &record)
            },
            &|p| {
                let probe = TemporalModel::from_parts(cfg.clone(), 3, p.clone()).unwrap();
                Ok(probe.loss_and_grads(&window, &record)?.1)
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn ablation_wiring() {
        let base = TemporalConfig::new(6);
        let variants = ablation_variants(&base);
        assert_eq!(variants.len(), 4);
        assert!(!variants[0].time_mlp && !variants[0].presence);
        assert_eq!(variants[0].lambda_presence, 0.0);
        assert!(variants[3].time_mlp && variants[3].presence);

        // Presence on/off changes only the loss path: classification
        // probabilities agree when the shared parameters agree.
        let cfg_on = small_cfg();
        let cfg_off = TemporalConfig { presence: false, lambda_presence: 0.0, ..cfg_on.clone() };
        let on = TemporalModel::new(cfg_on.clone(), 3).unwrap();
        let mut off = TemporalModel::new(cfg_off, 3).unwrap();
        for entry in on.params.entries() {
            if !entry.name.starts_with("presence.") {
                let idx = off.params.index_of(&entry.name);
                off.params.entries_mut()[idx].value = entry.value.clone();
            }
        }
        let record = toy_record(2, 2, 6, 3);
        let features = toy_features(&cfg_on, 8, 3);
        let window = on.window_features(&features, 3);
        let probs_on = on.classify(&window, &record.seg).unwrap();
        let probs_off = off.classify(&window, &record.seg).unwrap();
        assert_eq!(probs_on, probs_off);

        // Time MLP off removes its parameters and still classifies.
        let cfg_nomlp = TemporalConfig { time_mlp: false, ..cfg_on };
        let nomlp = TemporalModel::new(cfg_nomlp, 3).unwrap();
        assert!(nomlp.params.entries().iter().all(|e| !e.name.starts_with("time_mlp")));
        let probs = nomlp.classify(&window, &record.seg).unwrap();
        assert_eq!(probs.nrows(), 2);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let mut cfg = small_cfg();
        cfg.d_t = 6;
        let features = vec![toy_features(&cfg, 12, 7)];
        let records: Vec<KeyframeRecord> =
            (0..6).map(|i| KeyframeRecord { t: i + 3, ..toy_record(i as u64, 3, 6, 3) }).collect();
        let train_cfg = TrainConfig { epochs: 40, batch_size: 2, seed: 5, ..TrainConfig::default() };

        let mut a = TemporalModel::new(cfg.clone(), 3).unwrap();
        let ra = train_temporal(&mut a, &records, &features, &train_cfg).unwrap();
        let mut b = TemporalModel::new(cfg, 3).unwrap();
        let rb = train_temporal(&mut b, &records, &features, &train_cfg).unwrap();
        assert_eq!(ra.epoch_losses, rb.epoch_losses);
        assert!(ra.epoch_losses.last().unwrap() < ra.epoch_losses.first().unwrap());
    }

    #[test]
    fn relabel_keeps_masks_and_drops_no_object() {
        let cfg = small_cfg();
        let model = TemporalModel::new(cfg.clone(), 3).unwrap();
        let record = toy_record(4, 2, 6, 3);
        let features = toy_features(&cfg, 8, 6);
        let preds = relabel_keyframe(&model, &record, &features).unwrap();
        assert!(preds.regions.len() <= record.regions.len());
        for (_, mask, _) in &preds.regions {
            assert_eq!(mask, &record.regions[0].mask);
        }
        assert_eq!(preds.frame, "v/3");
    }

    #[test]
    fn empty_keyframe_trains_on_presence_only() {
        let cfg = small_cfg();
        let model = TemporalModel::new(cfg.clone(), 3).unwrap();
        let record = KeyframeRecord {
            regions: Vec::new(),
            seg: Array2::zeros((0, 6)),
            labels: Vec::new(),
            ..toy_record(5, 0, 6, 3)
        };
        let features = toy_features(&cfg, 8, 8);
        let window = model.window_features(&features, record.t);
        let (loss, grads) = model.loss_and_grads(&window, &record).unwrap();
        assert!(loss.is_finite());
        // Presence parameters receive gradient; the classifier does not.
        let presence_idx = model.params.index_of("presence.w2");
        assert!(grads[presence_idx].iter().any(|&g| g != 0.0));
        let cls_idx = model.params.index_of("classifier.w");
        assert!(grads[cls_idx].iter().all(|&g| g == 0.0));
    }
}

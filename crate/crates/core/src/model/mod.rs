//! Desk-scale masked-attention set-prediction segmenter.
//!
//! The model follows the mask-classification meta-architecture: a learned
//! patch embedding plus two pixel self-attention layers stand in for the
//! pixel decoder, N learnable queries run through L decoder layers of masked
//! cross-attention, query self-attention and a feed-forward block, and
//! shared heads emit class logits and dot-product mask logits after every
//! layer. Attention masks for each layer are thresholded from the previous
//! layer's predicted soft masks and are detached from the gradient path, as
//! is the Hungarian matching. Mask logits live on the coarse feature grid
//! and are bilinearly upsampled to image resolution for output and loss.

pub mod attention;
pub mod grad;
pub mod train;

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, softmax_rows_in_place, Graph, UpsamplePlan, Var};
use crate::inference::{ProposalSet, RegionProposal, SoftMask};
use crate::mask::ClassId;
use crate::matching::{hungarian, CostMatrix, MatchWeights, PROB_CLAMP};
use crate::metrics::FrameAnnotation;
use attention::attention_mask_from_probs;

/// Raw toy image: channel-major `[c][y][x]` scalars in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Flatten into grid patches: one row per grid cell, holding the
    /// `channels * patch * patch` raw values of that cell.
    pub fn to_patches(&self, patch: usize) -> Array2<f64> {
        let gh = self.height / patch;
        let gw = self.width / patch;
        let mut out = Array2::zeros((gh * gw, self.channels * patch * patch));
        for gy in 0..gh {
            for gx in 0..gw {
                let row = gy * gw + gx;
                let mut col = 0;
                for c in 0..self.channels {
                    for dy in 0..patch {
                        for dx in 0..patch {
                            out[(row, col)] = self.get(c, gy * patch + dy, gx * patch + dx);
                            col += 1;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Configuration of the toy segmenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Query count N.
    pub num_queries: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    /// Decoder layers L.
    pub decoder_layers: usize,
    /// Pixel self-attention layers in the feature extractor.
    #[serde(default = "default_pixel_layers")]
    pub pixel_layers: usize,
    /// Real instrument classes C (logits have C+1 slots).
    pub num_classes: usize,
    /// Feature grid dims; the image is `grid * patch` pixels per side.
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub seed: u64,
}

fn default_pixel_layers() -> usize {
    2
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 100,
            embed_dim: 32,
            decoder_layers: 2,
            pixel_layers: 2,
            num_classes: 7,
            grid_h: 16,
            grid_w: 16,
            patch: 4,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_queries < 1 || self.embed_dim < 4 || self.decoder_layers < 1 {
            return Err(Error::ConfigInvalid(
                "need num_queries >= 1, embed_dim >= 4, decoder_layers >= 1".into(),
            ));
        }
        if self.num_classes < 1 || self.grid_h < 2 || self.grid_w < 2 || self.patch < 1 {
            return Err(Error::ConfigInvalid("invalid class count or grid dims".into()));
        }
        Ok(())
    }

    pub fn image_height(&self) -> usize {
        self.grid_h * self.patch
    }

    pub fn image_width(&self) -> usize {
        self.grid_w * self.patch
    }

    pub fn num_pixels(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Named, ordered parameter store. Registration order is fixed by the model
/// builder, which makes checkpoints and the optimizer state layout stable.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether weight decay applies (off for biases, norms and embeddings).
    pub decay: bool,
}

impl ParamSet {
    pub fn register(&mut self, name: &str, value: Array2<f64>, decay: bool) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry { name: name.to_string(), value, decay });
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        &self.entries[self.index[name]].value
    }

    pub fn index_of(&self, name: &str) -> usize {
        self.index[name]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut Vec<ParamEntry> {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Final per-query embeddings, row i belonging to proposal i.
#[derive(Debug, Clone)]
pub struct SegmentEmbeddings(pub Array2<f64>);

/// Graph handles produced by one forward build.
pub struct ForwardNodes {
    /// Class logits (N x C+1) after each prediction point (initial queries
    /// plus every decoder layer).
    pub class_logits: Vec<Var>,
    /// Grid-resolution mask logits (N x P) per prediction point.
    pub mask_logits_grid: Vec<Var>,
    /// Image-resolution mask logits per prediction point.
    pub mask_logits_image: Vec<Var>,
    /// Normalized final segment embeddings (N x d).
    pub segments: Var,
}

pub struct ToyModel {
    pub cfg: ToyModelConfig,
    pub params: ParamSet,
    upsample: Rc<UpsamplePlan>,
}

/// Attention-mask binarization threshold (gradient-detached).
pub const ATTENTION_MASK_TAU: f64 = 0.5;

impl ToyModel {
    /// Seeded initialization: weights and embeddings from N(0, 0.02), biases
    /// zero, layer norms at identity.
    pub fn new(cfg: ToyModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = ParamSet::default();
        let d = cfg.embed_dim;
        let patch_dim = 3 * cfg.patch * cfg.patch;

        let randn = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| normal.sample(rng))
        };

        params.register("patch_embed.w", randn(&mut rng, patch_dim, d), true);
        params.register("patch_embed.b", Array2::zeros((1, d)), false);
        params.register("pos_embed", randn(&mut rng, cfg.num_pixels(), d), false);

        for l in 0..cfg.pixel_layers {
            let p = format!("pixel.{l}");
            register_layer_norm(&mut params, &format!("{p}.ln_attn"), d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.attn.q"), d, d);
            // No key bias: a shared key offset cancels inside the softmax.
            params.register(&format!("{p}.attn.k.w"), randn(&mut rng, d, d), true);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.attn.v"), d, d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.attn.out"), d, d);
            register_layer_norm(&mut params, &format!("{p}.ln_ffn"), d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.ffn.w1"), d, 2 * d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.ffn.w2"), 2 * d, d);
        }

        params.register("mask_features.w", randn(&mut rng, d, d), true);
        params.register("mask_features.b", Array2::zeros((1, d)), false);
        params.register("queries", randn(&mut rng, cfg.num_queries, d), false);

        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.{l}");
            register_layer_norm(&mut params, &format!("{p}.ln_cross"), d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.cross.q"), d, d);
            params.register(&format!("{p}.cross.k.w"), randn(&mut rng, d, d), true);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.cross.v"), d, d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.cross.out"), d, d);
            register_layer_norm(&mut params, &format!("{p}.ln_self"), d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.self.q"), d, d);
            params.register(&format!("{p}.self.k.w"), randn(&mut rng, d, d), true);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.self.v"), d, d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.self.out"), d, d);
            register_layer_norm(&mut params, &format!("{p}.ln_ffn"), d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.ffn.w1"), d, 2 * d);
            register_linear(&mut params, &mut rng, normal, &format!("{p}.ffn.w2"), 2 * d, d);
        }

        register_layer_norm(&mut params, "head.ln", d);
        register_linear(&mut params, &mut rng, normal, "head.class", d, cfg.num_classes + 1);
        register_linear(&mut params, &mut rng, normal, "head.mask_embed.w1", d, d);
        register_linear(&mut params, &mut rng, normal, "head.mask_embed.w2", d, d);

        let upsample = Rc::new(UpsamplePlan::bilinear(cfg.grid_h, cfg.grid_w, cfg.patch));
        Ok(Self { cfg, params, upsample })
    }

    /// Rebuild the cached upsample plan, e.g. after loading a checkpoint.
    pub fn from_parts(cfg: ToyModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let upsample = Rc::new(UpsamplePlan::bilinear(cfg.grid_h, cfg.grid_w, cfg.patch));
        Ok(Self { cfg, params, upsample })
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.channels != 3
            || image.height != self.cfg.image_height()
            || image.width != self.cfg.image_width()
        {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} vs configured 3x{}x{}",
                image.channels,
                image.height,
                image.width,
                self.cfg.image_height(),
                self.cfg.image_width()
            )));
        }
        Ok(())
    }

    /// Record the full forward pass on the tape. Parameters enter as leaves
    /// via `param_vars`, which maps entry index to Var.
    pub fn build_forward(
        &self,
        g: &mut Graph,
        param_vars: &[Var],
        image: &ImageTensor,
    ) -> ForwardNodes {
        let cfg = &self.cfg;
        let d = cfg.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let var_of = |name: &str| param_vars[self.params.index[name]];

        // Pixel features: patch embedding + positional embedding, then
        // pre-norm self-attention blocks.
        let patches = g.leaf(image.to_patches(cfg.patch));
        let mut h = {
            let w = g.matmul(patches, var_of("patch_embed.w"));
            let wb = g.add_row(w, var_of("patch_embed.b"));
            g.add(wb, var_of("pos_embed"))
        };
        for l in 0..cfg.pixel_layers {
            let p = format!("pixel.{l}");
            let t = g.layer_norm(h, var_of(&format!("{p}.ln_attn.g")), var_of(&format!("{p}.ln_attn.b")));
            let q = linear(g, t, var_of(&format!("{p}.attn.q.w")), var_of(&format!("{p}.attn.q.b")));
            let k = g.matmul(t, var_of(&format!("{p}.attn.k.w")));
            let v = linear(g, t, var_of(&format!("{p}.attn.v.w")), var_of(&format!("{p}.attn.v.b")));
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled, None);
            let mixed = g.matmul(attn, v);
            let out = linear(g, mixed, var_of(&format!("{p}.attn.out.w")), var_of(&format!("{p}.attn.out.b")));
            h = g.add(h, out);
            let t = g.layer_norm(h, var_of(&format!("{p}.ln_ffn.g")), var_of(&format!("{p}.ln_ffn.b")));
            let ffn = ffn_block(g, t, var_of(&format!("{p}.ffn.w1.w")), var_of(&format!("{p}.ffn.w1.b")), var_of(&format!("{p}.ffn.w2.w")), var_of(&format!("{p}.ffn.w2.b")));
            h = g.add(h, ffn);
        }
        let mask_features = {
            let w = g.matmul(h, var_of("mask_features.w"));
            g.add_row(w, var_of("mask_features.b"))
        };

        let mut x = var_of("queries");
        let mut class_logits = Vec::with_capacity(cfg.decoder_layers + 1);
        let mut mask_logits_grid = Vec::with_capacity(cfg.decoder_layers + 1);
        let mut mask_logits_image = Vec::with_capacity(cfg.decoder_layers + 1);
        let mut segments = x;

        for layer in 0..=cfg.decoder_layers {
            // Prediction point: shared heads on the normalized queries.
            let seg = g.layer_norm(x, var_of("head.ln.g"), var_of("head.ln.b"));
            segments = seg;
            let cls = linear(g, seg, var_of("head.class.w"), var_of("head.class.b"));
            let embed = {
                let a = linear(g, seg, var_of("head.mask_embed.w1.w"), var_of("head.mask_embed.w1.b"));
                let act = g.gelu(a);
                linear(g, act, var_of("head.mask_embed.w2.w"), var_of("head.mask_embed.w2.b"))
            };
            let feat_t = g.transpose(mask_features);
            let grid_logits = g.matmul(embed, feat_t);
            let image_logits = g.upsample(grid_logits, self.upsample.clone());
            class_logits.push(cls);
            mask_logits_grid.push(grid_logits);
            mask_logits_image.push(image_logits);

            if layer == cfg.decoder_layers {
                break;
            }

            // Attention mask from this prediction, detached from gradients.
            let probs = g.value(grid_logits).mapv(sigmoid);
            let attn_mask = attention_mask_from_probs(&probs, ATTENTION_MASK_TAU).into_shared();

            let p = format!("decoder.{layer}");
            // Masked cross-attention onto the pixel features.
            let t = g.layer_norm(x, var_of(&format!("{p}.ln_cross.g")), var_of(&format!("{p}.ln_cross.b")));
            let q = linear(g, t, var_of(&format!("{p}.cross.q.w")), var_of(&format!("{p}.cross.q.b")));
            let k = g.matmul(h, var_of(&format!("{p}.cross.k.w")));
            let v = linear(g, h, var_of(&format!("{p}.cross.v.w")), var_of(&format!("{p}.cross.v.b")));
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled, Some(attn_mask));
            let mixed = g.matmul(attn, v);
            let out = linear(g, mixed, var_of(&format!("{p}.cross.out.w")), var_of(&format!("{p}.cross.out.b")));
            x = g.add(x, out);

            // Self-attention over the queries.
            let t = g.layer_norm(x, var_of(&format!("{p}.ln_self.g")), var_of(&format!("{p}.ln_self.b")));
            let q = linear(g, t, var_of(&format!("{p}.self.q.w")), var_of(&format!("{p}.self.q.b")));
            let k = g.matmul(t, var_of(&format!("{p}.self.k.w")));
            let v = linear(g, t, var_of(&format!("{p}.self.v.w")), var_of(&format!("{p}.self.v.b")));
            let kt = g.transpose(k);
            let scores = g.matmul(q, kt);
            let scaled = g.scale(scores, scale);
            let attn = g.softmax_rows(scaled, None);
            let mixed = g.matmul(attn, v);
            let out = linear(g, mixed, var_of(&format!("{p}.self.out.w")), var_of(&format!("{p}.self.out.b")));
            x = g.add(x, out);

            // Feed-forward.
            let t = g.layer_norm(x, var_of(&format!("{p}.ln_ffn.g")), var_of(&format!("{p}.ln_ffn.b")));
            let ffn = ffn_block(g, t, var_of(&format!("{p}.ffn.w1.w")), var_of(&format!("{p}.ffn.w1.b")), var_of(&format!("{p}.ffn.w2.w")), var_of(&format!("{p}.ffn.w2.b")));
            x = g.add(x, ffn);
        }

        ForwardNodes { class_logits, mask_logits_grid, mask_logits_image, segments }
    }

    /// Register every parameter as a leaf and return the Vars in entry order.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.params.entries.iter().map(|e| g.leaf(e.value.clone())).collect()
    }

    /// Full per-frame forward pass: exactly N proposals plus the segment
    /// embeddings for the temporal module. Deterministic for a fixed seed.
    pub fn forward(&self, frame: &str, image: &ImageTensor) -> Result<(ProposalSet, SegmentEmbeddings)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let leaves = self.param_leaves(&mut g);
        let nodes = self.build_forward(&mut g, &leaves, image);

        let cls = g.value(*nodes.class_logits.last().unwrap());
        let mut probs = cls.clone();
        softmax_rows_in_place(&mut probs);
        let masks = g.value(*nodes.mask_logits_image.last().unwrap()).mapv(sigmoid);

        let (ih, iw) = (self.cfg.image_height(), self.cfg.image_width());
        let mut proposals = Vec::with_capacity(self.cfg.num_queries);
        for qi in 0..self.cfg.num_queries {
            let class_probs: Vec<f64> = probs.row(qi).to_vec();
            let soft = SoftMask::new(ih, iw, masks.row(qi).to_vec())?;
            proposals.push(RegionProposal::new(class_probs, soft)?);
        }
        let segments = SegmentEmbeddings(g.value(nodes.segments).clone());
        Ok((ProposalSet::new(frame, proposals), segments))
    }

    /// Build the training loss on the tape: per prediction point, Hungarian
    /// matching on detached values followed by weighted classification CE
    /// plus mask BCE and Dice over matched pairs, averaged over prediction
    /// points (deep supervision) or taken from the final point only.
    pub fn build_loss(
        &self,
        g: &mut Graph,
        nodes: &ForwardNodes,
        gt: &FrameAnnotation,
        weights: &MatchWeights,
        deep_supervision: bool,
    ) -> Result<Var> {
        let n = self.cfg.num_queries;
        let num_classes = self.cfg.num_classes;
        let g_count = gt.instances.len();
        let pixel_count = (self.cfg.image_height() * self.cfg.image_width()) as f64;

        let gt_bits: Option<Rc<Array2<f64>>> = if g_count > 0 {
            let mut bits = Array2::zeros((g_count, pixel_count as usize));
            for (gi, (_, mask)) in gt.instances.iter().enumerate() {
                for (j, &b) in mask.bits().iter().enumerate() {
                    bits[(gi, j)] = b as f64;
                }
            }
            Some(Rc::new(bits))
        } else {
            None
        };

        let points: Vec<usize> = if deep_supervision {
            (0..nodes.class_logits.len()).collect()
        } else {
            vec![nodes.class_logits.len() - 1]
        };

        let mut total: Option<Var> = None;
        for &pt in &points {
            let cls_var = nodes.class_logits[pt];
            let img_var = nodes.mask_logits_image[pt];

            // Detached matching on this point's predictions.
            let assignment = if g_count > 0 {
                let probs = {
                    let mut p = g.value(cls_var).clone();
                    softmax_rows_in_place(&mut p);
                    p
                };
                let soft = g.value(img_var).mapv(sigmoid);
                let cost = CostMatrix::from_fn(n, g_count, |row, col| {
                    let (class, mask) = &gt.instances[col];
                    let p_c = probs[(row, (class.0 - 1) as usize)];
                    let soft_row = soft.row(row);
                    let bce = crate::matching::bce_mean(
                        soft_row.as_slice().unwrap(),
                        mask.bits(),
                    );
                    let dice = crate::matching::dice_loss(
                        soft_row.as_slice().unwrap(),
                        mask.bits(),
                    );
                    weights.w_cls * (-p_c) + weights.w_bce * bce + weights.w_dice * dice
                })?;
                Some(hungarian(&cost)?)
            } else {
                None
            };

            // Classification targets: matched rows toward the gt class,
            // everything else toward no-object at reduced weight.
            let mut targets = vec![num_classes; n];
            let mut ce_weights = vec![weights.no_object_weight; n];
            let mut matched_rows = Vec::new();
            if let Some(a) = &assignment {
                for (col, &row) in a.row_for_col.iter().enumerate() {
                    targets[row] = (gt.instances[col].0 .0 - 1) as usize;
                    ce_weights[row] = 1.0;
                    matched_rows.push(row);
                }
            }
            let ce = g.ce_rows(cls_var, targets, ce_weights);
            let mut point_loss = g.scale(ce, weights.w_cls);

            if let (Some(bits), false) = (&gt_bits, matched_rows.is_empty()) {
                let gathered = g.gather_rows(img_var, matched_rows);
                let bce = g.bce_logits(gathered, bits.clone(), 1.0 / (g_count as f64 * pixel_count));
                let dice = g.dice_logits(gathered, bits.clone());
                let bce_w = g.scale(bce, weights.w_bce);
                let dice_w = g.scale(dice, weights.w_dice);
                let masks = g.add(bce_w, dice_w);
                point_loss = g.add(point_loss, masks);
            }

            total = Some(match total {
                Some(t) => g.add(t, point_loss),
                None => point_loss,
            });
        }

        let total = total.expect("at least one prediction point");
        Ok(g.scale(total, 1.0 / points.len() as f64))
    }

    /// Loss value and per-parameter gradients for one frame.
    pub fn loss_and_grads(
        &self,
        image: &ImageTensor,
        gt: &FrameAnnotation,
        weights: &MatchWeights,
        deep_supervision: bool,
    ) -> Result<(f64, Vec<Array2<f64>>)> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let leaves = self.param_leaves(&mut g);
        let nodes = self.build_forward(&mut g, &leaves, image);
        let loss = self.build_loss(&mut g, &nodes, gt, weights, deep_supervision)?;
        let value = g.scalar(loss);
        let grads = g.backward(loss);
        let param_grads = leaves.iter().map(|v| grads[v.0].clone()).collect();
        Ok((value, param_grads))
    }

    /// Loss value only (used by gradient checking).
    pub fn loss_value(
        &self,
        image: &ImageTensor,
        gt: &FrameAnnotation,
        weights: &MatchWeights,
        deep_supervision: bool,
    ) -> Result<f64> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let leaves = self.param_leaves(&mut g);
        let nodes = self.build_forward(&mut g, &leaves, image);
        let loss = self.build_loss(&mut g, &nodes, gt, weights, deep_supervision)?;
        Ok(g.scalar(loss))
    }
}

fn register_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    normal: Normal<f64>,
    name: &str,
    rows: usize,
    cols: usize,
) {
    let w = Array2::from_shape_fn((rows, cols), |_| normal.sample(rng));
    params.register(&format!("{name}.w"), w, true);
    params.register(&format!("{name}.b"), Array2::zeros((1, cols)), false);
}

fn register_layer_norm(params: &mut ParamSet, name: &str, dim: usize) {
    params.register(&format!("{name}.g"), Array2::from_elem((1, dim), 1.0), false);
    params.register(&format!("{name}.b"), Array2::zeros((1, dim)), false);
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let xw = g.matmul(x, w);
    g.add_row(xw, b)
}

fn ffn_block(g: &mut Graph, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let a = linear(g, x, w1, b1);
    let act = g.gelu(a);
    linear(g, act, w2, b2)
}

/// Convert final-layer outputs into a [`ProposalSet`]-compatible probability
/// check: class probabilities clamp-free, used by tests.
pub fn class_probs_of(logits_row: &[f64]) -> Vec<f64> {
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits_row.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Clamp used when comparing graph losses against the probability-space
/// criterion.
pub fn clamped_neg_ln(p: f64) -> f64 {
    -p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP).ln()
}

/// A tiny labelled frame for unit tests: one centered square instance.
#[cfg(test)]
pub(crate) fn tiny_frame(cfg: &ToyModelConfig, class: u32) -> (ImageTensor, FrameAnnotation) {
    let (ih, iw) = (cfg.image_height(), cfg.image_width());
    let mut image = ImageTensor::zeros(3, ih, iw);
    let mut mask = crate::mask::BinaryMask::zeros(ih, iw).unwrap();
    for y in ih / 4..3 * ih / 4 {
        for x in iw / 4..3 * iw / 4 {
            mask.set(y, x, true);
            image.set(0, y, x, 0.9);
            image.set(1, y, x, 0.2 * class as f64 / cfg.num_classes as f64);
            image.set(2, y, x, 0.5);
        }
    }
    let ann = FrameAnnotation::new("t0", ih, iw, vec![(ClassId(class), mask)]).unwrap();
    (image, ann)
}

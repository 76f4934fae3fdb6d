//! Deterministic synthetic scenes, videos and calibrated noisy proposal
//! sets.
//!
//! Frames contain 1-4 non-overlapping instances; every class has a
//! distinctive parametric shape plus a class-colored texture, so a per-frame
//! model can learn both segmentation and classification. Videos move
//! instances smoothly and can render a designated class pair with an
//! identical shared appearance on scheduled frames, leaving motion as the
//! only disambiguator: the first pair member drifts with constant velocity
//! while the second zigzags with period 4, so windows shorter than a
//! reversal cannot separate them. Noisy proposal sets jitter the ground
//! truth, score rare classes low, and pad with clutter and no-object
//! queries, exercising the full ordering of the selection strategies.
//!
//! Everything is a pure function of (config, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{ProposalSet, RegionProposal, SoftMask};
use crate::mask::{BinaryMask, ClassId};
use crate::metrics::FrameAnnotation;
use crate::model::ImageTensor;

/// Noise model for [`gen_noisy_proposals`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub n_queries: usize,
    /// Jittered copies per ground-truth instance.
    pub copies_min: usize,
    pub copies_max: usize,
    /// Max translation (pixels) of non-best copies; the best copy is exact.
    pub translate_max: i64,
    /// Max morphological iterations (dilate or erode) on non-best copies.
    pub morph_max: usize,
    /// Score ranges by class-frequency tier (two most frequent classes, the
    /// next two, the rest).
    pub score_hi: (f64, f64),
    pub score_mid: (f64, f64),
    pub score_rare: (f64, f64),
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub clutter_score: (f64, f64),
    pub clutter_radius: (f64, f64),
    /// Probability that a non-best copy carries a wrong argmax class.
    pub mislabel_prob: f64,
    /// Soft-mask probability inside the region (drawn per proposal) and the
    /// constant background probability.
    pub in_mask_prob: (f64, f64),
    pub out_mask_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            n_queries: 100,
            copies_min: 1,
            copies_max: 3,
            translate_max: 3,
            morph_max: 1,
            score_hi: (0.75, 0.95),
            score_mid: (0.55, 0.85),
            score_rare: (0.40, 0.70),
            clutter_min: 6,
            clutter_max: 14,
            clutter_score: (0.16, 0.55),
            clutter_radius: (4.0, 9.0),
            mislabel_prob: 0.05,
            in_mask_prob: (0.88, 0.99),
            out_mask_prob: 0.02,
        }
    }
}

impl NoiseConfig {
    /// Exact single copies, no clutter, no mislabels.
    pub fn zero(n_queries: usize) -> Self {
        Self {
            n_queries,
            copies_min: 1,
            copies_max: 1,
            translate_max: 0,
            morph_max: 0,
            clutter_min: 0,
            clutter_max: 0,
            mislabel_prob: 0.0,
            ..Self::default()
        }
    }
}

/// Generator configuration shared by frames, videos and proposal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Frequency weights, summing to 1 (imbalanced by default).
    pub class_weights: Vec<f64>,
    /// Classes that may appear twice in one frame; all others at most once.
    pub multi_instance: Vec<u32>,
    pub instances_min: usize,
    pub instances_max: usize,
    pub video_len: usize,
    pub motion_step: f64,
    /// Class pairs rendered identically on ambiguous frames.
    pub ambiguous_pairs: Vec<(u32, u32)>,
    /// Fraction of video frames that are ambiguous.
    pub ambiguity_fraction: f64,
    pub noise: NoiseConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 64,
            width: 64,
            num_classes: 7,
            class_names: ["BF", "PF", "LND", "VS-SI", "GR-CA", "MCS", "UP"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            class_weights: vec![0.30, 0.22, 0.16, 0.12, 0.09, 0.07, 0.04],
            multi_instance: vec![1, 2],
            instances_min: 1,
            instances_max: 4,
            video_len: 48,
            motion_step: 2.0,
            ambiguous_pairs: vec![(2, 3)],
            ambiguity_fraction: 0.75,
            noise: NoiseConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 16 {
            return Err(Error::ConfigInvalid("dims must be >= 16".into()));
        }
        if self.num_classes < 1 || self.num_classes > 16 {
            return Err(Error::ConfigInvalid("need 1 <= classes <= 16".into()));
        }
        if self.class_weights.len() != self.num_classes {
            return Err(Error::ConfigInvalid("one weight per class required".into()));
        }
        let sum: f64 = self.class_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.class_weights.iter().any(|w| *w <= 0.0) {
            return Err(Error::ConfigInvalid("weights must be positive and sum to 1".into()));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::ConfigInvalid("one name per class required".into()));
        }
        if self.instances_min < 1 || self.instances_min > self.instances_max {
            return Err(Error::ConfigInvalid("invalid instance count range".into()));
        }
        for (a, b) in &self.ambiguous_pairs {
            if *a == *b || *a == 0 || *b == 0 || *a > self.num_classes as u32 || *b > self.num_classes as u32 {
                return Err(Error::ConfigInvalid("invalid ambiguous pair".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.ambiguity_fraction) {
            return Err(Error::ConfigInvalid("ambiguity fraction must be in [0,1]".into()));
        }
        Ok(())
    }

    fn max_count(&self, class: u32) -> usize {
        if self.multi_instance.contains(&class) {
            2
        } else {
            1
        }
    }

    /// Default per-class k values: 2 for multi-instance classes, 1 otherwise.
    pub fn default_ks(&self) -> Vec<usize> {
        (1..=self.num_classes as u32).map(|c| self.max_count(c)).collect()
    }

    /// The ambiguous partner of a class, when it has one.
    pub fn ambiguous_partner(&self, class: u32) -> Option<u32> {
        for &(a, b) in &self.ambiguous_pairs {
            if class == a {
                return Some(b);
            }
            if class == b {
                return Some(a);
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeFamily {
    Ellipse { ratio: f64 },
    Rect { aspect: f64 },
    Bar { angle_deg: f64 },
}

/// Per-class rendering parameters.
#[derive(Debug, Clone, Copy)]
pub struct Appearance {
    pub shape: ShapeFamily,
    pub color: [f64; 3],
    /// Texture stripe frequency (cycles per pixel) along y and x.
    pub tex: (f64, f64),
}

/// Distinct appearance per class id; stable across runs.
pub fn class_appearance(class: u32) -> Appearance {
    const TABLE: [Appearance; 7] = [
        Appearance { shape: ShapeFamily::Ellipse { ratio: 1.0 }, color: [0.90, 0.20, 0.20], tex: (0.00, 0.12) },
        Appearance { shape: ShapeFamily::Ellipse { ratio: 0.55 }, color: [0.20, 0.85, 0.25], tex: (0.12, 0.00) },
        Appearance { shape: ShapeFamily::Rect { aspect: 1.0 }, color: [0.20, 0.35, 0.95], tex: (0.08, 0.08) },
        Appearance { shape: ShapeFamily::Rect { aspect: 2.5 }, color: [0.95, 0.85, 0.20], tex: (0.00, 0.18) },
        Appearance { shape: ShapeFamily::Bar { angle_deg: 0.0 }, color: [0.90, 0.25, 0.90], tex: (0.15, 0.00) },
        Appearance { shape: ShapeFamily::Bar { angle_deg: 45.0 }, color: [0.20, 0.90, 0.90], tex: (0.10, 0.10) },
        Appearance { shape: ShapeFamily::Ellipse { ratio: 0.35 }, color: [0.95, 0.55, 0.15], tex: (0.18, 0.04) },
    ];
    let idx = ((class - 1) as usize) % TABLE.len();
    let mut app = TABLE[idx];
    if (class - 1) as usize >= TABLE.len() {
        // Classes beyond the table reuse shapes with shifted colors.
        app.color = [app.color[1], app.color[2], app.color[0]];
    }
    app
}

/// Neutral appearance shared by both members of an ambiguous pair.
pub fn ambiguous_appearance(pair_index: usize) -> Appearance {
    let shades = [[0.70, 0.45, 0.75], [0.55, 0.60, 0.40]];
    Appearance {
        shape: ShapeFamily::Ellipse { ratio: 0.80 },
        color: shades[pair_index % shades.len()],
        tex: (0.06, 0.06),
    }
}

/// One placed instance, ready to rasterize.
#[derive(Debug, Clone, Copy)]
pub struct PlacedInstance {
    pub class: ClassId,
    pub cy: f64,
    pub cx: f64,
    /// Nominal radius (pixels).
    pub r: f64,
    /// Rotation in radians (bars override it with their class angle).
    pub rot: f64,
    /// Texture phase.
    pub phase: f64,
}

/// Worst-case half-extent of a shape of nominal radius `r`, over rotations.
fn shape_extent(shape: ShapeFamily, r: f64) -> f64 {
    match shape {
        ShapeFamily::Ellipse { .. } => r,
        ShapeFamily::Rect { aspect } => r * (aspect + 1.0 / aspect).sqrt(),
        ShapeFamily::Bar { .. } => r * (2.0f64 * 2.0 + 0.25).sqrt(),
    }
}

fn rasterize(shape: ShapeFamily, inst: &PlacedInstance, h: usize, w: usize) -> BinaryMask {
    let (rot, ry, rx) = match shape {
        ShapeFamily::Ellipse { ratio } => (inst.rot, inst.r, inst.r * ratio),
        ShapeFamily::Rect { aspect } => (inst.rot, inst.r / aspect.sqrt(), inst.r * aspect.sqrt()),
        ShapeFamily::Bar { angle_deg } => (angle_deg.to_radians(), inst.r / 2.0, inst.r * 2.0),
    };
    let (sin, cos) = rot.sin_cos();
    let extent = shape_extent(shape, inst.r) + 1.0;
    let mut mask = BinaryMask::zeros(h, w).expect("dims >= 1");
    let y0 = ((inst.cy - extent).floor().max(0.0)) as usize;
    let y1 = ((inst.cy + extent).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((inst.cx - extent).floor().max(0.0)) as usize;
    let x1 = ((inst.cx + extent).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f64 + 0.5 - inst.cy;
            let dx = x as f64 + 0.5 - inst.cx;
            // Rotate into the shape frame.
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let inside = match shape {
                ShapeFamily::Ellipse { .. } => {
                    (u / rx) * (u / rx) + (v / ry) * (v / ry) <= 1.0
                }
                ShapeFamily::Rect { .. } | ShapeFamily::Bar { .. } => {
                    u.abs() <= rx && v.abs() <= ry
                }
            };
            if inside {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

/// Appearance used for an instance on a frame: the shared pair appearance on
/// ambiguous frames, the true class appearance otherwise. Rendering on an
/// ambiguous frame never depends on which pair member the label is.
fn appearance_for(cfg: &SynthConfig, class: u32, ambiguous_frame: bool) -> Appearance {
    if ambiguous_frame {
        for (idx, &(a, b)) in cfg.ambiguous_pairs.iter().enumerate() {
            if class == a || class == b {
                return ambiguous_appearance(idx);
            }
        }
    }
    class_appearance(class)
}

fn effective_shape(cfg: &SynthConfig, class: u32, ambiguous_frame: bool) -> ShapeFamily {
    appearance_for(cfg, class, ambiguous_frame).shape
}

/// Render placed instances over a noisy background. Pure in its inputs; the
/// rng only drives the background and sensor noise.
pub fn render_frame(
    cfg: &SynthConfig,
    instances: &[(PlacedInstance, BinaryMask)],
    ambiguous_frame: bool,
    rng: &mut ChaCha8Rng,
) -> ImageTensor {
    let (h, w) = (cfg.height, cfg.width);
    let mut image = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let base: f64 = 0.12 + rng.random_range(-0.05..0.05);
            for c in 0..3 {
                image.set(c, y, x, base.clamp(0.0, 1.0));
            }
        }
    }
    for (inst, mask) in instances {
        let app = appearance_for(cfg, inst.class.0, ambiguous_frame);
        for y in 0..h {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                let stripe = (std::f64::consts::TAU
                    * (app.tex.0 * y as f64 + app.tex.1 * x as f64)
                    + inst.phase)
                    .sin();
                let gain = 1.0 + 0.22 * stripe;
                for c in 0..3 {
                    image.set(c, y, x, (app.color[c] * gain).clamp(0.02, 1.0));
                }
            }
        }
    }
    image
}

fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    // Stable seed mixing (splitmix64 over the parts).
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state = state.wrapping_add(p).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        state ^= state >> 31;
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn sample_class(cfg: &SynthConfig, rng: &mut ChaCha8Rng, counts: &[usize]) -> Option<u32> {
    for _ in 0..64 {
        let draw: f64 = rng.random();
        let mut acc = 0.0;
        let mut picked = cfg.num_classes as u32;
        for (idx, &w) in cfg.class_weights.iter().enumerate() {
            acc += w;
            if draw < acc {
                picked = idx as u32 + 1;
                break;
            }
        }
        if counts[(picked - 1) as usize] < cfg.max_count(picked) {
            return Some(picked);
        }
    }
    None
}

fn place_instances(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
    ambiguous_frame: bool,
) -> Result<Vec<(PlacedInstance, BinaryMask)>> {
    let mut placed: Vec<(PlacedInstance, BinaryMask)> = Vec::new();
    let mut counts = vec![0usize; cfg.num_classes];
    let mut occupancy = BinaryMask::zeros(cfg.height, cfg.width)?;
    for _ in 0..count {
        let class = sample_class(cfg, rng, &counts)
            .ok_or_else(|| Error::PlacementFailure("class capacity exhausted".into()))?;
        let mut done = false;
        let scale = (cfg.height.min(cfg.width) as f64 / 64.0).min(1.5);
        for _attempt in 0..50 {
            let r = (rng.random_range(5.0..8.5) * scale).max(2.5);
            let shape = effective_shape(cfg, class, ambiguous_frame);
            let margin = shape_extent(shape, r) + 1.0;
            if 2.0 * margin >= cfg.height as f64 || 2.0 * margin >= cfg.width as f64 {
                continue;
            }
            let inst = PlacedInstance {
                class: ClassId(class),
                cy: rng.random_range(margin..cfg.height as f64 - margin),
                cx: rng.random_range(margin..cfg.width as f64 - margin),
                r,
                rot: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let mask = rasterize(shape, &inst, cfg.height, cfg.width);
            if mask.area() < 12 {
                continue;
            }
            let (inter, _) = mask.overlap_counts(&occupancy)?;
            if inter == 0 {
                occupancy.union_in_place(&mask)?;
                counts[(class - 1) as usize] += 1;
                placed.push((inst, mask));
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::PlacementFailure(format!(
                "no room for instance {} of {count}",
                placed.len() + 1
            )));
        }
    }
    Ok(placed)
}

/// Generate one labelled frame. Deterministic per (config seed, frame seed).
pub fn gen_frame(cfg: &SynthConfig, frame_seed: u64) -> Result<(ImageTensor, FrameAnnotation)> {
    cfg.validate()?;
    let mut rng = rng_for(&[cfg.seed, 0xF0A3, frame_seed]);
    let count = rng.random_range(cfg.instances_min..=cfg.instances_max);
    let placed = place_instances(cfg, &mut rng, count, false)?;
    let image = render_frame(cfg, &placed, false, &mut rng);
    let instances = placed.into_iter().map(|(inst, mask)| (inst.class, mask)).collect();
    let ann = FrameAnnotation::new(format!("{frame_seed:06}"), cfg.height, cfg.width, instances)?;
    Ok((image, ann))
}

/// Motion pattern of one tracked instance.
#[derive(Debug, Clone)]
pub struct InstanceTrack {
    pub class: ClassId,
    pub positions: Vec<(f64, f64)>,
    pub r: f64,
}

/// A generated video with its ambiguity schedule and instance tracks.
#[derive(Debug, Clone)]
pub struct Video {
    pub id: String,
    pub frames: Vec<(ImageTensor, FrameAnnotation)>,
    pub ambiguous: Vec<bool>,
    pub tracks: Vec<InstanceTrack>,
}

/// Blocky ambiguity schedule hitting roughly `fraction` of the frames, in
/// runs long enough that a short window cannot escape an ambiguous stretch.
fn ambiguity_schedule(len: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut schedule = vec![false; len];
    if fraction <= 0.0 {
        return schedule;
    }
    if fraction >= 1.0 {
        schedule.fill(true);
        return schedule;
    }
    let mut t = 0usize;
    let mut ambiguous = true;
    while t < len {
        let run = if ambiguous {
            rng.random_range(8..=14)
        } else {
            let clear = (10.0 * (1.0 - fraction) / fraction).round().max(1.0) as usize;
            rng.random_range(clear.max(1)..=clear + 3)
        };
        for flag in schedule.iter_mut().skip(t).take(run) {
            *flag = ambiguous;
        }
        t += run;
        ambiguous = !ambiguous;
    }
    schedule
}

/// Per-frame velocity of an instance. The first member of an ambiguous pair
/// moves with constant velocity along its axis; the second reverses
/// direction every two frames (period-4 zigzag). Everything else drifts.
fn velocity_at(cfg: &SynthConfig, class: u32, axis_horizontal: bool, dir: f64, t: usize) -> (f64, f64) {
    let step = cfg.motion_step;
    let is_second = cfg
        .ambiguous_pairs
        .iter()
        .any(|&(_, b)| b == class);
    let sign = if is_second {
        // +,+,-,- pattern.
        if (t / 2) % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    } else {
        1.0
    };
    if axis_horizontal {
        (0.0, dir * sign * step)
    } else {
        (dir * sign * step, 0.0)
    }
}

/// Generate a video: smooth motion, blocky ambiguity schedule, tracks.
///
/// Default composition is two instances per frame: one drawn from an
/// ambiguous pair and one from the remaining classes.
pub fn gen_video(cfg: &SynthConfig, video_seed: u64) -> Result<Video> {
    cfg.validate()?;
    let mut rng = rng_for(&[cfg.seed, 0x51DE0, video_seed]);
    let len = cfg.video_len;
    let schedule = ambiguity_schedule(len, cfg.ambiguity_fraction, &mut rng);

    // Pick the cast: one pair member (if any pair is configured) plus one
    // other class.
    let mut cast: Vec<u32> = Vec::new();
    if let Some(&(a, b)) = cfg.ambiguous_pairs.first() {
        cast.push(if rng.random::<bool>() { a } else { b });
    }
    let others: Vec<u32> = (1..=cfg.num_classes as u32)
        .filter(|c| cfg.ambiguous_partner(*c).is_none())
        .collect();
    if !others.is_empty() {
        cast.push(others[rng.random_range(0..others.len())]);
    }

    // Worst-case half-extent per instance over both possible appearances;
    // keeping centers further apart than the summed extents guarantees
    // disjoint masks on every frame regardless of appearance swaps.
    let pad = |class: u32, r: f64| {
        let true_ext = shape_extent(class_appearance(class).shape, r);
        let amb_ext = shape_extent(effective_shape(cfg, class, true), r);
        true_ext.max(amb_ext) + 1.5
    };
    let mut instances: Vec<(PlacedInstance, bool, f64)> = Vec::new(); // (inst, horizontal axis, dir)
    for &class in &cast {
        let mut placed = false;
        let scale = (cfg.height.min(cfg.width) as f64 / 64.0).min(1.5);
        for _ in 0..120 {
            let r = (rng.random_range(4.5..6.5) * scale).max(2.5);
            let margin = pad(class, r) + 1.5;
            let inst = PlacedInstance {
                class: ClassId(class),
                cy: rng.random_range(margin..cfg.height as f64 - margin),
                cx: rng.random_range(margin..cfg.width as f64 - margin),
                r,
                rot: rng.random_range(0.0..std::f64::consts::PI),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let separated = instances.iter().all(|(other, _, _)| {
                let dist = ((inst.cy - other.cy).powi(2) + (inst.cx - other.cx).powi(2)).sqrt();
                dist >= pad(class, r) + pad(other.class.0, other.r)
            });
            if separated {
                let horizontal = rng.random::<bool>();
                let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
                instances.push((inst, horizontal, dir));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailure("video cast placement".into()));
        }
    }

    let mut tracks: Vec<InstanceTrack> = instances
        .iter()
        .map(|(inst, _, _)| InstanceTrack { class: inst.class, positions: Vec::new(), r: inst.r })
        .collect();
    let mut frames = Vec::with_capacity(len);

    for (t, &ambiguous_frame) in schedule.iter().enumerate() {
        // Advance positions, bouncing at the walls; a move that would break
        // the separation invariant is skipped for this frame.
        for idx in 0..instances.len() {
            let (mut inst, horizontal, mut dir) = instances[idx];
            if t > 0 {
                let (dy, dx) = velocity_at(cfg, inst.class.0, horizontal, dir, t - 1);
                let margin = pad(inst.class.0, inst.r) + 0.5;
                let (mut ny, mut nx) = (inst.cy + dy, inst.cx + dx);
                if ny < margin || ny > cfg.height as f64 - margin {
                    dir = -dir;
                    ny = inst.cy - dy;
                }
                if nx < margin || nx > cfg.width as f64 - margin {
                    dir = -dir;
                    nx = inst.cx - dx;
                }
                let separated = instances.iter().enumerate().all(|(j, (other, _, _))| {
                    if j == idx {
                        return true;
                    }
                    let dist = ((ny - other.cy).powi(2) + (nx - other.cx).powi(2)).sqrt();
                    dist >= pad(inst.class.0, inst.r) + pad(other.class.0, other.r)
                });
                if separated {
                    inst.cy = ny;
                    inst.cx = nx;
                } else {
                    dir = -dir;
                }
            }
            instances[idx] = (inst, horizontal, dir);
            tracks[idx].positions.push((inst.cy, inst.cx));
        }

        let masks: Vec<BinaryMask> = instances
            .iter()
            .map(|(inst, _, _)| {
                rasterize(
                    effective_shape(cfg, inst.class.0, ambiguous_frame),
                    inst,
                    cfg.height,
                    cfg.width,
                )
            })
            .collect();

        let placed: Vec<(PlacedInstance, BinaryMask)> = instances
            .iter()
            .zip(&masks)
            .map(|((inst, _, _), mask)| (*inst, mask.clone()))
            .collect();
        let image = render_frame(cfg, &placed, ambiguous_frame, &mut rng);
        let ann = FrameAnnotation::new(
            format!("v{video_seed:04}/{t:04}"),
            cfg.height,
            cfg.width,
            placed.into_iter().map(|(i, m)| (i.class, m)).collect(),
        )?;
        frames.push((image, ann));
    }

    Ok(Video { id: format!("v{video_seed:04}"), frames, ambiguous: schedule, tracks })
}

fn translate(mask: &BinaryMask, dy: i64, dx: i64) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut out = BinaryMask::zeros(h, w).expect("dims >= 1");
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                let ny = y as i64 + dy;
                let nx = x as i64 + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
    }
    out
}

fn morph(mask: &BinaryMask, dilate: bool, iters: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut current = mask.clone();
    for _ in 0..iters {
        let mut next = current.clone();
        for y in 0..h {
            for x in 0..w {
                let neighbor_hit = |m: &BinaryMask| {
                    (y > 0 && m.get(y - 1, x))
                        || (y + 1 < h && m.get(y + 1, x))
                        || (x > 0 && m.get(y, x - 1))
                        || (x + 1 < w && m.get(y, x + 1))
                };
                if dilate {
                    if !current.get(y, x) && neighbor_hit(&current) {
                        next.set(y, x, true);
                    }
                } else if current.get(y, x) {
                    let all_in = (y == 0 || current.get(y - 1, x))
                        && (y + 1 == h || current.get(y + 1, x))
                        && (x == 0 || current.get(y, x - 1))
                        && (x + 1 == w || current.get(y, x + 1));
                    if !all_in {
                        next.set(y, x, false);
                    }
                }
            }
        }
        current = next;
    }
    current
}

/// Frequency tier of a class: 0 for the two heaviest weights, 1 for the next
/// two, 2 for the rest.
fn class_tier(cfg: &SynthConfig, class: u32) -> usize {
    let mut order: Vec<usize> = (0..cfg.num_classes).collect();
    order.sort_by(|&a, &b| {
        cfg.class_weights[b].partial_cmp(&cfg.class_weights[a]).unwrap().then(a.cmp(&b))
    });
    let rank = order.iter().position(|&i| i == (class - 1) as usize).unwrap();
    match rank {
        0 | 1 => 0,
        2 | 3 => 1,
        _ => 2,
    }
}

fn score_range(cfg: &SynthConfig, class: u32) -> (f64, f64) {
    match class_tier(cfg, class) {
        0 => cfg.noise.score_hi,
        1 => cfg.noise.score_mid,
        _ => cfg.noise.score_rare,
    }
}

/// Probability vector with argmax on `class` at probability `score`; the
/// remaining mass spreads evenly over the other slots (kept strictly below
/// the argmax). Requires `score >= 1 / (C + 1)`.
fn probs_with_argmax(num_classes: usize, class: u32, score: f64) -> Vec<f64> {
    let mut probs = vec![0.0; num_classes + 1];
    let rest = (1.0 - score) / num_classes as f64;
    for (idx, p) in probs.iter_mut().enumerate() {
        *p = if idx == (class - 1) as usize { score } else { rest };
    }
    probs
}

/// No-object-dominated probability vector with a faint argmax class used for
/// bookkeeping.
fn no_object_probs(num_classes: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noobj = rng.random_range(0.75..0.95);
    let rest = (1.0 - noobj) / num_classes as f64;
    let mut probs = vec![rest; num_classes + 1];
    probs[num_classes] = noobj;
    probs
}

fn soft_from_binary(mask: &BinaryMask, in_p: f64, out_p: f64) -> SoftMask {
    let (h, w) = mask.dims();
    let probs = mask.bits().iter().map(|&b| if b == 1 { in_p } else { out_p }).collect();
    SoftMask::new(h, w, probs).expect("valid probabilities")
}

/// Build a calibrated noisy proposal set for one annotated frame: jittered
/// copies of each instance scored by class-frequency tier, clutter blobs
/// with low scores, and no-object padding up to `n_queries`.
pub fn gen_noisy_proposals(
    cfg: &SynthConfig,
    gt: &FrameAnnotation,
    seed: u64,
) -> Result<ProposalSet> {
    cfg.validate()?;
    let noise = &cfg.noise;
    let mut rng = rng_for(&[cfg.seed, 0x9015E, seed]);
    let mut proposals: Vec<RegionProposal> = Vec::with_capacity(noise.n_queries);

    for (class, mask) in &gt.instances {
        let copies = rng.random_range(noise.copies_min..=noise.copies_max);
        for copy in 0..copies {
            if proposals.len() >= noise.n_queries {
                break;
            }
            let jittered = if copy == 0 {
                mask.clone()
            } else {
                let dy = rng.random_range(-noise.translate_max..=noise.translate_max);
                let dx = rng.random_range(-noise.translate_max..=noise.translate_max);
                let mut m = translate(mask, dy, dx);
                if noise.morph_max > 0 {
                    let iters = rng.random_range(0..=noise.morph_max);
                    m = morph(&m, rng.random::<bool>(), iters);
                }
                if m.is_empty() {
                    mask.clone()
                } else {
                    m
                }
            };
            let (lo, hi) = score_range(cfg, class.0);
            let mut score = rng.random_range(lo..hi);
            // Extra copies score lower than the primary one.
            if copy > 0 {
                score *= rng.random_range(0.6..0.9);
            }
            score = score.max(1.0 / (cfg.num_classes + 1) as f64 + 0.01);
            let labeled_class = if copy > 0 && rng.random::<f64>() < noise.mislabel_prob {
                1 + (class.0 + rng.random_range(0..cfg.num_classes as u32 - 1)) % cfg.num_classes as u32
            } else {
                class.0
            };
            let in_p = rng.random_range(noise.in_mask_prob.0..noise.in_mask_prob.1);
            proposals.push(RegionProposal::new(
                probs_with_argmax(cfg.num_classes, labeled_class, score),
                soft_from_binary(&jittered, in_p, noise.out_mask_prob),
            )?);
        }
    }

    let clutter = if noise.clutter_max == 0 {
        0
    } else {
        rng.random_range(noise.clutter_min..=noise.clutter_max)
    };
    for _ in 0..clutter {
        if proposals.len() >= noise.n_queries {
            break;
        }
        let r = rng.random_range(noise.clutter_radius.0..noise.clutter_radius.1);
        let inst = PlacedInstance {
            class: ClassId(1),
            cy: rng.random_range(r + 1.0..gt.height as f64 - r - 1.0),
            cx: rng.random_range(r + 1.0..gt.width as f64 - r - 1.0),
            r,
            rot: rng.random_range(0.0..std::f64::consts::PI),
            phase: 0.0,
        };
        let mask = rasterize(ShapeFamily::Ellipse { ratio: 0.9 }, &inst, gt.height, gt.width);
        if mask.is_empty() {
            continue;
        }
        let class = rng.random_range(1..=cfg.num_classes as u32);
        let score = rng
            .random_range(noise.clutter_score.0..noise.clutter_score.1)
            .max(1.0 / (cfg.num_classes + 1) as f64 + 0.01);
        let in_p = rng.random_range(noise.in_mask_prob.0..noise.in_mask_prob.1);
        proposals.push(RegionProposal::new(
            probs_with_argmax(cfg.num_classes, class, score),
            soft_from_binary(&mask, in_p, noise.out_mask_prob),
        )?);
    }

    while proposals.len() < noise.n_queries {
        let probs = no_object_probs(cfg.num_classes, &mut rng);
        let soft = SoftMask::new(gt.height, gt.width, vec![noise.out_mask_prob; gt.height * gt.width])?;
        proposals.push(RegionProposal::new(probs, soft)?);
    }

    Ok(ProposalSet::new(gt.frame.clone(), proposals))
}

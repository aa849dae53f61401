//! Desk-scale stand-in for the segmentation backbone.
//!
//! Synthesizes labeled scenes over a seen/unseen class split, extracts
//! class-agnostic mask proposals from feature saliency, pools per-proposal
//! features, and assigns ground-truth labels by optimal mask matching.  The
//! learned part of the backbone is a linear map from pooled features to
//! proposal embeddings; everything else is a pure function of the seed.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::background::{
    background_mask, background_prototype, foreground_union, BackgroundPrototype,
    mask_average_pool,
};
use crate::classifier::ProposalEmbeddingBatch;
use crate::error::{Error, Result};
use crate::hungarian::max_weight_assignment;
use crate::mask::{BinaryMask, FeatureMap};
use crate::rle;
use crate::semantic::{EmbeddingTable, GroupSpec};

/// Class name used for the background row everywhere.
pub const BACKGROUND_NAME: &str = "background";

const TOY_SEEN: [&str; 6] = ["circle", "square", "triangle", "stripe", "spot", "cross"];
const TOY_UNSEEN: [&str; 3] = ["ring", "wedge", "arrow"];

const COCO_80: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich",
    "orange", "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch",
    "potted plant", "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote",
    "keyboard", "cell phone", "microwave", "oven", "toaster", "sink", "refrigerator", "book",
    "clock", "vase", "scissors", "teddy bear", "hair drier", "toothbrush",
];

const COCO_48_17_SEEN: [&str; 48] = [
    "person", "bicycle", "car", "motorcycle", "truck", "boat", "bench", "bird", "horse", "sheep",
    "bear", "zebra", "giraffe", "backpack", "handbag", "suitcase", "frisbee", "skis", "kite",
    "surfboard", "bottle", "fork", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "pizza", "donut", "chair", "bed", "toilet", "tv", "laptop", "mouse",
    "remote", "microwave", "oven", "toaster", "refrigerator", "book", "clock", "vase",
    "toothbrush", "train",
];

const COCO_48_17_UNSEEN: [&str; 17] = [
    "bus", "dog", "cow", "elephant", "umbrella", "tie", "snowboard", "skateboard", "cup",
    "knife", "cake", "couch", "keyboard", "sink", "scissors", "airplane", "cat",
];

const COCO_65_15_UNSEEN: [&str; 15] = [
    "airplane", "train", "parking meter", "cat", "bear", "suitcase", "frisbee", "snowboard",
    "fork", "sandwich", "hot dog", "toilet", "mouse", "toaster", "hair drier",
];

/// A named partition of class names into disjoint seen and unseen groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitConfig {
    name: String,
    seen: Vec<String>,
    unseen: Vec<String>,
}

impl SplitConfig {
    pub fn new(name: &str, seen: Vec<String>, unseen: Vec<String>) -> Result<Self> {
        if seen.is_empty() || unseen.is_empty() {
            return Err(Error::Config(format!(
                "split `{name}` needs non-empty seen and unseen groups"
            )));
        }
        for s in &seen {
            if unseen.contains(s) {
                return Err(Error::Config(format!(
                    "class `{s}` appears in both groups of split `{name}`"
                )));
            }
        }
        let mut all: Vec<&String> = seen.iter().chain(unseen.iter()).collect();
        all.sort_unstable();
        all.dedup();
        if all.len() != seen.len() + unseen.len() || seen.iter().any(|s| s == BACKGROUND_NAME)
            || unseen.iter().any(|s| s == BACKGROUND_NAME)
        {
            return Err(Error::Config(format!(
                "split `{name}` has duplicate or reserved class names"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            seen,
            unseen,
        })
    }

    /// Six seen and three unseen synthetic classes; the default experiment.
    pub fn toy_6_3() -> Self {
        Self::new(
            "toy-6/3",
            TOY_SEEN.iter().map(|s| s.to_string()).collect(),
            TOY_UNSEEN.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin split")
    }

    /// The 48-seen / 17-unseen COCO split (15 categories are excluded).
    pub fn coco_48_17() -> Self {
        Self::new(
            "48/17",
            COCO_48_17_SEEN.iter().map(|s| s.to_string()).collect(),
            COCO_48_17_UNSEEN.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin split")
    }

    /// The 65-seen / 15-unseen COCO split over all 80 categories.
    pub fn coco_65_15() -> Self {
        let seen = COCO_80
            .iter()
            .filter(|c| !COCO_65_15_UNSEEN.contains(c))
            .map(|s| s.to_string())
            .collect();
        Self::new(
            "65/15",
            seen,
            COCO_65_15_UNSEEN.iter().map(|s| s.to_string()).collect(),
        )
        .expect("builtin split")
    }

    /// Look a built-in split up by its name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "toy-6/3" => Ok(Self::toy_6_3()),
            "48/17" => Ok(Self::coco_48_17()),
            "65/15" => Ok(Self::coco_65_15()),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn seen(&self) -> &[String] {
        &self.seen
    }

    pub fn unseen(&self) -> &[String] {
        &self.unseen
    }

    /// Grouping used when loading or building embedding tables for this split.
    pub fn group_spec(&self) -> GroupSpec {
        let seen: Vec<&str> = self.seen.iter().map(String::as_str).collect();
        let unseen: Vec<&str> = self.unseen.iter().map(String::as_str).collect();
        GroupSpec::new(BACKGROUND_NAME, &seen, &unseen)
    }
}

/// Mix a global seed with an index into an independent per-item seed.
pub fn derive_seed(global: u64, index: u64) -> u64 {
    let mut z = global.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-9 {
            return v / norm;
        }
    }
}

/// Deterministic pseudo-embeddings for a split.
///
/// Every unseen class vector is a controlled mixture of a partner seen class
/// and a fresh random direction, so semantic correlations between the groups
/// are strong and known: `cos(unseen_j, partner) ≈ alpha`.
pub fn toy_embedding_table(
    split: &SplitConfig,
    dim: usize,
    alpha: f64,
    seed: u64,
) -> Result<EmbeddingTable> {
    if dim < 2 {
        return Err(Error::Parameter(format!(
            "embedding dimension must be at least 2, got {dim}"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::Parameter(format!(
            "similarity mixing weight must lie in [0, 1), got {alpha}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = vec![BACKGROUND_NAME.to_string()];
    let mut rows = vec![random_unit_vector(&mut rng, dim).to_vec()];
    let mut seen_vecs: Vec<Array1<f64>> = Vec::new();
    for name in split.seen() {
        let v = random_unit_vector(&mut rng, dim);
        names.push(name.clone());
        rows.push(v.to_vec());
        seen_vecs.push(v);
    }
    for (j, name) in split.unseen().iter().enumerate() {
        let partner = &seen_vecs[j % seen_vecs.len()];
        let fresh = random_unit_vector(&mut rng, dim);
        let mixed = alpha * partner + (1.0 - alpha * alpha).sqrt() * &fresh;
        names.push(name.clone());
        rows.push(mixed.to_vec());
    }
    EmbeddingTable::from_rows(names, rows, split.seen().len(), split.unseen().len())
}

/// Knobs controlling scene synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneOptions {
    /// Side length of the square pixel grid.
    pub grid: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Standard deviation of i.i.d. Gaussian feature noise per channel.
    pub feature_noise: f64,
    /// Strength of the per-image background appearance shift.
    pub bg_drift: f64,
    /// Probability of painting unlabeled distractor objects into a scene.
    pub distractor_rate: f64,
    /// Per-boundary-pixel flip probability applied to proposal masks.
    pub mask_perturb: f64,
    /// Bound on placement and rejection retries before giving up.
    pub placement_retries: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            grid: 32,
            min_instances: 1,
            max_instances: 3,
            feature_noise: 0.1,
            bg_drift: 0.5,
            distractor_rate: 0.7,
            mask_perturb: 0.1,
            placement_retries: 200,
        }
    }
}

impl SceneOptions {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::Parameter(format!(
                "grid must be at least 8, got {}",
                self.grid
            )));
        }
        if self.max_instances < self.min_instances {
            return Err(Error::Parameter(format!(
                "instance range {}..{} is empty",
                self.min_instances, self.max_instances
            )));
        }
        if self.feature_noise < 0.0 || self.bg_drift < 0.0 {
            return Err(Error::Parameter(
                "noise and drift levels must be non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) || !(0.0..1.0).contains(&self.mask_perturb)
        {
            return Err(Error::Parameter(
                "distractor rate must lie in [0,1] and mask perturbation in [0,1)".into(),
            ));
        }
        if self.placement_retries == 0 {
            return Err(Error::Parameter("placement retries must be positive".into()));
        }
        Ok(())
    }
}

/// Whether a scene is destined for training or evaluation.
///
/// Training scenes must not contain any unseen-class instance (such scenes
/// are rejected and regenerated); evaluation scenes must contain at least
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneMode {
    Train,
    Eval,
}

/// A synthesized image: a feature map plus ground-truth instances.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub feature_map: FeatureMap,
    pub instances: Vec<(String, BinaryMask)>,
    pub seed: u64,
}

fn or_into(union: &mut BinaryMask, mask: &BinaryMask) {
    for y in 0..union.height() {
        for x in 0..union.width() {
            if mask.get(y, x) == 1 {
                union.set(y, x, true);
            }
        }
    }
}

fn ellipse_mask(grid: usize, cy: usize, cx: usize, ry: usize, rx: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(grid, grid);
    for y in cy.saturating_sub(ry)..=(cy + ry).min(grid - 1) {
        for x in cx.saturating_sub(rx)..=(cx + rx).min(grid - 1) {
            let dy = (y as f64 - cy as f64) / ry as f64;
            let dx = (x as f64 - cx as f64) / rx as f64;
            if dy * dy + dx * dx <= 1.0 {
                mask.set(y, x, true);
            }
        }
    }
    mask
}

fn place_disjoint<R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    r_lo: usize,
    r_hi: usize,
    occupied: &BinaryMask,
    retries: usize,
) -> Option<BinaryMask> {
    for _ in 0..retries {
        let ry = rng.random_range(r_lo..=r_hi);
        let rx = rng.random_range(r_lo..=r_hi);
        if 2 * rx + 1 > grid || 2 * ry + 1 > grid {
            continue;
        }
        let cy = rng.random_range(ry..grid - ry);
        let cx = rng.random_range(rx..grid - rx);
        let mask = ellipse_mask(grid, cy, cx, ry, rx);
        let (inter, _) = mask.overlap_counts(occupied).expect("same grid");
        if inter == 0 {
            return Some(mask);
        }
    }
    None
}

/// Synthesize one scene from a seed.
///
/// Each instance paints its class's semantic vector inside an elliptic blob;
/// background pixels carry the background embedding shifted by a per-image
/// drift direction; unlabeled distractor blobs carry fresh random signatures.
/// Gaussian noise is added everywhere.  The same seed always yields a
/// bit-identical scene.
pub fn generate_scene(
    table: &EmbeddingTable,
    mode: SceneMode,
    seed: u64,
    options: &SceneOptions,
) -> Result<SyntheticScene> {
    options.validate()?;
    let universe = table.n_seen() + table.n_unseen();
    if universe == 0 {
        return Err(Error::Parameter("embedding table has no classes".into()));
    }
    let grid = options.grid;
    let dim = table.dim();
    let r_hi = (grid / 6).max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    'attempts: for _ in 0..options.placement_retries {
        let k = rng.random_range(options.min_instances..=options.max_instances);
        let class_ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..universe)).collect();
        let has_unseen = class_ids.iter().any(|&c| c >= table.n_seen());
        let wanted = match mode {
            SceneMode::Train => !has_unseen,
            SceneMode::Eval => has_unseen,
        };
        if !wanted {
            continue;
        }

        let mut occupied = BinaryMask::zeros(grid, grid);
        let mut instances: Vec<(String, BinaryMask)> = Vec::with_capacity(k);
        for &c in &class_ids {
            match place_disjoint(&mut rng, grid, 3, r_hi, &occupied, options.placement_retries) {
                Some(mask) => {
                    or_into(&mut occupied, &mask);
                    instances.push((table.names()[1 + c].clone(), mask));
                }
                None => continue 'attempts,
            }
        }
        let n_distractors = usize::from(rng.random::<f64>() < options.distractor_rate)
            + usize::from(rng.random::<f64>() < options.distractor_rate / 2.0);
        let mut distractors: Vec<(BinaryMask, Array1<f64>)> = Vec::new();
        for _ in 0..n_distractors {
            match place_disjoint(&mut rng, grid, 2, 3, &occupied, options.placement_retries) {
                Some(mask) => {
                    or_into(&mut occupied, &mask);
                    let signature = random_unit_vector(&mut rng, dim);
                    distractors.push((mask, signature));
                }
                None => continue 'attempts,
            }
        }

        // Per-image background appearance: base embedding plus drift.
        let drift = random_unit_vector(&mut rng, dim);
        let mut bg_signature = table.background().to_owned() + options.bg_drift * &drift;
        let norm = bg_signature.dot(&bg_signature).sqrt();
        if norm < 1e-9 {
            continue;
        }
        bg_signature /= norm;

        let mut features = Array3::<f64>::zeros((grid, grid, dim));
        for y in 0..grid {
            for x in 0..grid {
                for c in 0..dim {
                    features[(y, x, c)] = bg_signature[c];
                }
            }
        }
        for (mask, signature) in &distractors {
            paint(&mut features, mask, signature.view());
        }
        for (name, mask) in &instances {
            let idx = table.index_of(name).expect("table name");
            paint(&mut features, mask, table.vector(idx));
        }
        if options.feature_noise > 0.0 {
            for y in 0..grid {
                for x in 0..grid {
                    for c in 0..dim {
                        let n: f64 = rng.sample(StandardNormal);
                        features[(y, x, c)] += options.feature_noise * n;
                    }
                }
            }
        }
        return Ok(SyntheticScene {
            feature_map: FeatureMap::new(features)?,
            instances,
            seed,
        });
    }
    Err(Error::Generation(format!(
        "no valid scene after {} attempts (seed {seed})",
        options.placement_retries
    )))
}

fn paint(features: &mut Array3<f64>, mask: &BinaryMask, signature: ArrayView1<'_, f64>) {
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) == 1 {
                for c in 0..signature.len() {
                    features[(y, x, c)] = signature[c];
                }
            }
        }
    }
}

/// Trainable parameters of the proposal embedder plus the mask noise knob.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalParams {
    /// Linear map from pooled features to proposal embeddings.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    /// Per-boundary-pixel flip probability for proposal masks (not trained).
    pub mask_perturb: f64,
}

impl ProposalParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, mask_perturb: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let w = Array2::from_shape_fn((dim, dim), |_| rng.random_range(-bound..bound));
        Self {
            w,
            b: Array1::zeros(dim),
            mask_perturb,
        }
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.w.nrows() != dim || self.w.ncols() != dim || self.b.len() != dim {
            return Err(Error::Shape(format!(
                "embedder shaped {}x{} + {} for feature dimension {dim}",
                self.w.nrows(),
                self.w.ncols(),
                self.b.len()
            )));
        }
        if self.w.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("embedder has non-finite entries".into()));
        }
        if !(0.0..1.0).contains(&self.mask_perturb) {
            return Err(Error::Parameter(format!(
                "mask perturbation must lie in [0,1), got {}",
                self.mask_perturb
            )));
        }
        Ok(())
    }

    /// Embed one pooled feature vector.
    pub fn embed(&self, pooled: ArrayView1<'_, f64>) -> Array1<f64> {
        self.w.dot(&pooled) + &self.b
    }
}

/// Class-agnostic proposals with pooled features and embeddings.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    masks: Vec<BinaryMask>,
    pooled: Array2<f64>,
    embeddings: ProposalEmbeddingBatch,
    gt_assignment: Vec<usize>,
}

impl ProposalSet {
    pub fn new(
        masks: Vec<BinaryMask>,
        pooled: Array2<f64>,
        embeddings: ProposalEmbeddingBatch,
        gt_assignment: Vec<usize>,
    ) -> Result<Self> {
        let n = masks.len();
        if pooled.nrows() != n || embeddings.len() != n || gt_assignment.len() != n {
            return Err(Error::Shape(format!(
                "{n} masks vs {} pooled rows / {} embeddings / {} assignments",
                pooled.nrows(),
                embeddings.len(),
                gt_assignment.len()
            )));
        }
        Ok(Self {
            masks,
            pooled,
            embeddings,
            gt_assignment,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    pub fn pooled(&self) -> &Array2<f64> {
        &self.pooled
    }

    pub fn embeddings(&self) -> &ProposalEmbeddingBatch {
        &self.embeddings
    }

    /// Per-proposal class index in canonical table order; 0 is background.
    pub fn gt_assignment(&self) -> &[usize] {
        &self.gt_assignment
    }
}

fn connected_components(fg: &BinaryMask) -> Vec<BinaryMask> {
    let (h, w) = fg.shape();
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if fg.get(sy, sx) == 0 || seen[sy * w + sx] {
                continue;
            }
            let mut component = BinaryMask::zeros(h, w);
            let mut queue = vec![(sy, sx)];
            seen[sy * w + sx] = true;
            while let Some((y, x)) = queue.pop() {
                component.set(y, x, true);
                let mut push = |ny: usize, nx: usize, queue: &mut Vec<(usize, usize)>| {
                    if fg.get(ny, nx) == 1 && !seen[ny * w + nx] {
                        seen[ny * w + nx] = true;
                        queue.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut queue);
                }
                if y + 1 < h {
                    push(y + 1, x, &mut queue);
                }
                if x > 0 {
                    push(y, x - 1, &mut queue);
                }
                if x + 1 < w {
                    push(y, x + 1, &mut queue);
                }
            }
            components.push(component);
        }
    }
    components
}

fn perturb_mask<R: Rng + ?Sized>(mask: &BinaryMask, p: f64, rng: &mut R) -> BinaryMask {
    if p == 0.0 {
        return mask.clone();
    }
    let (h, w) = mask.shape();
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let on = mask.get(y, x) == 1;
            let neighbor = |ny: isize, nx: isize| -> bool {
                ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize
                    && mask.get(ny as usize, nx as usize) == 1
            };
            let yy = y as isize;
            let xx = x as isize;
            let boundary = [(yy - 1, xx), (yy + 1, xx), (yy, xx - 1), (yy, xx + 1)]
                .into_iter()
                .any(|(ny, nx)| neighbor(ny, nx) != on);
            if boundary && rng.random::<f64>() < p {
                out.set(y, x, !on);
            }
        }
    }
    out
}

/// Extract class-agnostic proposals from a scene.
///
/// Masks come from connected components of feature saliency (distance to the
/// per-channel median), perturbed at their boundaries and padded with small
/// random blobs up to `n_proposals`; embeddings are the learned linear map of
/// mask-average-pooled features.  Deterministic given the scene and
/// parameters.
pub fn propose_instances(
    scene: &SyntheticScene,
    params: &ProposalParams,
    n_proposals: usize,
) -> Result<ProposalSet> {
    if n_proposals == 0 {
        return Err(Error::Parameter("need at least one proposal".into()));
    }
    let features = &scene.feature_map;
    let (h, w, dim) = (features.height(), features.width(), features.channels());
    params.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, 1));

    // Saliency: distance from the per-channel median appearance.
    let mut median = Array1::<f64>::zeros(dim);
    let mut column = Vec::with_capacity(h * w);
    for c in 0..dim {
        column.clear();
        for y in 0..h {
            for x in 0..w {
                column.push(features.at(y, x)[c]);
            }
        }
        column.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        median[c] = column[column.len() / 2];
    }
    let mut saliency = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let diff = &features.at(y, x) - &median;
            saliency[(y, x)] = diff.dot(&diff).sqrt();
        }
    }
    let mut flat: Vec<f64> = saliency.iter().copied().collect();
    flat.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let s_max = *flat.last().expect("non-empty grid");
    let s_median = flat[flat.len() / 2];

    // Without clearly salient pixels the scene is treated as empty; the 2.5x
    // margin keeps pure-noise maxima from seeding giant components.
    let mut masks: Vec<BinaryMask> = Vec::new();
    if s_max > 0.0 && s_max >= 2.5 * s_median {
        let threshold = 0.5 * s_max;
        let mut fg = BinaryMask::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                fg.set(y, x, saliency[(y, x)] >= threshold);
            }
        }
        let mut components = connected_components(&fg);
        components.retain(|m| m.area() >= 3);
        components.sort_by(|a, b| b.area().cmp(&a.area()));
        components.truncate(n_proposals);
        for component in &components {
            masks.push(perturb_mask(component, params.mask_perturb, &mut rng));
        }
    }
    // Pad with small random blobs so every image yields N^p proposals.
    while masks.len() < n_proposals {
        let ry = rng.random_range(1..=2usize);
        let rx = rng.random_range(1..=2usize);
        let cy = rng.random_range(ry..h - ry);
        let cx = rng.random_range(rx..w - rx);
        masks.push(ellipse_mask(h, cy, cx, ry, rx));
    }

    let mut pooled = Array2::<f64>::zeros((masks.len(), dim));
    let mut embedded = Array2::<f64>::zeros((masks.len(), dim));
    for (i, mask) in masks.iter().enumerate() {
        if let Some(v) = mask_average_pool(features, mask)? {
            pooled.row_mut(i).assign(&v);
        }
        embedded.row_mut(i).assign(&params.embed(pooled.row(i)));
    }
    let n = masks.len();
    ProposalSet::new(
        masks,
        pooled,
        ProposalEmbeddingBatch::new(embedded)?,
        vec![0; n],
    )
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok(if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    })
}

fn assign_labels(
    masks: &[BinaryMask],
    instances: &[(String, BinaryMask)],
    table: &EmbeddingTable,
    iou_floor: f64,
) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&iou_floor) {
        return Err(Error::Parameter(format!(
            "matching floor must lie in [0,1), got {iou_floor}"
        )));
    }
    if masks.is_empty() || instances.is_empty() {
        return Ok(vec![0; masks.len()]);
    }
    let mut weights = Array2::<f64>::zeros((masks.len(), instances.len()));
    for (n, mask) in masks.iter().enumerate() {
        for (g, (_, gt)) in instances.iter().enumerate() {
            weights[(n, g)] = iou(mask, gt)?;
        }
    }
    let assignment = max_weight_assignment(&weights);
    let mut labels = vec![0; masks.len()];
    for (n, assigned) in assignment.iter().enumerate() {
        if let Some(g) = assigned {
            if weights[(n, *g)] >= iou_floor.max(f64::MIN_POSITIVE) {
                let name = &instances[*g].0;
                labels[n] = table
                    .index_of(name)
                    .ok_or_else(|| Error::UnknownClass(name.clone()))?;
            }
        }
    }
    Ok(labels)
}

/// Assign ground-truth classes to proposals by optimal mask matching.
///
/// The assignment maximizes total mask IoU one-to-one; pairs with IoU below
/// `iou_floor` (or zero) and unmatched proposals are labeled background.
pub fn match_proposals(
    mut proposals: ProposalSet,
    scene: &SyntheticScene,
    table: &EmbeddingTable,
    iou_floor: f64,
) -> Result<ProposalSet> {
    proposals.gt_assignment =
        assign_labels(&proposals.masks, &scene.instances, table, iou_floor)?;
    Ok(proposals)
}

/// Everything the trainer and evaluator need from one image.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub image_id: u64,
    pub instances: Vec<(String, BinaryMask)>,
    pub proposal_masks: Vec<BinaryMask>,
    /// Mask-average-pooled features, one row per proposal.
    pub pooled: Array2<f64>,
    pub gt_assignment: Vec<usize>,
    /// Pooled feature of the complement of all proposal masks.
    pub background: BackgroundPrototype,
}

/// Run the full per-image pipeline: propose, match, and pool the background.
pub fn prepare_from_scene(
    scene: &SyntheticScene,
    table: &EmbeddingTable,
    params: &ProposalParams,
    n_proposals: usize,
    iou_floor: f64,
    image_id: u64,
) -> Result<PreparedExample> {
    let set = propose_instances(scene, params, n_proposals)?;
    let set = match_proposals(set, scene, table, iou_floor)?;
    let fg = foreground_union(
        set.masks(),
        scene.feature_map.height(),
        scene.feature_map.width(),
    )?;
    let background = background_prototype(
        &background_mask(&fg),
        &scene.feature_map,
        table.background(),
    )?;
    Ok(PreparedExample {
        image_id,
        instances: scene.instances.clone(),
        proposal_masks: set.masks,
        pooled: set.pooled,
        gt_assignment: set.gt_assignment,
        background,
    })
}

/// COCO-style run-length mask record (column-major counts string).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleRecord {
    /// Height, width.
    pub size: [usize; 2],
    pub counts: String,
}

impl RleRecord {
    pub fn from_mask(mask: &BinaryMask) -> Self {
        Self {
            size: [mask.height(), mask.width()],
            counts: rle::encode(mask),
        }
    }

    pub fn to_mask(&self) -> Result<BinaryMask> {
        rle::decode(&self.counts, self.size[0], self.size[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub class_name: String,
    pub mask: RleRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub mask: RleRecord,
    pub pooled: Vec<f64>,
}

/// One serialized image: ground truth, proposals, and background feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_id: u64,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub instances: Vec<InstanceRecord>,
    pub proposals: Vec<ProposalRecord>,
    /// Pooled background feature; the static embedding if `background_fallback`.
    pub background_feature: Vec<f64>,
    pub background_fallback: bool,
}

/// A dataset on disk: the split name plus per-image records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub records: Vec<SceneRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// Serialize one prepared image into a manifest record.
pub fn scene_record(example: &PreparedExample, seed: u64, height: usize, width: usize) -> SceneRecord {
    SceneRecord {
        image_id: example.image_id,
        seed,
        height,
        width,
        instances: example
            .instances
            .iter()
            .map(|(name, mask)| InstanceRecord {
                class_name: name.clone(),
                mask: RleRecord::from_mask(mask),
            })
            .collect(),
        proposals: example
            .proposal_masks
            .iter()
            .zip(example.pooled.rows())
            .map(|(mask, pooled)| ProposalRecord {
                mask: RleRecord::from_mask(mask),
                pooled: pooled.to_vec(),
            })
            .collect(),
        background_feature: example.background.vector.to_vec(),
        background_fallback: example.background.used_fallback,
    }
}

/// Rebuild a prepared image from a manifest record, re-running matching.
pub fn prepare_from_record(
    record: &SceneRecord,
    table: &EmbeddingTable,
    iou_floor: f64,
) -> Result<PreparedExample> {
    let mut instances = Vec::with_capacity(record.instances.len());
    for inst in &record.instances {
        instances.push((inst.class_name.clone(), inst.mask.to_mask()?));
    }
    let mut proposal_masks = Vec::with_capacity(record.proposals.len());
    let mut pooled = Array2::<f64>::zeros((record.proposals.len(), table.dim()));
    for (i, prop) in record.proposals.iter().enumerate() {
        if prop.pooled.len() != table.dim() {
            return Err(Error::Shape(format!(
                "record pools {} channels, table expects {}",
                prop.pooled.len(),
                table.dim()
            )));
        }
        proposal_masks.push(prop.mask.to_mask()?);
        pooled
            .row_mut(i)
            .assign(&Array1::from(prop.pooled.clone()));
    }
    if record.background_feature.len() != table.dim() {
        return Err(Error::Shape(format!(
            "record background has {} channels, table expects {}",
            record.background_feature.len(),
            table.dim()
        )));
    }
    let gt_assignment = assign_labels(&proposal_masks, &instances, table, iou_floor)?;
    Ok(PreparedExample {
        image_id: record.image_id,
        instances,
        proposal_masks,
        pooled,
        gt_assignment,
        background: BackgroundPrototype {
            vector: Array1::from(record.background_feature.clone()),
            used_fallback: record.background_fallback,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantic::Group;
    use approx::assert_abs_diff_eq;

    fn toy_table() -> EmbeddingTable {
        toy_embedding_table(&SplitConfig::toy_6_3(), 16, 0.75, 11).unwrap()
    }

    fn default_params(rng_seed: u64) -> ProposalParams {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        ProposalParams::init(16, 0.1, &mut rng)
    }

    #[test]
    fn builtin_splits_have_expected_shapes() {
        let toy = SplitConfig::toy_6_3();
        assert_eq!((toy.seen().len(), toy.unseen().len()), (6, 3));
        let narrow = SplitConfig::coco_48_17();
        assert_eq!((narrow.seen().len(), narrow.unseen().len()), (48, 17));
        let wide = SplitConfig::coco_65_15();
        assert_eq!((wide.seen().len(), wide.unseen().len()), (65, 15));
        for split in [&toy, &narrow, &wide] {
            for s in split.seen() {
                assert!(!split.unseen().contains(s));
            }
        }
        assert_eq!(SplitConfig::by_name("65/15").unwrap(), wide);
        assert!(SplitConfig::by_name("50/50").is_err());
    }

    #[test]
    fn split_rejects_overlap_and_reserved_names() {
        assert!(SplitConfig::new("bad", vec!["a".into()], vec!["a".into()]).is_err());
        assert!(SplitConfig::new("bad", vec!["a".into()], vec![]).is_err());
        assert!(SplitConfig::new("bad", vec!["background".into()], vec!["b".into()]).is_err());
    }

    #[test]
    fn toy_table_pairs_each_unseen_class_with_a_seen_partner() {
        let table = toy_table();
        assert_eq!(table.n_seen(), 6);
        assert_eq!(table.n_unseen(), 3);
        for j in 0..3 {
            let unseen = table.vector(7 + j);
            let partner = table.vector(1 + j);
            let cos = unseen.dot(&partner);
            assert!(cos > 0.5, "pair {j} similarity {cos}");
            for i in 0..6 {
                if i != j {
                    let other = unseen.dot(&table.vector(1 + i));
                    assert!(cos > other, "pair {j} not dominant over seen {i}");
                }
            }
        }
    }

    #[test]
    fn toy_table_rejects_bad_parameters() {
        let split = SplitConfig::toy_6_3();
        assert!(toy_embedding_table(&split, 1, 0.5, 0).is_err());
        assert!(toy_embedding_table(&split, 16, 1.0, 0).is_err());
        assert!(toy_embedding_table(&split, 16, -0.1, 0).is_err());
    }

    #[test]
    fn derived_seeds_are_stable_and_spread() {
        assert_eq!(derive_seed(7, 0), derive_seed(7, 0));
        let seeds: Vec<u64> = (0..100).map(|i| derive_seed(7, i)).collect();
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), seeds.len());
        assert_ne!(derive_seed(7, 1), derive_seed(8, 1));
    }

    #[test]
    fn zero_instance_options_yield_pure_background() {
        let table = toy_table();
        let options = SceneOptions {
            min_instances: 0,
            max_instances: 0,
            distractor_rate: 0.0,
            ..SceneOptions::default()
        };
        let scene = generate_scene(&table, SceneMode::Train, 3, &options).unwrap();
        assert!(scene.instances.is_empty());
    }

    #[test]
    fn train_scenes_never_contain_unseen_classes() {
        let table = toy_table();
        let options = SceneOptions::default();
        for seed in 0..1000 {
            let scene = generate_scene(&table, SceneMode::Train, seed, &options).unwrap();
            for (name, mask) in &scene.instances {
                let idx = table.index_of(name).unwrap();
                assert_eq!(table.group_of(idx), Group::Seen, "seed {seed}");
                assert!(mask.area() >= 4);
            }
        }
    }

    #[test]
    fn eval_scenes_always_contain_an_unseen_instance() {
        let table = toy_table();
        let options = SceneOptions::default();
        for seed in 0..200 {
            let scene = generate_scene(&table, SceneMode::Eval, seed, &options).unwrap();
            let has_unseen = scene.instances.iter().any(|(name, _)| {
                table.group_of(table.index_of(name).unwrap()) == Group::Unseen
            });
            assert!(has_unseen, "seed {seed}");
        }
    }

    #[test]
    fn same_seed_reproduces_the_scene_bit_for_bit() {
        let table = toy_table();
        let options = SceneOptions::default();
        let a = generate_scene(&table, SceneMode::Eval, 99, &options).unwrap();
        let b = generate_scene(&table, SceneMode::Eval, 99, &options).unwrap();
        assert_eq!(a.instances.len(), b.instances.len());
        for ((na, ma), (nb, mb)) in a.instances.iter().zip(&b.instances) {
            assert_eq!(na, nb);
            assert_eq!(ma.grid(), mb.grid());
        }
        for (va, vb) in a
            .feature_map
            .grid()
            .iter()
            .zip(b.feature_map.grid().iter())
        {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }

    #[test]
    fn impossible_placement_reports_generation_failure() {
        let table = toy_table();
        let options = SceneOptions {
            grid: 8,
            min_instances: 3,
            max_instances: 3,
            placement_retries: 20,
            ..SceneOptions::default()
        };
        // An 8x8 grid cannot hold three disjoint radius-3 blobs.
        let mut failures = 0;
        for seed in 0..10 {
            if generate_scene(&table, SceneMode::Train, seed, &options).is_err() {
                failures += 1;
            }
        }
        assert_eq!(failures, 10);
    }

    #[test]
    fn separated_instance_is_recovered_by_some_proposal() {
        let table = toy_table();
        let params = default_params(5);
        let options = SceneOptions {
            min_instances: 1,
            max_instances: 1,
            ..SceneOptions::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(&table, SceneMode::Train, seed, &options).unwrap();
            let set = propose_instances(&scene, &params, 5).unwrap();
            assert_eq!(set.len(), 5);
            let gt = &scene.instances[0].1;
            let best = set
                .masks()
                .iter()
                .map(|m| iou(m, gt).unwrap())
                .fold(0.0, f64::max);
            assert!(best >= 0.5, "seed {seed} best IoU {best}");
        }
    }

    #[test]
    fn pure_background_scene_yields_near_empty_proposals() {
        let table = toy_table();
        let params = default_params(5);
        let options = SceneOptions {
            min_instances: 0,
            max_instances: 0,
            distractor_rate: 0.0,
            ..SceneOptions::default()
        };
        for seed in 0..10 {
            let scene = generate_scene(&table, SceneMode::Train, seed, &options).unwrap();
            let set = propose_instances(&scene, &params, 5).unwrap();
            for mask in set.masks() {
                assert!(
                    mask.foreground_fraction() < 0.05,
                    "seed {seed} fraction {}",
                    mask.foreground_fraction()
                );
            }
        }
    }

    #[test]
    fn proposals_are_deterministic_given_the_scene() {
        let table = toy_table();
        let params = default_params(5);
        let scene =
            generate_scene(&table, SceneMode::Train, 21, &SceneOptions::default()).unwrap();
        let a = propose_instances(&scene, &params, 8).unwrap();
        let b = propose_instances(&scene, &params, 8).unwrap();
        for (ma, mb) in a.masks().iter().zip(b.masks()) {
            assert_eq!(ma.grid(), mb.grid());
        }
        for (va, vb) in a.pooled().iter().zip(b.pooled().iter()) {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }

    #[test]
    fn permuting_proposals_leaves_the_foreground_union_unchanged() {
        let table = toy_table();
        let params = default_params(5);
        let scene =
            generate_scene(&table, SceneMode::Train, 17, &SceneOptions::default()).unwrap();
        let set = propose_instances(&scene, &params, 8).unwrap();
        let (h, w) = (scene.feature_map.height(), scene.feature_map.width());
        let forward = foreground_union(set.masks(), h, w).unwrap();
        let mut reversed: Vec<BinaryMask> = set.masks().to_vec();
        reversed.reverse();
        let backward = foreground_union(&reversed, h, w).unwrap();
        assert_eq!(forward.grid(), backward.grid());
    }

    #[test]
    fn perfect_proposal_gets_the_instance_class() {
        let table = toy_table();
        let scene =
            generate_scene(&table, SceneMode::Train, 13, &SceneOptions::default()).unwrap();
        let (name, gt) = scene.instances[0].clone();
        let pooled = Array2::zeros((1, table.dim()));
        let embeddings = ProposalEmbeddingBatch::new(Array2::from_elem((1, table.dim()), 0.1))
            .unwrap();
        let set = ProposalSet::new(vec![gt], pooled, embeddings, vec![0]).unwrap();
        let matched = match_proposals(set, &scene, &table, 0.5).unwrap();
        assert_eq!(matched.gt_assignment()[0], table.index_of(&name).unwrap());
    }

    #[test]
    fn crossed_ious_match_diagonally() {
        let table = toy_table();
        // Two GT squares and two proposals, each overlapping its own GT far
        // more than the other.
        let mut gt_a = BinaryMask::zeros(16, 16);
        let mut gt_b = BinaryMask::zeros(16, 16);
        for i in 0..6 {
            for j in 0..6 {
                gt_a.set(i, j, true);
                gt_b.set(i + 8, j + 8, true);
            }
        }
        let scene = SyntheticScene {
            feature_map: FeatureMap::new(Array3::zeros((16, 16, 16))).unwrap(),
            instances: vec![
                ("circle".to_string(), gt_a.clone()),
                ("square".to_string(), gt_b.clone()),
            ],
            seed: 0,
        };
        let mut prop_a = gt_a.clone();
        prop_a.set(0, 7, true); // IoU just below 1 with gt_a, 0 with gt_b
        let mut prop_b = gt_b.clone();
        prop_b.set(15, 0, true);
        let masks = vec![prop_b, prop_a]; // reversed order on purpose
        let pooled = Array2::zeros((2, 16));
        let embeddings = ProposalEmbeddingBatch::new(Array2::from_elem((2, 16), 0.1)).unwrap();
        let set = ProposalSet::new(masks, pooled, embeddings, vec![0, 0]).unwrap();
        let matched = match_proposals(set, &scene, &table, 0.5).unwrap();
        assert_eq!(
            matched.gt_assignment(),
            &[
                table.index_of("square").unwrap(),
                table.index_of("circle").unwrap()
            ]
        );
    }

    #[test]
    fn below_floor_pairs_are_labeled_background() {
        let table = toy_table();
        let mut gt = BinaryMask::zeros(8, 8);
        let mut prop = BinaryMask::zeros(8, 8);
        for i in 0..4 {
            gt.set(0, i, true); // 4 pixels
            prop.set(0, i, i < 1); // 1 pixel overlap -> IoU 0.25
        }
        let scene = SyntheticScene {
            feature_map: FeatureMap::new(Array3::zeros((8, 8, 16))).unwrap(),
            instances: vec![("circle".to_string(), gt)],
            seed: 0,
        };
        let embeddings = ProposalEmbeddingBatch::new(Array2::from_elem((1, 16), 0.1)).unwrap();
        let set = ProposalSet::new(vec![prop], Array2::zeros((1, 16)), embeddings, vec![0])
            .unwrap();
        let matched = match_proposals(set, &scene, &table, 0.5).unwrap();
        assert_eq!(matched.gt_assignment(), &[0]);
        assert!(matches!(
            assign_labels(&[], &[], &table, 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn matching_agrees_with_brute_force_on_small_cases() {
        use rand::Rng;
        let table = toy_table();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for case in 0..100 {
            let np = rng.random_range(1..=4usize);
            let ng = rng.random_range(1..=3usize);
            let masks: Vec<BinaryMask> = (0..np).map(|_| random_mask(&mut rng, 8)).collect();
            let instances: Vec<(String, BinaryMask)> = (0..ng)
                .map(|g| (TOY_SEEN[g].to_string(), random_mask(&mut rng, 8)))
                .collect();
            let labels = assign_labels(&masks, &instances, &table, 0.0).unwrap();

            let mut weights = Array2::<f64>::zeros((np, ng));
            for n in 0..np {
                for g in 0..ng {
                    weights[(n, g)] = iou(&masks[n], &instances[g].1).unwrap();
                }
            }
            let (best_total, unique) = brute_force_best(&weights);
            let total: f64 = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l > 0)
                .map(|(n, &l)| {
                    let g = instances
                        .iter()
                        .position(|(name, _)| table.index_of(name).unwrap() == l)
                        .unwrap();
                    weights[(n, g)]
                })
                .sum();
            assert!(
                total >= best_total - 1e-9,
                "case {case}: {total} < {best_total}"
            );
            if unique {
                assert_abs_diff_eq!(total, best_total, epsilon = 1e-9);
            }
        }
    }

    fn random_mask<R: Rng + ?Sized>(rng: &mut R, grid: usize) -> BinaryMask {
        let mut mask = BinaryMask::zeros(grid, grid);
        for y in 0..grid {
            for x in 0..grid {
                if rng.random::<f64>() < 0.3 {
                    mask.set(y, x, true);
                }
            }
        }
        mask
    }

    /// Best total weight over injective partial assignments using only
    /// strictly positive pairs; also reports whether the optimum is unique.
    fn brute_force_best(weights: &Array2<f64>) -> (f64, bool) {
        fn go(weights: &Array2<f64>, row: usize, used: &mut Vec<bool>) -> Vec<f64> {
            if row == weights.nrows() {
                return vec![0.0];
            }
            let mut totals = go(weights, row + 1, used);
            for g in 0..weights.ncols() {
                if !used[g] && weights[(row, g)] > 0.0 {
                    used[g] = true;
                    for t in go(weights, row + 1, used) {
                        totals.push(t + weights[(row, g)]);
                    }
                    used[g] = false;
                }
            }
            totals
        }
        let totals = go(weights, 0, &mut vec![false; weights.ncols()]);
        let best = totals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let near: usize = totals.iter().filter(|&&t| (t - best).abs() < 1e-9).count();
        (best, near == 1)
    }

    #[test]
    fn prepared_scene_roundtrips_through_the_manifest() {
        let table = toy_table();
        let params = default_params(5);
        let options = SceneOptions::default();
        let scene = generate_scene(&table, SceneMode::Train, 42, &options).unwrap();
        let example = prepare_from_scene(&scene, &table, &params, 8, 0.5, 42).unwrap();
        let record = scene_record(&example, scene.seed, options.grid, options.grid);
        let manifest = DatasetManifest {
            split: "toy-6/3".to_string(),
            records: vec![record],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);

        let rebuilt = prepare_from_record(&loaded.records[0], &table, 0.5).unwrap();
        assert_eq!(rebuilt.gt_assignment, example.gt_assignment);
        assert_eq!(rebuilt.instances.len(), example.instances.len());
        for (a, b) in rebuilt
            .proposal_masks
            .iter()
            .zip(example.proposal_masks.iter())
        {
            assert_eq!(a.grid(), b.grid());
        }
        for (a, b) in rebuilt.pooled.iter().zip(example.pooled.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in rebuilt
            .background
            .vector
            .iter()
            .zip(example.background.vector.iter())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn scene_options_validation_catches_bad_knobs() {
        let mut options = SceneOptions::default();
        options.grid = 4;
        assert!(options.validate().is_err());
        options = SceneOptions {
            min_instances: 3,
            max_instances: 1,
            ..SceneOptions::default()
        };
        assert!(options.validate().is_err());
        options = SceneOptions {
            mask_perturb: 1.0,
            ..SceneOptions::default()
        };
        assert!(options.validate().is_err());
    }
}

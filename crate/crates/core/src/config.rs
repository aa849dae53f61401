//! Experiment configuration: defaults, a flat key-value file format, and
//! validation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::pipeline::SceneOptions;

/// Ablation switches; each one toggles exactly one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Condition classifier prototypes on the image's proposals.
    pub conditional_classifier: bool,
    /// Replace the static background embedding with the pooled background
    /// feature.
    pub adaptive_background: bool,
    /// Train the unseen scoring pathway on pseudo labels.
    pub unseen_ce: bool,
    /// Duplicate each detected instance with its best seen and unseen labels
    /// at evaluation time.
    pub copy_paste: bool,
    /// Add Gumbel noise to log-correlations instead of raw correlations when
    /// sampling pseudo labels.
    pub gumbel_on_log: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            conditional_classifier: true,
            adaptive_background: true,
            unseen_ce: true,
            copy_paste: false,
            gumbel_on_log: false,
        }
    }
}

impl Toggles {
    /// Everything off: the plain seen-only baseline.
    pub fn all_off() -> Self {
        Self {
            conditional_classifier: false,
            adaptive_background: false,
            unseen_ce: false,
            copy_paste: false,
            gumbel_on_log: false,
        }
    }
}

/// Full experiment description; see `parse_config` for the file format.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Name of a built-in split: "toy-6/3", "48/17", or "65/15".
    pub split: String,
    /// Weight of the unseen loss term.
    pub lambda: f64,
    /// Temperature of the semantic correlation softmax.
    pub tau_corr: f64,
    /// Temperature of the classification softmaxes.
    pub tau_cls: f64,
    /// Proposals per image.
    pub n_proposals: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Number of evaluation scenes to generate (ignored with a manifest).
    pub eval_scenes: usize,
    /// Matching floor below which proposals are labeled background.
    pub iou_floor: f64,
    /// Embedding and feature dimensionality of the toy problem.
    pub embed_dim: usize,
    /// Inner dimension of the attention projections.
    pub d_k: usize,
    /// Seen-partner mixing weight of toy unseen embeddings.
    pub alpha: f64,
    pub scene: SceneOptions,
    pub toggles: Toggles,
    /// Sample pseudo labels once per class instead of once per proposal use.
    pub freeze_pseudo_labels: bool,
    /// Load scenes from this manifest instead of generating them.
    pub data_manifest: Option<PathBuf>,
    /// Load class embeddings from this file instead of the toy generator.
    pub embedding_file: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            split: "toy-6/3".to_string(),
            lambda: 0.1,
            tau_corr: 0.1,
            tau_cls: 0.1,
            n_proposals: 20,
            steps: 2000,
            learning_rate: 0.1,
            seed: 7,
            eval_scenes: 64,
            iou_floor: 0.5,
            embed_dim: 16,
            d_k: 16,
            alpha: 0.75,
            scene: SceneOptions::default(),
            toggles: Toggles::default(),
            freeze_pseudo_labels: false,
            data_manifest: None,
            embedding_file: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.tau_corr <= 0.0 || self.tau_cls <= 0.0 {
            return bad(format!(
                "temperatures must be positive, got tau_corr={} tau_cls={}",
                self.tau_corr, self.tau_cls
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.n_proposals == 0 {
            return bad("n_proposals must be at least 1".into());
        }
        if self.eval_scenes == 0 {
            return bad("eval_scenes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.iou_floor) {
            return bad(format!("iou_floor must lie in [0,1), got {}", self.iou_floor));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be at least 2, got {}", self.embed_dim));
        }
        if self.d_k == 0 {
            return bad("d_k must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0,1), got {}", self.alpha));
        }
        self.scene
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        crate::pipeline::SplitConfig::by_name(&self.split)?;
        Ok(())
    }

    /// Render the configuration in the key-value file format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("split", self.split.clone());
        kv("lambda", self.lambda.to_string());
        kv("tau_corr", self.tau_corr.to_string());
        kv("tau_cls", self.tau_cls.to_string());
        kv("n_proposals", self.n_proposals.to_string());
        kv("steps", self.steps.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("seed", self.seed.to_string());
        kv("eval_scenes", self.eval_scenes.to_string());
        kv("iou_floor", self.iou_floor.to_string());
        kv("embed_dim", self.embed_dim.to_string());
        kv("d_k", self.d_k.to_string());
        kv("alpha", self.alpha.to_string());
        kv("grid", self.scene.grid.to_string());
        kv("min_instances", self.scene.min_instances.to_string());
        kv("max_instances", self.scene.max_instances.to_string());
        kv("feature_noise", self.scene.feature_noise.to_string());
        kv("bg_drift", self.scene.bg_drift.to_string());
        kv("distractor_rate", self.scene.distractor_rate.to_string());
        kv("mask_perturb", self.scene.mask_perturb.to_string());
        kv("placement_retries", self.scene.placement_retries.to_string());
        kv(
            "conditional_classifier",
            self.toggles.conditional_classifier.to_string(),
        );
        kv(
            "adaptive_background",
            self.toggles.adaptive_background.to_string(),
        );
        kv("unseen_ce", self.toggles.unseen_ce.to_string());
        kv("copy_paste", self.toggles.copy_paste.to_string());
        kv("gumbel_on_log", self.toggles.gumbel_on_log.to_string());
        kv(
            "freeze_pseudo_labels",
            self.freeze_pseudo_labels.to_string(),
        );
        if let Some(p) = &self.data_manifest {
            kv("data_manifest", p.display().to_string());
        }
        if let Some(p) = &self.embedding_file {
            kv("embedding_file", p.display().to_string());
        }
        out
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}` has invalid value `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!(
            "key `{key}` must be true or false, got `{other}`"
        ))),
    }
}

/// Parse the flat `key = value` configuration format.
///
/// Lines starting with `#` and blank lines are ignored; unknown or repeated
/// keys are errors; omitted keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    let mut seen_keys: Vec<String> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        if seen_keys.iter().any(|k| k == key) {
            return Err(Error::Config(format!("key `{key}` appears twice")));
        }
        seen_keys.push(key.to_string());
        match key {
            "split" => config.split = value.to_string(),
            "lambda" => config.lambda = parse_num(key, value)?,
            "tau_corr" => config.tau_corr = parse_num(key, value)?,
            "tau_cls" => config.tau_cls = parse_num(key, value)?,
            "n_proposals" => config.n_proposals = parse_num(key, value)?,
            "steps" => config.steps = parse_num(key, value)?,
            "learning_rate" => config.learning_rate = parse_num(key, value)?,
            "seed" => config.seed = parse_num(key, value)?,
            "eval_scenes" => config.eval_scenes = parse_num(key, value)?,
            "iou_floor" => config.iou_floor = parse_num(key, value)?,
            "embed_dim" => config.embed_dim = parse_num(key, value)?,
            "d_k" => config.d_k = parse_num(key, value)?,
            "alpha" => config.alpha = parse_num(key, value)?,
            "grid" => config.scene.grid = parse_num(key, value)?,
            "min_instances" => config.scene.min_instances = parse_num(key, value)?,
            "max_instances" => config.scene.max_instances = parse_num(key, value)?,
            "feature_noise" => config.scene.feature_noise = parse_num(key, value)?,
            "bg_drift" => config.scene.bg_drift = parse_num(key, value)?,
            "distractor_rate" => config.scene.distractor_rate = parse_num(key, value)?,
            "mask_perturb" => config.scene.mask_perturb = parse_num(key, value)?,
            "placement_retries" => config.scene.placement_retries = parse_num(key, value)?,
            "conditional_classifier" => {
                config.toggles.conditional_classifier = parse_bool(key, value)?
            }
            "adaptive_background" => config.toggles.adaptive_background = parse_bool(key, value)?,
            "unseen_ce" => config.toggles.unseen_ce = parse_bool(key, value)?,
            "copy_paste" => config.toggles.copy_paste = parse_bool(key, value)?,
            "gumbel_on_log" => config.toggles.gumbel_on_log = parse_bool(key, value)?,
            "freeze_pseudo_labels" => config.freeze_pseudo_labels = parse_bool(key, value)?,
            "data_manifest" => config.data_manifest = Some(PathBuf::from(value)),
            "embedding_file" => config.embedding_file = Some(PathBuf::from(value)),
            other => {
                return Err(Error::Config(format!("unknown key `{other}`")));
            }
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn defaults_are_valid_and_roundtrip() {
        let config = ExperimentConfig::default();
        config.validate().unwrap();
        assert_abs_diff_eq!(config.lambda, 0.1);
        assert_abs_diff_eq!(config.tau_corr, 0.1);
        assert_abs_diff_eq!(config.tau_cls, 0.1);
        let reparsed = parse_config(&config.to_file_string()).unwrap();
        assert_eq!(reparsed, config);
    }

    #[test]
    fn parses_overrides_comments_and_blanks() {
        let text = "\
# experiment
split = toy-6/3

steps = 10
learning_rate = 0.25
copy_paste = true
seed = 99
";
        let config = parse_config(text).unwrap();
        assert_eq!(config.steps, 10);
        assert_abs_diff_eq!(config.learning_rate, 0.25);
        assert!(config.toggles.copy_paste);
        assert_eq!(config.seed, 99);
        // Untouched keys keep defaults.
        assert_eq!(config.n_proposals, 20);
    }

    #[test]
    fn zero_steps_are_allowed() {
        let config = parse_config("steps = 0\n").unwrap();
        assert_eq!(config.steps, 0);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        assert!(matches!(
            parse_config("nonsense = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("steps = 1\nsteps = 2\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(parse_config("steps\n"), Err(Error::Config(_))));
        assert!(matches!(
            parse_config("steps = many\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_config("copy_paste = yes\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(parse_config("lambda = -0.5\n").is_err());
        assert!(parse_config("tau_cls = 0\n").is_err());
        assert!(parse_config("learning_rate = 0\n").is_err());
        assert!(parse_config("iou_floor = 1.0\n").is_err());
        assert!(parse_config("alpha = 1.5\n").is_err());
        assert!(parse_config("split = 50/50\n").is_err());
        assert!(parse_config("grid = 2\n").is_err());
        assert!(parse_config("n_proposals = 0\n").is_err());
    }

    #[test]
    fn paths_are_read_verbatim() {
        let config =
            parse_config("data_manifest = /tmp/data.json\nembedding_file = /tmp/emb.txt\n")
                .unwrap();
        assert_eq!(config.data_manifest.unwrap(), PathBuf::from("/tmp/data.json"));
        assert_eq!(config.embedding_file.unwrap(), PathBuf::from("/tmp/emb.txt"));
    }
}

//! Seeded end-to-end training and evaluation runs.
//!
//! Training composes the whole differentiable path on the autodiff tape:
//! pooled proposal features (constant) pass through the linear embedder,
//! optionally the input-conditional prototype head and the unseen-score MLP,
//! and finally the two cross-entropies and their weighted total.  Plain
//! gradient descent with a fixed learning rate keeps every run a pure
//! function of (config, seed).  Evaluation replays the same forward path
//! without the tape and scores predictions with the detection metrics.
//!
//! A training run writes `loss_log.tsv` (one `step\ttotal\tseen\tunseen`
//! line per step), `final.ckpt`, and `best.ckpt`; a run that hits a
//! non-finite loss writes `diverged.ckpt` and aborts.  An evaluation run
//! writes `report.csv`, `report.md`, `predictions.jsonl`, and
//! `ground_truth.jsonl`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::checkpoint::{Checkpoint, ModelParams};
use crate::classifier::{
    classify_joint, classify_seen, classify_unseen, classify_unseen_direct, condition_prototypes,
    raw_prototypes, self_attend, ProposalEmbeddingBatch,
};
use crate::config::{ExperimentConfig, Toggles};
use crate::error::{Error, Result};
use crate::eval::{
    build_report, copy_paste_expand, evaluate_detections, read_ground_truth, read_predictions,
    write_ground_truth, write_predictions, EvalReport, GroundTruth, InstancePrediction,
    ScoredInstance,
};
use crate::objectives::LOG_FLOOR;
use crate::pipeline::{
    derive_seed, generate_scene, prepare_from_record, prepare_from_scene, toy_embedding_table,
    DatasetManifest, PreparedExample, SceneMode, SplitConfig,
};
use crate::semantic::{
    correlation_matrix, load_embedding_table, sample_pseudo_label, CorrelationMatrix,
    EmbeddingTable,
};

/// Mask-IoU thresholds every report prints recall at.
pub const RECALL_THRESHOLDS: [f64; 3] = [0.4, 0.5, 0.6];

/// Per-image prediction cap for recall and average precision.
pub const TOP_K: usize = 100;

/// Loss log written by [`run_train`], one line per step.
pub const LOSS_LOG_FILE: &str = "loss_log.tsv";
/// Checkpoint of the parameters after the last step.
pub const FINAL_CHECKPOINT_FILE: &str = "final.ckpt";
/// Checkpoint of the parameters with the lowest recorded loss.
pub const BEST_CHECKPOINT_FILE: &str = "best.ckpt";
/// Checkpoint written when training aborts on a non-finite loss.
pub const DIVERGED_CHECKPOINT_FILE: &str = "diverged.ckpt";
/// Report files written by [`run_eval`] and [`run_metrics`].
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_MARKDOWN_FILE: &str = "report.md";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.jsonl";

// Disjoint seed streams carved out of the per-experiment seed.  Training
// scenes, evaluation scenes, pseudo-label draws, the toy embedding table, and
// parameter initialization each get their own stream so that toggling one
// consumer never shifts another's randomness.
const STREAM_TRAIN: u64 = 0;
const STREAM_EVAL: u64 = 1 << 40;
const STREAM_PSEUDO: u64 = 2 << 40;
const STREAM_TABLE: u64 = 3 << 40;
const STREAM_INIT: u64 = 4 << 40;

/// A validated configuration bound to its split, class table, and data
/// source.
pub struct Experiment {
    config: ExperimentConfig,
    split: SplitConfig,
    table: EmbeddingTable,
    manifest: Option<DatasetManifest>,
}

impl Experiment {
    /// Validate a configuration and resolve its split, embedding table, and
    /// optional scene manifest.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let split = SplitConfig::by_name(&config.split)?;
        let table = match &config.embedding_file {
            Some(path) => load_embedding_table(path, &split.group_spec())?,
            None => toy_embedding_table(
                &split,
                config.embed_dim,
                config.alpha,
                derive_seed(config.seed, STREAM_TABLE),
            )?,
        };
        let manifest = match &config.data_manifest {
            Some(path) => {
                let manifest = DatasetManifest::load(path)?;
                if manifest.split != split.name() {
                    return Err(Error::Config(format!(
                        "manifest was built for split {}, config uses {}",
                        manifest.split,
                        split.name()
                    )));
                }
                if manifest.records.is_empty() {
                    return Err(Error::Config("manifest holds no scenes".into()));
                }
                Some(manifest)
            }
            None => None,
        };
        Ok(Self {
            config,
            split,
            table,
            manifest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn split(&self) -> &SplitConfig {
        &self.split
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    /// Freshly initialized parameters for this experiment's seed.
    pub fn init_params(&self) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, STREAM_INIT));
        ModelParams::init(
            self.table.dim(),
            self.config.d_k,
            self.config.scene.mask_perturb,
            &mut rng,
        )
    }

    /// Validate a checkpoint against this experiment and unpack it.
    pub fn params_from_checkpoint(&self, checkpoint: &Checkpoint) -> Result<ModelParams> {
        if checkpoint.split != self.split.name() {
            return Err(Error::Config(format!(
                "checkpoint was trained on split {}, config uses {}",
                checkpoint.split,
                self.split.name()
            )));
        }
        if checkpoint.dim != self.table.dim() {
            return Err(Error::Config(format!(
                "checkpoint dimension {} does not match the class table's {}",
                checkpoint.dim,
                self.table.dim()
            )));
        }
        if checkpoint.dk != self.config.d_k {
            return Err(Error::Config(format!(
                "checkpoint attention dimension {} does not match configured {}",
                checkpoint.dk, self.config.d_k
            )));
        }
        ModelParams::from_checkpoint(checkpoint, self.config.scene.mask_perturb)
    }

    /// The prepared image trained on at one step.
    fn train_example(&self, params: &ModelParams, step: usize) -> Result<PreparedExample> {
        if let Some(manifest) = &self.manifest {
            let record = &manifest.records[step % manifest.records.len()];
            return prepare_from_record(record, &self.table, self.config.iou_floor);
        }
        let scene = generate_scene(
            &self.table,
            SceneMode::Train,
            derive_seed(self.config.seed, STREAM_TRAIN + step as u64),
            &self.config.scene,
        )?;
        prepare_from_scene(
            &scene,
            &self.table,
            &params.embed,
            self.config.n_proposals,
            self.config.iou_floor,
            step as u64,
        )
    }

    /// Every prepared image of the evaluation pass.
    fn eval_examples(&self, params: &ModelParams) -> Result<Vec<PreparedExample>> {
        if let Some(manifest) = &self.manifest {
            return manifest
                .records
                .iter()
                .map(|record| prepare_from_record(record, &self.table, self.config.iou_floor))
                .collect();
        }
        (0..self.config.eval_scenes)
            .map(|i| {
                let scene = generate_scene(
                    &self.table,
                    SceneMode::Eval,
                    derive_seed(self.config.seed, STREAM_EVAL + i as u64),
                    &self.config.scene,
                )?;
                prepare_from_scene(
                    &scene,
                    &self.table,
                    &params.embed,
                    self.config.n_proposals,
                    self.config.iou_floor,
                    i as u64,
                )
            })
            .collect()
    }
}

/// One image's training inputs, fixed before the gradient step.
#[derive(Debug, Clone)]
pub struct LossBatch<'a> {
    /// Pooled proposal features, one row per proposal.
    pub pooled: &'a Array2<f64>,
    /// Matched class index per proposal in table order (0 = background).
    pub labels: &'a [usize],
    /// Sampled unseen pseudo class per foreground proposal.
    pub pseudo_unseen: &'a [Option<usize>],
    /// Background slot scored by the seen classifier.
    pub background: &'a Array1<f64>,
}

impl LossBatch<'_> {
    fn validate(&self, table: &EmbeddingTable) -> Result<()> {
        let n = self.pooled.nrows();
        if self.pooled.ncols() != table.dim() || self.background.len() != table.dim() {
            return Err(Error::Shape(format!(
                "pooled features have {} channels, background {}, table expects {}",
                self.pooled.ncols(),
                self.background.len(),
                table.dim()
            )));
        }
        if self.labels.len() != n || self.pseudo_unseen.len() != n {
            return Err(Error::Shape(format!(
                "{} proposals but {} labels and {} pseudo labels",
                n,
                self.labels.len(),
                self.pseudo_unseen.len()
            )));
        }
        for (i, &label) in self.labels.iter().enumerate() {
            if label > table.n_seen() {
                return Err(Error::Format(format!(
                    "proposal {i} is labeled class {label}; training scenes may only \
                     contain background or seen classes"
                )));
            }
            if let Some(j) = self.pseudo_unseen[i] {
                if label == 0 {
                    return Err(Error::Format(format!(
                        "background proposal {i} carries a pseudo label"
                    )));
                }
                if j >= table.n_unseen() {
                    return Err(Error::Index {
                        index: j,
                        len: table.n_unseen(),
                    });
                }
            }
        }
        Ok(())
    }

    fn n_foreground(&self) -> usize {
        self.labels.iter().filter(|&&label| label > 0).count()
    }
}

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// Gradients of the total loss, mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed_w: Array2<f64>,
    pub embed_b: Array1<f64>,
    /// (w_q, w_k, w_v); present when the conditional head is on.
    pub attention: Option<(Array2<f64>, Array2<f64>, Array2<f64>)>,
    /// (w1, b1, w2, b2); present when the unseen loss is on.
    pub mlp: Option<(Array2<f64>, Array1<f64>, Array2<f64>, Array1<f64>)>,
}

struct Graph {
    tape: Tape,
    total: NodeId,
    seen: NodeId,
    unseen: Option<NodeId>,
    w_e: NodeId,
    b_e: NodeId,
    attention: Option<[NodeId; 3]>,
    mlp: Option<[NodeId; 4]>,
}

fn row_matrix(v: &Array1<f64>) -> Array2<f64> {
    v.view().insert_axis(Axis(0)).to_owned()
}

fn check_loss_knobs(tau: f64, lambda: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!(
            "loss weight must be non-negative and finite, got {lambda}"
        )));
    }
    Ok(())
}

/// Build the full loss graph for one image.
fn build_graph(
    params: &ModelParams,
    table: &EmbeddingTable,
    batch: &LossBatch<'_>,
    toggles: &Toggles,
    tau: f64,
    lambda: f64,
) -> Result<Graph> {
    check_loss_knobs(tau, lambda)?;
    batch.validate(table)?;
    if params.dim() != table.dim() {
        return Err(Error::Shape(format!(
            "parameters have dimension {}, table {}",
            params.dim(),
            table.dim()
        )));
    }

    let n = batch.pooled.nrows();
    let n_seen = table.n_seen();
    let mut tape = Tape::new();

    // Proposal embeddings: X = pooled . W_e^T + b_e, one row per proposal.
    let w_e = tape.leaf(params.embed.w.clone());
    let b_e = tape.leaf(row_matrix(&params.embed.b));
    let pooled = tape.leaf(batch.pooled.clone());
    let w_e_t = tape.transpose(w_e);
    let x_lin = tape.matmul(pooled, w_e_t);
    let x = tape.add_row(x_lin, b_e);

    // The background slot is constant with respect to the parameters whether
    // it is the static table embedding or the pooled per-image prototype.
    let bg_row = tape.leaf(row_matrix(batch.background));

    let (seen_protos, unseen_protos, attention) = if toggles.conditional_classifier {
        let w_q = tape.leaf(params.attention.w_q.clone());
        let w_k = tape.leaf(params.attention.w_k.clone());
        let w_v = tape.leaf(params.attention.w_v.clone());
        // Self-attention over the frozen class table is parameter-free, so
        // the enriched queries enter the graph as a constant.
        let enriched = tape.leaf(self_attend(table));
        let w_q_t = tape.transpose(w_q);
        let q = tape.matmul(enriched, w_q_t);
        let w_k_t = tape.transpose(w_k);
        let k = tape.matmul(x, w_k_t);
        let k_t = tape.transpose(k);
        let qk = tape.matmul(q, k_t);
        let scaled = tape.scale(qk, 1.0 / (params.attention.dk() as f64).sqrt());
        let weights = tape.row_softmax(scaled);
        let w_v_t = tape.transpose(w_v);
        let v = tape.matmul(x, w_v_t);
        let conditioned = tape.matmul(weights, v);
        // Row 0 conditions the background class; the classifier keeps the
        // static (or pooled) background slot instead, so it is dropped.
        let seen_block = tape.slice_rows(conditioned, 1, 1 + n_seen);
        let unseen_block = tape.slice_rows(conditioned, 1 + n_seen, table.n_classes());
        (seen_block, unseen_block, Some([w_q, w_k, w_v]))
    } else {
        let seen_block = tape.leaf(table.seen().to_owned());
        let unseen_block = tape.leaf(table.unseen().to_owned());
        (seen_block, unseen_block, None)
    };

    // Seen cross-entropy over every proposal, background slot included.
    let cls = tape.concat_rows(bg_row, seen_protos);
    let cls_t = tape.transpose(cls);
    let logits = tape.matmul(x, cls_t);
    let scaled = tape.scale(logits, 1.0 / tau);
    let probs = tape.row_softmax(scaled);
    let logp = tape.ln_floored(probs, LOG_FLOOR);
    let mut seen_weights = Array2::<f64>::zeros((n, 1 + n_seen));
    for (i, &label) in batch.labels.iter().enumerate() {
        seen_weights[(i, label)] = -1.0 / n as f64;
    }
    let seen_weighted = tape.mul_const(logp, seen_weights);
    let seen_loss = tape.sum(seen_weighted);

    // Unseen cross-entropy through the MLP pathway, averaged over foreground
    // proposals.  Background rows get an all-zero weight row, which both
    // drops them from the mean and spares the tape a gather over
    // non-contiguous rows.  With no foreground at all the weights vanish and
    // the term is exactly zero, gradients included.
    let (unseen, mlp) = if toggles.unseen_ce {
        let n_fg = batch.n_foreground();
        let w1 = tape.leaf(params.mlp.w1.clone());
        let b1 = tape.leaf(row_matrix(&params.mlp.b1));
        let w2 = tape.leaf(params.mlp.w2.clone());
        let b2 = tape.leaf(row_matrix(&params.mlp.b2));
        let w1_t = tape.transpose(w1);
        let h_lin = tape.matmul(x, w1_t);
        let h_aff = tape.add_row(h_lin, b1);
        let h = tape.relu(h_aff);
        let w2_t = tape.transpose(w2);
        let m_lin = tape.matmul(h, w2_t);
        let m = tape.add_row(m_lin, b2);
        let u_t = tape.transpose(unseen_protos);
        let u_logits = tape.matmul(m, u_t);
        let u_scaled = tape.scale(u_logits, 1.0 / tau);
        let u_probs = tape.row_softmax(u_scaled);
        let u_logp = tape.ln_floored(u_probs, LOG_FLOOR);
        let mut unseen_weights = Array2::<f64>::zeros((n, table.n_unseen()));
        for (i, pseudo) in batch.pseudo_unseen.iter().enumerate() {
            if batch.labels[i] == 0 {
                continue;
            }
            let Some(j) = pseudo else {
                return Err(Error::Format(format!(
                    "foreground proposal {i} has no pseudo label"
                )));
            };
            unseen_weights[(i, *j)] = -1.0 / n_fg as f64;
        }
        let u_weighted = tape.mul_const(u_logp, unseen_weights);
        let u_loss = tape.sum(u_weighted);
        (Some(u_loss), Some([w1, b1, w2, b2]))
    } else {
        (None, None)
    };

    let total = match unseen {
        Some(u_loss) => {
            let scaled = tape.scale(u_loss, lambda);
            tape.add(seen_loss, scaled)
        }
        None => seen_loss,
    };

    Ok(Graph {
        tape,
        total,
        seen: seen_loss,
        unseen,
        w_e,
        b_e,
        attention,
        mlp,
    })
}

/// Losses of one image under the given parameters.
pub fn compute_losses(
    params: &ModelParams,
    table: &EmbeddingTable,
    batch: &LossBatch<'_>,
    toggles: &Toggles,
    tau: f64,
    lambda: f64,
) -> Result<StepLosses> {
    let graph = build_graph(params, table, batch, toggles, tau, lambda)?;
    Ok(StepLosses {
        total: graph.tape.scalar(graph.total),
        seen: graph.tape.scalar(graph.seen),
        unseen: graph.unseen.map_or(0.0, |id| graph.tape.scalar(id)),
    })
}

/// Losses and parameter gradients of one image.
pub fn compute_gradients(
    params: &ModelParams,
    table: &EmbeddingTable,
    batch: &LossBatch<'_>,
    toggles: &Toggles,
    tau: f64,
    lambda: f64,
) -> Result<(StepLosses, Gradients)> {
    let graph = build_graph(params, table, batch, toggles, tau, lambda)?;
    let adjoints = graph.tape.backward(graph.total);
    let full = |id: NodeId| adjoints[id.index()].clone();
    let row = |id: NodeId| adjoints[id.index()].row(0).to_owned();
    let losses = StepLosses {
        total: graph.tape.scalar(graph.total),
        seen: graph.tape.scalar(graph.seen),
        unseen: graph.unseen.map_or(0.0, |id| graph.tape.scalar(id)),
    };
    let gradients = Gradients {
        embed_w: full(graph.w_e),
        embed_b: row(graph.b_e),
        attention: graph
            .attention
            .map(|[w_q, w_k, w_v]| (full(w_q), full(w_k), full(w_v))),
        mlp: graph
            .mlp
            .map(|[w1, b1, w2, b2]| (full(w1), row(b1), full(w2), row(b2))),
    };
    Ok((losses, gradients))
}

fn params_finite(params: &ModelParams) -> bool {
    let finite2 = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
    let finite1 = |v: &Array1<f64>| v.iter().all(|x| x.is_finite());
    finite2(&params.embed.w)
        && finite1(&params.embed.b)
        && finite2(&params.attention.w_q)
        && finite2(&params.attention.w_k)
        && finite2(&params.attention.w_v)
        && finite2(&params.mlp.w1)
        && finite1(&params.mlp.b1)
        && finite2(&params.mlp.w2)
        && finite1(&params.mlp.b2)
}

fn gradients_finite(gradients: &Gradients) -> bool {
    let finite2 = |m: &Array2<f64>| m.iter().all(|v| v.is_finite());
    let finite1 = |v: &Array1<f64>| v.iter().all(|x| x.is_finite());
    finite2(&gradients.embed_w)
        && finite1(&gradients.embed_b)
        && gradients
            .attention
            .as_ref()
            .is_none_or(|(q, k, v)| finite2(q) && finite2(k) && finite2(v))
        && gradients
            .mlp
            .as_ref()
            .is_none_or(|(w1, b1, w2, b2)| finite2(w1) && finite1(b1) && finite2(w2) && finite1(b2))
}

fn apply_gradients(params: &mut ModelParams, gradients: &Gradients, learning_rate: f64) {
    params.embed.w.scaled_add(-learning_rate, &gradients.embed_w);
    params.embed.b.scaled_add(-learning_rate, &gradients.embed_b);
    if let Some((g_q, g_k, g_v)) = &gradients.attention {
        params.attention.w_q.scaled_add(-learning_rate, g_q);
        params.attention.w_k.scaled_add(-learning_rate, g_k);
        params.attention.w_v.scaled_add(-learning_rate, g_v);
    }
    if let Some((g_w1, g_b1, g_w2, g_b2)) = &gradients.mlp {
        params.mlp.w1.scaled_add(-learning_rate, g_w1);
        params.mlp.b1.scaled_add(-learning_rate, g_b1);
        params.mlp.w2.scaled_add(-learning_rate, g_w2);
        params.mlp.b2.scaled_add(-learning_rate, g_b2);
    }
}

/// Central finite-difference audit of every active parameter gradient.
///
/// Nudges each entry of each trainable tensor by `step` in both directions,
/// recomputes the loss, and compares the slope against the analytic
/// gradient.  Returns the worst relative error found.  The comparison floors
/// the denominator at 1e-4: a central difference of the total loss carries
/// cancellation noise of roughly |L|·eps/step, so near-zero gradients cannot
/// be distinguished from that noise and would otherwise report spurious
/// disagreement.
pub fn finite_difference_worst_error(
    params: &ModelParams,
    table: &EmbeddingTable,
    batch: &LossBatch<'_>,
    toggles: &Toggles,
    tau: f64,
    lambda: f64,
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Parameter(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (_, gradients) = compute_gradients(params, table, batch, toggles, tau, lambda)?;

    // Tensor indices follow the checkpoint layout: 0 embed.w, 1 embed.b,
    // 2..5 attention, 5..9 MLP.
    let mut active: Vec<usize> = vec![0, 1];
    if toggles.conditional_classifier {
        active.extend([2, 3, 4]);
    }
    if toggles.unseen_ce {
        active.extend([5, 6, 7, 8]);
    }

    let entry_count = |t: usize| -> usize {
        match t {
            0 => params.embed.w.len(),
            1 => params.embed.b.len(),
            2 => params.attention.w_q.len(),
            3 => params.attention.w_k.len(),
            4 => params.attention.w_v.len(),
            5 => params.mlp.w1.len(),
            6 => params.mlp.b1.len(),
            7 => params.mlp.w2.len(),
            8 => params.mlp.b2.len(),
            _ => unreachable!(),
        }
    };
    let nudged = |t: usize, i: usize, delta: f64| -> ModelParams {
        let mut p = params.clone();
        let slot = match t {
            0 => &mut p.embed.w.as_slice_mut().expect("standard layout")[i],
            1 => &mut p.embed.b.as_slice_mut().expect("standard layout")[i],
            2 => &mut p.attention.w_q.as_slice_mut().expect("standard layout")[i],
            3 => &mut p.attention.w_k.as_slice_mut().expect("standard layout")[i],
            4 => &mut p.attention.w_v.as_slice_mut().expect("standard layout")[i],
            5 => &mut p.mlp.w1.as_slice_mut().expect("standard layout")[i],
            6 => &mut p.mlp.b1.as_slice_mut().expect("standard layout")[i],
            7 => &mut p.mlp.w2.as_slice_mut().expect("standard layout")[i],
            8 => &mut p.mlp.b2.as_slice_mut().expect("standard layout")[i],
            _ => unreachable!(),
        };
        *slot += delta;
        p
    };
    let analytic = |t: usize, i: usize| -> f64 {
        let attention = gradients.attention.as_ref();
        let mlp = gradients.mlp.as_ref();
        match t {
            0 => gradients.embed_w.as_slice().expect("standard layout")[i],
            1 => gradients.embed_b.as_slice().expect("standard layout")[i],
            2 => attention.expect("active").0.as_slice().expect("standard layout")[i],
            3 => attention.expect("active").1.as_slice().expect("standard layout")[i],
            4 => attention.expect("active").2.as_slice().expect("standard layout")[i],
            5 => mlp.expect("active").0.as_slice().expect("standard layout")[i],
            6 => mlp.expect("active").1.as_slice().expect("standard layout")[i],
            7 => mlp.expect("active").2.as_slice().expect("standard layout")[i],
            8 => mlp.expect("active").3.as_slice().expect("standard layout")[i],
            _ => unreachable!(),
        }
    };

    let mut worst = 0.0_f64;
    for &t in &active {
        for i in 0..entry_count(t) {
            let plus = compute_losses(&nudged(t, i, step), table, batch, toggles, tau, lambda)?;
            let minus = compute_losses(&nudged(t, i, -step), table, batch, toggles, tau, lambda)?;
            let slope = (plus.total - minus.total) / (2.0 * step);
            let grad = analytic(t, i);
            let rel = (slope - grad).abs() / slope.abs().max(grad.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Draws pseudo unseen labels for foreground proposals.
struct PseudoSampler {
    correlation: Option<CorrelationMatrix>,
    /// Per-seen-class label fixed for the whole run, when frozen.
    frozen: Option<Vec<usize>>,
}

impl PseudoSampler {
    fn new(config: &ExperimentConfig, table: &EmbeddingTable) -> Result<Self> {
        if !config.toggles.unseen_ce {
            return Ok(Self {
                correlation: None,
                frozen: None,
            });
        }
        let correlation = correlation_matrix(table, config.tau_corr)?
            .with_gumbel_on_log(config.toggles.gumbel_on_log);
        let frozen = if config.freeze_pseudo_labels {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PSEUDO));
            let labels = (0..table.n_seen())
                .map(|s| sample_pseudo_label(&correlation, s, &mut rng).map(|p| p.unseen_index()))
                .collect::<Result<Vec<_>>>()?;
            Some(labels)
        } else {
            None
        };
        Ok(Self {
            correlation: Some(correlation),
            frozen,
        })
    }

    /// One pseudo label per proposal; `None` on background rows.
    fn assign(&self, labels: &[usize], seed: u64, step: usize) -> Result<Vec<Option<usize>>> {
        let Some(correlation) = &self.correlation else {
            return Ok(vec![None; labels.len()]);
        };
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_PSEUDO + 1 + step as u64));
        labels
            .iter()
            .map(|&label| {
                if label == 0 {
                    return Ok(None);
                }
                match &self.frozen {
                    Some(frozen) => Ok(Some(frozen[label - 1])),
                    None => {
                        sample_pseudo_label(correlation, label - 1, &mut rng)
                            .map(|p| Some(p.unseen_index()))
                    }
                }
            })
            .collect()
    }
}

/// Artifacts of a training run.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub loss_log: PathBuf,
    /// Parameters after the last step.
    pub params: ModelParams,
    /// Step whose evaluated loss was lowest; `None` for zero-step runs.
    pub best_step: Option<usize>,
    pub losses: Vec<StepLosses>,
}

/// Train from scratch, writing checkpoints and the loss log into `out_dir`.
///
/// Each step prepares one scene (generated from the seed, or cycled from the
/// manifest), samples pseudo labels for its foreground proposals, and takes
/// one gradient-descent step on the total loss.  A non-finite loss or
/// gradient aborts the run with the last good parameters saved.
pub fn run_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainArtifacts> {
    let experiment = Experiment::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    let table = experiment.table();
    let mut params = experiment.init_params();
    let sampler = PseudoSampler::new(config, table)?;

    let mut log = String::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut last_good = params.clone();
    let mut best: Option<(usize, f64, ModelParams)> = None;

    for step in 0..config.steps {
        // A gradient step can overflow the parameters outright; catch that
        // here so the abort points at the last good state.
        if !params_finite(&params) {
            let checkpoint = out_dir.join(DIVERGED_CHECKPOINT_FILE);
            last_good
                .to_checkpoint(experiment.split().name())
                .save(&checkpoint)?;
            return Err(Error::Divergence { step, checkpoint });
        }
        let example = experiment.train_example(&params, step)?;
        if let Some(&bad) = example
            .gt_assignment
            .iter()
            .find(|&&label| label > table.n_seen())
        {
            return Err(Error::Format(format!(
                "step {step} scene matched a proposal to class {bad}; training \
                 scenes may only contain background or seen classes"
            )));
        }
        let pseudo = sampler.assign(&example.gt_assignment, config.seed, step)?;
        let background = if config.toggles.adaptive_background {
            example.background.vector.clone()
        } else {
            table.background().to_owned()
        };
        let batch = LossBatch {
            pooled: &example.pooled,
            labels: &example.gt_assignment,
            pseudo_unseen: &pseudo,
            background: &background,
        };
        let (step_losses, gradients) = compute_gradients(
            &params,
            table,
            &batch,
            &config.toggles,
            config.tau_cls,
            config.lambda,
        )?;
        if !step_losses.total.is_finite() || !gradients_finite(&gradients) {
            let checkpoint = out_dir.join(DIVERGED_CHECKPOINT_FILE);
            last_good
                .to_checkpoint(experiment.split().name())
                .save(&checkpoint)?;
            return Err(Error::Divergence { step, checkpoint });
        }
        log.push_str(&format!(
            "{step}\t{}\t{}\t{}\n",
            step_losses.total, step_losses.seen, step_losses.unseen
        ));
        losses.push(step_losses);
        if best
            .as_ref()
            .is_none_or(|(_, lowest, _)| step_losses.total < *lowest)
        {
            best = Some((step, step_losses.total, params.clone()));
        }
        last_good = params.clone();
        apply_gradients(&mut params, &gradients, config.learning_rate);
    }

    let loss_log = out_dir.join(LOSS_LOG_FILE);
    fs::write(&loss_log, &log)?;
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT_FILE);
    params
        .to_checkpoint(experiment.split().name())
        .save(&final_checkpoint)?;
    let (best_step, best_params) = match &best {
        Some((step, _, best_params)) => (Some(*step), best_params.clone()),
        None => (None, params.clone()),
    };
    let best_checkpoint = out_dir.join(BEST_CHECKPOINT_FILE);
    best_params
        .to_checkpoint(experiment.split().name())
        .save(&best_checkpoint)?;
    Ok(TrainArtifacts {
        final_checkpoint,
        best_checkpoint,
        loss_log,
        params,
        best_step,
        losses,
    })
}

/// Artifacts of an evaluation or re-scoring run.
#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub report: EvalReport,
    pub report_csv: PathBuf,
    pub report_markdown: PathBuf,
    pub predictions_file: PathBuf,
    pub ground_truth_file: PathBuf,
    pub predictions: Vec<InstancePrediction>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Evaluate trained parameters on the experiment's evaluation scenes.
///
/// The default mode scores background, seen, and unseen classes jointly and
/// drops proposals whose argmax is background; with the copy-paste toggle
/// each proposal instead emits its best seen and best unseen label.  With
/// `zsis` the classifier is restricted to unseen classes and ground truth is
/// filtered to unseen instances.
pub fn run_eval(
    params: &ModelParams,
    config: &ExperimentConfig,
    out_dir: &Path,
    zsis: bool,
) -> Result<EvalArtifacts> {
    let experiment = Experiment::new(config.clone())?;
    let table = experiment.table();
    if params.dim() != table.dim() {
        return Err(Error::Config(format!(
            "parameters have dimension {}, class table {}",
            params.dim(),
            table.dim()
        )));
    }
    if params.attention.dk() != config.d_k {
        return Err(Error::Config(format!(
            "parameters have attention dimension {}, config says {}",
            params.attention.dk(),
            config.d_k
        )));
    }

    let toggles = &config.toggles;
    let tau = config.tau_cls;
    let names = table.names();
    let unseen_names = table.unseen_names();
    let mut predictions = Vec::new();
    let mut ground_truth = Vec::new();

    for example in experiment.eval_examples(params)? {
        for (name, mask) in &example.instances {
            if zsis && !unseen_names.iter().any(|u| u == name) {
                continue;
            }
            ground_truth.push(GroundTruth {
                image_id: example.image_id,
                class_name: name.clone(),
                mask: mask.clone(),
            });
        }
        if example.proposal_masks.is_empty() {
            continue;
        }

        let mut embedded = Array2::<f64>::zeros((example.pooled.nrows(), table.dim()));
        for (i, pooled_row) in example.pooled.rows().into_iter().enumerate() {
            embedded.row_mut(i).assign(&params.embed.embed(pooled_row));
        }
        let batch = ProposalEmbeddingBatch::new(embedded)?;
        let mut prototypes = if toggles.conditional_classifier {
            condition_prototypes(table, &batch, &params.attention)?
        } else {
            raw_prototypes(table)
        };
        if toggles.adaptive_background {
            prototypes = prototypes.with_background(example.background.vector.clone())?;
        }
        let mlp = toggles.unseen_ce.then_some(&params.mlp);

        if zsis {
            for (i, mask) in example.proposal_masks.iter().enumerate() {
                let scores = match mlp {
                    Some(mlp) => classify_unseen(batch.row(i), &prototypes, mlp, tau)?,
                    None => classify_unseen_direct(batch.row(i), &prototypes, tau)?,
                };
                let j = scores.argmax();
                predictions.push(InstancePrediction::new(
                    example.image_id,
                    &unseen_names[j],
                    scores.values()[j],
                    mask.clone(),
                )?);
            }
        } else if toggles.copy_paste {
            let mut scored = Vec::with_capacity(example.proposal_masks.len());
            for (i, mask) in example.proposal_masks.iter().enumerate() {
                let seen_scores = classify_seen(batch.row(i), &prototypes, tau)?;
                let unseen_scores = match mlp {
                    Some(mlp) => classify_unseen(batch.row(i), &prototypes, mlp, tau)?,
                    None => classify_unseen_direct(batch.row(i), &prototypes, tau)?,
                };
                scored.push(ScoredInstance {
                    image_id: example.image_id,
                    mask: mask.clone(),
                    seen_scores: seen_scores.values().to_vec(),
                    unseen_scores: unseen_scores.values().to_vec(),
                });
            }
            predictions.extend(copy_paste_expand(
                &scored,
                table.seen_names(),
                unseen_names,
            )?);
        } else {
            for (i, mask) in example.proposal_masks.iter().enumerate() {
                let scores = classify_joint(batch.row(i), &prototypes, mlp, tau)?;
                let k = scores.argmax();
                if k == 0 {
                    continue;
                }
                predictions.push(InstancePrediction::new(
                    example.image_id,
                    &names[k],
                    scores.values()[k],
                    mask.clone(),
                )?);
            }
        }
    }

    score_and_write(&experiment, predictions, ground_truth, out_dir, zsis)
}

/// Re-score interchange files offline against the configured split.
pub fn run_metrics(
    config: &ExperimentConfig,
    predictions_path: &Path,
    ground_truth_path: &Path,
    out_dir: &Path,
    zsis: bool,
) -> Result<EvalArtifacts> {
    let experiment = Experiment::new(config.clone())?;
    let predictions = read_predictions(predictions_path)?;
    let ground_truth = read_ground_truth(ground_truth_path)?;
    score_and_write(&experiment, predictions, ground_truth, out_dir, zsis)
}

/// Write the experiment's class embedding table into `out_dir`.
pub fn run_embed(config: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    let experiment = Experiment::new(config.clone())?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("embeddings.txt");
    fs::write(&path, experiment.table().to_file_string())?;
    Ok(path)
}

fn score_and_write(
    experiment: &Experiment,
    predictions: Vec<InstancePrediction>,
    ground_truth: Vec<GroundTruth>,
    out_dir: &Path,
    zsis: bool,
) -> Result<EvalArtifacts> {
    fs::create_dir_all(out_dir)?;
    let table = experiment.table();
    let seen_names: &[String] = if zsis { &[] } else { table.seen_names() };
    let classes: Vec<String> = seen_names
        .iter()
        .chain(table.unseen_names())
        .cloned()
        .collect();
    let metrics = evaluate_detections(
        &predictions,
        &ground_truth,
        &classes,
        &RECALL_THRESHOLDS,
        TOP_K,
    )?;
    let report = build_report(&metrics, seen_names, table.unseen_names())?;

    let report_csv = out_dir.join(REPORT_CSV_FILE);
    fs::write(&report_csv, report.to_csv()?)?;
    let report_markdown = out_dir.join(REPORT_MARKDOWN_FILE);
    fs::write(&report_markdown, report.to_markdown()?)?;
    let predictions_file = out_dir.join(PREDICTIONS_FILE);
    write_predictions(&predictions_file, &predictions)?;
    let ground_truth_file = out_dir.join(GROUND_TRUTH_FILE);
    write_ground_truth(&ground_truth_file, &ground_truth)?;
    Ok(EvalArtifacts {
        report,
        report_csv,
        report_markdown,
        predictions_file,
        ground_truth_file,
        predictions,
        ground_truth,
    })
}

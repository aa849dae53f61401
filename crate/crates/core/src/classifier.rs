//! Input-conditional classification head.
//!
//! A fixed semantic embedding can sit far from what a class actually looks
//! like in a given image, and during training the seen classes can bend a
//! projection of that space toward themselves.  This head fights both
//! problems by rebuilding the class prototypes per image: self-attention
//! first mixes the class embeddings with each other, then cross-attention
//! lets every class query the image's own proposal embeddings, producing
//! image-specific prototypes.  Seen scoring compares proposal embeddings
//! against the background slot plus the seen prototypes; unseen scoring runs
//! the proposal through a small MLP trained purely on pseudo labels, keeping
//! the two decisions decoupled.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::semantic::EmbeddingTable;

/// Projection matrices for the cross-attention block.
///
/// Queries and keys project into a d_k-dimensional matching space; values
/// stay in the d-dimensional embedding space so the attended rows can serve
/// directly as classifier prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// d_k x d
    pub w_q: Array2<f64>,
    /// d_k x d
    pub w_k: Array2<f64>,
    /// d x d
    pub w_v: Array2<f64>,
}

impl AttentionParams {
    /// Seeded uniform init on [-1/sqrt(d), 1/sqrt(d)].
    pub fn init<R: Rng + ?Sized>(dim: usize, dk: usize, rng: &mut R) -> Self {
        Self {
            w_q: uniform_matrix(dk, dim, rng),
            w_k: uniform_matrix(dk, dim, rng),
            w_v: uniform_matrix(dim, dim, rng),
        }
    }

    pub fn dk(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn dim(&self) -> usize {
        self.w_q.ncols()
    }

    fn validate(&self) -> Result<()> {
        let (dk, d) = (self.dk(), self.dim());
        for (name, m, rows) in [
            ("w_q", &self.w_q, dk),
            ("w_k", &self.w_k, dk),
            ("w_v", &self.w_v, d),
        ] {
            if m.dim() != (rows, d) {
                return Err(Error::Shape(format!(
                    "{name} is {:?}, expected ({rows}, {d})",
                    m.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Two-layer ReLU MLP mapping proposal embeddings into the unseen scoring
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MlpParams {
    /// Seeded uniform init with hidden width equal to the input dimension.
    pub fn init<R: Rng + ?Sized>(dim: usize, dk: usize, rng: &mut R) -> Self {
        Self {
            w1: uniform_matrix(dim, dim, rng),
            b1: Array1::zeros(dim),
            w2: uniform_matrix(dk, dim, rng),
            b2: Array1::zeros(dk),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    /// MLP(x) = w2 . relu(w1 . x + b1) + b2
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} dims, MLP expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        let hidden = (self.w1.dot(&x) + &self.b1).mapv(|v| v.max(0.0));
        Ok(self.w2.dot(&hidden) + &self.b2)
    }
}

fn uniform_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (cols as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 * bound - bound)
}

/// One image's proposal embeddings, N^p x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalEmbeddingBatch {
    embeddings: Array2<f64>,
}

impl ProposalEmbeddingBatch {
    pub fn new(embeddings: Array2<f64>) -> Result<Self> {
        if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
            return Err(Error::Shape(
                "proposal batch needs at least one row and one column".into(),
            ));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("proposal embeddings must be finite".into()));
        }
        Ok(Self { embeddings })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn row(&self, n: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(n)
    }
}

/// Per-image class prototypes: seen block, unseen block, and the background
/// slot (static embedding unless replaced by a pooled prototype).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedPrototypes {
    pub seen: Array2<f64>,
    pub unseen: Array2<f64>,
    pub background: Array1<f64>,
}

impl ConditionedPrototypes {
    pub fn n_seen(&self) -> usize {
        self.seen.nrows()
    }

    pub fn n_unseen(&self) -> usize {
        self.unseen.nrows()
    }

    /// Replace the background slot, keeping dimensions consistent.
    pub fn with_background(mut self, background: Array1<f64>) -> Result<Self> {
        if background.len() != self.background.len() {
            return Err(Error::Shape(format!(
                "background slot has {} dims, expected {}",
                background.len(),
                self.background.len()
            )));
        }
        self.background = background;
        Ok(self)
    }
}

fn stable_softmax(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

fn row_softmax_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let slice = row.as_slice_mut().expect("row-major layout");
        stable_softmax(slice);
    }
}

/// Self-attention over the full class table (queries = keys = values).
///
/// Parameter-free: it only mixes correlated class embeddings into each other
/// so that later cross-attention queries carry neighborhood context.
pub fn self_attend(table: &EmbeddingTable) -> Array2<f64> {
    let a = table.all();
    let scale = 1.0 / (table.dim() as f64).sqrt();
    let mut weights = a.dot(&a.t()) * scale;
    row_softmax_inplace(&mut weights);
    weights.dot(&a)
}

/// Cross-attention weights, one row per class, one column per proposal.
pub fn cross_attention_weights(
    enriched: &Array2<f64>,
    batch: &ProposalEmbeddingBatch,
    params: &AttentionParams,
) -> Result<Array2<f64>> {
    params.validate()?;
    if enriched.ncols() != params.dim() || batch.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "attention over dim {} given classes dim {} and proposals dim {}",
            params.dim(),
            enriched.ncols(),
            batch.dim()
        )));
    }
    let q = enriched.dot(&params.w_q.t());
    let k = batch.matrix().dot(&params.w_k.t());
    let scale = 1.0 / (params.dk() as f64).sqrt();
    let mut weights = q.dot(&k.t()) * scale;
    row_softmax_inplace(&mut weights);
    Ok(weights)
}

/// Build per-image prototypes from the class table and one proposal batch.
///
/// Self-attention over the full table produces enriched class queries; those
/// attend over projected proposal embeddings, and the output rows become the
/// seen/unseen prototype blocks.  The background slot starts as the static
/// background embedding.
pub fn condition_prototypes(
    table: &EmbeddingTable,
    batch: &ProposalEmbeddingBatch,
    params: &AttentionParams,
) -> Result<ConditionedPrototypes> {
    let enriched = self_attend(table);
    let weights = cross_attention_weights(&enriched, batch, params)?;
    let v = batch.matrix().dot(&params.w_v.t());
    let conditioned = weights.dot(&v);
    let n_seen = table.n_seen();
    Ok(ConditionedPrototypes {
        seen: conditioned.slice(ndarray::s![1..=n_seen, ..]).to_owned(),
        unseen: conditioned.slice(ndarray::s![1 + n_seen.., ..]).to_owned(),
        background: table.background().to_owned(),
    })
}

/// Prototypes straight from the table, for runs without the conditional head.
pub fn raw_prototypes(table: &EmbeddingTable) -> ConditionedPrototypes {
    ConditionedPrototypes {
        seen: table.seen().to_owned(),
        unseen: table.unseen().to_owned(),
        background: table.background().to_owned(),
    }
}

/// A probability distribution over classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the highest score (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate() {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.0[self.argmax()]
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(())
}

/// Seen-plus-background scores for one proposal embedding.
///
/// Index 0 is background; index i >= 1 is the i-th seen class.  The proposal
/// embedding is compared directly against the prototypes, without the
/// unseen-path MLP.
pub fn classify_seen(
    x: ArrayView1<'_, f64>,
    protos: &ConditionedPrototypes,
    tau: f64,
) -> Result<ScoreVector> {
    check_tau(tau)?;
    if x.len() != protos.background.len() || x.len() != protos.seen.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs background {} / seen prototypes {}",
            x.len(),
            protos.background.len(),
            protos.seen.ncols()
        )));
    }
    let mut logits = Vec::with_capacity(1 + protos.n_seen());
    logits.push(x.dot(&protos.background) / tau);
    for row in protos.seen.rows() {
        logits.push(x.dot(&row) / tau);
    }
    stable_softmax(&mut logits);
    Ok(ScoreVector(logits))
}

/// Unseen-class scores for one proposal embedding.
///
/// The embedding passes through the MLP before the dot products, so unseen
/// scoring has its own trainable pathway and no background slot.
pub fn classify_unseen(
    x: ArrayView1<'_, f64>,
    protos: &ConditionedPrototypes,
    mlp: &MlpParams,
    tau: f64,
) -> Result<ScoreVector> {
    check_tau(tau)?;
    if protos.n_unseen() == 0 {
        return Err(Error::Shape("no unseen prototypes to score against".into()));
    }
    let projected = mlp.forward(x)?;
    if projected.len() != protos.unseen.ncols() {
        return Err(Error::Shape(format!(
            "MLP output dim {} vs unseen prototypes {}",
            projected.len(),
            protos.unseen.ncols()
        )));
    }
    let mut logits: Vec<f64> = protos
        .unseen
        .rows()
        .into_iter()
        .map(|row| projected.dot(&row) / tau)
        .collect();
    stable_softmax(&mut logits);
    Ok(ScoreVector(logits))
}

/// Unseen-class scores without the MLP pathway.
///
/// Runs that train no unseen objective have no trained MLP; they score the
/// unseen prototypes directly against the embedding, exactly like the seen
/// path but without a background slot.
pub fn classify_unseen_direct(
    x: ArrayView1<'_, f64>,
    protos: &ConditionedPrototypes,
    tau: f64,
) -> Result<ScoreVector> {
    check_tau(tau)?;
    if protos.n_unseen() == 0 {
        return Err(Error::Shape("no unseen prototypes to score against".into()));
    }
    if x.len() != protos.unseen.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs unseen prototypes {}",
            x.len(),
            protos.unseen.ncols()
        )));
    }
    let mut logits: Vec<f64> = protos
        .unseen
        .rows()
        .into_iter()
        .map(|row| x.dot(&row) / tau)
        .collect();
    stable_softmax(&mut logits);
    Ok(ScoreVector(logits))
}

/// Joint background + seen + unseen scores in canonical class order.
///
/// One softmax over all logits: background and seen come from the direct
/// pathway, unseen from the MLP pathway when `mlp` is given.
pub fn classify_joint(
    x: ArrayView1<'_, f64>,
    protos: &ConditionedPrototypes,
    mlp: Option<&MlpParams>,
    tau: f64,
) -> Result<ScoreVector> {
    check_tau(tau)?;
    if x.len() != protos.background.len() || x.len() != protos.seen.ncols() {
        return Err(Error::Shape("embedding dim vs prototypes".into()));
    }
    let mut logits = Vec::with_capacity(1 + protos.n_seen() + protos.n_unseen());
    logits.push(x.dot(&protos.background) / tau);
    for row in protos.seen.rows() {
        logits.push(x.dot(&row) / tau);
    }
    let unseen_input = match mlp {
        Some(mlp) => mlp.forward(x)?,
        None => x.to_owned(),
    };
    if unseen_input.len() != protos.unseen.ncols() {
        return Err(Error::Shape("unseen pathway dim vs prototypes".into()));
    }
    for row in protos.unseen.rows() {
        logits.push(unseen_input.dot(&row) / tau);
    }
    stable_softmax(&mut logits);
    Ok(ScoreVector(logits))
}

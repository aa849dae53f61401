//! Class embedding tables and the seen-to-unseen semantic bridge.
//!
//! The table stores one unit vector per class in a fixed canonical order:
//! background at row 0, then the seen classes, then the unseen classes, each
//! group in split order.  On top of it sit the inter-class correlation matrix
//! (a temperature softmax over seen/unseen cosine similarities) and the
//! Gumbel-perturbed argmax that converts a seen ground-truth label into a
//! one-hot pseudo label over the unseen classes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Which group a table row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Background,
    Seen,
    Unseen,
}

/// Class names that define a table layout: one background name plus disjoint
/// seen/unseen lists.
#[derive(Debug, Clone)]
pub struct GroupSpec {
    pub background: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

impl GroupSpec {
    pub fn new(background: &str, seen: &[&str], unseen: &[&str]) -> Self {
        Self {
            background: background.to_string(),
            seen: seen.iter().map(|s| s.to_string()).collect(),
            unseen: unseen.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = vec![&self.background];
        names.extend(self.seen.iter().map(String::as_str));
        names.extend(self.unseen.iter().map(String::as_str));
        let mut sorted = names.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Format("duplicate class name in group spec".into()));
        }
        Ok(())
    }
}

/// L2-normalized class embeddings in canonical row order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    names: Vec<String>,
    vectors: Array2<f64>,
    n_seen: usize,
    n_unseen: usize,
}

impl EmbeddingTable {
    /// Build a table from raw per-class vectors, normalizing each row.
    ///
    /// `rows` must follow the canonical order: background, seen, unseen.
    pub fn from_rows(
        names: Vec<String>,
        rows: Vec<Vec<f64>>,
        n_seen: usize,
        n_unseen: usize,
    ) -> Result<Self> {
        if names.len() != rows.len() || names.len() != 1 + n_seen + n_unseen {
            return Err(Error::Shape(format!(
                "{} names / {} rows for 1+{n_seen}+{n_unseen} classes",
                names.len(),
                rows.len()
            )));
        }
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        let mut vectors = Array2::zeros((rows.len(), dim));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Shape(format!(
                    "class `{}` has dimension {} instead of {dim}",
                    names[i],
                    row.len()
                )));
            }
            let normalized = normalize(row, &names[i])?;
            for (j, v) in normalized.iter().enumerate() {
                vectors[(i, j)] = *v;
            }
        }
        let mut sorted: Vec<&String> = names.iter().collect();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Format("duplicate class name in table".into()));
        }
        Ok(Self {
            names,
            vectors,
            n_seen,
            n_unseen,
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    pub fn n_unseen(&self) -> usize {
        self.n_unseen
    }

    /// Total number of rows including the background slot.
    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn group_of(&self, index: usize) -> Group {
        if index == 0 {
            Group::Background
        } else if index <= self.n_seen {
            Group::Seen
        } else {
            Group::Unseen
        }
    }

    /// Canonical row index for a class name.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn vector(&self, index: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(index)
    }

    pub fn background(&self) -> ArrayView1<'_, f64> {
        self.vectors.row(0)
    }

    /// Seen rows, shape n_seen x dim.
    pub fn seen(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![1..=self.n_seen, ..])
    }

    /// Unseen rows, shape n_unseen x dim.
    pub fn unseen(&self) -> ArrayView2<'_, f64> {
        self.vectors.slice(ndarray::s![1 + self.n_seen.., ..])
    }

    /// All rows including background, shape (1 + n_seen + n_unseen) x dim.
    pub fn all(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    /// Seen-class names in row order.
    pub fn seen_names(&self) -> &[String] {
        &self.names[1..=self.n_seen]
    }

    /// Unseen-class names in row order.
    pub fn unseen_names(&self) -> &[String] {
        &self.names[1 + self.n_seen..]
    }

    /// Serialize in the embedding-file layout understood by
    /// [`load_embedding_table`].
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#dim {}", self.dim());
        for (name, row) in self.names.iter().zip(self.vectors.rows()) {
            let values: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            let _ = writeln!(out, "{name}\t{}", values.join(" "));
        }
        out
    }
}

fn normalize(row: &[f64], name: &str) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("class `{name}` has non-finite values")));
    }
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-10 {
        return Err(Error::DegenerateVector(format!(
            "class `{name}` has near-zero norm {norm:e}"
        )));
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

/// Parse an embedding file and assemble the classes named by `spec` into a
/// canonical table.
///
/// The file starts with a `#dim <d>` header; every following non-empty line is
/// `class_name<TAB>v1 v2 ... vd`.  Classes the spec does not mention are
/// ignored, so one dump can serve many splits.
pub fn load_embedding_table(path: &Path, spec: &GroupSpec) -> Result<EmbeddingTable> {
    let text = std::fs::read_to_string(path)?;
    parse_embedding_table(&text, spec)
}

/// [`load_embedding_table`] over in-memory text.
pub fn parse_embedding_table(text: &str, spec: &GroupSpec) -> Result<EmbeddingTable> {
    spec.validate()?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format("empty embedding file".into()))?;
    let dim: usize = header
        .strip_prefix("#dim ")
        .and_then(|d| d.trim().parse().ok())
        .ok_or_else(|| Error::Format(format!("expected `#dim <d>` header, got `{header}`")))?;
    if dim == 0 {
        return Err(Error::Format("embedding dimension must be positive".into()));
    }

    let mut by_name: HashMap<String, Vec<f64>> = HashMap::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("line {}: expected `name<TAB>values`", lineno + 1))
        })?;
        let values: Vec<f64> = rest
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>().map_err(|_| {
                    Error::Format(format!("line {}: `{v}` is not a number", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::Format(format!(
                "line {}: class `{name}` has {} values, header says {dim}",
                lineno + 1,
                values.len()
            )));
        }
        if by_name.insert(name.to_string(), values).is_some() {
            return Err(Error::Format(format!(
                "line {}: class `{name}` appears twice",
                lineno + 1
            )));
        }
    }

    let mut names = Vec::new();
    let mut rows = Vec::new();
    let ordered = std::iter::once(&spec.background)
        .chain(spec.seen.iter())
        .chain(spec.unseen.iter());
    for name in ordered {
        let row = by_name
            .get(name)
            .ok_or_else(|| Error::MissingClass(name.clone()))?;
        names.push(name.clone());
        rows.push(row.clone());
    }
    EmbeddingTable::from_rows(names, rows, spec.seen.len(), spec.unseen.len())
}

/// Average template vectors for one class and renormalize.
///
/// This is how multiple text prompts ("a photo of a {}", "a toy {}", ...) for
/// the same class collapse into a single class embedding.
pub fn prompt_ensemble(templates: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = templates.first().ok_or(Error::EmptyEnsemble)?;
    let dim = first.len();
    if dim == 0 {
        return Err(Error::Shape("template dimension must be positive".into()));
    }
    let mut mean = vec![0.0; dim];
    for t in templates {
        if t.len() != dim {
            return Err(Error::Shape(format!(
                "template dimensions differ: {} vs {dim}",
                t.len()
            )));
        }
        for (m, v) in mean.iter_mut().zip(t) {
            *m += v / templates.len() as f64;
        }
    }
    normalize(&mean, "prompt ensemble mean")
}

/// Row-stochastic seen-to-unseen correlation.
///
/// Row i holds a temperature softmax over the cosine similarities between
/// seen class i and every unseen class; sharper temperatures concentrate the
/// row on the semantically nearest unseen classes.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    values: Array2<f64>,
    gumbel_on_log: bool,
}

impl CorrelationMatrix {
    pub fn n_seen(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_unseen(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, seen_index: usize) -> Result<ArrayView1<'_, f64>> {
        if seen_index >= self.values.nrows() {
            return Err(Error::Index {
                index: seen_index,
                len: self.values.nrows(),
            });
        }
        Ok(self.values.row(seen_index))
    }

    /// Perturb log-correlations instead of raw correlations when sampling.
    ///
    /// With noise on the logs, the Gumbel argmax reproduces each row exactly
    /// as its sampling distribution; with noise on the raw values (the
    /// default), the sampling distribution is a softmax of the row.
    pub fn with_gumbel_on_log(mut self, on_log: bool) -> Self {
        self.gumbel_on_log = on_log;
        self
    }

    pub fn gumbel_on_log(&self) -> bool {
        self.gumbel_on_log
    }
}

/// Build the correlation matrix at temperature `tau`.
pub fn correlation_matrix(table: &EmbeddingTable, tau: f64) -> Result<CorrelationMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(format!(
            "correlation temperature must be positive and finite, got {tau}"
        )));
    }
    if table.n_seen() == 0 || table.n_unseen() == 0 {
        return Err(Error::Parameter(
            "correlation needs at least one seen and one unseen class".into(),
        ));
    }
    // Rows are unit vectors, so the dot product is the cosine.
    let sims = table.seen().dot(&table.unseen().t());
    let mut values = sims / tau;
    for mut row in values.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(CorrelationMatrix {
        values,
        gumbel_on_log: false,
    })
}

/// One-hot pseudo label over the unseen classes for one seen ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabel {
    pub seen_index: usize,
    onehot: Vec<u8>,
}

impl PseudoLabel {
    pub fn onehot(&self) -> &[u8] {
        &self.onehot
    }

    /// Index of the selected unseen class.
    pub fn unseen_index(&self) -> usize {
        self.onehot
            .iter()
            .position(|&v| v == 1)
            .expect("pseudo label is one-hot by construction")
    }
}

/// Draw a pseudo label for seen class `seen_index` by adding Gumbel(0,1)
/// noise to its correlation row and taking the argmax.
///
/// Fresh noise is drawn on every call, so repeated calls on the same row
/// explore all unseen classes at row-dependent rates.
pub fn sample_pseudo_label<R: Rng + ?Sized>(
    corr: &CorrelationMatrix,
    seen_index: usize,
    rng: &mut R,
) -> Result<PseudoLabel> {
    let row = corr.row(seen_index)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel parameters are valid");
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (j, &e) in row.iter().enumerate() {
        let base = if corr.gumbel_on_log() { e.ln() } else { e };
        let score = base + gumbel.sample(rng);
        if score > best_score {
            best_score = score;
            best = j;
        }
    }
    let mut onehot = vec![0u8; row.len()];
    onehot[best] = 1;
    Ok(PseudoLabel { seen_index, onehot })
}

/// Expected sampling distribution of [`sample_pseudo_label`] for one row.
///
/// Gumbel noise added to values v_j makes argmax j win with probability
/// softmax(v)_j; applied to raw correlations that is softmax(e_i), applied to
/// log correlations it is the row itself.
pub fn pseudo_label_distribution(corr: &CorrelationMatrix, seen_index: usize) -> Result<Array1<f64>> {
    let row = corr.row(seen_index)?;
    if corr.gumbel_on_log() {
        return Ok(row.to_owned());
    }
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = row.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    Ok(exp / sum)
}

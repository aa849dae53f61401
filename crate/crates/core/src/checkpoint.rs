//! Plain-text model checkpoints with exact float roundtrips.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::classifier::{AttentionParams, MlpParams};
use crate::error::{Error, Result};
use crate::pipeline::ProposalParams;

/// First line of every checkpoint file.
pub const FORMAT_TAG: &str = "d2zero-ckpt-v1";

const TENSOR_NAMES: [&str; 9] = [
    "embed.w", "embed.b", "attn.w_q", "attn.w_k", "attn.w_v", "mlp.w1", "mlp.b1", "mlp.w2",
    "mlp.b2",
];

/// Named tensors plus the metadata needed to rebuild a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub split: String,
    pub dim: usize,
    pub dk: usize,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))
    }

    /// Render the text format: a tag line, meta lines, then per tensor a
    /// header line and one row-major line of values.
    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{FORMAT_TAG}\nsplit {}\ndim {}\ndk {}\n",
            self.split, self.dim, self.dk
        );
        for (name, tensor) in &self.tensors {
            out.push_str(&format!(
                "tensor {name} {} {}\n",
                tensor.nrows(),
                tensor.ncols()
            ));
            let values: Vec<String> = tensor.iter().map(|v| v.to_string()).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let tag = lines.next().unwrap_or_default();
        if tag != FORMAT_TAG {
            return Err(Error::Format(format!(
                "expected checkpoint tag `{FORMAT_TAG}`, found `{tag}`"
            )));
        }
        let mut meta = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing `{key}` line")))?;
            line.strip_prefix(&format!("{key} "))
                .map(str::to_string)
                .ok_or_else(|| Error::Format(format!("expected `{key} ...`, found `{line}`")))
        };
        let split = meta("split")?;
        let dim: usize = meta("dim")?
            .parse()
            .map_err(|_| Error::Format("dim must be an integer".into()))?;
        let dk: usize = meta("dk")?
            .parse()
            .map_err(|_| Error::Format("dk must be an integer".into()))?;

        let mut tensors = BTreeMap::new();
        while let Some(header) = lines.next() {
            if header.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = header.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "tensor" {
                return Err(Error::Format(format!(
                    "expected `tensor <name> <rows> <cols>`, found `{header}`"
                )));
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad row count for `{name}`")))?;
            let cols: usize = parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("bad column count for `{name}`")))?;
            let data_line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing values for `{name}`")))?;
            let mut values = Vec::with_capacity(rows * cols);
            for token in data_line.split_whitespace() {
                let v: f64 = token
                    .parse()
                    .map_err(|_| Error::Format(format!("bad value `{token}` in `{name}`")))?;
                if !v.is_finite() {
                    return Err(Error::Format(format!("non-finite value in `{name}`")));
                }
                values.push(v);
            }
            if values.len() != rows * cols {
                return Err(Error::Format(format!(
                    "`{name}` has {} values for shape {rows}x{cols}",
                    values.len()
                )));
            }
            let tensor = Array2::from_shape_vec((rows, cols), values)
                .map_err(|e| Error::Format(e.to_string()))?;
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(Error::Format(format!("tensor `{name}` appears twice")));
            }
        }
        for name in TENSOR_NAMES {
            if !tensors.contains_key(name) {
                return Err(Error::Format(format!("checkpoint is missing tensor `{name}`")));
            }
        }
        if tensors.len() != TENSOR_NAMES.len() {
            let extra = tensors
                .keys()
                .find(|k| !TENSOR_NAMES.contains(&k.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self {
            split,
            dim,
            dk,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

/// All trainable parameters of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embed: ProposalParams,
    pub attention: AttentionParams,
    pub mlp: MlpParams,
}

impl ModelParams {
    /// Seeded initialization; the MLP keeps its output in embedding space.
    pub fn init<R: Rng + ?Sized>(dim: usize, dk: usize, mask_perturb: f64, rng: &mut R) -> Self {
        Self {
            embed: ProposalParams::init(dim, mask_perturb, rng),
            attention: AttentionParams::init(dim, dk, rng),
            mlp: MlpParams::init(dim, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.embed.dim()
    }

    pub fn to_checkpoint(&self, split: &str) -> Checkpoint {
        let row = |v: &Array1<f64>| {
            Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row vector")
        };
        let mut tensors = BTreeMap::new();
        tensors.insert("embed.w".to_string(), self.embed.w.clone());
        tensors.insert("embed.b".to_string(), row(&self.embed.b));
        tensors.insert("attn.w_q".to_string(), self.attention.w_q.clone());
        tensors.insert("attn.w_k".to_string(), self.attention.w_k.clone());
        tensors.insert("attn.w_v".to_string(), self.attention.w_v.clone());
        tensors.insert("mlp.w1".to_string(), self.mlp.w1.clone());
        tensors.insert("mlp.b1".to_string(), row(&self.mlp.b1));
        tensors.insert("mlp.w2".to_string(), self.mlp.w2.clone());
        tensors.insert("mlp.b2".to_string(), row(&self.mlp.b2));
        Checkpoint {
            split: split.to_string(),
            dim: self.dim(),
            dk: self.attention.dk(),
            tensors,
        }
    }

    /// Rebuild parameters from a checkpoint, validating every shape.
    pub fn from_checkpoint(checkpoint: &Checkpoint, mask_perturb: f64) -> Result<Self> {
        let (d, dk) = (checkpoint.dim, checkpoint.dk);
        let matrix = |name: &str, rows: usize, cols: usize| -> Result<Array2<f64>> {
            let t = checkpoint.tensor(name)?;
            if t.dim() != (rows, cols) {
                return Err(Error::Config(format!(
                    "tensor `{name}` is {:?}, expected ({rows}, {cols})",
                    t.dim()
                )));
            }
            Ok(t.clone())
        };
        let vector = |name: &str, len: usize| -> Result<Array1<f64>> {
            let t = matrix(name, 1, len)?;
            Ok(t.row(0).to_owned())
        };
        Ok(Self {
            embed: ProposalParams {
                w: matrix("embed.w", d, d)?,
                b: vector("embed.b", d)?,
                mask_perturb,
            },
            attention: AttentionParams {
                w_q: matrix("attn.w_q", dk, d)?,
                w_k: matrix("attn.w_k", dk, d)?,
                w_v: matrix("attn.w_v", d, d)?,
            },
            mlp: MlpParams {
                w1: matrix("mlp.w1", d, d)?,
                b1: vector("mlp.b1", d)?,
                w2: matrix("mlp.w2", d, d)?,
                b2: vector("mlp.b2", d)?,
            },
        })
    }
}

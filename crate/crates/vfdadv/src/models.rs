//! Layer-tapped classifier architectures.
//!
//! A [`TappedModel`] is an ordered list of named blocks; any block output can
//! be requested as a feature tap during the forward pass, which is how the
//! distillation losses read intermediate activations. Three desk-scale
//! architectures are provided: `mlp-small` (two hidden layers), `cnn-small`
//! (two conv blocks plus a classifier head) and `cnn-mid` (four conv blocks
//! plus a head, giving a four-deep tap ladder for layer ablations).

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::derive_rng;
use crate::tensor::{ops, ParameterSet, Tensor};

/// Architecture family identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ArchId {
    MlpSmall,
    CnnSmall,
    CnnMid,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::MlpSmall => "mlp-small",
            ArchId::CnnSmall => "cnn-small",
            ArchId::CnnMid => "cnn-mid",
        }
    }

    /// Number of feature blocks before the classifier head.
    pub fn block_count(&self) -> usize {
        match self {
            ArchId::MlpSmall => 2,
            ArchId::CnnSmall => 2,
            ArchId::CnnMid => 4,
        }
    }

    pub fn default_widths(&self) -> Vec<usize> {
        match self {
            ArchId::MlpSmall => vec![64, 64],
            ArchId::CnnSmall => vec![8, 16],
            ArchId::CnnMid => vec![8, 16, 32, 32],
        }
    }

    pub fn is_convolutional(&self) -> bool {
        !matches!(self, ArchId::MlpSmall)
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-small" => Ok(ArchId::MlpSmall),
            "cnn-small" => Ok(ArchId::CnnSmall),
            "cnn-mid" => Ok(ArchId::CnnMid),
            other => Err(Error::Config(format!("unknown architecture id {other:?}"))),
        }
    }
}

/// Declarative model recipe; expands deterministically to a block list.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ArchDescriptor {
    pub arch: ArchId,
    /// Per-example shape: `[channels, height, width]` for conv architectures;
    /// any shape (flattened internally) for the MLP.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Hidden width (MLP) or channel count (CNN) per feature block.
    pub block_widths: Vec<usize>,
}

impl ArchDescriptor {
    /// Descriptor with the architecture's default widths.
    pub fn new(arch: ArchId, input_shape: Vec<usize>, num_classes: usize) -> Self {
        ArchDescriptor {
            arch,
            input_shape,
            num_classes,
            block_widths: arch.default_widths(),
        }
    }

    pub fn with_widths(mut self, widths: Vec<usize>) -> Self {
        self.block_widths = widths;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.block_widths.len() != self.arch.block_count() {
            return Err(Error::Config(format!(
                "{} expects {} block widths, got {}",
                self.arch,
                self.arch.block_count(),
                self.block_widths.len()
            )));
        }
        if self.block_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("block widths must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "input shape {:?} must be non-empty with positive dims",
                self.input_shape
            )));
        }
        if self.arch.is_convolutional() && self.input_shape.len() != 3 {
            return Err(Error::Config(format!(
                "{} expects input shape [channels, height, width], got {:?}",
                self.arch, self.input_shape
            )));
        }
        Ok(())
    }
}

enum BlockKind {
    /// matmul + bias + relu.
    Dense { in_dim: usize, out_dim: usize },
    /// 3x3 conv (stride 1, pad 1) + optional 2x2 max pool + relu.
    Conv {
        cin: usize,
        cout: usize,
        pool: bool,
        out_hw: (usize, usize),
    },
    /// flatten + matmul + bias; produces the logits.
    Head { in_dim: usize, out_dim: usize },
}

struct Block {
    name: String,
    kind: BlockKind,
}

impl Block {
    /// Flattened per-example size of this block's output.
    fn out_dim(&self) -> usize {
        match &self.kind {
            BlockKind::Dense { out_dim, .. } => *out_dim,
            BlockKind::Conv { cout, out_hw, .. } => cout * out_hw.0 * out_hw.1,
            BlockKind::Head { out_dim, .. } => *out_dim,
        }
    }
}

fn expand_blocks(desc: &ArchDescriptor) -> Vec<Block> {
    let mut blocks = Vec::new();
    if desc.arch.is_convolutional() {
        let (mut c, mut h, mut w) = (
            desc.input_shape[0],
            desc.input_shape[1],
            desc.input_shape[2],
        );
        for (i, &cout) in desc.block_widths.iter().enumerate() {
            let pool = h >= 2 && w >= 2;
            let out_hw = if pool {
                ((h - 2) / 2 + 1, (w - 2) / 2 + 1)
            } else {
                (h, w)
            };
            blocks.push(Block {
                name: format!("block{}", i + 1),
                kind: BlockKind::Conv {
                    cin: c,
                    cout,
                    pool,
                    out_hw,
                },
            });
            c = cout;
            (h, w) = out_hw;
        }
        blocks.push(Block {
            name: "logits".into(),
            kind: BlockKind::Head {
                in_dim: c * h * w,
                out_dim: desc.num_classes,
            },
        });
    } else {
        let mut dim: usize = desc.input_shape.iter().product();
        for (i, &width) in desc.block_widths.iter().enumerate() {
            blocks.push(Block {
                name: format!("block{}", i + 1),
                kind: BlockKind::Dense {
                    in_dim: dim,
                    out_dim: width,
                },
            });
            dim = width;
        }
        blocks.push(Block {
            name: "logits".into(),
            kind: BlockKind::Head {
                in_dim: dim,
                out_dim: desc.num_classes,
            },
        });
    }
    blocks
}

/// Block outputs captured during a tapped forward pass.
pub struct FeatureMap<S: Scalar> {
    entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> fmt::Debug for FeatureMap<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_map()
            .entries(self.entries.iter().map(|(n, t)| (n, t.shape())))
            .finish()
    }
}

impl<S: Scalar> FeatureMap<S> {
    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Classifier whose intermediate block outputs are observable by name.
pub struct TappedModel<S: Scalar> {
    desc: ArchDescriptor,
    seed: u64,
    blocks: Vec<Block>,
    params: ParameterSet<S>,
}

/// Builds a model with seeded He fan-in initialization; identical
/// `(descriptor, seed)` pairs produce bit-identical parameters.
pub fn build<S: Scalar>(desc: &ArchDescriptor, seed: u64) -> Result<TappedModel<S>> {
    desc.validate()?;
    let blocks = expand_blocks(desc);
    let mut params = ParameterSet::new();
    let mut rng = derive_rng(seed, &format!("init/{}", desc.arch));
    for block in &blocks {
        let (w_shape, fan_in, b_len) = match &block.kind {
            BlockKind::Dense { in_dim, out_dim } | BlockKind::Head { in_dim, out_dim } => {
                (vec![*in_dim, *out_dim], *in_dim, *out_dim)
            }
            BlockKind::Conv { cin, cout, .. } => {
                (vec![*cout, *cin, 3, 3], cin * 9, *cout)
            }
        };
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
            .expect("positive std deviation");
        let numel: usize = w_shape.iter().product();
        let weight: Vec<S> = (0..numel)
            .map(|_| S::from_f64(normal.sample(&mut rng)))
            .collect();
        params.insert(
            format!("{}.weight", block.name),
            Tensor::param(weight, w_shape)?,
        )?;
        params.insert(
            format!("{}.bias", block.name),
            Tensor::param(vec![S::zero(); b_len], vec![b_len])?,
        )?;
    }
    Ok(TappedModel {
        desc: desc.clone(),
        seed,
        blocks,
        params,
    })
}

impl<S: Scalar> TappedModel<S> {
    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_classes(&self) -> usize {
        self.desc.num_classes
    }

    pub fn params(&self) -> &ParameterSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet<S> {
        &mut self.params
    }

    /// Permanently stop gradient flow into this model's parameters.
    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Block names usable as feature taps, in forward order. The final entry
    /// is always `"logits"`.
    pub fn tap_names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| b.name.clone()).collect()
    }

    pub fn has_tap(&self, name: &str) -> bool {
        self.blocks.iter().any(|b| b.name == name)
    }

    /// Flattened per-example dimension of the named tap's output.
    pub fn tap_dim(&self, name: &str) -> Result<usize> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .map(Block::out_dim)
            .ok_or_else(|| Error::Config(format!("unknown tap {name:?}")))
    }

    fn param_pair(&self, block: &str) -> (&Tensor<S>, &Tensor<S>) {
        let w = self
            .params
            .get(&format!("{block}.weight"))
            .expect("weight registered at build");
        let b = self
            .params
            .get(&format!("{block}.bias"))
            .expect("bias registered at build");
        (w, b)
    }

    /// Forward pass capturing the requested block outputs.
    ///
    /// Tap capture is observationally pure: the logits are the same tensors
    /// the untapped forward would produce.
    pub fn forward_tapped(&self, x: &Tensor<S>, taps: &[&str]) -> Result<(Tensor<S>, FeatureMap<S>)> {
        for tap in taps {
            if !self.has_tap(tap) {
                return Err(Error::Config(format!(
                    "unknown tap {tap:?}; available taps: {:?}",
                    self.tap_names()
                )));
            }
        }
        let batch = x.shape()[0];
        let mut features = Vec::new();
        let mut cur = x.clone();
        if self.desc.arch.is_convolutional() {
            let want = &self.desc.input_shape;
            if x.shape().len() != 4 || x.shape()[1..] != want[..] {
                return Err(Error::ShapeMismatch {
                    op: "forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![batch, want[0], want[1], want[2]],
                });
            }
        }
        for block in &self.blocks {
            let (w, b) = self.param_pair(&block.name);
            cur = match &block.kind {
                BlockKind::Dense { in_dim, .. } => {
                    let flat = if cur.shape().len() > 2 {
                        ops::flatten(&cur)?
                    } else {
                        cur
                    };
                    if flat.shape()[1] != *in_dim {
                        return Err(Error::ShapeMismatch {
                            op: "forward",
                            lhs: flat.shape().to_vec(),
                            rhs: vec![batch, *in_dim],
                        });
                    }
                    ops::relu(&ops::add_bias(&ops::matmul(&flat, w)?, b)?)
                }
                BlockKind::Conv { pool, .. } => {
                    let conv = ops::conv2d(&cur, w, b, 1, 1)?;
                    let pooled = if *pool {
                        ops::max_pool2d(&conv, 2, 2)?
                    } else {
                        conv
                    };
                    ops::relu(&pooled)
                }
                BlockKind::Head { in_dim, .. } => {
                    let flat = if cur.shape().len() > 2 {
                        ops::flatten(&cur)?
                    } else {
                        cur
                    };
                    if flat.shape()[1] != *in_dim {
                        return Err(Error::ShapeMismatch {
                            op: "forward",
                            lhs: flat.shape().to_vec(),
                            rhs: vec![batch, *in_dim],
                        });
                    }
                    ops::add_bias(&ops::matmul(&flat, w)?, b)?
                }
            };
            if taps.contains(&block.name.as_str()) {
                features.push((block.name.clone(), cur.clone()));
            }
        }
        Ok((cur, FeatureMap { entries: features }))
    }

    /// Forward pass without tap capture.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        Ok(self.forward_tapped(x, &[])?.0)
    }
}

/// Row-wise argmax of a `[batch, classes]` logits tensor; ties go to the
/// lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let shape = logits.shape();
    assert_eq!(shape.len(), 2, "argmax_rows expects [batch, classes]");
    let (rows, cols) = (shape[0], shape[1]);
    let data = logits.data();
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for j in 1..cols {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

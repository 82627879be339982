//! Versioned JSON model files.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so a
//! loaded model predicts bitwise like the saved one, and save, load, save
//! produces identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::booster::{Algorithm, Model, Round, TrainConfig};
use crate::error::{Error, Result};
use crate::numerics::ClassLabel;
use crate::pair::ClassPair;
use crate::tree::{LeafTarget, TreeNode, VectorTree};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    header: Header,
    rounds: Vec<RoundRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    algorithm: Algorithm,
    num_classes: usize,
    num_features: usize,
    shrinkage: f64,
    max_leaves: usize,
    /// Raw label of each class, in class order.
    label_values: Vec<i64>,
    config: TrainConfig,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundRecord {
    base_class: Option<ClassLabel>,
    trees: Vec<Vec<NodeRecord>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum NodeKind {
    Split,
    Leaf,
}

/// One node. Single-class targets leave `pair_s` empty.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    kind: NodeKind,
    feature: Option<usize>,
    threshold: Option<f64>,
    left: Option<usize>,
    right: Option<usize>,
    pair_r: u32,
    pair_s: Option<u32>,
    /// Leaf value, or the split gain for split nodes.
    value: f64,
}

fn node_record(node: &TreeNode) -> NodeRecord {
    let target = match node {
        TreeNode::Internal { target, .. } | TreeNode::Leaf { target, .. } => *target,
    };
    let (pair_r, pair_s) = match target {
        LeafTarget::Pair(p) => (p.r().get(), Some(p.s().get())),
        LeafTarget::Class(c) => (c.get(), None),
    };
    match *node {
        TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            gain,
            ..
        } => NodeRecord {
            kind: NodeKind::Split,
            feature: Some(feature),
            threshold: Some(threshold),
            left: Some(left),
            right: Some(right),
            pair_r,
            pair_s,
            value: gain,
        },
        TreeNode::Leaf { value, .. } => NodeRecord {
            kind: NodeKind::Leaf,
            feature: None,
            threshold: None,
            left: None,
            right: None,
            pair_r,
            pair_s,
            value,
        },
    }
}

fn tree_node(rec: &NodeRecord, num_classes: usize) -> Result<TreeNode> {
    let class = |c: u32| ClassLabel::new(c, num_classes).map_err(|e| Error::ModelFormat(e.to_string()));
    let target = match rec.pair_s {
        Some(s) => LeafTarget::Pair(
            ClassPair::new(class(rec.pair_r)?, class(s)?).map_err(|e| Error::ModelFormat(e.to_string()))?,
        ),
        None => LeafTarget::Class(class(rec.pair_r)?),
    };
    match (rec.kind, rec.feature, rec.threshold, rec.left, rec.right) {
        (NodeKind::Split, Some(feature), Some(threshold), Some(left), Some(right)) => Ok(TreeNode::Internal {
            feature,
            threshold,
            left,
            right,
            target,
            gain: rec.value,
        }),
        (NodeKind::Leaf, None, None, None, None) => Ok(TreeNode::Leaf {
            target,
            value: rec.value,
        }),
        (kind, ..) => Err(Error::ModelFormat(format!("{kind:?} node has the wrong fields"))),
    }
}

/// Serialize `model` as a pretty-printed JSON document.
pub fn to_json(model: &Model) -> Result<String> {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        header: Header {
            algorithm: model.algorithm(),
            num_classes: model.num_classes(),
            num_features: model.num_features(),
            shrinkage: model.shrinkage(),
            max_leaves: model.config().max_leaves,
            label_values: model.label_values().to_vec(),
            config: model.config().clone(),
        },
        rounds: model
            .rounds()
            .iter()
            .map(|r| RoundRecord {
                base_class: r.base_class,
                trees: r
                    .trees
                    .iter()
                    .map(|t| t.nodes().iter().map(node_record).collect())
                    .collect(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::ModelFormat(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn from_json(text: &str) -> Result<Model> {
    // Check the version before the full schema so old or future files get a clear message.
    let probe: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::ModelFormat(e.to_string()))?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => {
            return Err(Error::ModelFormat(format!(
                "unsupported format_version {v}, expected {FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::ModelFormat("missing format_version".into())),
    }
    let file: ModelFile = serde_json::from_value(probe).map_err(|e| Error::ModelFormat(e.to_string()))?;
    let h = &file.header;
    if h.algorithm != h.config.algorithm || h.shrinkage != h.config.shrinkage || h.max_leaves != h.config.max_leaves {
        return Err(Error::ModelFormat("header disagrees with its config".into()));
    }
    let mut rounds = Vec::with_capacity(file.rounds.len());
    for rec in &file.rounds {
        let trees = rec
            .trees
            .iter()
            .map(|nodes| {
                let nodes = nodes
                    .iter()
                    .map(|n| tree_node(n, h.num_classes))
                    .collect::<Result<Vec<_>>>()?;
                VectorTree::from_nodes(nodes, h.num_classes, h.num_features)
            })
            .collect::<Result<Vec<_>>>()?;
        rounds.push(Round {
            base_class: rec.base_class,
            trees,
        });
    }
    let Header {
        num_classes,
        num_features,
        label_values,
        config,
        ..
    } = file.header;
    Model::from_parts(config, num_classes, num_features, label_values, rounds).map_err(|e| match e {
        Error::ModelFormat(_) => e,
        other => Error::ModelFormat(other.to_string()),
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_json(&fs::read_to_string(path)?)
}

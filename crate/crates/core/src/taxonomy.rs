//! Label hierarchy and graded label-pair similarity.
//!
//! Each label is a leaf. Two different labels score `0` when they sit under
//! different roots, `k` when they share the root but not the depth-1 ancestor
//! ("first child"), and `2k` when they share both. A label scores `1` with
//! itself.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::LabelId;

#[derive(Debug, thiserror::Error)]
pub enum TaxonomyError {
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("duplicate node name {0:?}")]
    DuplicateNode(String),
    #[error("leaf {0:?} is not a known label")]
    UnknownLeaf(String),
    #[error("taxonomy leaves do not match labels: missing {missing:?}, unexpected {unexpected:?}")]
    LeafMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },
    #[error("label {0:?} is not a leaf of this taxonomy")]
    UnknownLabel(String),
    #[error("k must lie strictly between 0 and 0.5, got {0}")]
    BadK(f64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaxonomyNode {
    pub name: String,
    #[serde(default)]
    pub children: Vec<TaxonomyNode>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TaxonomyFile {
    Forest(Vec<TaxonomyNode>),
    Tree(TaxonomyNode),
}

#[derive(Debug, Clone)]
pub struct Taxonomy {
    pub roots: Vec<TaxonomyNode>,
    /// Node names from root to leaf for every label.
    pub leaf_paths: BTreeMap<LabelId, Vec<String>>,
}

impl Taxonomy {
    /// Validates a forest against the expected label set.
    pub fn new(roots: Vec<TaxonomyNode>, labels: &[LabelId]) -> Result<Self, TaxonomyError> {
        let mut names = HashSet::new();
        let mut leaves: Vec<Vec<String>> = Vec::new();
        let mut stack: Vec<(&TaxonomyNode, Vec<String>)> =
            roots.iter().rev().map(|r| (r, Vec::new())).collect();
        while let Some((node, mut path)) = stack.pop() {
            if !names.insert(node.name.as_str()) {
                return Err(TaxonomyError::DuplicateNode(node.name.clone()));
            }
            path.push(node.name.clone());
            if node.children.is_empty() {
                leaves.push(path);
            } else {
                for child in node.children.iter().rev() {
                    stack.push((child, path.clone()));
                }
            }
        }

        let wanted: BTreeSet<&str> = labels.iter().map(|l| l.name()).collect();
        let found: BTreeSet<&str> = leaves.iter().map(|p| p.last().unwrap().as_str()).collect();
        let missing: Vec<String> = wanted.difference(&found).map(|s| s.to_string()).collect();
        let unexpected: Vec<String> = found.difference(&wanted).map(|s| s.to_string()).collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(TaxonomyError::LeafMismatch {
                missing,
                unexpected,
            });
        }

        let leaf_paths = leaves
            .into_iter()
            .map(|p| {
                let label = LabelId::from_name(p.last().unwrap())
                    .ok_or_else(|| TaxonomyError::UnknownLeaf(p.last().unwrap().clone()))?;
                Ok((label, p))
            })
            .collect::<Result<_, TaxonomyError>>()?;
        Ok(Taxonomy { roots, leaf_paths })
    }

    pub fn parse(text: &str, labels: &[LabelId]) -> Result<Self, TaxonomyError> {
        let file: TaxonomyFile = serde_json::from_str(text).map_err(|e| TaxonomyError::File {
            path: "<inline>".into(),
            message: e.to_string(),
        })?;
        let roots = match file {
            TaxonomyFile::Forest(roots) => roots,
            TaxonomyFile::Tree(root) => vec![root],
        };
        Self::new(roots, labels)
    }

    pub fn load(path: &Path, labels: &[LabelId]) -> Result<Self, TaxonomyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TaxonomyError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, labels).map_err(|e| match e {
            TaxonomyError::File { message, .. } => TaxonomyError::File {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    /// Best-effort hierarchy over all 17 labels shipped with the crate.
    pub fn bundled() -> Self {
        let labels: Vec<LabelId> = LabelId::all().collect();
        Self::parse(include_str!("../data/taxonomy.json"), &labels)
            .expect("bundled taxonomy is valid")
    }

    pub fn labels(&self) -> impl Iterator<Item = LabelId> + '_ {
        self.leaf_paths.keys().copied()
    }

    fn path(&self, label: LabelId) -> Result<&[String], TaxonomyError> {
        self.leaf_paths
            .get(&label)
            .map(Vec::as_slice)
            .ok_or_else(|| TaxonomyError::UnknownLabel(label.name().to_string()))
    }

    /// Root name and depth-1 ancestor; a label hanging directly off a root
    /// (or being a root) is its own first child.
    pub fn root_and_first_child(&self, label: LabelId) -> Result<(&str, &str), TaxonomyError> {
        let path = self.path(label)?;
        let root = path[0].as_str();
        let first = path.get(1).unwrap_or(&path[0]).as_str();
        Ok((root, first))
    }

    pub fn pair_score(&self, a: LabelId, b: LabelId, k: f64) -> Result<f64, TaxonomyError> {
        check_k(k)?;
        let (root_a, first_a) = self.root_and_first_child(a)?;
        let (root_b, first_b) = self.root_and_first_child(b)?;
        Ok(if a == b {
            1.0
        } else if root_a != root_b {
            0.0
        } else if first_a == first_b {
            2.0 * k
        } else {
            k
        })
    }
}

pub fn check_k(k: f64) -> Result<(), TaxonomyError> {
    if k > 0.0 && k < 0.5 {
        Ok(())
    } else {
        Err(TaxonomyError::BadK(k))
    }
}

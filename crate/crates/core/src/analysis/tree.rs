//! Binary decision tree over job-level statistics.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::rules::Comparator;
use super::{AnalysisError, SchemaMetric};

/// Statistic kinds produced per schema metric; names look like `mem_bw.mean`.
pub const STAT_KINDS: [&str; 3] = ["mean", "max", "imbalance"];

pub fn stat_name(metric: SchemaMetric, kind: &str) -> String {
    format!("{}.{kind}", metric.name())
}

/// The schema metric a statistic name refers to, if the name is well formed.
pub fn stat_metric(name: &str) -> Option<SchemaMetric> {
    let (metric, kind) = name.split_once('.')?;
    if !STAT_KINDS.contains(&kind) {
        return None;
    }
    metric.parse().ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Leaf {
        leaf: String,
    },
    Branch {
        statistic: String,
        comparator: Comparator,
        threshold: f64,
        /// Taken when `statistic <comparator> threshold` holds.
        then: Box<TreeNode>,
        #[serde(rename = "else")]
        otherwise: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DecisionTree {
    root: TreeNode,
}

/// One predicate evaluated on the way to a leaf.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub statistic: String,
    pub value: f64,
    pub held: bool,
}

impl DecisionTree {
    pub fn new(root: TreeNode) -> Result<Self, AnalysisError> {
        let tree = DecisionTree { root };
        tree.validate()?;
        Ok(tree)
    }

    pub fn root(&self) -> &TreeNode {
        &self.root
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        fn walk(node: &TreeNode) -> Result<(), AnalysisError> {
            match node {
                TreeNode::Leaf { leaf } if leaf.is_empty() => {
                    Err(AnalysisError::InvalidTree("empty leaf label".into()))
                }
                TreeNode::Leaf { .. } => Ok(()),
                TreeNode::Branch {
                    statistic,
                    threshold,
                    then,
                    otherwise,
                    ..
                } => {
                    if stat_metric(statistic).is_none() {
                        return Err(AnalysisError::InvalidTree(format!(
                            "unknown statistic {statistic:?}"
                        )));
                    }
                    if !threshold.is_finite() {
                        return Err(AnalysisError::InvalidTree(format!(
                            "non-finite threshold on {statistic}"
                        )));
                    }
                    walk(then)?;
                    walk(otherwise)
                }
            }
        }
        walk(&self.root)
    }

    /// Every statistic some predicate reads.
    pub fn statistics(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            if let TreeNode::Branch {
                statistic,
                then,
                otherwise,
                ..
            } = node
            {
                out.insert(statistic.clone());
                stack.push(then);
                stack.push(otherwise);
            }
        }
        out
    }

    pub fn required_metrics(&self) -> BTreeSet<SchemaMetric> {
        self.statistics()
            .iter()
            .filter_map(|s| stat_metric(s))
            .collect()
    }

    pub fn leaves(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            match node {
                TreeNode::Leaf { leaf } => {
                    out.insert(leaf.clone());
                }
                TreeNode::Branch {
                    then, otherwise, ..
                } => {
                    stack.push(then);
                    stack.push(otherwise);
                }
            }
        }
        out
    }

    pub fn classify(&self, stats: &BTreeMap<String, f64>) -> Result<String, AnalysisError> {
        self.trace(stats).map(|(label, _)| label)
    }

    /// Leaf label plus the predicates evaluated to reach it.
    pub fn trace(
        &self,
        stats: &BTreeMap<String, f64>,
    ) -> Result<(String, Vec<Decision>), AnalysisError> {
        let mut path = Vec::new();
        let mut node = &self.root;
        loop {
            match node {
                TreeNode::Leaf { leaf } => return Ok((leaf.clone(), path)),
                TreeNode::Branch {
                    statistic,
                    comparator,
                    threshold,
                    then,
                    otherwise,
                } => {
                    let value = *stats
                        .get(statistic)
                        .ok_or_else(|| AnalysisError::MissingStatistic(statistic.clone()))?;
                    let held = comparator.holds(value, *threshold);
                    path.push(Decision {
                        statistic: statistic.clone(),
                        value,
                        held,
                    });
                    node = if held { then } else { otherwise };
                }
            }
        }
    }
}

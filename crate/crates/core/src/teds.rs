//! Tree-edit-distance similarity (TEDS) between table structures, and
//! corpus-level aggregation into Simple / Complex / All columns.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grammar::{classify, parse_tree, NodeKind, TableClass, TableNode, TableTree, TokenSeq};
use crate::ted::{PostorderTree, ZhangShasha};

pub type NodeLabel = (NodeKind, u8, u8);

pub fn postorder(tree: &TableTree) -> PostorderTree<NodeLabel> {
    let mut parents = Vec::with_capacity(tree.size());
    let mut labels = Vec::with_capacity(tree.size());
    fn walk(n: &TableNode, parent: usize, parents: &mut Vec<usize>, labels: &mut Vec<NodeLabel>) {
        let me = parents.len();
        parents.push(parent);
        labels.push(n.label());
        for c in &n.children {
            walk(c, me, parents, labels);
        }
    }
    walk(&tree.root, 0, &mut parents, &mut labels);
    PostorderTree::from_preorder_parents(&parents, labels)
}

/// Unit-cost ordered tree edit distance; a relabel costs 1 when kind or spans differ.
pub fn tree_edit_distance(a: &TableTree, b: &TableTree) -> f64 {
    ZhangShasha::new().distance(&postorder(a), &postorder(b)) as f64
}

/// `max(0, 1 − d / max(|pred|, |gt|))`; a prediction that does not parse scores 0.
pub fn teds(pred: &TokenSeq, gt: &TokenSeq) -> Result<f64> {
    let gt_tree = parse_tree(gt).map_err(|e| Error::InvalidGroundTruth(e.to_string()))?;
    Ok(match parse_tree(pred) {
        Ok(pred_tree) => teds_trees(&pred_tree, &gt_tree),
        Err(_) => 0.0,
    })
}

pub fn teds_trees(pred: &TableTree, gt: &TableTree) -> f64 {
    let d = tree_edit_distance(pred, gt);
    let denom = pred.size().max(gt.size()) as f64;
    (1.0 - d / denom).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: f64,
    pub class: TableClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TedsReport {
    pub samples: Vec<SampleScore>,
    /// Percentages rounded to two decimals; `None` when the class is absent.
    pub mean_simple: Option<f64>,
    pub mean_complex: Option<f64>,
    pub mean_all: f64,
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub id: String,
    pub pred: TokenSeq,
    pub gt: TokenSeq,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, pred: TokenSeq, gt: TokenSeq) -> Self {
        Self { id: id.into(), pred, gt }
    }
}

fn percent(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    Some((mean * 10000.0).round() / 100.0)
}

/// Scores every pair and aggregates by the ground-truth class.
pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<TedsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut zs = ZhangShasha::new();
    let mut samples = Vec::with_capacity(pairs.len());
    for p in pairs {
        let gt = parse_tree(&p.gt)
            .map_err(|e| Error::InvalidGroundTruth(format!("sample {}: {e}", p.id)))?;
        let score = match parse_tree(&p.pred) {
            Ok(pred) => {
                let d = zs.distance(&postorder(&pred), &postorder(&gt)) as f64;
                (1.0 - d / pred.size().max(gt.size()) as f64).max(0.0)
            }
            Err(_) => 0.0,
        };
        samples.push(SampleScore { id: p.id.clone(), score, class: classify(&gt) });
    }
    Ok(aggregate(samples))
}

/// Builds a report from per-sample scores, independent of their order.
pub fn aggregate(mut samples: Vec<SampleScore>) -> TedsReport {
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    let of = |c: TableClass| samples.iter().filter(|s| s.class == c).map(|s| s.score).collect::<Vec<_>>();
    let all: Vec<f64> = samples.iter().map(|s| s.score).collect();
    TedsReport {
        mean_simple: percent(&of(TableClass::Simple)),
        mean_complex: percent(&of(TableClass::Complex)),
        mean_all: percent(&all).unwrap_or(0.0),
        samples,
    }
}

/// Aligned text table with one row per named report.
pub fn format_table(rows: &[(&str, &TedsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "Model", "Simple", "Complex", "All");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            name,
            cell(r.mean_simple),
            cell(r.mean_complex),
            cell(Some(r.mean_all))
        );
    }
    out
}

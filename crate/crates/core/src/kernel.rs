//! Subset-tree, sequence and linear similarity kernels over regimens.
//!
//! The subset-tree kernel sums a decayed match score over every pair of
//! nodes of two trees. A pair scores zero when either node is terminal or
//! when their children label multisets differ; otherwise it scores
//! `eta * prod_s (1 + score(child_a[s], child_b[s]))` with children paired
//! after canonical sorting.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regimen::{
    build_regimen_tree, build_sequence_tree, DrugDictionary, Regimen, RegimenHistory, RegimenTree,
    TreeNode,
};

/// How children are compared when deciding whether two nodes match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Children label multisets must be equal.
    #[default]
    Strict,
    /// Pre-terminal nodes (class nodes) match on their own label alone,
    /// ignoring the drug leaves below them.
    ClassRelaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub eta: f64,
    #[serde(default)]
    pub match_mode: MatchMode,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            eta: 0.5,
            match_mode: MatchMode::Strict,
        }
    }
}

impl KernelConfig {
    pub fn new(eta: f64, match_mode: MatchMode) -> Result<Self> {
        let cfg = Self { eta, match_mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidKernelConfig(format!(
                "eta must lie in (0,1], got {}",
                self.eta
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FlatNode {
    children: Vec<u32>,
    production: Option<String>,
}

/// A tree flattened into an arena with canonically sorted children and a
/// production key per non-terminal node. Reusable across many kernel
/// evaluations.
#[derive(Debug, Clone)]
pub struct PreparedTree {
    nodes: Vec<FlatNode>,
    by_production: BTreeMap<String, Vec<u32>>,
    mode: MatchMode,
}

impl PreparedTree {
    pub fn new(tree: &RegimenTree, mode: MatchMode) -> Self {
        let canonical = tree.root.canonicalized();
        let mut nodes = Vec::with_capacity(canonical.node_count());
        flatten(&canonical, mode, &mut nodes);
        let mut by_production: BTreeMap<String, Vec<u32>> = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = &n.production {
                by_production.entry(p.clone()).or_default().push(i as u32);
            }
        }
        Self {
            nodes,
            by_production,
            mode,
        }
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

fn flatten(node: &TreeNode, mode: MatchMode, out: &mut Vec<FlatNode>) -> u32 {
    let id = out.len();
    out.push(FlatNode {
        children: Vec::new(),
        production: production_key(node, mode),
    });
    let children = node
        .children
        .iter()
        .map(|c| flatten(c, mode, out))
        .collect();
    out[id].children = children;
    id as u32
}

fn production_key(node: &TreeNode, mode: MatchMode) -> Option<String> {
    if node.is_leaf() {
        return None;
    }
    let pre_terminal = node.children.iter().all(TreeNode::is_leaf);
    let mut key = node.label.clone();
    if mode == MatchMode::ClassRelaxed && pre_terminal {
        key.push_str(&format!("/*{}", node.children.len()));
    } else {
        key.push('/');
        for (i, c) in node.children.iter().enumerate() {
            if i > 0 {
                key.push(',');
            }
            key.push_str(&c.label);
        }
    }
    Some(key)
}

fn pair_score(
    a: &PreparedTree,
    b: &PreparedTree,
    x: u32,
    y: u32,
    eta: f64,
    memo: &mut HashMap<(u32, u32), f64>,
) -> f64 {
    if let Some(&v) = memo.get(&(x, y)) {
        return v;
    }
    let na = &a.nodes[x as usize];
    let nb = &b.nodes[y as usize];
    let v = match (&na.production, &nb.production) {
        (Some(pa), Some(pb)) if pa == pb => {
            let mut prod = eta;
            for (&cx, &cy) in na.children.iter().zip(&nb.children) {
                prod *= 1.0 + pair_score(a, b, cx, cy, eta, memo);
            }
            prod
        }
        _ => 0.0,
    };
    memo.insert((x, y), v);
    v
}

/// Subset-tree kernel between two prepared trees.
pub fn prepared_kernel(a: &PreparedTree, b: &PreparedTree, eta: f64) -> f64 {
    debug_assert_eq!(a.mode, b.mode, "trees prepared under different match modes");
    let mut memo = HashMap::new();
    let mut total = 0.0;
    for (key, xs) in &a.by_production {
        if let Some(ys) = b.by_production.get(key) {
            for &x in xs {
                for &y in ys {
                    total += pair_score(a, b, x, y, eta, &mut memo);
                }
            }
        }
    }
    total
}

/// Subset-tree kernel between two trees.
pub fn st_kernel(a: &RegimenTree, b: &RegimenTree, cfg: &KernelConfig) -> f64 {
    let pa = PreparedTree::new(a, cfg.match_mode);
    let pb = PreparedTree::new(b, cfg.match_mode);
    prepared_kernel(&pa, &pb, cfg.eta)
}

/// Subset-tree kernel between two regimens via their trees.
pub fn regimen_kernel(
    a: &Regimen,
    b: &Regimen,
    dict: &DrugDictionary,
    cfg: &KernelConfig,
) -> Result<f64> {
    Ok(st_kernel(
        &build_regimen_tree(a, dict)?,
        &build_regimen_tree(b, dict)?,
        cfg,
    ))
}

/// Similarity between two regimen histories: the subset-tree kernel of their
/// sequence trees.
pub fn history_similarity(
    h1: &RegimenHistory,
    h2: &RegimenHistory,
    dict: &DrugDictionary,
    cfg: &KernelConfig,
) -> Result<f64> {
    Ok(st_kernel(
        &build_sequence_tree(h1, dict)?,
        &build_sequence_tree(h2, dict)?,
        cfg,
    ))
}

/// Proportion of shared drugs: `|a ∩ b| / max(|a|, |b|)`.
pub fn linear_kernel(a: &Regimen, b: &Regimen) -> f64 {
    let denom = a.len().max(b.len());
    if denom == 0 {
        return 0.0;
    }
    a.shared_count(b) as f64 / denom as f64
}

/// Symmetric matrix of pairwise history similarities. The diagonal holds
/// self-similarities although the partition prior never reads it.
pub fn similarity_matrix(
    histories: &[RegimenHistory],
    dict: &DrugDictionary,
    cfg: &KernelConfig,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    let prepared = histories
        .iter()
        .map(|h| {
            Ok(PreparedTree::new(
                &build_sequence_tree(h, dict)?,
                cfg.match_mode,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(gram_matrix(&prepared, cfg.eta))
}

/// Gram matrix of prepared trees.
pub fn gram_matrix(trees: &[PreparedTree], eta: f64) -> DMatrix<f64> {
    let n = trees.len();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = prepared_kernel(&trees[i], &trees[j], eta);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg(s: &str) -> Regimen {
        Regimen::parse(s, &DrugDictionary::wihs()).unwrap()
    }

    fn k(a: &str, b: &str, cfg: &KernelConfig) -> f64 {
        regimen_kernel(&reg(a), &reg(b), &DrugDictionary::wihs(), cfg).unwrap()
    }

    const A: &str = "D4T+LAM+EFV";
    const B: &str = "D4T+LAM+IDV";
    const C: &str = "FTC+TDF+ATZ+RTV";

    #[test]
    fn strict_values_at_half() {
        let cfg = KernelConfig::default();
        assert_eq!(k(A, B, &cfg), 1.0);
        assert_eq!(k(A, A, &cfg), 3.1875);
        assert_eq!(k(C, C, &cfg), 4.53125);
        assert!(k(C, C, &cfg) > k(A, A, &cfg));
        assert_eq!(k(A, C, &cfg), 0.0);
        assert_eq!(k("D4T", "EFV", &cfg), 0.0);
        // same class: the root production REGIMEN -> NRTI is shared
        assert_eq!(k("D4T", "LAM", &cfg), 0.5);
        assert_eq!(k(A, B, &cfg), k(B, A, &cfg));
    }

    #[test]
    fn class_relaxed_sees_shared_classes() {
        let cfg = KernelConfig::new(0.5, MatchMode::ClassRelaxed).unwrap();
        assert_eq!(k(A, C, &cfg), 2.0);
    }

    #[test]
    fn history_similarity_examples() {
        let d = DrugDictionary::wihs();
        let cfg = KernelConfig::default();
        let h = |regs: &[&str]| RegimenHistory::new("x", regs.iter().map(|s| reg(s)).collect());
        assert_eq!(
            history_similarity(&h(&[A]), &h(&[A]), &d, &cfg).unwrap(),
            4.53125
        );
        assert_eq!(
            history_similarity(&h(&[A]), &h(&[A, B]), &d, &cfg).unwrap(),
            4.1875
        );
        // equal-length histories always share the ART -> REGIMEN production
        assert_eq!(
            history_similarity(&h(&["D4T"]), &h(&["EFV"]), &d, &cfg).unwrap(),
            0.5
        );
        assert_eq!(
            history_similarity(&h(&["D4T"]), &h(&["EFV", "NVP"]), &d, &cfg).unwrap(),
            0.0
        );
        assert!(matches!(
            history_similarity(&h(&[]), &h(&[A]), &d, &cfg),
            Err(Error::EmptyHistory(_))
        ));
    }

    #[test]
    fn linear_kernel_examples() {
        assert!((linear_kernel(&reg(A), &reg(B)) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(linear_kernel(&reg(A), &reg(C)), 0.0);
        assert_eq!(linear_kernel(&reg(A), &reg(A)), 1.0);
    }

    #[test]
    fn eta_must_be_in_unit_interval() {
        assert!(KernelConfig::new(0.0, MatchMode::Strict).is_err());
        assert!(KernelConfig::new(1.5, MatchMode::Strict).is_err());
        assert!(KernelConfig::new(1.0, MatchMode::Strict).is_ok());
    }
}

use std::collections::HashMap;

use artmix::regimen::{DrugClass, DrugDictionary, DrugEntry};
use num_rational::Ratio;

// Brute-force fragment enumeration. A fragment rooted at a non-terminal node
// keeps the node's full child label list; each non-terminal child is either
// cut to its bare label or expanded into one of its own fragments. The weight
// of a fragment is eta to the number of productions it contains.

#[derive(Clone)]
pub struct Node {
    pub label: String,
    pub children: Vec<Node>,
}

pub fn regimen_node(codes: &[&str], dict: &DrugDictionary) -> Node {
    let mut pairs: Vec<(String, String)> = codes
        .iter()
        .map(|c| (dict.class_of(c).unwrap().label().to_string(), c.to_string()))
        .collect();
    pairs.sort();
    Node {
        label: "REGIMEN".into(),
        children: pairs
            .into_iter()
            .map(|(class, code)| Node {
                label: class,
                children: vec![Node {
                    label: code,
                    children: vec![],
                }],
            })
            .collect(),
    }
}

pub fn sort_key(codes: &[&str], dict: &DrugDictionary) -> Vec<(String, String)> {
    let mut pairs: Vec<(String, String)> = codes
        .iter()
        .map(|c| (dict.class_of(c).unwrap().label().to_string(), c.to_string()))
        .collect();
    pairs.sort();
    pairs
}

pub fn sequence_node(episodes: &[Vec<&str>], dict: &DrugDictionary) -> Node {
    let mut eps: Vec<&Vec<&str>> = episodes.iter().collect();
    eps.sort_by_key(|e| sort_key(e, dict));
    Node {
        label: "ART".into(),
        children: eps.into_iter().map(|e| regimen_node(e, dict)).collect(),
    }
}

pub fn is_pre_terminal(n: &Node) -> bool {
    !n.children.is_empty() && n.children.iter().all(|c| c.children.is_empty())
}

/// All fragments rooted at `n` with their production counts.
pub fn fragments(n: &Node, relaxed: bool) -> Vec<(String, u32)> {
    if n.children.is_empty() {
        return vec![];
    }
    if relaxed && is_pre_terminal(n) {
        return vec![(format!("{}(*{})", n.label, n.children.len()), 1)];
    }
    let mut acc: Vec<(Vec<String>, u32)> = vec![(vec![], 1)];
    for c in &n.children {
        let mut options = vec![(c.label.clone(), 0)];
        options.extend(fragments(c, relaxed));
        let mut next = Vec::new();
        for (parts, p) in &acc {
            for (s, q) in &options {
                let mut parts = parts.clone();
                parts.push(s.clone());
                next.push((parts, p + q));
            }
        }
        acc = next;
    }
    acc.into_iter()
        .map(|(parts, p)| (format!("{}({})", n.label, parts.join(" ")), p))
        .collect()
}

pub fn fragment_bag(root: &Node, relaxed: bool) -> HashMap<(String, u32), i64> {
    let mut bag = HashMap::new();
    let mut stack = vec![root];
    while let Some(n) = stack.pop() {
        for f in fragments(n, relaxed) {
            *bag.entry(f).or_insert(0) += 1;
        }
        stack.extend(n.children.iter());
    }
    bag
}

pub fn oracle_exact(
    a: &HashMap<(String, u32), i64>,
    b: &HashMap<(String, u32), i64>,
    eta: Ratio<i64>,
) -> Ratio<i64> {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut total = Ratio::from_integer(0);
    for (key, ca) in small {
        if let Some(cb) = large.get(key) {
            total += eta.pow(key.1 as i32) * Ratio::from_integer(ca * cb);
        }
    }
    total
}

pub fn oracle_f64(
    a: &HashMap<(String, u32), i64>,
    b: &HashMap<(String, u32), i64>,
    eta: f64,
) -> f64 {
    a.iter()
        .filter_map(|(key, ca)| {
            b.get(key)
                .map(|cb| eta.powi(key.1 as i32) * (ca * cb) as f64)
        })
        .sum()
}

pub fn to_f64(r: Ratio<i64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn ten_drugs() -> DrugDictionary {
    use DrugClass::*;
    let rows = [
        ("ABC", Nrti),
        ("AZT", Nrti),
        ("D4T", Nrti),
        ("LAM", Nrti),
        ("TDF", Nrti),
        ("EFV", Nnrti),
        ("NVP", Nnrti),
        ("ATZ", Pi),
        ("RTV", Pi),
        ("RAL", Insti),
    ];
    DrugDictionary::new(
        rows.iter()
            .map(|&(code, class)| DrugEntry {
                code: code.into(),
                class,
                name: code.to_lowercase(),
            })
            .collect(),
    )
    .unwrap()
}

pub fn all_regimens(codes: &[&'static str], max_len: usize) -> Vec<Vec<&'static str>> {
    let mut out = Vec::new();
    let n = codes.len();
    for mask in 1u32..(1 << n) {
        if mask.count_ones() as usize <= max_len {
            out.push(
                (0..n)
                    .filter(|i| mask & (1 << i) != 0)
                    .map(|i| codes[i])
                    .collect(),
            );
        }
    }
    out
}

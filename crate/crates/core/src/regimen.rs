//! Drug dictionaries, regimens, regimen histories and their tree encodings.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label of the root node of a single-regimen tree.
pub const REGIMEN_ROOT: &str = "REGIMEN";
/// Label of the root node of a sequence tree.
pub const SEQUENCE_ROOT: &str = "ART";

/// Mechanism class of an antiretroviral agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DrugClass {
    #[serde(rename = "NRTI")]
    Nrti,
    #[serde(rename = "NNRTI")]
    Nnrti,
    #[serde(rename = "PI")]
    Pi,
    #[serde(rename = "INSTI")]
    Insti,
    #[serde(rename = "EI")]
    Ei,
}

impl DrugClass {
    pub const ALL: [DrugClass; 5] = [
        DrugClass::Nrti,
        DrugClass::Nnrti,
        DrugClass::Pi,
        DrugClass::Insti,
        DrugClass::Ei,
    ];

    pub fn label(self) -> &'static str {
        match self {
            DrugClass::Nrti => "NRTI",
            DrugClass::Nnrti => "NNRTI",
            DrugClass::Pi => "PI",
            DrugClass::Insti => "INSTI",
            DrugClass::Ei => "EI",
        }
    }
}

impl fmt::Display for DrugClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DrugClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DrugClass::ALL
            .into_iter()
            .find(|c| c.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugEntry {
    pub code: String,
    pub class: DrugClass,
    pub name: String,
}

/// Lookup table from drug code to class and display name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DrugEntry>", into = "Vec<DrugEntry>")]
pub struct DrugDictionary {
    entries: Vec<DrugEntry>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<DrugEntry>> for DrugDictionary {
    type Error = Error;

    fn try_from(entries: Vec<DrugEntry>) -> Result<Self> {
        DrugDictionary::new(entries)
    }
}

impl From<DrugDictionary> for Vec<DrugEntry> {
    fn from(d: DrugDictionary) -> Self {
        d.entries
    }
}

impl DrugDictionary {
    pub fn new(entries: Vec<DrugEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.code.is_empty() {
                return Err(Error::UnknownDrug(String::new()));
            }
            if index.insert(e.code.clone(), i).is_some() {
                return Err(Error::DuplicateDictionaryEntry(e.code.clone()));
            }
        }
        Ok(Self { entries, index })
    }

    /// The 24 agents in five classes observed in the WIHS cohort.
    pub fn wihs() -> Self {
        use DrugClass::*;
        let rows: [(&str, DrugClass, &str); 24] = [
            ("ABC", Nrti, "Abacavir"),
            ("AZT", Nrti, "Zidovudine"),
            ("D4T", Nrti, "Stavudine"),
            ("DDC", Nrti, "Zalcitabine"),
            ("DDI", Nrti, "Didanosine"),
            ("FTC", Nrti, "Emtricitabine"),
            ("LAM", Nrti, "Lamivudine"),
            ("TDF", Nrti, "Tenofovir Disoproxil Fumarate"),
            ("EFV", Nnrti, "Efavirenz"),
            ("ETV", Nnrti, "Etravirine"),
            ("NVP", Nnrti, "Nevirapine"),
            ("RPV", Nnrti, "Rilpivirine"),
            ("ATZ", Pi, "Atazanavir"),
            ("DRV", Pi, "Darunavir"),
            ("FPV", Pi, "Fosamprenavir"),
            ("IDV", Pi, "Indinavir"),
            ("LPV", Pi, "Lopinavir"),
            ("NFV", Pi, "Nelfinavir"),
            ("RTV", Pi, "Ritonavir"),
            ("SQV", Pi, "Saquinavir"),
            ("DGT", Insti, "Dolutegravir"),
            ("ELV", Insti, "Elvitegravir"),
            ("RAL", Insti, "Raltegravir"),
            ("SLZ", Ei, "Maraviroc"),
        ];
        let entries = rows
            .iter()
            .map(|(code, class, name)| DrugEntry {
                code: code.to_string(),
                class: *class,
                name: name.to_string(),
            })
            .collect();
        Self::new(entries).expect("built-in dictionary is valid")
    }

    pub fn entries(&self) -> &[DrugEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, code: &str) -> Option<&DrugEntry> {
        self.index.get(code).map(|&i| &self.entries[i])
    }

    pub fn class_of(&self, code: &str) -> Result<DrugClass> {
        self.get(code)
            .map(|e| e.class)
            .ok_or_else(|| Error::UnknownDrug(code.to_string()))
    }

    pub fn codes_in_class(&self, class: DrugClass) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.class == class)
            .map(|e| e.code.as_str())
            .collect()
    }

    /// Reads a `code,class,name` CSV file.
    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            code: String,
            class: String,
            name: String,
        }
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for row in rdr.deserialize::<Row>() {
            let row = row?;
            entries.push(DrugEntry {
                code: row.code.trim().to_ascii_uppercase(),
                class: row.class.parse()?,
                name: row.name.trim().to_string(),
            });
        }
        Self::new(entries)
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["code", "class", "name"])?;
        for e in &self.entries {
            wtr.write_record([e.code.as_str(), e.class.label(), e.name.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A set of drug codes taken together at one visit.
///
/// Codes are kept sorted, so two regimens with the same drugs compare equal
/// regardless of the order they were written in.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct Regimen {
    drugs: Vec<String>,
}

impl Regimen {
    /// Parses `CODE+CODE+...` and validates every code against `dict`.
    pub fn parse(text: &str, dict: &DrugDictionary) -> Result<Self> {
        let reg: Regimen = text.parse()?;
        reg.validate(dict)?;
        Ok(reg)
    }

    /// Builds a regimen from codes without dictionary validation.
    pub fn from_codes<I, S>(codes: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = BTreeSet::new();
        for code in codes {
            let code = code.as_ref().trim().to_ascii_uppercase();
            if code.is_empty() {
                return Err(Error::EmptyRegimen);
            }
            if !seen.insert(code.clone()) {
                return Err(Error::DuplicateDrug(code));
            }
        }
        if seen.is_empty() {
            return Err(Error::EmptyRegimen);
        }
        Ok(Self {
            drugs: seen.into_iter().collect(),
        })
    }

    pub fn validate(&self, dict: &DrugDictionary) -> Result<()> {
        for d in &self.drugs {
            dict.class_of(d)?;
        }
        Ok(())
    }

    pub fn drugs(&self) -> &[String] {
        &self.drugs
    }

    pub fn len(&self) -> usize {
        self.drugs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.drugs.is_empty()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.drugs
            .binary_search_by(|d| d.as_str().cmp(code))
            .is_ok()
    }

    pub fn shared_count(&self, other: &Regimen) -> usize {
        self.drugs.iter().filter(|d| other.contains(d)).count()
    }
}

impl FromStr for Regimen {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::EmptyRegimen);
        }
        Regimen::from_codes(text.split('+'))
    }
}

impl fmt::Display for Regimen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.drugs.join("+"))
    }
}

impl From<Regimen> for String {
    fn from(r: Regimen) -> Self {
        r.to_string()
    }
}

impl TryFrom<String> for Regimen {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A labeled ordered tree node. The derived ordering compares the label
/// first, then the children lexicographically, which is the canonical order
/// used for sibling sorting.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TreeNode {
    pub label: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeNode>,
}

impl TreeNode {
    pub fn leaf(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            children: Vec::new(),
        }
    }

    pub fn with_children(label: impl Into<String>, children: Vec<TreeNode>) -> Self {
        Self {
            label: label.into(),
            children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn node_count(&self) -> usize {
        1 + self
            .children
            .iter()
            .map(TreeNode::node_count)
            .sum::<usize>()
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(TreeNode::leaf_count).sum()
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(TreeNode::depth).max().unwrap_or(0)
    }

    /// Returns a copy with all sibling lists sorted canonically.
    pub fn canonicalized(&self) -> TreeNode {
        let mut children: Vec<TreeNode> = self.children.iter().map(|c| c.canonicalized()).collect();
        children.sort();
        TreeNode {
            label: self.label.clone(),
            children,
        }
    }
}

impl fmt::Display for TreeNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)?;
        if !self.children.is_empty() {
            f.write_str("(")?;
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    f.write_str(" ")?;
                }
                write!(f, "{c}")?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

/// Tree encoding of a regimen (`REGIMEN -> class -> drug`) or of a regimen
/// sequence (`ART -> REGIMEN ...`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimenTree {
    pub root: TreeNode,
}

impl RegimenTree {
    pub fn from_root(root: TreeNode) -> Self {
        Self { root }
    }
}

impl fmt::Display for RegimenTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.fmt(f)
    }
}

/// Builds the depth-3 tree of a regimen: one class node per drug, each
/// holding the drug as its only leaf, siblings in (class, code) order.
pub fn build_regimen_tree(reg: &Regimen, dict: &DrugDictionary) -> Result<RegimenTree> {
    Ok(RegimenTree {
        root: regimen_node(reg, dict)?,
    })
}

fn regimen_node(reg: &Regimen, dict: &DrugDictionary) -> Result<TreeNode> {
    if reg.is_empty() {
        return Err(Error::EmptyRegimen);
    }
    let mut branches = reg
        .drugs()
        .iter()
        .map(|code| {
            let class = dict.class_of(code)?;
            Ok(TreeNode::with_children(
                class.label(),
                vec![TreeNode::leaf(code.clone())],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    branches.sort();
    Ok(TreeNode::with_children(REGIMEN_ROOT, branches))
}

/// Builds the sequence tree of a history: an `ART` root whose children are
/// the episode regimen trees in episode order.
pub fn build_sequence_tree(hist: &RegimenHistory, dict: &DrugDictionary) -> Result<RegimenTree> {
    if hist.episodes.is_empty() {
        return Err(Error::EmptyHistory(Some(hist.owner.clone())));
    }
    let children = hist
        .episodes
        .iter()
        .map(|r| regimen_node(r, dict))
        .collect::<Result<Vec<_>>>()?;
    Ok(RegimenTree {
        root: TreeNode::with_children(SEQUENCE_ROOT, children),
    })
}

/// Ordered regimen episodes of one individual.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegimenHistory {
    pub owner: String,
    pub episodes: Vec<Regimen>,
}

impl RegimenHistory {
    pub fn new(owner: impl Into<String>, episodes: Vec<Regimen>) -> Self {
        Self {
            owner: owner.into(),
            episodes,
        }
    }

    /// Collects episodes from per-visit regimens. Visits without a regimen
    /// are skipped; consecutive identical regimens collapse into one episode
    /// unless `keep_duplicates` is set.
    pub fn from_visits<'a, I>(owner: impl Into<String>, visits: I, keep_duplicates: bool) -> Self
    where
        I: IntoIterator<Item = Option<&'a Regimen>>,
    {
        let mut episodes: Vec<Regimen> = Vec::new();
        for reg in visits.into_iter().flatten() {
            if !keep_duplicates && episodes.last() == Some(reg) {
                continue;
            }
            episodes.push(reg.clone());
        }
        Self::new(owner, episodes)
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }
}

//! Synset is-a hierarchy and audit subset selection.
//!
//! Input mirrors the public WordNet/ImageNet distributions: an edge list with
//! one `child parent` pair per line and a gloss map with `wnid<TAB>gloss`.
//! Multiple parents are allowed; cycles are rejected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::manifest::Manifest;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error("hierarchy edge list is empty")]
    Empty,
    #[error("is-a edges form a cycle through {0}")]
    Cycle(String),
    #[error("edge on line {line} references undeclared wnid {wnid}")]
    DanglingEdge { line: usize, wnid: String },
    #[error("unknown wnid {0}")]
    UnknownWnid(String),
    #[error("malformed hierarchy line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synset {
    pub wnid: String,
    pub gloss: String,
    pub parents: Vec<String>,
    pub children: Vec<String>,
}

impl Synset {
    /// Short display label: the first comma-separated lemma of the gloss,
    /// falling back to the wnid.
    pub fn label(&self) -> &str {
        let head = self.gloss.split(',').next().unwrap_or("").trim();
        if head.is_empty() {
            &self.wnid
        } else {
            head
        }
    }
}

/// An is-a edge: `child` is a kind of `parent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Edge {
    pub child: String,
    pub parent: String,
    /// 1-based source line, 0 when constructed in code.
    pub line: usize,
}

impl Edge {
    pub fn new(child: impl Into<String>, parent: impl Into<String>) -> Self {
        Self {
            child: child.into(),
            parent: parent.into(),
            line: 0,
        }
    }
}

/// Immutable synset DAG keyed by wnid.
#[derive(Debug, Clone, Default)]
pub struct Hierarchy {
    nodes: BTreeMap<String, Synset>,
}

/// Build a hierarchy from is-a edges.
///
/// With `strict` set, every wnid named by an edge must appear in `glosses`;
/// otherwise undeclared wnids become nodes with an empty gloss.
pub fn load_hierarchy(
    edges: &[Edge],
    glosses: &BTreeMap<String, String>,
    strict: bool,
) -> Result<Hierarchy, HierarchyError> {
    if edges.is_empty() {
        return Err(HierarchyError::Empty);
    }
    let mut nodes: BTreeMap<String, Synset> = glosses
        .iter()
        .map(|(wnid, gloss)| {
            (
                wnid.clone(),
                Synset {
                    wnid: wnid.clone(),
                    gloss: gloss.clone(),
                    parents: Vec::new(),
                    children: Vec::new(),
                },
            )
        })
        .collect();

    for edge in edges {
        for wnid in [&edge.child, &edge.parent] {
            if !nodes.contains_key(wnid) {
                if strict {
                    return Err(HierarchyError::DanglingEdge {
                        line: edge.line,
                        wnid: wnid.clone(),
                    });
                }
                nodes.insert(
                    wnid.clone(),
                    Synset {
                        wnid: wnid.clone(),
                        gloss: String::new(),
                        parents: Vec::new(),
                        children: Vec::new(),
                    },
                );
            }
        }
        let child = nodes.get_mut(&edge.child).expect("inserted above");
        if !child.parents.contains(&edge.parent) {
            child.parents.push(edge.parent.clone());
        }
        let parent = nodes.get_mut(&edge.parent).expect("inserted above");
        if !parent.children.contains(&edge.child) {
            parent.children.push(edge.child.clone());
        }
    }
    for node in nodes.values_mut() {
        node.parents.sort();
        node.children.sort();
    }

    let hierarchy = Hierarchy { nodes };
    hierarchy.check_acyclic()?;
    Ok(hierarchy)
}

/// Parse an edge list: one `child parent` pair per line, whitespace separated.
/// Blank lines and `#` comments are ignored.
pub fn parse_edges(text: &str) -> Result<Vec<Edge>, HierarchyError> {
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(child), Some(parent), None) => edges.push(Edge {
                child: child.to_string(),
                parent: parent.to_string(),
                line: idx + 1,
            }),
            _ => {
                return Err(HierarchyError::Parse {
                    line: idx + 1,
                    reason: "expected `child parent`".into(),
                })
            }
        }
    }
    Ok(edges)
}

/// Parse a gloss map: `wnid<TAB>gloss` per line.
pub fn parse_glosses(text: &str) -> Result<BTreeMap<String, String>, HierarchyError> {
    let mut glosses = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let (wnid, gloss) = raw.split_once('\t').ok_or_else(|| HierarchyError::Parse {
            line: idx + 1,
            reason: "expected `wnid<TAB>gloss`".into(),
        })?;
        glosses.insert(wnid.trim().to_string(), gloss.trim().to_string());
    }
    Ok(glosses)
}

/// Read both hierarchy files from disk.
pub fn read_hierarchy(
    edges_path: &Path,
    glosses_path: Option<&Path>,
    strict: bool,
) -> Result<Hierarchy, HierarchyError> {
    let edges = parse_edges(&fs::read_to_string(edges_path)?)?;
    let glosses = match glosses_path {
        Some(p) => parse_glosses(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    load_hierarchy(&edges, &glosses, strict)
}

impl Hierarchy {
    /// Edge-free hierarchy where every given wnid is its own root.
    pub fn flat<I, S>(wnids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let nodes = wnids
            .into_iter()
            .map(|w| {
                let wnid = w.into();
                (
                    wnid.clone(),
                    Synset {
                        wnid,
                        gloss: String::new(),
                        parents: Vec::new(),
                        children: Vec::new(),
                    },
                )
            })
            .collect();
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, wnid: &str) -> Option<&Synset> {
        self.nodes.get(wnid)
    }

    pub fn contains(&self, wnid: &str) -> bool {
        self.nodes.contains_key(wnid)
    }

    /// All synsets in lexicographic wnid order.
    pub fn synsets(&self) -> impl Iterator<Item = &Synset> {
        self.nodes.values()
    }

    pub fn roots(&self) -> Vec<&str> {
        self.nodes
            .values()
            .filter(|s| s.parents.is_empty())
            .map(|s| s.wnid.as_str())
            .collect()
    }

    /// Length of the shortest is-a path from `wnid` up to any root.
    pub fn depth(&self, wnid: &str) -> Result<usize, HierarchyError> {
        if !self.contains(wnid) {
            return Err(HierarchyError::UnknownWnid(wnid.to_string()));
        }
        let mut seen = BTreeSet::from([wnid]);
        let mut queue = VecDeque::from([(wnid, 0usize)]);
        while let Some((id, d)) = queue.pop_front() {
            let node = &self.nodes[id];
            if node.parents.is_empty() {
                return Ok(d);
            }
            for p in &node.parents {
                if seen.insert(p) {
                    queue.push_back((p, d + 1));
                }
            }
        }
        unreachable!("an acyclic hierarchy always reaches a root")
    }

    /// Root plus all transitive descendants.
    pub fn descendants(&self, root: &str) -> Result<BTreeSet<String>, HierarchyError> {
        if !self.contains(root) {
            return Err(HierarchyError::UnknownWnid(root.to_string()));
        }
        let mut out = BTreeSet::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            if out.insert(id.to_string()) {
                stack.extend(self.nodes[id].children.iter().map(String::as_str));
            }
        }
        Ok(out)
    }

    fn check_acyclic(&self) -> Result<(), HierarchyError> {
        // Kahn's algorithm over child -> parent edges.
        let mut indegree: BTreeMap<&str, usize> = self
            .nodes
            .values()
            .map(|s| (s.wnid.as_str(), s.children.len()))
            .collect();
        let mut ready: Vec<&str> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&w, _)| w)
            .collect();
        let mut visited = 0;
        while let Some(id) = ready.pop() {
            visited += 1;
            for p in &self.nodes[id].parents {
                let d = indegree.get_mut(p.as_str()).expect("parent is a node");
                *d -= 1;
                if *d == 0 {
                    ready.push(p);
                }
            }
        }
        if visited == self.nodes.len() {
            return Ok(());
        }
        let culprit = indegree
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(&w, _)| w.to_string())
            .unwrap_or_default();
        Err(HierarchyError::Cycle(culprit))
    }
}

/// A named, ordered set of synsets selected for auditing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditSubset {
    pub name: String,
    pub wnids: Vec<String>,
    pub image_count: u64,
}

impl AuditSubset {
    pub fn contains(&self, wnid: &str) -> bool {
        self.wnids.binary_search_by(|w| w.as_str().cmp(wnid)).is_ok()
    }

    /// Fill `image_count` from a manifest (one per (image, synset) record).
    pub fn with_image_counts(mut self, manifest: &Manifest) -> Self {
        self.image_count = manifest
            .records()
            .iter()
            .filter(|r| self.contains(&r.synset_wnid))
            .count() as u64;
        self
    }
}

/// The descendant subtree of `root`, in lexicographic wnid order.
pub fn subtree(h: &Hierarchy, root: &str) -> Result<AuditSubset, HierarchyError> {
    let wnids = h.descendants(root)?.into_iter().collect();
    Ok(AuditSubset {
        name: root.to_string(),
        wnids,
        image_count: 0,
    })
}

/// A fixed synset list (e.g. the 1000 classification synsets).
pub fn subset_from_list<I, S>(h: &Hierarchy, name: &str, wnids: I) -> Result<AuditSubset, HierarchyError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut set = BTreeSet::new();
    for w in wnids {
        let w = w.as_ref().trim();
        if w.is_empty() || w.starts_with('#') {
            continue;
        }
        if !h.contains(w) {
            return Err(HierarchyError::UnknownWnid(w.to_string()));
        }
        set.insert(w.to_string());
    }
    Ok(AuditSubset {
        name: name.to_string(),
        wnids: set.into_iter().collect(),
        image_count: 0,
    })
}

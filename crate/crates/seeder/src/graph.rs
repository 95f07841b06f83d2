//! Typed multigraph storage: load, index, slice.
//!
//! Node ids are dense integers `0..|V|-1`; external string ids map through
//! a sidecar table. Parallel edges with identical `(src, rel, dst)` are
//! kept unless the loader is asked to dedup them.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;
pub type RelId = usize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: NodeId,
    pub type_id: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: NodeId,
    pub rel: RelId,
    pub dst: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Out,
    In,
    Both,
}

/// Vocabulary sidecar: node-type and relation names in id order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphManifest {
    pub node_types: Vec<String>,
    pub relations: Vec<String>,
}

/// Immutable typed multigraph with adjacency indexes.
#[derive(Debug, Clone)]
pub struct TypedGraph {
    nodes: Vec<NodeRecord>,
    node_types: Vec<String>,
    relations: Vec<String>,
    edges: Vec<Edge>,
    out_index: Vec<Vec<(RelId, NodeId)>>,
    in_index: Vec<Vec<(RelId, NodeId)>>,
    external_ids: Vec<String>,
    ext_lookup: HashMap<String, NodeId>,
}

impl TypedGraph {
    /// Build a graph from already-resolved parts, validating ranges and
    /// constructing both adjacency indexes.
    pub fn from_parts(
        node_types: Vec<String>,
        relations: Vec<String>,
        nodes: Vec<(String, usize, String)>,
        edges: Vec<(NodeId, RelId, NodeId)>,
    ) -> Result<Self> {
        let n = nodes.len();
        let mut ext_lookup = HashMap::with_capacity(n);
        let mut records = Vec::with_capacity(n);
        let mut external_ids = Vec::with_capacity(n);
        for (id, (ext, type_id, text)) in nodes.into_iter().enumerate() {
            if type_id >= node_types.len() {
                return Err(Error::Integrity(format!(
                    "node {ext:?} has type id {type_id} but only {} types exist",
                    node_types.len()
                )));
            }
            if ext_lookup.insert(ext.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate external node id {ext:?}")));
            }
            external_ids.push(ext);
            records.push(NodeRecord { id, type_id, text });
        }

        let mut out_index = vec![Vec::new(); n];
        let mut in_index = vec![Vec::new(); n];
        let mut edge_list = Vec::with_capacity(edges.len());
        for (src, rel, dst) in edges {
            if src >= n || dst >= n {
                return Err(Error::Integrity(format!(
                    "edge ({src},{rel},{dst}) references a node out of range 0..{n}"
                )));
            }
            if rel >= relations.len() {
                return Err(Error::Integrity(format!(
                    "edge ({src},{rel},{dst}) references relation {rel} but only {} exist",
                    relations.len()
                )));
            }
            out_index[src].push((rel, dst));
            in_index[dst].push((rel, src));
            edge_list.push(Edge { src, rel, dst });
        }
        for list in out_index.iter_mut().chain(in_index.iter_mut()) {
            list.sort_unstable();
        }

        Ok(TypedGraph {
            nodes: records,
            node_types,
            relations,
            edges: edge_list,
            out_index,
            in_index,
            external_ids,
            ext_lookup,
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> &[NodeRecord] {
        &self.nodes
    }

    pub fn node(&self, v: NodeId) -> &NodeRecord {
        &self.nodes[v]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_types(&self) -> &[String] {
        &self.node_types
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn external_id(&self, v: NodeId) -> &str {
        &self.external_ids[v]
    }

    pub fn resolve_external(&self, ext: &str) -> Option<NodeId> {
        self.ext_lookup.get(ext).copied()
    }

    /// Incident edges of `v` in the requested direction, ordered by
    /// `(rel, neighbor)`. For [`Direction::Both`] the out and in lists are
    /// merged and re-sorted; a self-loop therefore appears twice.
    pub fn neighbors(&self, v: NodeId, dir: Direction) -> Result<Vec<(RelId, NodeId)>> {
        if v >= self.nodes.len() {
            return Err(Error::Argument(format!(
                "node id {v} out of range 0..{}",
                self.nodes.len()
            )));
        }
        Ok(match dir {
            Direction::Out => self.out_index[v].clone(),
            Direction::In => self.in_index[v].clone(),
            Direction::Both => {
                let mut merged = self.out_index[v].clone();
                merged.extend_from_slice(&self.in_index[v]);
                merged.sort_unstable();
                merged
            }
        })
    }

    /// Unchecked out-adjacency slice, ordered by `(rel, neighbor)`.
    pub fn out_adj(&self, v: NodeId) -> &[(RelId, NodeId)] {
        &self.out_index[v]
    }

    /// Unchecked in-adjacency slice, ordered by `(rel, neighbor)`.
    pub fn in_adj(&self, v: NodeId) -> &[(RelId, NodeId)] {
        &self.in_index[v]
    }

    /// Induced subgraph over `members`. Order is preserved; duplicates are
    /// dropped. Errors when a member is out of range.
    pub fn induced_subgraph(&self, members: &[NodeId]) -> Result<SubgraphView<'_>> {
        let mut pos = HashMap::with_capacity(members.len());
        let mut ordered = Vec::with_capacity(members.len());
        for &m in members {
            if m >= self.nodes.len() {
                return Err(Error::Argument(format!(
                    "subgraph member {m} out of range 0..{}",
                    self.nodes.len()
                )));
            }
            if !pos.contains_key(&m) {
                pos.insert(m, ordered.len());
                ordered.push(m);
            }
        }
        Ok(SubgraphView {
            parent: self,
            members: ordered,
            pos,
            induced: OnceLock::new(),
        })
    }

    pub fn manifest(&self) -> GraphManifest {
        GraphManifest {
            node_types: self.node_types.clone(),
            relations: self.relations.clone(),
        }
    }
}

/// A lazily-materialized induced subgraph over a parent [`TypedGraph`].
#[derive(Debug)]
pub struct SubgraphView<'g> {
    parent: &'g TypedGraph,
    members: Vec<NodeId>,
    pos: HashMap<NodeId, usize>,
    induced: OnceLock<Vec<Edge>>,
}

impl<'g> SubgraphView<'g> {
    pub fn parent(&self) -> &'g TypedGraph {
        self.parent
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.pos.contains_key(&v)
    }

    /// Local index of a member node, if present.
    pub fn local_index(&self, v: NodeId) -> Option<usize> {
        self.pos.get(&v).copied()
    }

    /// Induced edges in parent-node ids: every parent edge whose endpoints
    /// are both members. Computed once and cached.
    pub fn induced_edges(&self) -> &[Edge] {
        self.induced.get_or_init(|| {
            let mut out = Vec::new();
            for &m in &self.members {
                for &(rel, dst) in self.parent.out_adj(m) {
                    if self.pos.contains_key(&dst) {
                        out.push(Edge { src: m, rel, dst });
                    }
                }
            }
            out
        })
    }

    /// Induced edges re-indexed to local member positions.
    pub fn induced_edges_local(&self) -> Vec<(usize, RelId, usize)> {
        self.induced_edges()
            .iter()
            .map(|e| (self.pos[&e.src], e.rel, self.pos[&e.dst]))
            .collect()
    }

    /// Out-neighbors of `v` that lie inside the view.
    pub fn out_neighbors_within(&self, v: NodeId) -> impl Iterator<Item = (RelId, NodeId)> + '_ {
        self.parent
            .out_adj(v)
            .iter()
            .copied()
            .filter(|(_, dst)| self.pos.contains_key(dst))
    }
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------
//
// nodes file:  external_id \t type_name \t text      (UTF-8, one per line)
// edges file:  external_src \t relation_name \t external_dst
// manifest:    JSON { node_types: [...], relations: [...] } in id order
//
// Text fields escape backslash, tab, and newline as \\, \t, \n.

fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_text(s: &str, path: &Path, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    msg: format!("bad escape sequence \\{}", other.map_or(String::from("<eol>"), |c| c.to_string())),
                })
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fixed vocabularies; without one, names are assigned ids in first
    /// appearance order.
    pub manifest: Option<PathBuf>,
    /// Drop repeated `(src, rel, dst)` triples instead of keeping them.
    pub dedup_edges: bool,
}

pub fn load_graph(nodes_path: &Path, edges_path: &Path) -> Result<TypedGraph> {
    load_graph_opts(nodes_path, edges_path, &LoadOptions::default())
}

pub fn load_graph_opts(
    nodes_path: &Path,
    edges_path: &Path,
    opts: &LoadOptions,
) -> Result<TypedGraph> {
    let (mut node_types, mut relations, fixed_vocab) = match &opts.manifest {
        Some(p) => {
            let m: GraphManifest = serde_json::from_str(&fs::read_to_string(p)?)?;
            (m.node_types, m.relations, true)
        }
        None => (Vec::new(), Vec::new(), false),
    };
    let mut type_lookup: HashMap<String, usize> = node_types
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();
    let mut rel_lookup: HashMap<String, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i))
        .collect();

    let mut nodes = Vec::new();
    let node_text = fs::read_to_string(nodes_path)?;
    for (lineno, line) in node_text.lines().enumerate() {
        let line_1 = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: nodes_path.to_path_buf(),
                line: line_1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let type_id = match type_lookup.get(fields[1]) {
            Some(&t) => t,
            None if fixed_vocab => {
                return Err(Error::Parse {
                    path: nodes_path.to_path_buf(),
                    line: line_1,
                    msg: format!("node type {:?} not in manifest", fields[1]),
                })
            }
            None => {
                let t = node_types.len();
                node_types.push(fields[1].to_string());
                type_lookup.insert(fields[1].to_string(), t);
                t
            }
        };
        let text = unescape_text(fields[2], nodes_path, line_1)?;
        nodes.push((fields[0].to_string(), type_id, text));
    }

    let mut ext_lookup = HashMap::with_capacity(nodes.len());
    for (id, (ext, _, _)) in nodes.iter().enumerate() {
        ext_lookup.insert(ext.clone(), id);
    }

    let mut edges = Vec::new();
    let mut seen = HashMap::new();
    let edge_text = fs::read_to_string(edges_path)?;
    for (lineno, line) in edge_text.lines().enumerate() {
        let line_1 = lineno + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: edges_path.to_path_buf(),
                line: line_1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let src = *ext_lookup.get(fields[0]).ok_or_else(|| {
            Error::Integrity(format!(
                "{}:{}: edge source {:?} is not a known node",
                edges_path.display(),
                line_1,
                fields[0]
            ))
        })?;
        let dst = *ext_lookup.get(fields[2]).ok_or_else(|| {
            Error::Integrity(format!(
                "{}:{}: edge target {:?} is not a known node",
                edges_path.display(),
                line_1,
                fields[2]
            ))
        })?;
        let rel = match rel_lookup.get(fields[1]) {
            Some(&r) => r,
            None if fixed_vocab => {
                return Err(Error::Parse {
                    path: edges_path.to_path_buf(),
                    line: line_1,
                    msg: format!("relation {:?} not in manifest", fields[1]),
                })
            }
            None => {
                let r = relations.len();
                relations.push(fields[1].to_string());
                rel_lookup.insert(fields[1].to_string(), r);
                r
            }
        };
        if opts.dedup_edges {
            if seen.insert((src, rel, dst), ()).is_some() {
                continue;
            }
        }
        edges.push((src, rel, dst));
    }

    TypedGraph::from_parts(node_types, relations, nodes, edges)
}

/// Write a graph back out in the loader's format.
pub fn save_graph(
    g: &TypedGraph,
    nodes_path: &Path,
    edges_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    let mut nodes_out = String::new();
    for rec in g.nodes() {
        writeln!(
            nodes_out,
            "{}\t{}\t{}",
            g.external_id(rec.id),
            g.node_types()[rec.type_id],
            escape_text(&rec.text)
        )
        .expect("write to string");
    }
    fs::write(nodes_path, nodes_out)?;

    let mut edges_out = String::new();
    for e in g.edges() {
        writeln!(
            edges_out,
            "{}\t{}\t{}",
            g.external_id(e.src),
            g.relations()[e.rel],
            g.external_id(e.dst)
        )
        .expect("write to string");
    }
    fs::write(edges_path, edges_out)?;

    fs::write(manifest_path, serde_json::to_string_pretty(&g.manifest())?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny(edges: Vec<(usize, usize, usize)>, n: usize) -> TypedGraph {
        let nodes = (0..n)
            .map(|i| (format!("n{i}"), 0, format!("node {i}")))
            .collect();
        TypedGraph::from_parts(
            vec!["thing".into()],
            vec!["r0".into(), "r1".into()],
            nodes,
            edges,
        )
        .unwrap()
    }

    #[test]
    fn out_degrees_of_small_chain() {
        let g = tiny(vec![(0, 0, 1), (1, 0, 2)], 3);
        let degs: Vec<usize> = (0..3).map(|v| g.out_adj(v).len()).collect();
        assert_eq!(degs, vec![1, 1, 0]);
    }

    #[test]
    fn empty_edge_list() {
        let g = tiny(vec![], 3);
        assert_eq!(g.edge_count(), 0);
        assert!((0..3).all(|v| g.out_adj(v).is_empty() && g.in_adj(v).is_empty()));
    }

    #[test]
    fn dangling_endpoint_is_integrity_error() {
        let nodes = (0..3)
            .map(|i| (format!("n{i}"), 0usize, String::new()))
            .collect();
        let err = TypedGraph::from_parts(vec!["t".into()], vec!["r".into()], nodes, vec![(0, 0, 99)])
            .unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn star_and_isolated_neighbors() {
        let g = tiny(vec![(0, 0, 1), (0, 0, 2), (0, 1, 3), (0, 1, 4)], 6);
        assert_eq!(g.neighbors(0, Direction::Out).unwrap().len(), 4);
        assert!(g.neighbors(5, Direction::Out).unwrap().is_empty());
        assert!(g.neighbors(9, Direction::Out).is_err());
    }

    #[test]
    fn neighbors_order_is_rel_then_id() {
        let g = tiny(vec![(0, 1, 2), (0, 0, 3), (0, 0, 1)], 4);
        assert_eq!(
            g.neighbors(0, Direction::Out).unwrap(),
            vec![(0, 1), (0, 3), (1, 2)]
        );
    }

    #[test]
    fn induced_subgraph_cases() {
        let g = tiny(vec![(0, 0, 1), (1, 0, 2)], 3);
        let all = g.induced_subgraph(&[0, 1, 2]).unwrap();
        assert_eq!(all.induced_edges().len(), 2);

        let single = g.induced_subgraph(&[1]).unwrap();
        assert!(single.induced_edges().is_empty());

        let ends = g.induced_subgraph(&[0, 2]).unwrap();
        assert!(ends.induced_edges().is_empty());

        assert!(g.induced_subgraph(&[7]).is_err());
    }

    #[test]
    fn parallel_edges_are_kept() {
        let g = tiny(vec![(0, 0, 1), (0, 0, 1)], 2);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.out_adj(0), &[(0, 1), (0, 1)]);
    }

    #[test]
    fn round_trip_with_escaped_text() {
        let dir = tempfile::tempdir().unwrap();
        let nodes = vec![
            ("a".to_string(), 0, "tab\there".to_string()),
            ("b".to_string(), 1, "line\nbreak \\ slash".to_string()),
            ("c".to_string(), 0, String::new()),
        ];
        let g = TypedGraph::from_parts(
            vec!["x".into(), "y".into()],
            vec!["likes".into()],
            nodes,
            vec![(0, 0, 1), (1, 0, 2), (1, 0, 2)],
        )
        .unwrap();
        let np = dir.path().join("nodes.tsv");
        let ep = dir.path().join("edges.tsv");
        let mp = dir.path().join("manifest.json");
        save_graph(&g, &np, &ep, &mp).unwrap();
        let opts = LoadOptions {
            manifest: Some(mp),
            dedup_edges: false,
        };
        let g2 = load_graph_opts(&np, &ep, &opts).unwrap();
        assert_eq!(g.nodes(), g2.nodes());
        assert_eq!(g.edges(), g2.edges());
        assert_eq!(g.relations(), g2.relations());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let np = dir.path().join("nodes.tsv");
        let ep = dir.path().join("edges.tsv");
        std::fs::write(&np, "a\tt\tok\nbroken line\n").unwrap();
        std::fs::write(&ep, "").unwrap();
        match load_graph(&np, &ep) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn adjacency_matches_edge_list(
            n in 1usize..200,
            edges in proptest::collection::vec((0usize..200, 0usize..2, 0usize..200), 0..400),
        ) {
            let edges: Vec<_> = edges
                .into_iter()
                .map(|(s, r, d)| (s % n, r, d % n))
                .collect();
            let g = tiny(edges.clone(), n);
            let total_out: usize = (0..n).map(|v| g.out_adj(v).len()).sum();
            let total_in: usize = (0..n).map(|v| g.in_adj(v).len()).sum();
            prop_assert_eq!(total_out, edges.len());
            prop_assert_eq!(total_in, edges.len());

            // adjacency is a bijection with the edge list
            let mut from_adj: Vec<(usize, usize, usize)> = (0..n)
                .flat_map(|v| g.out_adj(v).iter().map(move |&(r, d)| (v, r, d)))
                .collect();
            let mut expect = edges.clone();
            from_adj.sort_unstable();
            expect.sort_unstable();
            prop_assert_eq!(from_adj, expect);
        }

        #[test]
        fn induced_equals_brute_force(
            n in 1usize..200,
            edges in proptest::collection::vec((0usize..200, 0usize..2, 0usize..200), 0..300),
            member_mask in proptest::collection::vec(proptest::bool::ANY, 200),
        ) {
            let edges: Vec<_> = edges
                .into_iter()
                .map(|(s, r, d)| (s % n, r, d % n))
                .collect();
            let g = tiny(edges, n);
            let members: Vec<usize> = (0..n).filter(|&v| member_mask[v]).collect();
            let view = g.induced_subgraph(&members).unwrap();
            let mut got: Vec<Edge> = view.induced_edges().to_vec();
            let mut want: Vec<Edge> = g
                .edges()
                .iter()
                .copied()
                .filter(|e| member_mask[e.src] && member_mask[e.dst])
                .collect();
            got.sort_unstable();
            want.sort_unstable();
            prop_assert_eq!(got, want);
        }
    }
}

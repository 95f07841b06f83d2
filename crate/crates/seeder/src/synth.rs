//! Deterministic synthetic benchmark generator: a typed KG with planted
//! multi-hop compositional answers, a hash-based pseudo-embedder, and
//! query/answer files in the exact formats the loaders read.
//!
//! Queries are built so that dense retrieval finds the *start* entity (the
//! query text shares its tokens) but cannot find the *answers* (they share
//! no tokens with the query and sit 2-3 relation hops away). The planted
//! relation sequence is spelled out in the query text, so relation-aware
//! methods have a usable signal.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{standard_normal, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{load_graph_opts, save_graph, GraphManifest, LoadOptions, NodeId, TypedGraph};

/// One typed relation with its out-degree range per source node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationSchema {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    pub out_deg_min: usize,
    pub out_deg_max: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub type_names: Vec<String>,
    pub nodes_per_type: Vec<usize>,
    pub relations: Vec<RelationSchema>,
    /// Planted relation sequences; every query follows one of them.
    pub motifs: Vec<Vec<usize>>,
    /// Scales the out-degree of non-motif (distractor) relations.
    pub distractor_density: f64,
    pub emb_dim: usize,
    /// Gaussian noise mixed into node embeddings before normalization.
    pub noise: f64,
    pub n_queries: usize,
    /// Queries are resampled until the answer set has 1..=answers_max nodes.
    pub answers_max: usize,
    /// Train/val/test proportions.
    pub split: (f64, f64, f64),
    pub seed: u64,
}

impl SynthConfig {
    /// The default benchmark: 2,000 nodes, 4 types, 6 relations,
    /// 600 queries.
    pub fn default_benchmark(seed: u64) -> Self {
        SynthConfig {
            type_names: vec![
                "topic".into(),
                "mechanism".into(),
                "process".into(),
                "product".into(),
            ],
            nodes_per_type: vec![500, 500, 500, 500],
            relations: vec![
                RelationSchema {
                    name: "linked to".into(),
                    src_type: 0,
                    dst_type: 1,
                    out_deg_min: 1,
                    out_deg_max: 2,
                },
                RelationSchema {
                    name: "involves main".into(),
                    src_type: 1,
                    dst_type: 2,
                    out_deg_min: 1,
                    out_deg_max: 2,
                },
                RelationSchema {
                    name: "yields main".into(),
                    src_type: 2,
                    dst_type: 3,
                    out_deg_min: 1,
                    out_deg_max: 2,
                },
                RelationSchema {
                    name: "adjacent cluster".into(),
                    src_type: 0,
                    dst_type: 0,
                    out_deg_min: 2,
                    out_deg_max: 4,
                },
                // distractors whose names overlap the motif relations
                RelationSchema {
                    name: "involves alt".into(),
                    src_type: 1,
                    dst_type: 3,
                    out_deg_min: 1,
                    out_deg_max: 3,
                },
                RelationSchema {
                    name: "yields alt".into(),
                    src_type: 2,
                    dst_type: 2,
                    out_deg_min: 1,
                    out_deg_max: 3,
                },
            ],
            motifs: vec![vec![0, 1], vec![0, 1, 2]],
            distractor_density: 1.0,
            emb_dim: 64,
            noise: 0.1,
            n_queries: 600,
            answers_max: 5,
            split: (0.55, 0.20, 0.25),
            seed,
        }
    }

    /// A smaller instance of the same family for fast multi-seed runs.
    pub fn small_benchmark(seed: u64) -> Self {
        let mut cfg = Self::default_benchmark(seed);
        cfg.nodes_per_type = vec![200, 200, 200, 200];
        cfg.n_queries = 240;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.type_names.len() != self.nodes_per_type.len() {
            return Err(Error::Config(format!(
                "{} type names for {} node-count entries",
                self.type_names.len(),
                self.nodes_per_type.len()
            )));
        }
        if self.nodes_per_type.iter().any(|&n| n == 0) {
            return Err(Error::Config("every type needs at least one node".into()));
        }
        for (i, r) in self.relations.iter().enumerate() {
            if r.src_type >= self.type_names.len() || r.dst_type >= self.type_names.len() {
                return Err(Error::Config(format!(
                    "relation {i} ({:?}) references a missing type",
                    r.name
                )));
            }
            if r.out_deg_min > r.out_deg_max {
                return Err(Error::Config(format!(
                    "relation {i} has inverted degree range"
                )));
            }
        }
        for m in &self.motifs {
            if m.is_empty() {
                return Err(Error::Config("empty motif".into()));
            }
            for &r in m {
                if r >= self.relations.len() {
                    return Err(Error::Config(format!("motif references relation {r}")));
                }
            }
            // motif must chain type-compatibly
            for w in m.windows(2) {
                if self.relations[w[0]].dst_type != self.relations[w[1]].src_type {
                    return Err(Error::Config(format!(
                        "motif {m:?} breaks the type chain between {} and {}",
                        w[0], w[1]
                    )));
                }
            }
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 1)".into()));
        }
        let total = self.split.0 + self.split.1 + self.split.2;
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("split sums to {total}, not 1")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pseudo-embedder
// ---------------------------------------------------------------------------

/// FNV-1a, fixed across platforms and releases so generated datasets are
/// stable byte for byte.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == '_')
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Unit Gaussian direction derived from a token's hash.
pub fn token_vec(token: &str, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(token));
    (0..dim).map(|_| standard_normal(&mut rng) as f32).collect()
}

/// Deterministic text embedding: the unit-normalized mean of per-token
/// hash vectors, optionally perturbed by Gaussian noise before
/// normalization.
pub fn pseudo_embed(
    text: &str,
    dim: usize,
    noise: f64,
    noise_rng: Option<&mut ChaCha8Rng>,
) -> Result<Vec<f32>> {
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(Error::Data(format!("cannot embed empty text {text:?}")));
    }
    let mut acc = vec![0.0f64; dim];
    for t in &tokens {
        for (a, x) in acc.iter_mut().zip(token_vec(t, dim)) {
            *a += x as f64;
        }
    }
    for a in acc.iter_mut() {
        *a /= tokens.len() as f64;
    }
    if noise > 0.0 {
        if let Some(rng) = noise_rng {
            for a in acc.iter_mut() {
                *a += noise * standard_normal(rng);
            }
        }
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::Data(format!("text {text:?} embeds to zero")));
    }
    Ok(acc.iter().map(|&x| (x / norm) as f32).collect())
}

// ---------------------------------------------------------------------------
// Graph + query generation
// ---------------------------------------------------------------------------

/// A generated KG with its embedding tables.
pub struct SynthKg {
    pub graph: TypedGraph,
    pub node_emb: EmbeddingTable,
    pub rel_emb: EmbeddingTable,
    /// Per-node descriptive tokens (without the type token), used to build
    /// query texts that are lexically close to the start entity.
    node_tokens: Vec<Vec<String>>,
}

pub fn gen_synthetic_kg(cfg: &SynthConfig) -> Result<SynthKg> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // theme vocabulary per type: shared tokens that create intra-type
    // lexical similarity
    let theme_pool: Vec<Vec<String>> = (0..cfg.type_names.len())
        .map(|t| (0..20).map(|i| format!("theme{t}x{i}")).collect())
        .collect();

    let mut nodes: Vec<(String, usize, String)> = Vec::new();
    let mut node_tokens: Vec<Vec<String>> = Vec::new();
    let mut type_members: Vec<Vec<NodeId>> = vec![Vec::new(); cfg.type_names.len()];
    for (t, &count) in cfg.nodes_per_type.iter().enumerate() {
        for i in 0..count {
            let id = nodes.len();
            let unique = format!("{}{:04}", &cfg.type_names[t], i);
            let themes: Vec<String> = (0..2)
                .map(|_| theme_pool[t][rng.gen_range(0..theme_pool[t].len())].clone())
                .collect();
            let text = format!("{} {} {} {}", cfg.type_names[t], unique, themes[0], themes[1]);
            let mut toks = vec![unique];
            toks.extend(themes);
            node_tokens.push(toks);
            nodes.push((format!("n{id}"), t, text));
            type_members[t].push(id);
        }
    }

    // edges per relation schema
    let motif_rels: BTreeSet<usize> = cfg.motifs.iter().flatten().copied().collect();
    let mut edges: Vec<(NodeId, usize, NodeId)> = Vec::new();
    for (r, schema) in cfg.relations.iter().enumerate() {
        let scale = if motif_rels.contains(&r) {
            1.0
        } else {
            cfg.distractor_density
        };
        for &src in &type_members[schema.src_type] {
            let base = rng.gen_range(schema.out_deg_min..=schema.out_deg_max);
            let deg = ((base as f64) * scale).round() as usize;
            let mut used = BTreeSet::new();
            for _ in 0..deg {
                let dst = type_members[schema.dst_type][rng.gen_range(0..type_members[schema.dst_type].len())];
                if dst != src && used.insert(dst) {
                    edges.push((src, r, dst));
                }
            }
        }
    }

    let graph = TypedGraph::from_parts(
        cfg.type_names.clone(),
        cfg.relations.iter().map(|r| r.name.clone()).collect(),
        nodes,
        edges,
    )?;

    // embeddings: node text embeddings with noise, relation name embeddings
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut node_data = Vec::with_capacity(graph.node_count() * cfg.emb_dim);
    for rec in graph.nodes() {
        node_data.extend(pseudo_embed(
            &rec.text,
            cfg.emb_dim,
            cfg.noise,
            Some(&mut noise_rng),
        )?);
    }
    let node_emb = EmbeddingTable::from_rows(cfg.emb_dim, node_data, true)?;

    let mut rel_data = Vec::with_capacity(graph.relation_count() * cfg.emb_dim);
    for name in graph.relations() {
        rel_data.extend(pseudo_embed(name, cfg.emb_dim, 0.0, None)?);
    }
    let rel_emb = EmbeddingTable::from_rows(cfg.emb_dim, rel_data, true)?;

    Ok(SynthKg {
        graph,
        node_emb,
        rel_emb,
        node_tokens,
    })
}

/// All nodes reachable from `start` by following exactly the relation
/// sequence `rels`.
pub fn relation_reachable(graph: &TypedGraph, start: NodeId, rels: &[usize]) -> BTreeSet<NodeId> {
    let mut frontier: BTreeSet<NodeId> = BTreeSet::from([start]);
    for &r in rels {
        let mut next = BTreeSet::new();
        for &v in &frontier {
            for &(rel, dst) in graph.out_adj(v) {
                if rel == r {
                    next.insert(dst);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    frontier
}

/// The on-disk record for one query, JSON-lines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    pub embedding_row: usize,
    pub answer_external_ids: Vec<String>,
}

/// A query with resolved internal node ids.
#[derive(Debug, Clone)]
pub struct ResolvedQuery {
    pub id: String,
    pub embedding_row: usize,
    pub answers: Vec<NodeId>,
}

pub fn resolve_queries(records: &[QueryRecord], graph: &TypedGraph) -> Result<Vec<ResolvedQuery>> {
    records
        .iter()
        .map(|r| {
            let answers = r
                .answer_external_ids
                .iter()
                .map(|ext| {
                    graph.resolve_external(ext).ok_or_else(|| {
                        Error::Integrity(format!(
                            "query {:?} references unknown node {ext:?}",
                            r.query_id
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ResolvedQuery {
                id: r.query_id.clone(),
                embedding_row: r.embedding_row,
                answers,
            })
        })
        .collect()
}

/// Generate planted queries. Each query picks a motif and a start entity,
/// requires a nonempty answer set of at most `answers_max` nodes, and
/// renders a text that shares tokens with the start entity and the motif
/// relation names but not with any answer node.
pub fn gen_queries(
    kg: &SynthKg,
    cfg: &SynthConfig,
    count: usize,
) -> Result<(Vec<QueryRecord>, EmbeddingTable)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1234_5678_9abc_def0);
    let topics = &kg
        .graph
        .nodes()
        .iter()
        .filter(|n| n.type_id == cfg.relations[cfg.motifs[0][0]].src_type)
        .map(|n| n.id)
        .collect::<Vec<_>>();
    if topics.is_empty() {
        return Err(Error::Config("no start-type nodes to plant queries on".into()));
    }

    let mut records = Vec::with_capacity(count);
    let mut emb_data = Vec::with_capacity(count * cfg.emb_dim);
    let max_attempts = count * 200;
    let mut attempts = 0usize;
    while records.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(Error::Data(format!(
                "query planting failed: {} of {count} after {attempts} attempts",
                records.len()
            )));
        }
        let motif = &cfg.motifs[rng.gen_range(0..cfg.motifs.len())];
        let start = topics[rng.gen_range(0..topics.len())];
        let answers = relation_reachable(&kg.graph, start, motif);
        if answers.is_empty() || answers.len() > cfg.answers_max || answers.contains(&start) {
            continue;
        }

        // Query text design: the start entity's own tokens appear twice
        // (dense retrieval must find the seed), the motif relation names
        // appear twice (relation-aware expansion gets a signal), and the
        // answer type is referred to by a pluralized word that no node
        // text contains (dense retrieval must not find the answers).
        let dst_type = cfg.relations[*motif.last().unwrap()].dst_type;
        let rel_names: Vec<&str> = motif.iter().map(|&r| cfg.relations[r].name.as_str()).collect();
        let rel_part = rel_names.join(" then ");
        let start_part = format!(
            "{} {}",
            cfg.type_names[kg.graph.node(start).type_id],
            kg.node_tokens[start].join(" ")
        );
        let text = format!(
            "which {}s {rel_part} {rel_part} about {start_part} {}",
            cfg.type_names[dst_type],
            kg.node_tokens[start].join(" "),
        );
        let qid = format!("q{:04}", records.len());
        let row = records.len();
        emb_data.extend(pseudo_embed(&text, cfg.emb_dim, 0.0, None)?);
        records.push(QueryRecord {
            query_id: qid,
            text,
            embedding_row: row,
            answer_external_ids: answers
                .iter()
                .map(|&a| kg.graph.external_id(a).to_string())
                .collect(),
        });
    }
    let table = EmbeddingTable::from_rows(cfg.emb_dim, emb_data, true)?;
    Ok((records, table))
}

// ---------------------------------------------------------------------------
// Dataset directory layout
// ---------------------------------------------------------------------------
//
//   nodes.tsv, edges.tsv, manifest.json        (graph-store formats)
//   node_embeddings.emb, relation_embeddings.emb, query_embeddings.emb
//   queries_train.jsonl, queries_val.jsonl, queries_test.jsonl
//   synth_config.json                          (full generator config)

pub struct Dataset {
    pub graph: TypedGraph,
    pub node_emb: EmbeddingTable,
    pub rel_emb: EmbeddingTable,
    pub query_emb: EmbeddingTable,
    pub train: Vec<ResolvedQuery>,
    pub val: Vec<ResolvedQuery>,
    pub test: Vec<ResolvedQuery>,
}

fn write_queries(path: &Path, records: &[QueryRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Generate and write a full dataset directory; returns the loaded form.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Dataset> {
    fs::create_dir_all(dir)?;
    let kg = gen_synthetic_kg(cfg)?;
    let (records, query_emb) = gen_queries(&kg, cfg, cfg.n_queries)?;

    // deterministic shuffled split
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5555_aaaa_5555_aaaa);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (records.len() as f64 * cfg.split.0).round() as usize;
    let n_val = (records.len() as f64 * cfg.split.1).round() as usize;
    let pick = |idx: &[usize]| -> Vec<QueryRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    };
    let train = pick(&order[..n_train]);
    let val = pick(&order[n_train..(n_train + n_val).min(order.len())]);
    let test = pick(&order[(n_train + n_val).min(order.len())..]);

    save_graph(
        &kg.graph,
        &dir.join("nodes.tsv"),
        &dir.join("edges.tsv"),
        &dir.join("manifest.json"),
    )?;
    kg.node_emb.save(&dir.join("node_embeddings.emb"))?;
    kg.rel_emb.save(&dir.join("relation_embeddings.emb"))?;
    query_emb.save(&dir.join("query_embeddings.emb"))?;
    write_queries(&dir.join("queries_train.jsonl"), &train)?;
    write_queries(&dir.join("queries_val.jsonl"), &val)?;
    write_queries(&dir.join("queries_test.jsonl"), &test)?;
    fs::write(
        dir.join("synth_config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    Ok(Dataset {
        train: resolve_queries(&train, &kg.graph)?,
        val: resolve_queries(&val, &kg.graph)?,
        test: resolve_queries(&test, &kg.graph)?,
        graph: kg.graph,
        node_emb: kg.node_emb,
        rel_emb: kg.rel_emb,
        query_emb,
    })
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let opts = LoadOptions {
            manifest: Some(dir.join("manifest.json")),
            dedup_edges: false,
        };
        let graph = load_graph_opts(&dir.join("nodes.tsv"), &dir.join("edges.tsv"), &opts)?;
        let node_emb =
            crate::embed::load_embeddings(&dir.join("node_embeddings.emb"), graph.node_count(), false)?;
        let rel_emb = crate::embed::load_embeddings(
            &dir.join("relation_embeddings.emb"),
            graph.relation_count(),
            false,
        )?;
        let query_emb = crate::embed::load_embeddings_any(&dir.join("query_embeddings.emb"), false)?;
        let train = resolve_queries(&read_queries(&dir.join("queries_train.jsonl"))?, &graph)?;
        let val = resolve_queries(&read_queries(&dir.join("queries_val.jsonl"))?, &graph)?;
        let test = resolve_queries(&read_queries(&dir.join("queries_test.jsonl"))?, &graph)?;
        Ok(Dataset {
            graph,
            node_emb,
            rel_emb,
            query_emb,
            train,
            val,
            test,
        })
    }

    pub fn all_queries(&self) -> impl Iterator<Item = &ResolvedQuery> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn graph_manifest(&self) -> GraphManifest {
        self.graph.manifest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::cosine;
    use std::collections::HashSet;

    fn tiny_config(seed: u64) -> SynthConfig {
        let mut cfg = SynthConfig::default_benchmark(seed);
        cfg.nodes_per_type = vec![60, 60, 60, 60];
        cfg.n_queries = 30;
        cfg
    }

    #[test]
    fn same_text_same_embedding_at_zero_noise() {
        let a = pseudo_embed("alpha beta gamma", 32, 0.0, None).unwrap();
        let b = pseudo_embed("alpha beta gamma", 32, 0.0, None).unwrap();
        assert_eq!(a, b);
        let c = pseudo_embed("alpha beta delta", 32, 0.0, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn empty_text_is_error() {
        assert!(pseudo_embed("  ", 16, 0.0, None).is_err());
    }

    #[test]
    fn edges_respect_schema_types() {
        let cfg = tiny_config(3);
        let kg = gen_synthetic_kg(&cfg).unwrap();
        for e in kg.graph.edges() {
            let schema = &cfg.relations[e.rel];
            assert_eq!(kg.graph.node(e.src).type_id, schema.src_type);
            assert_eq!(kg.graph.node(e.dst).type_id, schema.dst_type);
        }
    }

    #[test]
    fn same_type_pairs_are_more_similar_than_cross_type() {
        let cfg = tiny_config(5);
        let kg = gen_synthetic_kg(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = kg.graph.node_count();
        let mut same = Vec::new();
        let mut cross = Vec::new();
        while same.len() < 1000 || cross.len() < 1000 {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a == b {
                continue;
            }
            let c = cosine(kg.node_emb.row(a), kg.node_emb.row(b));
            if kg.graph.node(a).type_id == kg.graph.node(b).type_id {
                same.push(c);
            } else {
                cross.push(c);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&same) > mean(&cross) + 0.05,
            "same {} cross {}",
            mean(&same),
            mean(&cross)
        );
    }

    #[test]
    fn planted_paths_exist_and_are_within_motif_length() {
        let cfg = tiny_config(7);
        let kg = gen_synthetic_kg(&cfg).unwrap();
        let (records, _emb) = gen_queries(&kg, &cfg, 30).unwrap();
        let max_len = cfg.motifs.iter().map(|m| m.len()).max().unwrap();
        for r in &records {
            let answers: Vec<NodeId> = r
                .answer_external_ids
                .iter()
                .map(|e| kg.graph.resolve_external(e).unwrap())
                .collect();
            assert!(!answers.is_empty() && answers.len() <= cfg.answers_max);

            // replay: some motif from some start entity reproduces exactly
            // this answer set
            let start_tok = &kg.node_tokens[0]; // placeholder to silence lints
            let _ = start_tok;
            let mut reproduced = false;
            for motif in &cfg.motifs {
                for node in kg.graph.nodes() {
                    if node.type_id != cfg.relations[motif[0]].src_type {
                        continue;
                    }
                    if !r.text.contains(&kg.node_tokens[node.id][0]) {
                        continue;
                    }
                    let reach = relation_reachable(&kg.graph, node.id, motif);
                    if reach == answers.iter().copied().collect() {
                        reproduced = true;
                        // answers within T hops of the start entity
                        assert!(motif.len() <= max_len);
                    }
                }
            }
            assert!(reproduced, "query {} has no replayable plant", r.query_id);
        }
    }

    #[test]
    fn dense_hardness_margin() {
        let cfg = tiny_config(11);
        let kg = gen_synthetic_kg(&cfg).unwrap();
        let (records, qemb) = gen_queries(&kg, &cfg, 30).unwrap();
        let mut seed_sims = Vec::new();
        let mut ans_sims = Vec::new();
        for r in &records {
            let zq = qemb.row(r.embedding_row);
            // the start entity is the node whose unique token the text contains
            let start = kg
                .graph
                .nodes()
                .iter()
                .find(|n| n.type_id == 0 && r.text.contains(&kg.node_tokens[n.id][0]))
                .unwrap()
                .id;
            seed_sims.push(cosine(zq, kg.node_emb.row(start)));
            for ext in &r.answer_external_ids {
                let a = kg.graph.resolve_external(ext).unwrap();
                ans_sims.push(cosine(zq, kg.node_emb.row(a)));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m_seed = mean(&seed_sims);
        let m_ans = mean(&ans_sims);
        assert!(
            m_ans < m_seed - 0.3,
            "answer sim {m_ans:.3} vs seed sim {m_seed:.3}"
        );
        assert!(m_ans < 0.3, "answers must look dissimilar, got {m_ans:.3}");
    }

    #[test]
    fn dense_misses_answers_on_most_queries() {
        let mut cfg = tiny_config(13);
        cfg.nodes_per_type = vec![150, 150, 150, 150];
        let kg = gen_synthetic_kg(&cfg).unwrap();
        let (records, qemb) = gen_queries(&kg, &cfg, 30).unwrap();
        let mut missed = 0usize;
        for r in &records {
            let zq = qemb.row(r.embedding_row);
            let top = crate::embed::cosine_topk(&kg.node_emb, zq, 20, &HashSet::new()).unwrap();
            let found = r.answer_external_ids.iter().any(|ext| {
                let a = kg.graph.resolve_external(ext).unwrap();
                top.iter().any(|&(v, _)| v == a)
            });
            if !found {
                missed += 1;
            }
        }
        assert!(
            missed as f64 / records.len() as f64 >= 0.9,
            "dense missed only {missed}/{}",
            records.len()
        );
    }

    #[test]
    fn generation_is_byte_identical_per_seed() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg = tiny_config(17);
        generate_dataset(&cfg, dir_a.path()).unwrap();
        generate_dataset(&cfg, dir_b.path()).unwrap();
        for name in [
            "nodes.tsv",
            "edges.tsv",
            "manifest.json",
            "node_embeddings.emb",
            "relation_embeddings.emb",
            "query_embeddings.emb",
            "queries_train.jsonl",
            "queries_val.jsonl",
            "queries_test.jsonl",
            "synth_config.json",
        ] {
            let a = std::fs::read(dir_a.path().join(name)).unwrap();
            let b = std::fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "file {name} differs between runs");
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(19);
        let written = generate_dataset(&cfg, dir.path()).unwrap();
        let loaded = Dataset::load(dir.path()).unwrap();
        assert_eq!(written.graph.nodes(), loaded.graph.nodes());
        assert_eq!(written.graph.edges(), loaded.graph.edges());
        assert_eq!(written.node_emb.raw_data(), loaded.node_emb.raw_data());
        assert_eq!(written.train.len(), loaded.train.len());
        assert_eq!(written.val.len(), loaded.val.len());
        assert_eq!(written.test.len(), loaded.test.len());
        let total = loaded.train.len() + loaded.val.len() + loaded.test.len();
        assert_eq!(total, cfg.n_queries);
        // split proportions
        assert!((loaded.train.len() as f64 / total as f64 - 0.55).abs() < 0.05);
    }
}

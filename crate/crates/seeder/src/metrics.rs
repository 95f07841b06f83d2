//! Retrieval metrics, split evaluation over the implemented retrieval
//! methods, and the multi-seed stability report.
//!
//! `Hit@k` and `Recall@k` are computed on the top-k prefix of the ranked
//! list; `Hit@Any` / `Recall@Any` on the full retrieved set, independent
//! of ordering. The MRR term of a query whose answers never appear in the
//! ranked list is 0.

use std::collections::{BTreeMap, HashSet};

use crate::embed::{cosine_topk, EmbeddingTable};
use crate::error::{Error, Result};
use crate::gnn::Model;
use crate::graph::{NodeId, TypedGraph};
use crate::khop::{extract_query_subgraph, khop_filter, ExpansionBudget};
use crate::policy::{run_inference, RetrievalOutput, RetrieveConfig};
use crate::synth::ResolvedQuery;

/// Per-query metric row.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub hit: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub hit_any: f64,
    pub recall_any: f64,
}

pub const DEFAULT_HIT_KS: [usize; 2] = [1, 5];
pub const DEFAULT_RECALL_K: usize = 20;

/// Metrics for one query. `ranked` must be drawn from `full_set`;
/// `answers` must be nonempty (empty-answer queries are the caller's job
/// to skip and count).
pub fn compute_metrics(
    ranked: &[NodeId],
    full_set: &[NodeId],
    answers: &HashSet<NodeId>,
    hit_ks: &[usize],
    recall_ks: &[usize],
) -> Result<EvalRow> {
    if answers.is_empty() {
        return Err(Error::Argument("empty answer set".into()));
    }
    let full: HashSet<NodeId> = full_set.iter().copied().collect();
    if let Some(bad) = ranked.iter().find(|v| !full.contains(v)) {
        return Err(Error::Argument(format!(
            "ranked node {bad} is not in the retrieved set"
        )));
    }

    let mut hit = BTreeMap::new();
    for &k in hit_ks {
        let any = ranked.iter().take(k).any(|v| answers.contains(v));
        hit.insert(k, if any { 1.0 } else { 0.0 });
    }
    let mut recall = BTreeMap::new();
    for &k in recall_ks {
        let found = ranked.iter().take(k).filter(|v| answers.contains(v)).count();
        recall.insert(k, found as f64 / answers.len() as f64);
    }
    let mrr = ranked
        .iter()
        .position(|v| answers.contains(v))
        .map(|i| 1.0 / (i + 1) as f64)
        .unwrap_or(0.0);
    let any_found = full_set.iter().filter(|v| answers.contains(v)).count();
    Ok(EvalRow {
        hit,
        recall,
        mrr,
        hit_any: if any_found > 0 { 1.0 } else { 0.0 },
        recall_any: any_found as f64 / answers.len() as f64,
    })
}

/// Mean metrics over a split.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalSummary {
    pub n_queries: usize,
    pub n_skipped: usize,
    pub hit1: f64,
    pub hit5: f64,
    pub mrr: f64,
    pub recall20: f64,
    pub hit_any: f64,
    pub recall_any: f64,
}

impl EvalSummary {
    pub fn from_rows(rows: &[EvalRow], n_skipped: usize) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        EvalSummary {
            n_queries: rows.len(),
            n_skipped,
            hit1: mean(&|r| r.hit.get(&1).copied().unwrap_or(0.0)),
            hit5: mean(&|r| r.hit.get(&5).copied().unwrap_or(0.0)),
            mrr: mean(&|r| r.mrr),
            recall20: mean(&|r| r.recall.get(&20).copied().unwrap_or(0.0)),
            hit_any: mean(&|r| r.hit_any),
            recall_any: mean(&|r| r.recall_any),
        }
    }

    pub fn tsv_header() -> &'static str {
        "method\thit@1\thit@5\tmrr\trecall@20\thit@any\trecall@any\tn"
    }

    pub fn tsv_row(&self, label: &str) -> String {
        format!(
            "{label}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}",
            self.hit1, self.hit5, self.mrr, self.recall20, self.hit_any, self.recall_any,
            self.n_queries
        )
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "hit1" => Some(self.hit1),
            "hit5" => Some(self.hit5),
            "mrr" => Some(self.mrr),
            "recall20" => Some(self.recall20),
            "hit_any" => Some(self.hit_any),
            "recall_any" => Some(self.recall_any),
            _ => None,
        }
    }
}

/// Everything a retrieval method needs to answer a query.
pub struct EvalContext<'a> {
    pub graph: &'a TypedGraph,
    pub node_emb: &'a EmbeddingTable,
    pub rel_emb: &'a EmbeddingTable,
    pub query_emb: &'a EmbeddingTable,
}

impl EvalContext<'_> {
    pub fn query_vec(&self, q: &ResolvedQuery) -> &[f32] {
        self.query_emb.row(q.embedding_row)
    }
}

/// A first-stage retrieval method under evaluation.
pub trait Retriever {
    fn name(&self) -> &str;
    fn retrieve(&self, ctx: &EvalContext<'_>, q: &ResolvedQuery) -> Result<RetrievalOutput>;
}

/// Pure dense retrieval: top-`budget` nodes by query cosine.
pub struct DenseRetriever {
    pub budget: usize,
}

impl Retriever for DenseRetriever {
    fn name(&self) -> &str {
        "dense"
    }

    fn retrieve(&self, ctx: &EvalContext<'_>, q: &ResolvedQuery) -> Result<RetrievalOutput> {
        let ranked = cosine_topk(ctx.node_emb, ctx.query_vec(q), self.budget, &HashSet::new())?;
        let ranked: Vec<(NodeId, f64)> = ranked.into_iter().map(|(v, s)| (v, s as f64)).collect();
        let set: Vec<NodeId> = ranked.iter().map(|&(v, _)| v).collect();
        Ok(RetrievalOutput {
            seeds: set.clone(),
            final_set: set,
            ranked,
        })
    }
}

/// Frontier-filtered expansion from dense seeds; the output order (seeds,
/// then hop/score order) is the ranking.
pub struct KhopRetriever {
    pub k0: usize,
    pub budgets: Vec<usize>,
}

impl Retriever for KhopRetriever {
    fn name(&self) -> &str {
        "khop_filter"
    }

    fn retrieve(&self, ctx: &EvalContext<'_>, q: &ResolvedQuery) -> Result<RetrievalOutput> {
        let zq = ctx.query_vec(q);
        let seeds: Vec<NodeId> = cosine_topk(ctx.node_emb, zq, self.k0, &HashSet::new())?
            .into_iter()
            .map(|(v, _)| v)
            .collect();
        let budget = ExpansionBudget::new(self.budgets.clone())?;
        let out = khop_filter(ctx.graph, ctx.node_emb, ctx.rel_emb, zq, &seeds, &budget)?;
        Ok(RetrievalOutput {
            ranked: out.iter().map(|&v| (v, 0.0)).collect(),
            final_set: out,
            seeds,
        })
    }
}

/// The full learned pipeline.
pub struct SeederRetriever<'m> {
    pub model: &'m Model,
    pub config: RetrieveConfig,
}

impl Retriever for SeederRetriever<'_> {
    fn name(&self) -> &str {
        "seeder"
    }

    fn retrieve(&self, ctx: &EvalContext<'_>, q: &ResolvedQuery) -> Result<RetrievalOutput> {
        run_inference(
            ctx.query_vec(q),
            ctx.graph,
            ctx.node_emb,
            ctx.rel_emb,
            self.model,
            &self.config,
        )
    }
}

/// Ablation: no learned expansion; the scoring head reranks the whole
/// bounded subgraph extracted by frontier filtering.
pub struct RerankRetriever<'m> {
    pub model: &'m Model,
    pub k0: usize,
    pub budgets: Vec<usize>,
    pub topk: usize,
}

impl Retriever for RerankRetriever<'_> {
    fn name(&self) -> &str {
        "rerank_only"
    }

    fn retrieve(&self, ctx: &EvalContext<'_>, q: &ResolvedQuery) -> Result<RetrievalOutput> {
        let zq = ctx.query_vec(q);
        let seeds: Vec<NodeId> = cosine_topk(ctx.node_emb, zq, self.k0, &HashSet::new())?
            .into_iter()
            .map(|(v, _)| v)
            .collect();
        let budget = ExpansionBudget::new(self.budgets.clone())?;
        let view = extract_query_subgraph(ctx.graph, ctx.node_emb, ctx.rel_emb, zq, &seeds, &budget)?;
        let enc = self.model.encode(&view, zq, ctx.node_emb)?;
        let scores = self.model.node_scores(&enc, zq)?;
        let mut ranked: Vec<(NodeId, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(self.topk);
        Ok(RetrievalOutput {
            ranked,
            final_set: view.members().to_vec(),
            seeds,
        })
    }
}

/// Evaluate one retriever over a query split. Queries with empty answer
/// sets are skipped and counted. Deterministic for deterministic
/// retrievers.
pub fn evaluate_split(
    retriever: &dyn Retriever,
    ctx: &EvalContext<'_>,
    queries: &[ResolvedQuery],
) -> Result<EvalSummary> {
    let mut rows = Vec::with_capacity(queries.len());
    let mut skipped = 0usize;
    for q in queries {
        if q.answers.is_empty() {
            skipped += 1;
            continue;
        }
        let out = retriever.retrieve(ctx, q)?;
        let ranked: Vec<NodeId> = out.ranked.iter().map(|&(v, _)| v).collect();
        let answers: HashSet<NodeId> = q.answers.iter().copied().collect();
        rows.push(compute_metrics(
            &ranked,
            &out.final_set,
            &answers,
            &DEFAULT_HIT_KS,
            &[DEFAULT_RECALL_K],
        )?);
    }
    Ok(EvalSummary::from_rows(&rows, skipped))
}

// ---------------------------------------------------------------------------
// Correlations for the multi-seed stability harness
// ---------------------------------------------------------------------------

/// Pearson, Spearman, and Kendall coefficients over paired observations.
/// `None` marks an undefined coefficient (a constant series).
#[derive(Debug, Clone, serde::Serialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Average ranks, with ties sharing their mean rank.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Kendall tau-b (tie-corrected).
pub fn kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return None;
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut ties_x = 0i64;
    let mut ties_y = 0i64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                ties_x += 1;
                ties_y += 1;
            } else if dx == 0.0 {
                ties_x += 1;
            } else if dy == 0.0 {
                ties_y += 1;
            } else if dx * dy > 0.0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let denom = (((n0 - ties_x) as f64) * ((n0 - ties_y) as f64)).sqrt();
    if denom <= 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom)
}

pub fn correlations(x: &[f64], y: &[f64]) -> CorrelationReport {
    CorrelationReport {
        n: x.len(),
        pearson: pearson(x, y),
        spearman: spearman(x, y),
        kendall: kendall(x, y),
    }
}

/// Validation/test metric pairs observed at one checkpoint.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointEval {
    pub val: EvalSummary,
    pub test: EvalSummary,
}

/// Correlate validation against test metrics over all `(seed, epoch)`
/// checkpoints of a multi-seed run.
pub fn stability_report(
    runs: &[Vec<CheckpointEval>],
) -> Result<BTreeMap<String, CorrelationReport>> {
    let total: usize = runs.iter().map(|r| r.len()).sum();
    if runs.len() < 2 || total < 4 {
        return Err(Error::Argument(
            "stability report needs at least 2 seeds and 2 epochs".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for metric in ["hit1", "hit5", "mrr", "recall20"] {
        let mut val = Vec::with_capacity(total);
        let mut test = Vec::with_capacity(total);
        for run in runs {
            for ck in run {
                val.push(ck.val.metric(metric).unwrap());
                test.push(ck.test.metric(metric).unwrap());
            }
        }
        out.insert(metric.to_string(), correlations(&val, &test));
    }
    Ok(out)
}

//! The expansion loop: iterative frontier scoring with stochastic
//! Gumbel-top-k selection during training and greedy top-k at inference.
//!
//! Sampling perturbs `l(u)/tau` with Gumbel(0,1) noise and takes the top
//! `k`, which draws an ordered sample without replacement from the
//! softmax of `l/tau`; the stored log-probability is the matching
//! sequential softmax factorization, so REINFORCE sees the exact density
//! of what was sampled. Nodes already selected are never candidates.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorId};
use crate::embed::{cosine_topk, dot, EmbeddingTable};
use crate::error::{Error, Result};
use crate::gnn::{ForwardCtx, Model};
use crate::graph::{NodeId, SubgraphView, TypedGraph};
use crate::khop::{extract_query_subgraph, ExpansionBudget};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Stochastic,
    Greedy,
}

/// Per-step selection sizes, frontier caps, and sampling temperature.
#[derive(Debug, Clone)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub mode: SampleMode,
    /// `c_t`: how many frontier nodes to add per step; the horizon is the
    /// length of this list.
    pub expansion_sizes: Vec<usize>,
    /// Frontier kept per step before GNN scoring (by query cosine).
    pub frontier_caps: Vec<usize>,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        if self.expansion_sizes.is_empty() {
            return Err(Error::Argument("need at least one expansion step".into()));
        }
        if self.frontier_caps.len() != self.expansion_sizes.len() {
            return Err(Error::Argument(format!(
                "{} frontier caps for {} expansion steps",
                self.frontier_caps.len(),
                self.expansion_sizes.len()
            )));
        }
        for (cap, c) in self.frontier_caps.iter().zip(&self.expansion_sizes) {
            if cap < c {
                return Err(Error::Argument(format!(
                    "frontier cap {cap} below expansion size {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.expansion_sizes.len()
    }
}

/// One recorded expansion step.
#[derive(Debug, Clone)]
pub struct TrajStep {
    pub frontier: Vec<NodeId>,
    pub selected: Vec<NodeId>,
    pub logprob: f64,
}

/// One rollout: the selection sequence and final set for a query.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub steps: Vec<TrajStep>,
    pub final_set: Vec<NodeId>,
    pub logprob: f64,
    pub reward: Option<f64>,
}

/// Gumbel-top-k over a logit map: selects `min(k, n)` distinct nodes and
/// returns them in draw order with the log-probability of that order
/// under sequential without-replacement softmax sampling of `l/tau`.
pub fn gumbel_topk<R: Rng>(
    logits: &BTreeMap<NodeId, f64>,
    k: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<(Vec<NodeId>, f64)> {
    if temperature <= 0.0 {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if logits.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    let nodes: Vec<NodeId> = logits.keys().copied().collect();
    let scaled: Vec<f64> = logits.values().map(|&l| l / temperature).collect();
    let mut perturbed: Vec<(usize, f64)> = scaled
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, l + gumbel_noise(rng)))
        .collect();
    perturbed.sort_by(|a, b| b.1.total_cmp(&a.1).then(nodes[a.0].cmp(&nodes[b.0])));
    let take = k.min(nodes.len());
    let order: Vec<usize> = perturbed[..take].iter().map(|&(i, _)| i).collect();
    let lp = seq_logprob(&scaled, &order);
    Ok((order.iter().map(|&i| nodes[i]).collect(), lp))
}

fn gumbel_noise<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen::<f64>().clamp(1e-300, 1.0 - 1e-16);
    -(-u.ln()).ln()
}

fn seq_logprob(scaled_logits: &[f64], order: &[usize]) -> f64 {
    let mut removed = vec![false; scaled_logits.len()];
    let mut lp = 0.0;
    for &c in order {
        let mut m = f64::NEG_INFINITY;
        for (i, &l) in scaled_logits.iter().enumerate() {
            if !removed[i] && l > m {
                m = l;
            }
        }
        let z: f64 = scaled_logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| !removed[i])
            .map(|(_, &l)| (l - m).exp())
            .sum();
        lp += scaled_logits[c] - (m + z.ln());
        removed[c] = true;
    }
    lp
}

/// Greedy top-k by logit, ties by ascending node id.
pub fn greedy_topk(logits: &BTreeMap<NodeId, f64>, k: usize) -> Vec<NodeId> {
    let mut ranked: Vec<(NodeId, f64)> = logits.iter().map(|(&v, &l)| (v, l)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked.into_iter().map(|(v, _)| v).collect()
}

/// Mutable expansion state: the selected set `V_t` inside the bounded
/// subgraph.
pub struct ExpansionState<'g> {
    pub view: &'g SubgraphView<'g>,
    pub selected: Vec<NodeId>,
    selected_set: HashSet<NodeId>,
    pub step: usize,
}

impl<'g> ExpansionState<'g> {
    pub fn new(view: &'g SubgraphView<'g>, seeds: &[NodeId]) -> Result<Self> {
        let mut selected = Vec::new();
        let mut selected_set = HashSet::new();
        for &s in seeds {
            if !view.contains(s) {
                return Err(Error::Argument(format!(
                    "seed {s} is outside the bounded subgraph"
                )));
            }
            if selected_set.insert(s) {
                selected.push(s);
            }
        }
        if selected.is_empty() {
            return Err(Error::Argument("expansion needs at least one seed".into()));
        }
        Ok(ExpansionState {
            view,
            selected,
            selected_set,
            step: 0,
        })
    }

    /// `U_t`: out-neighbors of the selected set inside the subgraph, not
    /// yet selected, ascending by node id.
    pub fn frontier(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = Vec::new();
        let mut seen = HashSet::new();
        for &v in &self.selected {
            for (_, u) in self.view.out_neighbors_within(v) {
                if !self.selected_set.contains(&u) && seen.insert(u) {
                    out.push(u);
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn commit(&mut self, nodes: &[NodeId]) {
        for &u in nodes {
            if self.selected_set.insert(u) {
                self.selected.push(u);
            }
        }
        self.step += 1;
    }
}

/// Outcome of one expansion step. `logprob_id` is present only for
/// stochastic selections on a gradient tape.
pub struct StepOutcome {
    pub frontier: Vec<NodeId>,
    pub selected: Vec<NodeId>,
    pub logprob: f64,
    pub logprob_id: Option<TensorId>,
}

/// Run one expansion step on a tape: build `G_t` over `V_t` and the
/// (capped) frontier, encode, score the frontier with the expansion head,
/// select `c_t` nodes, and grow the state. Returns `None` on an empty
/// frontier (a no-op step).
pub fn expand_step(
    state: &mut ExpansionState<'_>,
    ctx: &mut ForwardCtx,
    tape: &mut Tape,
    feats: &EmbeddingTable,
    z_q: &[f32],
    sampler: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<StepOutcome>> {
    let t = state.step;
    if t >= sampler.horizon() {
        return Err(Error::Argument(format!(
            "step {t} beyond horizon {}",
            sampler.horizon()
        )));
    }
    let mut frontier = state.frontier();
    if frontier.is_empty() {
        state.step += 1;
        return Ok(None);
    }

    // cap the frontier by query cosine before GNN scoring
    let cap = sampler.frontier_caps[t];
    if frontier.len() > cap {
        let mut by_sim: Vec<(NodeId, f64)> = frontier
            .iter()
            .map(|&u| (u, dot(z_q, feats.row(u))))
            .collect();
        by_sim.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        frontier = by_sim[..cap].iter().map(|&(u, _)| u).collect();
        frontier.sort_unstable();
    }

    // G_t = bounded subgraph induced over V_t plus the capped frontier
    let mut members = state.selected.clone();
    members.extend(frontier.iter().copied());
    let g_t = state.view.parent().induced_subgraph(&members)?;
    let h = ctx.encode(tape, g_t.members(), &g_t.induced_edges_local(), feats, z_q)?;
    let frontier_local: Vec<usize> = frontier
        .iter()
        .map(|&u| g_t.local_index(u).expect("frontier node is a member"))
        .collect();
    let logits_id = ctx.policy_logits(tape, h, z_q, &frontier_local)?;
    let logit_vals = tape.value(logits_id).data.clone();

    let c_t = sampler.expansion_sizes[t].min(frontier.len());
    let outcome = match sampler.mode {
        SampleMode::Greedy => {
            let map: BTreeMap<NodeId, f64> = frontier
                .iter()
                .zip(&logit_vals)
                .map(|(&u, &l)| (u, l))
                .collect();
            let selected = greedy_topk(&map, c_t);
            StepOutcome {
                frontier,
                selected,
                logprob: 0.0,
                logprob_id: None,
            }
        }
        SampleMode::Stochastic => {
            // perturb in frontier order (ascending node id) for determinism
            let scaled: Vec<f64> = logit_vals
                .iter()
                .map(|&l| l / sampler.temperature)
                .collect();
            let mut perturbed: Vec<(usize, f64)> = scaled
                .iter()
                .map(|&l| l + gumbel_noise(rng))
                .enumerate()
                .collect();
            perturbed.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let order: Vec<usize> = perturbed[..c_t].iter().map(|&(i, _)| i).collect();
            let scaled_id = tape.scale(logits_id, 1.0 / sampler.temperature);
            let lp_id = tape.seq_topk_logprob(scaled_id, &order)?;
            let lp = tape.value(lp_id).item();
            StepOutcome {
                selected: order.iter().map(|&i| frontier[i]).collect(),
                frontier,
                logprob: lp,
                logprob_id: Some(lp_id),
            }
        }
    };
    state.commit(&outcome.selected);
    Ok(Some(outcome))
}

/// Full inference configuration for seed-and-expand retrieval.
#[derive(Debug, Clone)]
pub struct RetrieveConfig {
    /// Dense seed count `k_0`.
    pub k0: usize,
    /// Per-hop budgets for the bounded subgraph extraction.
    pub subgraph_budgets: Vec<usize>,
    pub subgraph_cap: Option<usize>,
    pub sampler: SamplerConfig,
    /// Final ranked list length.
    pub topk: usize,
}

impl RetrieveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k0 == 0 {
            return Err(Error::Argument("k0 must be at least 1".into()));
        }
        if self.topk == 0 {
            return Err(Error::Argument("topk must be at least 1".into()));
        }
        ExpansionBudget::with_cap(self.subgraph_budgets.clone(), self.subgraph_cap)?;
        self.sampler.validate()
    }
}

/// What a retrieval run produces: the ranked list plus the full final set
/// (for coverage metrics) and the seeds it started from.
#[derive(Debug, Clone)]
pub struct RetrievalOutput {
    pub ranked: Vec<(NodeId, f64)>,
    pub final_set: Vec<NodeId>,
    pub seeds: Vec<NodeId>,
}

/// Deterministic greedy seed-and-expand retrieval: cosine seeds, bounded
/// subgraph, `T` greedy expansion steps, then scoring-head ranking of the
/// final set.
pub fn run_inference(
    z_q: &[f32],
    graph: &TypedGraph,
    emb: &EmbeddingTable,
    rel_emb: &EmbeddingTable,
    model: &Model,
    config: &RetrieveConfig,
) -> Result<RetrievalOutput> {
    config.validate()?;
    let seeds: Vec<NodeId> = cosine_topk(emb, z_q, config.k0, &HashSet::new())?
        .into_iter()
        .map(|(v, _)| v)
        .collect();
    let budget = ExpansionBudget::with_cap(config.subgraph_budgets.clone(), config.subgraph_cap)?;
    let view = extract_query_subgraph(graph, emb, rel_emb, z_q, &seeds, &budget)?;

    let mut sampler = config.sampler.clone();
    sampler.mode = SampleMode::Greedy;
    let mut state = ExpansionState::new(&view, &seeds)?;
    let mut tape = Tape::new();
    let mut ctx = model.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in greedy mode
    for _ in 0..sampler.horizon() {
        expand_step(&mut state, &mut ctx, &mut tape, emb, z_q, &sampler, &mut rng)?;
    }

    let final_view = graph.induced_subgraph(&state.selected)?;
    let h = ctx.encode(
        &mut tape,
        final_view.members(),
        &final_view.induced_edges_local(),
        emb,
        z_q,
    )?;
    let scores_id = ctx.node_scores(&mut tape, h, z_q)?;
    let scores = tape.value(scores_id);
    let mut ranked: Vec<(NodeId, f64)> = final_view
        .members()
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, scores.data[i]))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(config.topk);
    Ok(RetrievalOutput {
        ranked,
        final_set: state.selected.clone(),
        seeds,
    })
}

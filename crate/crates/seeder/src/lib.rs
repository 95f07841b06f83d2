//! Seed-and-expand first-stage retrieval over typed knowledge graphs.
//!
//! The pipeline retrieves a compact, high-coverage candidate set from a
//! typed multigraph in three stages:
//!
//! 1. **Seeding** — dense cosine top-k against node embeddings picks a
//!    small core set ([`embed::cosine_topk`]).
//! 2. **Bounded expansion** — budgeted frontier filtering extracts a
//!    query-specific subgraph of a few hundred nodes ([`khop`]).
//! 3. **Learned expansion + scoring** — a query-conditioned sparse graph
//!    transformer ([`gnn`]) drives a stochastic expansion policy
//!    ([`policy`]) trained with group-centered REINFORCE plus a pairwise
//!    ranking loss ([`training`]), then ranks the final set.
//!
//! A [`theory`] module constructs relation-tracing graphs and coverage
//! instances that demonstrate, empirically, why single-shot dense scoring
//! fails on compositional queries and why purely greedy frontier expansion
//! can be arbitrarily bad.
//!
//! Everything is deterministic given a seed: the [`synth`] generator, the
//! samplers, and training all draw from counter-derived ChaCha streams.

pub mod autodiff;
pub mod cli;
pub mod embed;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod khop;
pub mod metrics;
pub mod policy;
pub mod synth;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use graph::{NodeId, RelId, SubgraphView, TypedGraph};

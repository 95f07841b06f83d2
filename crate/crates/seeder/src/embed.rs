//! Unit-norm embedding tables, dense cosine top-k, and linear
//! dimensionality reduction.
//!
//! Binary table format (little-endian): magic `EMB1`, u32 row count,
//! u32 dim, then `count * dim` f32 values row-major. The same format is
//! used for node, relation, and query tables.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::NodeId;

const MAGIC: &[u8; 4] = b"EMB1";

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingTable {
    /// Wrap row-major data. With `normalize`, every row is rescaled to unit
    /// L2 norm; an all-zero row is a data error in that mode.
    pub fn from_rows(dim: usize, data: Vec<f32>, normalize: bool) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at flat index {bad}"
            )));
        }
        let mut table = EmbeddingTable {
            dim,
            data,
            normalized: false,
        };
        if normalize {
            table.normalize_rows()?;
        }
        Ok(table)
    }

    fn normalize_rows(&mut self) -> Result<()> {
        let dim = self.dim;
        for (i, row) in self.data.chunks_mut(dim).enumerate() {
            let norm = l2_norm(row);
            if norm < 1e-12 {
                return Err(Error::Data(format!("cannot normalize all-zero row {i}")));
            }
            for x in row.iter_mut() {
                *x /= norm as f32;
            }
        }
        self.normalized = true;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks(self.dim)
    }

    pub fn raw_data(&self) -> &[f32] {
        &self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.data.len() * 4);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&(self.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for x in &self.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }
}

/// Load a table, checking the declared row count against `expected_count`.
pub fn load_embeddings(path: &Path, expected_count: usize, normalize: bool) -> Result<EmbeddingTable> {
    let table = load_embeddings_any(path, normalize)?;
    if table.len() != expected_count {
        return Err(Error::Format(format!(
            "{}: expected {expected_count} rows, file has {}",
            path.display(),
            table.len()
        )));
    }
    Ok(table)
}

/// Load a table without a row-count expectation.
pub fn load_embeddings_any(path: &Path, normalize: bool) -> Result<EmbeddingTable> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: missing EMB1 header",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected_len = 12 + 4 * count * dim;
    if bytes.len() != expected_len {
        return Err(Error::Format(format!(
            "{}: header declares {count}x{dim} ({expected_len} bytes), file has {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite value in row {}",
            path.display(),
            bad / dim.max(1)
        )));
    }
    EmbeddingTable::from_rows(dim, data, normalize)
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Exact dense top-k by cosine similarity.
///
/// Returns `min(k, rows - |exclude|)` entries in descending score order,
/// ties broken by ascending row id.
pub fn cosine_topk(
    table: &EmbeddingTable,
    q: &[f32],
    k: usize,
    exclude: &HashSet<NodeId>,
) -> Result<Vec<(NodeId, f32)>> {
    if q.len() != table.dim() {
        return Err(Error::Shape(format!(
            "query dim {} does not match table dim {}",
            q.len(),
            table.dim()
        )));
    }
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let qn = l2_norm(q);
    let mut scored: Vec<(NodeId, f32)> = Vec::with_capacity(table.len());
    for (i, row) in table.rows().enumerate() {
        if exclude.contains(&i) {
            continue;
        }
        let rn = if table.is_normalized() { 1.0 } else { l2_norm(row) };
        let score = if qn < 1e-12 || rn < 1e-12 {
            0.0
        } else {
            (dot(q, row) / (qn * rn)) as f32
        };
        scored.push((i, score));
    }
    scored.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Mean-centering linear projection with orthonormal columns.
#[derive(Debug, Clone)]
pub struct LinearProjection {
    dim_in: usize,
    dim_out: usize,
    /// Row-major `dim_in x dim_out`; columns are the components.
    matrix: Vec<f32>,
    mean: Vec<f32>,
    explained: Vec<f32>,
}

impl LinearProjection {
    pub fn dim_in(&self) -> usize {
        self.dim_in
    }

    pub fn dim_out(&self) -> usize {
        self.dim_out
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    /// Per-component explained variance, non-increasing.
    pub fn explained_variance(&self) -> &[f32] {
        &self.explained
    }

    pub fn component(&self, c: usize) -> Vec<f32> {
        (0..self.dim_in)
            .map(|r| self.matrix[r * self.dim_out + c])
            .collect()
    }
}

/// Result of projecting one vector: unit-normalized unless the centered
/// input fell entirely outside the retained subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub vector: Vec<f32>,
    pub degenerate: bool,
}

/// Fit principal components by deflated power iteration on the covariance
/// of mean-centered rows.
pub fn fit_projection(table: &EmbeddingTable, out_dim: usize) -> Result<LinearProjection> {
    let d = table.dim();
    let m = table.len();
    if out_dim == 0 || out_dim > d || out_dim > m {
        return Err(Error::Argument(format!(
            "out_dim {out_dim} must be in 1..=min(dim {d}, rows {m})"
        )));
    }

    // mean + covariance in f64
    let mut mean = vec![0.0f64; d];
    for row in table.rows() {
        for (m_i, &x) in mean.iter_mut().zip(row) {
            *m_i += x as f64;
        }
    }
    for m_i in mean.iter_mut() {
        *m_i /= m as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    let mut centered = vec![0.0f64; d];
    for row in table.rows() {
        for i in 0..d {
            centered[i] = row[i] as f64 - mean[i];
        }
        for i in 0..d {
            let ci = centered[i];
            if ci != 0.0 {
                let dst = &mut cov[i * d..(i + 1) * d];
                for (j, c) in centered.iter().enumerate() {
                    dst[j] += ci * c;
                }
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= m as f64;
    }

    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mut comps: Vec<Vec<f64>> = Vec::with_capacity(out_dim);
    let mut explained = Vec::with_capacity(out_dim);
    let max_iters = 20_000;
    let mut lambda0 = f64::NAN;

    for c in 0..out_dim {
        // deterministic start: unit basis vector plus small off-axis mass
        let mut v = vec![1e-3f64; d];
        v[c % d] = 1.0;
        orthogonalize(&mut v, &comps);
        normalize_f64(&mut v);

        let mut lambda = 0.0;
        let mut converged = false;
        for _ in 0..max_iters {
            let mut w = mat_vec(&cov, &v, d);
            orthogonalize(&mut w, &comps);
            let nw = norm_f64(&w);
            if nw < 1e-14 * total_var.max(1e-300) || (c > 0 && nw < 1e-12 * lambda0) {
                // residual variance is numerically zero
                lambda = 0.0;
                converged = true;
                break;
            }
            for x in w.iter_mut() {
                *x /= nw;
            }
            let align: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            v = w;
            lambda = nw;
            if 1.0 - align.abs() < 1e-14 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Numeric(format!(
                "power iteration for component {c} did not converge in {max_iters} iterations"
            )));
        }
        if lambda == 0.0 {
            // complete the basis with any orthonormal direction
            v = orthonormal_completion(&comps, d)?;
        } else {
            // canonical sign: largest-magnitude coordinate positive
            canonical_sign(&mut v);
            // deflate
            for i in 0..d {
                for j in 0..d {
                    cov[i * d + j] -= lambda * v[i] * v[j];
                }
            }
        }
        if c == 0 {
            lambda0 = lambda.max(1e-300);
        }
        explained.push(lambda as f32);
        comps.push(v);
    }

    let mut matrix = vec![0.0f32; d * out_dim];
    for (c, comp) in comps.iter().enumerate() {
        for (r, &x) in comp.iter().enumerate() {
            matrix[r * out_dim + c] = x as f32;
        }
    }
    Ok(LinearProjection {
        dim_in: d,
        dim_out: out_dim,
        matrix,
        mean: mean.iter().map(|&x| x as f32).collect(),
        explained,
    })
}

fn mat_vec(a: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| a[i * d..(i + 1) * d].iter().zip(v).map(|(x, y)| x * y).sum())
        .collect()
}

fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= proj * y;
        }
    }
}

fn norm_f64(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize_f64(v: &mut [f64]) {
    let n = norm_f64(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

fn orthonormal_completion(basis: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    for axis in 0..d {
        let mut v = vec![0.0f64; d];
        v[axis] = 1.0;
        orthogonalize(&mut v, basis);
        let n = norm_f64(&v);
        if n > 1e-6 {
            for x in v.iter_mut() {
                *x /= n;
            }
            return Ok(v);
        }
    }
    Err(Error::Numeric(
        "could not complete orthonormal basis".into(),
    ))
}

/// Center, project, and unit-normalize one vector. A vector that centers
/// to (numerically) zero in the retained subspace is flagged degenerate
/// and maps to the zero vector.
pub fn apply_projection(p: &LinearProjection, v: &[f32]) -> Result<Projected> {
    if v.len() != p.dim_in {
        return Err(Error::Shape(format!(
            "input dim {} does not match projection dim_in {}",
            v.len(),
            p.dim_in
        )));
    }
    let mut out = vec![0.0f64; p.dim_out];
    for r in 0..p.dim_in {
        let x = v[r] as f64 - p.mean[r] as f64;
        if x != 0.0 {
            let row = &p.matrix[r * p.dim_out..(r + 1) * p.dim_out];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x * w as f64;
            }
        }
    }
    let n = norm_f64(&out);
    if n < 1e-12 {
        return Ok(Projected {
            vector: vec![0.0; p.dim_out],
            degenerate: true,
        });
    }
    Ok(Projected {
        vector: out.iter().map(|&x| (x / n) as f32).collect(),
        degenerate: false,
    })
}

/// Project a whole table; degenerate rows become zero rows.
pub fn project_table(p: &LinearProjection, table: &EmbeddingTable) -> Result<EmbeddingTable> {
    let mut data = Vec::with_capacity(table.len() * p.dim_out);
    for row in table.rows() {
        data.extend_from_slice(&apply_projection(p, row)?.vector);
    }
    EmbeddingTable::from_rows(p.dim_out, data, false)
}

/// Deterministic standard normal sampling (Box-Muller), used by the
/// synthetic generator and test harnesses.
pub fn standard_normal<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_vec<R: rand::Rng>(rng: &mut R, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| standard_normal(rng) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_table(rows: usize, dim: usize, seed: u64, normalize: bool) -> EmbeddingTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * dim)
            .map(|_| standard_normal(&mut rng) as f32)
            .collect();
        EmbeddingTable::from_rows(dim, data, normalize).unwrap()
    }

    /// Independent full-sort oracle for cosine_topk.
    fn brute_force_topk(
        table: &EmbeddingTable,
        q: &[f32],
        k: usize,
        exclude: &HashSet<usize>,
    ) -> Vec<(usize, f32)> {
        let qn = l2_norm(q);
        let mut all: Vec<(usize, f32)> = (0..table.len())
            .filter(|i| !exclude.contains(i))
            .map(|i| {
                let row = table.row(i);
                let rn = if table.is_normalized() { 1.0 } else { l2_norm(row) };
                let s = if qn < 1e-12 || rn < 1e-12 {
                    0.0
                } else {
                    (dot(q, row) / (qn * rn)) as f32
                };
                (i, s)
            })
            .collect();
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.emb");
        let t = EmbeddingTable::from_rows(4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], false).unwrap();
        t.save(&p).unwrap();
        let t2 = load_embeddings(&p, 2, false).unwrap();
        assert_eq!(t2.dim(), 4);
        assert_eq!(t2.len(), 2);
        assert_eq!(t.raw_data(), t2.raw_data());
    }

    #[test]
    fn header_count_mismatch_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.emb");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"EMB1");
        bytes.extend_from_slice(&3u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        // body only holds 2 rows
        for x in [1f32, 0.0, 0.0, 1.0] {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(
            load_embeddings_any(&p, false),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn zero_row_cannot_normalize() {
        let err = EmbeddingTable::from_rows(2, vec![0.0, 0.0, 1.0, 0.0], true).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn topk_identity_query() {
        let t = random_table(20, 8, 7, true);
        let q: Vec<f32> = t.row(7).to_vec();
        let got = cosine_topk(&t, &q, 3, &HashSet::new()).unwrap();
        assert_eq!(got[0].0, 7);
        assert!((got[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn topk_k_larger_than_table() {
        let t = random_table(5, 4, 1, true);
        let q = vec![1.0, 0.0, 0.0, 0.0];
        let got = cosine_topk(&t, &q, 50, &HashSet::new()).unwrap();
        assert_eq!(got.len(), 5);
        for w in got.windows(2) {
            assert!(w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn topk_matches_brute_force_50x16() {
        let t = random_table(50, 16, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = normal_vec(&mut rng, 16);
        let got = cosine_topk(&t, &q, 5, &HashSet::new()).unwrap();
        let want = brute_force_topk(&t, &q, 5, &HashSet::new());
        assert_eq!(got, want);
    }

    #[test]
    fn topk_matches_brute_force_1000_rows() {
        let t = random_table(1000, 12, 5, false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = normal_vec(&mut rng, 12);
        let exclude: HashSet<usize> = (0..100).map(|i| i * 7 % 1000).collect();
        let got = cosine_topk(&t, &q, 40, &exclude).unwrap();
        let want = brute_force_topk(&t, &q, 40, &exclude);
        assert_eq!(got, want);
    }

    #[test]
    fn topk_dim_mismatch() {
        let t = random_table(4, 8, 2, true);
        assert!(matches!(
            cosine_topk(&t, &[1.0, 0.0], 1, &HashSet::new()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn planar_data_reconstructs_exactly() {
        // rows lie in the span of two fixed directions
        let dim = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b1 = normal_vec(&mut rng, dim);
        let mut b2 = normal_vec(&mut rng, dim);
        let n1 = l2_norm(&b1);
        b1.iter_mut().for_each(|x| *x /= n1 as f32);
        let d12 = dot(&b1, &b2);
        for i in 0..dim {
            b2[i] -= (d12 * b1[i] as f64) as f32;
        }
        let n2 = l2_norm(&b2);
        b2.iter_mut().for_each(|x| *x /= n2 as f32);

        let mut data = Vec::new();
        for _ in 0..60 {
            let a = standard_normal(&mut rng) as f32;
            let b = standard_normal(&mut rng) as f32;
            for i in 0..dim {
                data.push(a * b1[i] + b * b2[i] + 0.5);
            }
        }
        let t = EmbeddingTable::from_rows(dim, data, false).unwrap();
        let p = fit_projection(&t, 2).unwrap();

        // reconstruction x_hat = mean + M (M^T (x - mean))
        let mut max_err = 0.0f64;
        for row in t.rows() {
            let mut y = vec![0.0f64; 2];
            for r in 0..dim {
                let x = row[r] as f64 - p.mean[r] as f64;
                y[0] += x * p.matrix[r * 2] as f64;
                y[1] += x * p.matrix[r * 2 + 1] as f64;
            }
            for r in 0..dim {
                let back =
                    p.mean[r] as f64 + y[0] * p.matrix[r * 2] as f64 + y[1] * p.matrix[r * 2 + 1] as f64;
                max_err = max_err.max((back - row[r] as f64).abs());
            }
        }
        assert!(max_err <= 1e-5, "reconstruction error {max_err}");
    }

    #[test]
    fn isotropic_first_component_explains_one_over_dim() {
        let dim = 8;
        let t = random_table(4000, dim, 33, false);
        let p = fit_projection(&t, 1).unwrap();
        // oracle: compare against the covariance trace
        let mut mean = vec![0.0f64; dim];
        for row in t.rows() {
            for (m, &x) in mean.iter_mut().zip(row) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= t.len() as f64);
        let mut trace = 0.0f64;
        for row in t.rows() {
            for (i, &x) in row.iter().enumerate() {
                let c = x as f64 - mean[i];
                trace += c * c;
            }
        }
        trace /= t.len() as f64;
        let ratio = p.explained_variance()[0] as f64 / trace;
        assert!(
            (ratio - 1.0 / dim as f64).abs() < 0.03,
            "explained ratio {ratio}"
        );
    }

    #[test]
    fn full_dim_projection_preserves_centered_cosines() {
        // strongly decaying spectrum so trailing components are basis
        // completions of numerically-zero variance
        let dim = 64;
        let rows = 80;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut data = Vec::with_capacity(rows * dim);
        for _ in 0..rows {
            for i in 0..dim {
                let sd = 0.8f64.powi(i as i32 / 2);
                data.push((standard_normal(&mut rng) * sd) as f32);
            }
        }
        let t = EmbeddingTable::from_rows(dim, data, false).unwrap();
        let p = fit_projection(&t, dim).unwrap();
        for w in p.explained_variance().windows(2) {
            assert!(w[0] >= w[1] - 1e-6, "explained variance must not increase");
        }

        // orthonormal columns
        for a in 0..dim {
            let ca = p.component(a);
            for b in a..dim {
                let cb = p.component(b);
                let d = dot(&ca, &cb);
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-3, "col {a}.{b} dot {d}");
            }
        }

        // pairwise cosines of centered rows are invariant
        let centered = |row: &[f32]| -> Vec<f32> {
            row.iter().zip(p.mean()).map(|(&x, &m)| x - m).collect()
        };
        for a in (0..rows).step_by(7) {
            for b in (a + 1..rows).step_by(11) {
                let ca = centered(t.row(a));
                let cb = centered(t.row(b));
                let before = cosine(&ca, &cb);
                let pa = apply_projection(&p, t.row(a)).unwrap();
                let pb = apply_projection(&p, t.row(b)).unwrap();
                assert!(!pa.degenerate && !pb.degenerate);
                let after = cosine(&pa.vector, &pb.vector);
                assert!(
                    (before - after).abs() < 1e-4,
                    "cosine {before} -> {after} for rows {a},{b}"
                );
            }
        }
    }

    #[test]
    fn apply_projection_edge_cases() {
        let t = random_table(30, 6, 55, false);
        let p = fit_projection(&t, 3).unwrap();

        let at_mean = apply_projection(&p, p.mean()).unwrap();
        assert!(at_mean.degenerate);
        assert!(at_mean.vector.iter().all(|&x| x == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = normal_vec(&mut rng, 6);
        let out = apply_projection(&p, &v).unwrap();
        if !out.degenerate {
            assert!((l2_norm(&out.vector) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn fit_projection_bad_out_dim() {
        let t = random_table(10, 6, 1, false);
        assert!(matches!(fit_projection(&t, 0), Err(Error::Argument(_))));
        assert!(matches!(fit_projection(&t, 7), Err(Error::Argument(_))));
        let small = random_table(3, 6, 1, false);
        assert!(matches!(fit_projection(&small, 4), Err(Error::Argument(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn topk_always_matches_brute_force(
            rows in 1usize..120,
            dim in 1usize..24,
            k in 1usize..20,
            seed in 0u64..1000,
        ) {
            let t = random_table(rows, dim, seed, seed % 2 == 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
            let q = normal_vec(&mut rng, dim);
            let got = cosine_topk(&t, &q, k, &HashSet::new()).unwrap();
            let want = brute_force_topk(&t, &q, k, &HashSet::new());
            prop_assert_eq!(got, want);
        }
    }
}

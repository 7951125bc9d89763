//! Symmetric degree-normalized user-item adjacency and its dropout augmentations.
//!
//! Users occupy nodes `0..num_users`, item `i` is node `num_users + i`. Every stored
//! value is `1 / sqrt(deg(a) * deg(b))` with degrees taken from the edge set the matrix
//! was built from, so a corrupted graph is renormalized with its own degrees.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::InteractionDataset;
use crate::dense::{axpy, DenseMatrix};
use crate::error::{Error, Result};

/// Row-compressed symmetric adjacency. Immutable once built.
#[derive(Debug, Clone)]
pub struct SparseAdjacency {
    num_users: usize,
    num_items: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
    degrees: Vec<u32>,
    /// Undirected edges as `(user, item)` index pairs, sorted.
    edges: Vec<(u32, u32)>,
}

impl SparseAdjacency {
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[(u32, u32)]) -> Result<Self> {
        let n = num_users + num_items;
        let mut edges = edges.to_vec();
        edges.sort_unstable();
        edges.dedup();
        if let Some(&(u, i)) = edges
            .iter()
            .find(|&&(u, i)| u as usize >= num_users || i as usize >= num_items)
        {
            return Err(Error::Dimension(format!(
                "edge ({u}, {i}) outside {num_users} users x {num_items} items"
            )));
        }

        let mut degrees = vec![0u32; n];
        for &(u, i) in &edges {
            degrees[u as usize] += 1;
            degrees[num_users + i as usize] += 1;
        }
        let mut indptr = vec![0usize; n + 1];
        for a in 0..n {
            indptr[a + 1] = indptr[a] + degrees[a] as usize;
        }
        let mut fill = indptr.clone();
        let mut indices = vec![0u32; indptr[n]];
        for &(u, i) in &edges {
            let (a, b) = (u as usize, num_users + i as usize);
            indices[fill[a]] = b as u32;
            fill[a] += 1;
            indices[fill[b]] = a as u32;
            fill[b] += 1;
        }
        let inv_sqrt = |d: u32| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() };
        let mut values = vec![0.0; indices.len()];
        for a in 0..n {
            let row = &mut indices[indptr[a]..indptr[a + 1]];
            row.sort_unstable();
            for (k, &b) in row.iter().enumerate() {
                values[indptr[a] + k] = inv_sqrt(degrees[a]) * inv_sqrt(degrees[b as usize]);
            }
        }

        Ok(Self {
            num_users,
            num_items,
            indptr,
            indices,
            values,
            degrees,
            edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    /// Column indices and values of row `a`, columns ascending.
    pub fn row(&self, a: usize) -> (&[u32], &[f64]) {
        let span = self.indptr[a]..self.indptr[a + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    /// Stored value at `(a, b)`, or 0 when absent.
    pub fn value(&self, a: usize, b: usize) -> f64 {
        let (cols, vals) = self.row(a);
        cols.binary_search(&(b as u32)).map_or(0.0, |k| vals[k])
    }

    /// Writes the matrix as `row<TAB>col<TAB>value` lines.
    pub fn dump_coo<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for a in 0..self.num_nodes() {
            let (cols, vals) = self.row(a);
            for (b, v) in cols.iter().zip(vals) {
                writeln!(w, "{a}\t{b}\t{v}")?;
            }
        }
        Ok(())
    }
}

pub fn build_adjacency(dataset: &InteractionDataset) -> Result<SparseAdjacency> {
    if dataset.train.is_empty() {
        return Err(Error::Data("train split is empty".into()));
    }
    SparseAdjacency::from_edges(dataset.num_users, dataset.num_items, &dataset.train)
}

fn check_keep_rate(keep_rate: f64) -> Result<()> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Config(format!(
            "keep rate must lie in (0, 1], got {keep_rate}"
        )));
    }
    Ok(())
}

/// Keeps every undirected edge independently with probability `keep_rate`.
pub fn edge_dropout(adj: &SparseAdjacency, keep_rate: f64, seed: u64) -> Result<SparseAdjacency> {
    check_keep_rate(keep_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept: Vec<(u32, u32)> = adj
        .edges
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < keep_rate)
        .collect();
    SparseAdjacency::from_edges(adj.num_users, adj.num_items, &kept)
}

/// Drops every node independently with probability `1 - keep_rate`, along with its edges.
pub fn node_dropout(adj: &SparseAdjacency, keep_rate: f64, seed: u64) -> Result<SparseAdjacency> {
    check_keep_rate(keep_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alive: Vec<bool> = (0..adj.num_nodes())
        .map(|_| rng.random::<f64>() < keep_rate)
        .collect();
    let kept: Vec<(u32, u32)> = adj
        .edges
        .iter()
        .copied()
        .filter(|&(u, i)| alive[u as usize] && alive[adj.num_users + i as usize])
        .collect();
    SparseAdjacency::from_edges(adj.num_users, adj.num_items, &kept)
}

/// Sparse-dense product `adj * x`.
pub fn multiply(adj: &SparseAdjacency, x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(x.rows(), x.cols());
    multiply_into(adj, x, &mut out)?;
    Ok(out)
}

/// Overwrites `out` with `adj * x`. Each output row sums its neighbours in ascending
/// column order regardless of how rows are scheduled across threads.
pub fn multiply_into(adj: &SparseAdjacency, x: &DenseMatrix, out: &mut DenseMatrix) -> Result<()> {
    let n = adj.num_nodes();
    if x.rows() != n || !out.same_shape(x) {
        return Err(Error::Dimension(format!(
            "adjacency has {n} nodes, embeddings have {} rows (output {}x{})",
            x.rows(),
            out.rows(),
            out.cols()
        )));
    }
    let d = x.cols();
    if d == 0 {
        return Ok(());
    }
    out.as_mut_slice()
        .par_chunks_mut(d)
        .with_min_len(256)
        .enumerate()
        .for_each(|(a, out_row)| {
            out_row.fill(0.0);
            let (cols, vals) = adj.row(a);
            for (&b, &v) in cols.iter().zip(vals) {
                axpy(v, x.row(b as usize), out_row);
            }
        });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete_bipartite(m: usize) -> SparseAdjacency {
        let edges: Vec<(u32, u32)> = (0..m as u32)
            .flat_map(|u| (0..m as u32).map(move |i| (u, i)))
            .collect();
        SparseAdjacency::from_edges(m, m, &edges).unwrap()
    }

    #[test]
    fn single_edge_has_unit_value() {
        let adj = SparseAdjacency::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert_eq!(adj.nnz(), 2);
        assert_eq!(adj.value(0, 1), 1.0);
        assert_eq!(adj.value(1, 0), 1.0);
        assert_eq!(adj.value(0, 0), 0.0);
    }

    #[test]
    fn value_uses_both_degrees() {
        // user 0 has degree 4, item 0 has degree 1
        let adj = SparseAdjacency::from_edges(1, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]).unwrap();
        assert!((adj.value(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn k55_dense_oracle() {
        let adj = complete_bipartite(5);
        // Dense reconstruction, then an explicit matrix-vector product.
        let n = 10;
        let mut dense = vec![vec![0.0; n]; n];
        for (a, row) in dense.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = adj.value(a, b);
            }
        }
        for (a, row) in dense.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                let expect = if (a < 5) != (b < 5) { 0.2 } else { 0.0 };
                assert!((v - expect).abs() < 1e-15);
            }
        }
        let ones = DenseMatrix::from_vec(n, 1, vec![1.0; n]).unwrap();
        let out = multiply(&adj, &ones).unwrap();
        for (a, row) in dense.iter().enumerate() {
            let oracle: f64 = row.iter().sum();
            assert!((out.get(a, 0) - oracle).abs() < 1e-14);
            assert!((out.get(a, 0) - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_edge_swaps_rows() {
        let adj = SparseAdjacency::from_edges(1, 1, &[(0, 0)]).unwrap();
        let x = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let y = multiply(&adj, &x).unwrap();
        assert_eq!(y.row(0), &[0.0, 2.0]);
        assert_eq!(y.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let adj = complete_bipartite(3);
        let y = multiply(&adj, &DenseMatrix::zeros(6, 4)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let adj = complete_bipartite(2);
        assert!(matches!(
            multiply(&adj, &DenseMatrix::zeros(3, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn isolated_nodes_have_empty_rows() {
        let adj = SparseAdjacency::from_edges(3, 3, &[(0, 0)]).unwrap();
        assert_eq!(adj.row(1).0.len(), 0);
        assert_eq!(adj.degrees()[4], 0);
    }

    #[test]
    fn full_keep_rate_is_identity() {
        let adj = complete_bipartite(4);
        for f in [edge_dropout, node_dropout] {
            let same = f(&adj, 1.0, 9).unwrap();
            assert_eq!(same.edges(), adj.edges());
            assert_eq!(same.values, adj.values);
        }
    }

    #[test]
    fn bad_keep_rate_is_a_config_error() {
        let adj = complete_bipartite(2);
        for rate in [0.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(edge_dropout(&adj, rate, 0), Err(Error::Config(_))));
            assert!(matches!(node_dropout(&adj, rate, 0), Err(Error::Config(_))));
        }
    }

    #[test]
    fn edge_dropout_is_deterministic_and_renormalizes() {
        let adj = complete_bipartite(6);
        let a = edge_dropout(&adj, 0.5, 17).unwrap();
        let b = edge_dropout(&adj, 0.5, 17).unwrap();
        assert_eq!(a.edges(), b.edges());
        for &(u, i) in a.edges() {
            let (du, di) = (a.degrees()[u as usize], a.degrees()[6 + i as usize]);
            let expect = 1.0 / ((du * di) as f64).sqrt();
            assert!((a.value(u as usize, 6 + i as usize) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn dropping_isolated_node_changes_nothing() {
        // node 2 (a user) has no edges; find a seed that drops it and nothing else
        let adj = SparseAdjacency::from_edges(3, 1, &[(0, 0), (1, 0)]).unwrap();
        let mut found = false;
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alive: Vec<bool> = (0..4).map(|_| rng.random::<f64>() < 0.5).collect();
            if alive == [true, true, false, true] {
                let dropped = node_dropout(&adj, 0.5, seed).unwrap();
                assert_eq!(dropped.edges(), adj.edges());
                assert_eq!(dropped.values, adj.values);
                found = true;
                break;
            }
        }
        assert!(found);
    }

    #[test]
    fn dropping_star_hub_empties_graph() {
        // item 0 is the hub connected to 4 users
        let adj = SparseAdjacency::from_edges(4, 1, &[(0, 0), (1, 0), (2, 0), (3, 0)]).unwrap();
        for seed in 0..500 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let alive: Vec<bool> = (0..5).map(|_| rng.random::<f64>() < 0.7).collect();
            if !alive[4] {
                let dropped = node_dropout(&adj, 0.7, seed).unwrap();
                assert_eq!(dropped.nnz(), 0);
                return;
            }
        }
        panic!("no seed dropped the hub");
    }
}

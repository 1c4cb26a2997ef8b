//! Undirected graphs in compressed adjacency form and sparse propagation operators.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Immutable undirected graph.
///
/// Neighbour lists are stored CSR-style and sorted by neighbour id. Self-edges are
/// never stored; operators that need `Ã = A + I` add the diagonal themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseGraph {
    n: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl SparseGraph {
    /// Builds a graph from possibly directed, duplicated pairs. Pairs are symmetrized,
    /// duplicates collapse and self-edges are dropped.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Input(format!(
                    "edge ({i}, {j}) out of range for {n} nodes"
                )));
            }
            if i == j {
                continue;
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(&list);
            offsets.push(neighbors.len());
        }
        Ok(Self {
            n,
            offsets,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    /// Number of undirected edges (each stored twice internally).
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    /// Number of directed neighbour entries, `2 |E|`.
    pub fn num_directed_edges(&self) -> usize {
        self.neighbors.len()
    }

    /// `|N(i)|`, excluding the self-loop.
    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.neighbors(i).binary_search(&j).is_ok()
    }

    /// Undirected edges with `i < j`, in sorted order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| {
            self.neighbors(i)
                .iter()
                .copied()
                .filter(move |&j| i < j)
                .map(move |j| (i, j))
        })
    }

    /// Sparsity pattern of `Ã = A + I` as `(offsets, columns)`, columns sorted per row.
    pub fn self_loop_pattern(&self) -> (Vec<usize>, Vec<usize>) {
        let mut offsets = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::with_capacity(self.neighbors.len() + self.n);
        offsets.push(0);
        for i in 0..self.n {
            let nbrs = self.neighbors(i);
            let split = nbrs.partition_point(|&j| j < i);
            cols.extend_from_slice(&nbrs[..split]);
            cols.push(i);
            cols.extend_from_slice(&nbrs[split..]);
            offsets.push(cols.len());
        }
        (offsets, cols)
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Input("permutation length differs from node count".into()));
        }
        let edges: Vec<_> = self.edges().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(self.n, &edges)
    }

    /// Nodes within `hops` of `source` together with their hop distance, in BFS order.
    pub fn within_hops(&self, source: usize, hops: usize) -> Vec<(usize, usize)> {
        let mut dist = vec![usize::MAX; self.n];
        let mut order = Vec::new();
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            order.push((u, dist[u]));
            if dist[u] == hops {
                continue;
            }
            for &v in self.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        order
    }

    /// The row-stochastic operator `D̃⁻¹ Ã` (uniform averaging over `N(i) ∪ {i}`).
    pub fn mean_propagator(&self) -> CsrMatrix {
        let (offsets, cols) = self.self_loop_pattern();
        let values = (0..self.n)
            .flat_map(|i| {
                let w = 1.0 / (self.degree(i) as f64 + 1.0);
                std::iter::repeat_n(w, self.degree(i) + 1)
            })
            .collect();
        CsrMatrix::from_parts(self.n, self.n, offsets, cols, values)
    }
}

/// Real-valued sparse matrix in compressed sparse row layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles a matrix from raw CSR buffers. Column indices must be sorted per row.
    pub fn from_parts(
        nrows: usize,
        ncols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        assert_eq!(offsets.len(), nrows + 1);
        assert_eq!(indices.len(), values.len());
        assert_eq!(*offsets.last().unwrap(), indices.len());
        debug_assert!(indices.iter().all(|&c| c < ncols));
        Self {
            nrows,
            ncols,
            offsets,
            indices,
            values,
        }
    }

    /// Builds from `(row, col, value)` triplets; duplicate positions are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            if r >= nrows || c >= ncols {
                return Err(Error::Input(format!(
                    "entry ({r}, {c}) outside {nrows}x{ncols} matrix"
                )));
            }
            rows[r].push((c, v));
        }
        let mut offsets = vec![0];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                if indices.len() > *offsets.last().unwrap() && *indices.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                }
            }
            offsets.push(indices.len());
        }
        Ok(Self::from_parts(nrows, ncols, offsets, indices, values))
    }

    pub fn from_dense(dense: &ArrayView2<f64>) -> Self {
        let mut triplets = Vec::new();
        for ((r, c), &v) in dense.indexed_iter() {
            if v != 0.0 {
                triplets.push((r, c, v));
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), &triplets).expect("indices in range")
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.offsets[i]..self.offsets[i + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).ok().map(|k| vals[k])
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn map_values(&self, f: impl FnMut(f64) -> f64) -> Self {
        self.with_values(self.values.iter().copied().map(f).collect())
    }

    /// Sparse-dense product `self · rhs`. Cost is `O(nnz · d)`.
    pub fn spmm(&self, rhs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.ncols {
            return Err(Error::dim(
                "spmm",
                format!(
                    "{}x{} sparse times {}x{} dense",
                    self.nrows,
                    self.ncols,
                    rhs.nrows(),
                    rhs.ncols()
                ),
            ));
        }
        let mut out = Array2::zeros((self.nrows, rhs.ncols()));
        for (i, mut out_row) in out.rows_mut().into_iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out_row.scaled_add(v, &rhs.row(c));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs`, without forming the transpose.
    pub fn spmm_transposed(&self, rhs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if rhs.nrows() != self.nrows {
            return Err(Error::dim(
                "spmm_transposed",
                format!(
                    "({}x{})ᵀ sparse times {}x{} dense",
                    self.nrows,
                    self.ncols,
                    rhs.nrows(),
                    rhs.ncols()
                ),
            ));
        }
        let mut out = Array2::zeros((self.ncols, rhs.ncols()));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            let g = rhs.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out.row_mut(c).scaled_add(v, &g);
            }
        }
        Ok(out)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[i, c]] = v;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).1.iter().sum()).collect()
    }

    /// Number of `f64`/`usize` slots held, used to audit memory footprints.
    pub fn storage_len(&self) -> usize {
        self.offsets.len() + self.indices.len() + self.values.len()
    }
}

/// The static GCN propagation operator `D̃^{-1/2} Ã D̃^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedPropagator {
    matrix: CsrMatrix,
}

impl NormalizedPropagator {
    pub fn new(graph: &SparseGraph) -> Self {
        let (offsets, cols) = graph.self_loop_pattern();
        let deg = |i: usize| graph.degree(i) as f64 + 1.0;
        let mut values = Vec::with_capacity(cols.len());
        for i in 0..graph.num_nodes() {
            for &j in &cols[offsets[i]..offsets[i + 1]] {
                values.push(1.0 / (deg(i) * deg(j)).sqrt());
            }
        }
        let n = graph.num_nodes();
        Self {
            matrix: CsrMatrix::from_parts(n, n, offsets, cols, values),
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn spmm(&self, rhs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.matrix.spmm(rhs)
    }
}

//! Laplacian positional encodings and random-walk structural encodings.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::graphbuild::PrefixGraph;

/// Below this magnitude an eigenvector component counts as zero when fixing
/// its sign.
const SIGN_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEncodings {
    /// `n x d_pe` eigenvector coordinates, zero-padded.
    pub lap_pe: Vec<Vec<f64>>,
    /// The `d_pe` eigenvalues matching the columns of `lap_pe`, zero-padded.
    pub lap_eigenvalues: Vec<f64>,
    /// `n x d_se` return probabilities for walk lengths `1..=d_se`.
    pub rwse: Vec<Vec<f64>>,
}

impl GraphEncodings {
    pub fn pe_dim(&self) -> usize {
        self.lap_eigenvalues.len()
    }

    pub fn se_dim(&self) -> usize {
        self.rwse.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RwseMode {
    /// Walks follow edge direction.
    #[default]
    Directed,
    /// Walks on the symmetrized skeleton.
    Undirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub pe_dim: usize,
    pub se_dim: usize,
    #[serde(default)]
    pub rwse_mode: RwseMode,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            pe_dim: 8,
            se_dim: 8,
            rwse_mode: RwseMode::Directed,
        }
    }
}

/// Unweighted symmetric adjacency without self-loops.
fn symmetric_skeleton(graph: &PrefixGraph) -> DMatrix<f64> {
    let n = graph.num_nodes();
    let mut a = DMatrix::zeros(n, n);
    for &(s, t) in &graph.edges {
        if s != t {
            a[(s, t)] = 1.0;
            a[(t, s)] = 1.0;
        }
    }
    a
}

/// `I - D^{-1/2} A D^{-1/2}` on the symmetric skeleton; isolated nodes get
/// a zero degree term, i.e. a unit diagonal entry.
pub fn normalized_laplacian(graph: &PrefixGraph) -> DMatrix<f64> {
    laplacian_of(&symmetric_skeleton(graph))
}

fn laplacian_of(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = a.row(i).sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        delta - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
    })
}

/// Eigenpairs sorted by ascending eigenvalue; ties keep solver order.
fn sorted_eigen(l: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(l);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

/// All eigenvalues of the normalized Laplacian, ascending.
pub fn laplacian_spectrum(graph: &PrefixGraph) -> Vec<f64> {
    sorted_eigen(normalized_laplacian(graph)).0
}

fn count_components(a: &DMatrix<f64>) -> usize {
    let n = a.nrows();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            for u in 0..n {
                if a[(v, u)] > 0.0 && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
    }
    components
}

/// Laplacian eigenvector encodings.
///
/// Isolated nodes (self-loops are ignored) carry no spectral position and
/// get zero rows. On the remaining nodes one trivial eigenpair per connected
/// component is dropped, the `pe_dim` smallest remaining pairs are kept,
/// and each eigenvector is signed so its first nonzero component is positive.
pub fn compute_lap_pe(graph: &PrefixGraph, pe_dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = graph.num_nodes();
    let mut pe = vec![vec![0.0; pe_dim]; n];
    let mut eigs = vec![0.0; pe_dim];
    let full = symmetric_skeleton(graph);
    let connected: Vec<usize> = (0..n).filter(|&i| full.row(i).sum() > 0.0).collect();
    if connected.is_empty() || pe_dim == 0 {
        return (pe, eigs);
    }
    let m = connected.len();
    let a = DMatrix::from_fn(m, m, |i, j| full[(connected[i], connected[j])]);
    let trivial = count_components(&a);
    let (values, vectors) = sorted_eigen(laplacian_of(&a));
    for (slot, col) in (trivial..m).take(pe_dim).enumerate() {
        let mut v: Vec<f64> = vectors.column(col).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > SIGN_TOLERANCE) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        for (i, &node) in connected.iter().enumerate() {
            pe[node][slot] = v[i];
        }
        eigs[slot] = values[col];
    }
    (pe, eigs)
}

/// Row-normalized transition matrix; rows without out-edges stay zero.
pub fn random_walk_matrix(graph: &PrefixGraph, mode: RwseMode) -> DMatrix<f64> {
    let n = graph.num_nodes();
    let mut a = DMatrix::zeros(n, n);
    for &(s, t) in &graph.edges {
        a[(s, t)] = 1.0;
        if mode == RwseMode::Undirected {
            a[(t, s)] = 1.0;
        }
    }
    for i in 0..n {
        let d: f64 = a.row(i).sum();
        if d > 0.0 {
            a.row_mut(i).iter_mut().for_each(|x| *x /= d);
        }
    }
    a
}

/// `rwse[v][s-1] = (P^s)[v][v]` for `s = 1..=se_dim`.
pub fn compute_rwse(graph: &PrefixGraph, se_dim: usize, mode: RwseMode) -> Vec<Vec<f64>> {
    let n = graph.num_nodes();
    let p = random_walk_matrix(graph, mode);
    let mut out = vec![vec![0.0; se_dim]; n];
    let mut power = p.clone();
    for s in 0..se_dim {
        if s > 0 {
            power = &power * &p;
        }
        for (v, row) in out.iter_mut().enumerate() {
            row[s] = power[(v, v)];
        }
    }
    out
}

pub fn attach_encodings(graph: &PrefixGraph, config: &EncodingConfig) -> GraphEncodings {
    let (lap_pe, lap_eigenvalues) = compute_lap_pe(graph, config.pe_dim);
    GraphEncodings {
        lap_pe,
        lap_eigenvalues,
        rwse: compute_rwse(graph, config.se_dim, config.rwse_mode),
    }
}

/// Fills in missing or mis-sized encodings in place.
pub fn ensure_encodings(graphs: &mut [PrefixGraph], config: &EncodingConfig) {
    for g in graphs {
        let fits = g.encodings.as_ref().is_some_and(|e| {
            e.pe_dim() == config.pe_dim
                && e.lap_pe.len() == g.num_nodes()
                && e.rwse.len() == g.num_nodes()
                && (g.num_nodes() == 0 || e.se_dim() == config.se_dim)
        });
        if !fits {
            g.encodings = Some(attach_encodings(g, config));
        }
    }
}

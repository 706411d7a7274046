//! Per-school directed networks, projection matrices and graph-based
//! identification checks.
//!
//! A school network stores the binary adjacency sparsely (out-neighbor
//! lists). The row-normalized interaction matrix, the group annihilator
//! `J` and its orthonormal factor `F` are derived from it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Directed friendship network of a single school.
#[derive(Debug, Clone)]
pub struct SchoolNetwork {
    pub school_id: String,
    pub n: usize,
    /// Sorted out-neighbor lists; `neighbors[i]` are the friends of `i`.
    neighbors: Vec<Vec<usize>>,
    pub out_degree: Vec<usize>,
    /// `true` where the student nominates no friends.
    pub iso_mask: Vec<bool>,
}

impl SchoolNetwork {
    pub fn from_neighbor_lists(school_id: impl Into<String>, n: usize, mut lists: Vec<Vec<usize>>) -> Result<Self> {
        if lists.len() != n {
            return Err(Error::Network(format!(
                "expected {n} neighbor lists, got {}",
                lists.len()
            )));
        }
        for (i, lst) in lists.iter_mut().enumerate() {
            lst.sort_unstable();
            lst.dedup();
            if lst.iter().any(|&j| j == i) {
                return Err(Error::Network(format!("self-loop at node {i}")));
            }
            if lst.iter().any(|&j| j >= n) {
                return Err(Error::Network(format!("neighbor out of range at node {i}")));
            }
        }
        let out_degree: Vec<usize> = lists.iter().map(|l| l.len()).collect();
        let iso_mask: Vec<bool> = out_degree.iter().map(|&d| d == 0).collect();
        Ok(Self {
            school_id: school_id.into(),
            n,
            neighbors: lists,
            out_degree,
            iso_mask,
        })
    }

    /// Build from a dense binary adjacency matrix.
    pub fn from_adjacency(school_id: impl Into<String>, adjacency: &DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::Network("adjacency must be square".into()));
        }
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                let a = adjacency[(i, j)];
                if a == 0.0 {
                    continue;
                }
                if a != 1.0 {
                    return Err(Error::Network(format!(
                        "non-binary adjacency entry {a} at ({i},{j})"
                    )));
                }
                if i == j {
                    return Err(Error::Network(format!("nonzero diagonal at node {i}")));
                }
                lists[i].push(j);
            }
        }
        Self::from_neighbor_lists(school_id, n, lists)
    }

    /// Build from an edge list; duplicate edges are collapsed and counted.
    pub fn from_edges(
        school_id: impl Into<String>,
        n: usize,
        edges: &[(usize, usize)],
    ) -> Result<(Self, usize)> {
        let mut lists = vec![Vec::new(); n];
        for &(src, dst) in edges {
            if src == dst {
                return Err(Error::Network(format!("self-loop edge {src}->{dst}")));
            }
            if src >= n || dst >= n {
                return Err(Error::Network(format!("edge {src}->{dst} out of range (n={n})")));
            }
            lists[src].push(dst);
        }
        let raw: usize = lists.iter().map(|l| l.len()).sum();
        let net = Self::from_neighbor_lists(school_id, n, lists)?;
        let kept: usize = net.out_degree.iter().sum();
        Ok((net, raw - kept))
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn n_isolated(&self) -> usize {
        self.iso_mask.iter().filter(|&&m| m).count()
    }

    pub fn n_nonisolated(&self) -> usize {
        self.n - self.n_isolated()
    }

    /// Indicator vector of isolated students.
    pub fn iso_indicator(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, self.iso_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }))
    }

    /// Indicator vector of students with at least one friend.
    pub fn noniso_indicator(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, self.iso_mask.iter().map(|&m| if m { 0.0 } else { 1.0 }))
    }

    /// Row-normalized interaction matrix.
    pub fn interaction(&self) -> InteractionMatrix {
        let rows = self
            .neighbors
            .iter()
            .map(|lst| {
                let w = if lst.is_empty() { 0.0 } else { 1.0 / lst.len() as f64 };
                lst.iter().map(|&j| (j, w)).collect()
            })
            .collect();
        InteractionMatrix { n: self.n, rows }
    }

    pub fn to_dense_adjacency(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for (i, lst) in self.neighbors.iter().enumerate() {
            for &j in lst {
                a[(i, j)] = 1.0;
            }
        }
        a
    }
}

/// Row-stochastic-or-zero interaction matrix `G`, stored sparsely.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    pub n: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl InteractionMatrix {
    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (i, row) in self.rows.iter().enumerate() {
            out[i] = row.iter().map(|&(j, w)| w * v[j]).sum();
        }
        out
    }

    pub fn mul_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, m.ncols());
        for (i, row) in self.rows.iter().enumerate() {
            for c in 0..m.ncols() {
                out[(i, c)] = row.iter().map(|&(j, w)| w * m[(j, c)]).sum();
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                g[(i, j)] = w;
            }
        }
        g
    }
}

/// Row-normalize a binary adjacency matrix into an interaction matrix.
///
/// Rows with positive out-degree are scaled to sum to one; zero rows stay
/// all-zero.
pub fn row_normalize(adjacency: &DMatrix<f64>) -> Result<InteractionMatrix> {
    let net = SchoolNetwork::from_adjacency("tmp", adjacency)?;
    Ok(net.interaction())
}

/// Group annihilator `J` and an orthonormal basis `F` of its range.
#[derive(Debug, Clone)]
pub struct Annihilator {
    pub j: DMatrix<f64>,
    /// `n x (n - r)` with orthonormal columns, `F F' = J`, where `r` is the
    /// number of non-empty status groups.
    pub f: DMatrix<f64>,
    /// Number of non-empty status groups (1 or 2).
    pub groups: usize,
}

fn annihilator_from_j(j: DMatrix<f64>, groups: usize, n: usize) -> Annihilator {
    // J is symmetric idempotent; its range is spanned by eigenvectors with
    // eigenvalue one.
    let eig = nalgebra::SymmetricEigen::new(j.clone());
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (k, &ev) in eig.eigenvalues.iter().enumerate() {
        if ev > 0.5 {
            cols.push(eig.eigenvectors.column(k).into_owned());
        }
    }
    debug_assert_eq!(cols.len(), n - groups);
    let f = DMatrix::from_columns(&cols);
    Annihilator { j, f, groups }
}

/// Dual-group annihilator: demeans within isolated and non-isolated groups
/// of the school. An empty group contributes nothing.
pub fn build_annihilator(net: &SchoolNetwork) -> Annihilator {
    let n = net.n;
    let iso = net.iso_indicator();
    let noniso = net.noniso_indicator();
    let n_iso = net.n_isolated();
    let n_noniso = net.n_nonisolated();
    let mut j = DMatrix::identity(n, n);
    let mut groups = 0;
    if n_iso > 0 {
        j -= &iso * iso.transpose() / n_iso as f64;
        groups += 1;
    }
    if n_noniso > 0 {
        j -= &noniso * noniso.transpose() / n_noniso as f64;
        groups += 1;
    }
    annihilator_from_j(j, groups, n)
}

/// Single-group annihilator `I - 11'/n` (plain within-school demeaning).
pub fn single_group_annihilator(n: usize) -> Annihilator {
    let ones = DVector::from_element(n, 1.0);
    let j = DMatrix::identity(n, n) - &ones * ones.transpose() / n as f64;
    annihilator_from_j(j, 1, n)
}

/// Result of `check_distance3`: whether some ordered pair of students is at
/// shortest directed distance exactly three, with one witness pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Distance3Check {
    pub holds: bool,
    pub witness: Option<(usize, usize)>,
}

/// BFS from every node, early exit on the first node whose shortest
/// directed distance from the source is exactly three.
pub fn check_distance3(net: &SchoolNetwork) -> Distance3Check {
    let n = net.n;
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    for src in 0..n {
        dist.iter_mut().for_each(|d| *d = usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        while let Some(u) = queue.pop_front() {
            if dist[u] >= 3 {
                continue;
            }
            for &v in net.neighbors(u) {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    if dist[v] == 3 {
                        return Distance3Check {
                            holds: true,
                            witness: Some((src, v)),
                        };
                    }
                    queue.push_back(v);
                }
            }
        }
    }
    Distance3Check {
        holds: false,
        witness: None,
    }
}

/// Rank report from a vectorized linear-independence test.
#[derive(Debug, Clone)]
pub struct RankReport {
    pub holds: bool,
    pub rank: usize,
    pub required: usize,
    pub singular_values: Vec<f64>,
    pub rel_threshold: f64,
}

const RANK_REL_TOL: f64 = 1e-8;

fn rank_of_columns(cols: &[DVector<f64>], required: usize) -> RankReport {
    let k = cols.len();
    // Singular values via the k x k Gram matrix; k is at most four here.
    let mut gram = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            gram[(a, b)] = cols[a].dot(&cols[b]);
        }
    }
    let eig = nalgebra::SymmetricEigen::new(gram);
    let mut ev: Vec<f64> = eig.eigenvalues.iter().map(|&e| e.max(0.0)).collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let max_ev = ev.first().copied().unwrap_or(0.0);
    // Threshold the Gram eigenvalues rather than their square roots; the
    // eigenvalue noise floor sits near machine epsilon times the largest
    // eigenvalue, so square roots of noise can exceed a relative cut.
    let rank = if max_ev == 0.0 {
        0
    } else {
        ev.iter().filter(|&&e| e > RANK_REL_TOL * max_ev).count()
    };
    let sv: Vec<f64> = ev.iter().map(|&e| e.sqrt()).collect();
    RankReport {
        holds: rank >= required,
        rank,
        required,
        singular_values: sv,
        rel_threshold: RANK_REL_TOL,
    }
}

/// Test whether `J_s`, `J_s(G_s+G_s')J_s` and `J_s G_s G_s' J_s`, stacked
/// across schools, are linearly independent. This is the necessary
/// condition for identifying the error-covariance components.
pub fn check_variance_identification(nets: &[&SchoolNetwork]) -> RankReport {
    let total: usize = nets.iter().map(|n| n.n * n.n).sum();
    let mut c0 = DVector::zeros(total);
    let mut c1 = DVector::zeros(total);
    let mut c2 = DVector::zeros(total);
    let mut off = 0;
    for net in nets {
        let ann = build_annihilator(net);
        let g = net.interaction().to_dense();
        let sym = &ann.j * (&g + g.transpose()) * &ann.j;
        let gg = &ann.j * (&g * g.transpose()) * &ann.j;
        let m = net.n * net.n;
        for (k, idx) in (off..off + m).enumerate() {
            c0[idx] = ann.j.as_slice()[k];
            c1[idx] = sym.as_slice()[k];
            c2[idx] = gg.as_slice()[k];
        }
        off += m;
    }
    rank_of_columns(&[c0, c1, c2], 3)
}

/// Test linear independence of `I, G, G^2, G^3` for one school; the
/// sufficient condition of the classical reflection-problem analysis.
pub fn check_linmaps_independence(net: &SchoolNetwork) -> RankReport {
    let g = net.interaction().to_dense();
    let n = net.n;
    let i = DMatrix::identity(n, n);
    let g2 = &g * &g;
    let g3 = &g2 * &g;
    let to_vec = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    rank_of_columns(&[to_vec(&i), to_vec(&g), to_vec(&g2), to_vec(&g3)], 4)
}


#[cfg(test)]
pub use tests::{chain4, fixture7};

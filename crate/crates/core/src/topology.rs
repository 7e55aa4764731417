//! Communication topology among inverters and the two reference leaders,
//! plus the derived graph matrices used by the containment controller.
//!
//! Edge direction convention: `adjacency[(i, j)]` is the weight of the link
//! carrying node `j`'s state *to* node `i` ("i receives from j"). Leader
//! links are diagonal pinning gains, one vector per leader.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Reciprocal condition number below which the containment matrix sum is
/// treated as singular.
pub const SINGULARITY_RCOND: f64 = 1e-12;

/// Eigenvalue floor for the positive-definiteness check.
pub const PD_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("adjacency matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("graph must have at least one follower")]
    Empty,
    #[error("self-loop at node {0} (diagonal must be zero)")]
    SelfLoop(usize),
    #[error("negative edge weight at ({i}, {j})")]
    NegativeWeight { i: usize, j: usize },
    #[error("pinning vector length {got} does not match follower count {expected}")]
    PinLength { got: usize, expected: usize },
    #[error("negative pinning gain at node {0}")]
    NegativePin(usize),
    #[error("sum of containment matrices is singular (rcond {rcond:.3e}); leader reachability assumption violated")]
    SingularPhiSum { rcond: f64 },
}

/// Weighted digraph of N follower inverters plus two pinned leaders.
#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    n: usize,
    adjacency: DMatrix<f64>,
    pin_upper: DVector<f64>,
    pin_lower: DVector<f64>,
}

impl CommGraph {
    /// Builds a graph after validating the structural invariants: zero
    /// diagonal, nonnegative weights, matching pin lengths.
    pub fn new(
        adjacency: DMatrix<f64>,
        pin_upper: DVector<f64>,
        pin_lower: DVector<f64>,
    ) -> Result<Self, TopologyError> {
        let (rows, cols) = adjacency.shape();
        if rows != cols {
            return Err(TopologyError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(TopologyError::Empty);
        }
        let n = rows;
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(TopologyError::SelfLoop(i));
            }
            for j in 0..n {
                if adjacency[(i, j)] < 0.0 {
                    return Err(TopologyError::NegativeWeight { i, j });
                }
            }
        }
        for (pins, _name) in [(&pin_upper, "upper"), (&pin_lower, "lower")] {
            if pins.len() != n {
                return Err(TopologyError::PinLength {
                    got: pins.len(),
                    expected: n,
                });
            }
            if let Some(i) = (0..n).find(|&i| pins[i] < 0.0) {
                return Err(TopologyError::NegativePin(i));
            }
        }
        Ok(Self {
            n,
            adjacency,
            pin_upper,
            pin_lower,
        })
    }

    pub fn n_followers(&self) -> usize {
        self.n
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Weight of the link from node `j` into node `i`.
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[(i, j)]
    }

    /// Pinning gains from the leader that issues the upper voltage reference.
    pub fn pin_upper(&self) -> &DVector<f64> {
        &self.pin_upper
    }

    /// Pinning gains from the leader that issues the lower voltage reference.
    pub fn pin_lower(&self) -> &DVector<f64> {
        &self.pin_lower
    }

    /// In-neighbors of node `i` as `(j, a_ij)` pairs with positive weight.
    pub fn in_neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n)
            .map(move |j| (j, self.adjacency[(i, j)]))
            .filter(|&(_, w)| w > 0.0)
    }

    /// Per-follower reachability from the leader set through the union
    /// digraph. A follower counts as reached if a leader pins it directly or
    /// if it receives (transitively) from a reached follower.
    pub fn leader_reachability(&self) -> Vec<bool> {
        let mut reached: Vec<bool> = (0..self.n)
            .map(|i| self.pin_upper[i] > 0.0 || self.pin_lower[i] > 0.0)
            .collect();
        let mut frontier: Vec<usize> = (0..self.n).filter(|&i| reached[i]).collect();
        while let Some(j) = frontier.pop() {
            for i in 0..self.n {
                if !reached[i] && self.adjacency[(i, j)] > 0.0 {
                    reached[i] = true;
                    frontier.push(i);
                }
            }
        }
        reached
    }

    /// True iff every follower is reachable from at least one leader.
    pub fn assumption1_holds(&self) -> bool {
        self.leader_reachability().iter().all(|&r| r)
    }

    /// Computes the Laplacian, the two containment matrices, their sum and
    /// its inverse. Fails when the sum is numerically singular, which is the
    /// symptom of a leader-reachability violation.
    pub fn build_matrices(&self) -> Result<GraphMatrices, TopologyError> {
        let n = self.n;
        let degrees = DVector::from_fn(n, |i, _| self.adjacency.row(i).sum());
        let laplacian = DMatrix::from_diagonal(&degrees) - &self.adjacency;

        let half_l = &laplacian * 0.5;
        let phi_upper = &half_l + DMatrix::from_diagonal(&self.pin_upper);
        let phi_lower = &half_l + DMatrix::from_diagonal(&self.pin_lower);
        let phi_sum = &phi_upper + &phi_lower;

        let svd = phi_sum.clone().svd(false, false);
        let sigma_max = svd.singular_values.max();
        let sigma_min = svd.singular_values.min();
        let rcond = if sigma_max > 0.0 {
            sigma_min / sigma_max
        } else {
            0.0
        };
        if rcond < SINGULARITY_RCOND {
            return Err(TopologyError::SingularPhiSum { rcond });
        }
        let phi_sum_inv = phi_sum
            .clone()
            .try_inverse()
            .ok_or(TopologyError::SingularPhiSum { rcond })?;

        Ok(GraphMatrices {
            laplacian,
            phi_upper,
            phi_lower,
            phi_sum,
            phi_sum_inv,
        })
    }
}

/// Derived matrices of a [`CommGraph`], built once per topology epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphMatrices {
    pub laplacian: DMatrix<f64>,
    pub phi_upper: DMatrix<f64>,
    pub phi_lower: DMatrix<f64>,
    pub phi_sum: DMatrix<f64>,
    pub phi_sum_inv: DMatrix<f64>,
}

impl GraphMatrices {
    /// True iff the symmetric part of the containment matrix sum is positive
    /// definite (all eigenvalues above [`PD_TOLERANCE`]).
    pub fn positive_definiteness_check(&self) -> bool {
        let sym = (&self.phi_sum + self.phi_sum.transpose()) * 0.5;
        let eigs = sym.symmetric_eigenvalues();
        eigs.iter().all(|&e| e > PD_TOLERANCE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Four inverters on a bidirectional ring, leader pins on nodes 1 and 3.
    pub(crate) fn ring4() -> CommGraph {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[
                0.0, 1.0, 0.0, 1.0, //
                1.0, 0.0, 1.0, 0.0, //
                0.0, 1.0, 0.0, 1.0, //
                1.0, 0.0, 1.0, 0.0,
            ],
        );
        let pin_upper = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let pin_lower = DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0]);
        CommGraph::new(a, pin_upper, pin_lower).unwrap()
    }

    #[test]
    fn ring4_phi_sum_matches_hand_computation() {
        let m = ring4().build_matrices().unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                3.0, -1.0, 0.0, -1.0, //
                -1.0, 2.0, -1.0, 0.0, //
                0.0, -1.0, 3.0, -1.0, //
                -1.0, 0.0, -1.0, 2.0,
            ],
        );
        assert_relative_eq!(m.phi_sum, expected, epsilon = 1e-14);
    }

    #[test]
    fn single_node_with_pin() {
        let g = CommGraph::new(
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DVector::from_vec(vec![1.0]),
            DVector::from_vec(vec![0.0]),
        )
        .unwrap();
        let m = g.build_matrices().unwrap();
        assert_relative_eq!(m.phi_sum[(0, 0)], 1.0);
        assert_relative_eq!(m.phi_sum_inv[(0, 0)], 1.0);
    }

    #[test]
    fn unpinned_connected_graph_is_singular() {
        let a = ring4().adjacency().clone();
        let zeros = DVector::zeros(4);
        let g = CommGraph::new(a, zeros.clone(), zeros).unwrap();
        let err = g.build_matrices().unwrap_err();
        assert!(matches!(err, TopologyError::SingularPhiSum { .. }));
        // The Laplacian annihilates the all-ones vector, so the smallest
        // eigenvalue of the symmetric part must be ~0.
        let degrees = DVector::from_fn(4, |i, _| g.adjacency().row(i).sum());
        let lap = DMatrix::from_diagonal(&degrees) - g.adjacency();
        let min_eig = lap.symmetric_eigenvalues().min();
        assert!(min_eig.abs() < 1e-12);
    }

    #[test]
    fn laplacian_rows_sum_to_zero() {
        let m = ring4().build_matrices().unwrap();
        let ones = DVector::from_element(4, 1.0);
        let prod = &m.laplacian * ones;
        assert!(prod.amax() < 1e-14);
    }

    #[test]
    fn reachability_on_paper_graph() {
        assert!(ring4().assumption1_holds());
    }

    #[test]
    fn isolated_followers_fail_assumption1() {
        let g = CommGraph::new(DMatrix::zeros(2, 2), DVector::zeros(2), DVector::zeros(2)).unwrap();
        assert!(!g.assumption1_holds());
        assert_eq!(g.leader_reachability(), vec![false, false]);
    }

    #[test]
    fn link_1_2_removed_keeps_assumption1() {
        let mut a = ring4().adjacency().clone();
        a[(0, 1)] = 0.0;
        a[(1, 0)] = 0.0;
        let g = CommGraph::new(
            a,
            ring4().pin_upper().clone(),
            ring4().pin_lower().clone(),
        )
        .unwrap();
        assert!(g.assumption1_holds());
    }

    #[test]
    fn positive_definiteness_examples() {
        let m = ring4().build_matrices().unwrap();
        assert!(m.positive_definiteness_check());

        let zero = GraphMatrices {
            laplacian: DMatrix::zeros(2, 2),
            phi_upper: DMatrix::zeros(2, 2),
            phi_lower: DMatrix::zeros(2, 2),
            phi_sum: DMatrix::zeros(2, 2),
            phi_sum_inv: DMatrix::zeros(2, 2),
        };
        assert!(!zero.positive_definiteness_check());

        let ident = GraphMatrices {
            laplacian: DMatrix::zeros(2, 2),
            phi_upper: DMatrix::identity(2, 2) * 0.5,
            phi_lower: DMatrix::identity(2, 2) * 0.5,
            phi_sum: DMatrix::identity(2, 2),
            phi_sum_inv: DMatrix::identity(2, 2),
        };
        assert!(ident.positive_definiteness_check());
    }

    #[test]
    fn phi_sum_inverse_is_accurate() {
        let m = ring4().build_matrices().unwrap();
        let prod = &m.phi_sum * &m.phi_sum_inv;
        assert_relative_eq!(prod, DMatrix::identity(4, 4), epsilon = 1e-10);
    }

    #[test]
    fn build_matrices_is_deterministic() {
        let g = ring4();
        let m1 = g.build_matrices().unwrap();
        let m2 = g.build_matrices().unwrap();
        let bits = |m: &DMatrix<f64>| -> Vec<u64> { m.iter().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&m1.phi_sum_inv), bits(&m2.phi_sum_inv));
        assert_eq!(bits(&m1.laplacian), bits(&m2.laplacian));
    }

    #[test]
    fn rejects_malformed_graphs() {
        let bad_diag = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            CommGraph::new(bad_diag, DVector::zeros(2), DVector::zeros(2)),
            Err(TopologyError::SelfLoop(0))
        ));

        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]);
        assert!(matches!(
            CommGraph::new(neg, DVector::zeros(2), DVector::zeros(2)),
            Err(TopologyError::NegativeWeight { i: 0, j: 1 })
        ));

        assert!(matches!(
            CommGraph::new(DMatrix::zeros(2, 2), DVector::zeros(1), DVector::zeros(2)),
            Err(TopologyError::PinLength { got: 1, expected: 2 })
        ));
    }
}

use nalgebra::{DMatrix, DVector};

use crate::lattice::OperatorMatrix;
use crate::C64;

const I: C64 = C64::new(0.0, 1.0);

#[derive(Debug, Clone)]
enum Decomposition {
    /// `H = V diag(λ) V†` with real λ.
    Hermitian { values: Vec<f64>, vectors: DMatrix<C64> },
    /// `H = V diag(λ) V⁻¹`.
    General {
        values: Vec<C64>,
        vectors: DMatrix<C64>,
        inverse: DMatrix<C64>,
    },
    /// Ill-conditioned eigenbasis; exponentiated directly.
    Direct { generator: DMatrix<C64> },
}

#[derive(Debug, Clone)]
struct Block {
    indices: Vec<usize>,
    decomposition: Decomposition,
}

/// Coefficients of a state in the eigenbases of an [`ExactPropagator`],
/// allowing `e^{-iHt}ψ` to be evaluated for many `t` at quadratic cost.
#[derive(Debug, Clone)]
pub struct ModalState {
    coefficients: Vec<DVector<C64>>,
}

/// Exact propagation by block diagonalization.
///
/// The operator is split into the connected components of its sparsity graph
/// (for lattice Hamiltonians these are the excitation-number sectors) and each
/// block is diagonalized once.
#[derive(Debug, Clone)]
pub struct ExactPropagator {
    dim: usize,
    blocks: Vec<Block>,
}

fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// Right eigenvectors of an upper-triangular matrix by back substitution.
fn triangular_eigenvectors(t: &DMatrix<C64>, scale: f64) -> DMatrix<C64> {
    let n = t.nrows();
    let small = f64::EPSILON * scale.max(f64::MIN_POSITIVE);
    let mut v = DMatrix::zeros(n, n);
    for k in 0..n {
        let lambda = t[(k, k)];
        v[(k, k)] = C64::new(1.0, 0.0);
        for i in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for j in i + 1..=k {
                s += t[(i, j)] * v[(j, k)];
            }
            let mut denom = t[(i, i)] - lambda;
            if denom.norm() < small {
                denom = C64::new(small, 0.0);
            }
            v[(i, k)] = -s / denom;
        }
        let norm = v.column(k).norm();
        v.column_mut(k).unscale_mut(norm);
    }
    v
}

fn decompose(block: DMatrix<C64>, hermitian: bool) -> Decomposition {
    let n = block.nrows();
    if hermitian {
        let eig = block.symmetric_eigen();
        return Decomposition::Hermitian {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
        };
    }
    let scale = max_abs(&block).max(1e-300);
    if n == 1 {
        return Decomposition::General {
            values: vec![block[(0, 0)]],
            vectors: DMatrix::identity(1, 1),
            inverse: DMatrix::identity(1, 1),
        };
    }
    let schur = match nalgebra::linalg::Schur::try_new(block.clone(), f64::EPSILON, 10_000) {
        Some(s) => s,
        None => return Decomposition::Direct { generator: block },
    };
    let (q, t) = schur.unpack();
    let vectors = &q * triangular_eigenvectors(&t, scale);
    let inverse = match vectors.clone().try_inverse() {
        Some(inv) => inv,
        None => return Decomposition::Direct { generator: block },
    };
    let values: Vec<C64> = (0..n).map(|k| t[(k, k)]).collect();
    let cond = max_abs(&vectors) * max_abs(&inverse) * n as f64;
    let recon = &vectors * DMatrix::from_diagonal(&DVector::from_vec(values.clone())) * &inverse;
    if cond > 1e6 || max_abs(&(recon - &block)) > 1e-11 * scale {
        return Decomposition::Direct { generator: block };
    }
    Decomposition::General {
        values,
        vectors,
        inverse,
    }
}

impl ExactPropagator {
    pub fn new(h: &OperatorMatrix) -> Self {
        let dim = h.dimension();
        let hermitian = h.is_hermitian();
        let blocks = h
            .connected_blocks()
            .into_iter()
            .map(|indices| {
                let n = indices.len();
                let mut local = vec![usize::MAX; dim];
                for (k, &i) in indices.iter().enumerate() {
                    local[i] = k;
                }
                let mut m = DMatrix::<C64>::zeros(n, n);
                h.for_each_nonzero(|r, c, v| {
                    if local[r] != usize::MAX {
                        m[(local[r], local[c])] = v;
                    }
                });
                Block {
                    decomposition: decompose(m, hermitian),
                    indices,
                }
            })
            .collect();
        ExactPropagator { dim, blocks }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Sizes of the independent blocks.
    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.indices.len()).collect()
    }

    /// True if some block fell back to direct exponentiation.
    pub fn has_direct_blocks(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b.decomposition, Decomposition::Direct { .. }))
    }

    pub fn to_modal(&self, psi: &[C64]) -> ModalState {
        let coefficients = self
            .blocks
            .iter()
            .map(|b| {
                let v = DVector::from_iterator(b.indices.len(), b.indices.iter().map(|&i| psi[i]));
                match &b.decomposition {
                    Decomposition::Hermitian { vectors, .. } => vectors.ad_mul(&v),
                    Decomposition::General { inverse, .. } => inverse * v,
                    Decomposition::Direct { .. } => v,
                }
            })
            .collect();
        ModalState { coefficients }
    }

    /// Writes `e^{-iHt}ψ` into `out`, where `modal` came from [`Self::to_modal`].
    pub fn evaluate(&self, modal: &ModalState, t: f64, out: &mut [C64]) {
        let zero = C64::new(0.0, 0.0);
        let mut phased = Vec::new();
        for (b, c) in self.blocks.iter().zip(&modal.coefficients) {
            if c.iter().all(|v| *v == zero) {
                for &i in &b.indices {
                    out[i] = zero;
                }
                continue;
            }
            let (values, vectors) = match &b.decomposition {
                Decomposition::Hermitian { values, vectors } => {
                    phased.clear();
                    phased.extend(values.iter().zip(c.iter()).map(|(&l, &ci)| ci * (-I * l * t).exp()));
                    (None, vectors)
                }
                Decomposition::General { values, vectors, .. } => (Some(values), vectors),
                Decomposition::Direct { generator } => {
                    let v = (generator * (-I * t)).exp() * c;
                    for (k, &i) in b.indices.iter().enumerate() {
                        out[i] = v[k];
                    }
                    continue;
                }
            };
            if let Some(values) = values {
                phased.clear();
                phased.extend(values.iter().zip(c.iter()).map(|(&l, &ci)| ci * (-I * l * t).exp()));
            }
            for (k, &i) in b.indices.iter().enumerate() {
                let mut acc = zero;
                for (j, p) in phased.iter().enumerate() {
                    acc += vectors[(k, j)] * p;
                }
                out[i] = acc;
            }
        }
    }

    /// `‖e^{-iHt}ψ‖²`.
    pub fn norm_sqr_at(&self, modal: &ModalState, t: f64) -> f64 {
        let mut out = vec![C64::new(0.0, 0.0); self.dim];
        self.evaluate(modal, t, &mut out);
        out.iter().map(C64::norm_sqr).sum()
    }

    /// `e^{-iHt}ψ`.
    pub fn propagate(&self, psi: &[C64], t: f64) -> Vec<C64> {
        let modal = self.to_modal(psi);
        let mut out = vec![C64::new(0.0, 0.0); self.dim];
        self.evaluate(&modal, t, &mut out);
        out
    }

    /// Dense block matrices of `e^{-iHt}` for repeated fixed-step use.
    pub fn step_operator(&self, t: f64) -> StepOperator {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let u = match &b.decomposition {
                    Decomposition::Hermitian { values, vectors } => {
                        let d = DVector::from_iterator(values.len(), values.iter().map(|&l| (-I * l * t).exp()));
                        vectors * DMatrix::from_diagonal(&d) * vectors.adjoint()
                    }
                    Decomposition::General {
                        values,
                        vectors,
                        inverse,
                    } => {
                        let d = DVector::from_iterator(values.len(), values.iter().map(|&l| (-I * l * t).exp()));
                        vectors * DMatrix::from_diagonal(&d) * inverse
                    }
                    Decomposition::Direct { generator } => (generator * (-I * t)).exp(),
                };
                (b.indices.clone(), u)
            })
            .collect();
        StepOperator {
            dim: self.dim,
            blocks,
        }
    }
}

/// Block-diagonal `e^{-iH dt}` for a fixed `dt`.
#[derive(Debug, Clone)]
pub struct StepOperator {
    dim: usize,
    blocks: Vec<(Vec<usize>, DMatrix<C64>)>,
}

impl StepOperator {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Applies the step in place. Blocks on which `psi` vanishes are skipped.
    pub fn apply(&self, psi: &mut [C64]) {
        let zero = C64::new(0.0, 0.0);
        let mut v = Vec::new();
        for (indices, u) in &self.blocks {
            v.clear();
            v.extend(indices.iter().map(|&i| psi[i]));
            if v.iter().all(|x| *x == zero) {
                continue;
            }
            for (k, &i) in indices.iter().enumerate() {
                let mut acc = zero;
                for (j, x) in v.iter().enumerate() {
                    acc += u[(k, j)] * x;
                }
                psi[i] = acc;
            }
        }
    }
}

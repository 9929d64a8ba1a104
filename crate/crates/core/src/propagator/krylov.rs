use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::OperatorMatrix;
use crate::C64;

/// Krylov subspace settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrylovOptions {
    pub subspace: usize,
    pub tolerance: f64,
    pub max_substeps: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            subspace: 20,
            tolerance: 1e-10,
            max_substeps: 100_000,
        }
    }
}

fn norm(v: &[C64]) -> f64 {
    v.iter().map(C64::norm_sqr).sum::<f64>().sqrt()
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `e^{-iHt}ψ` by Arnoldi iteration with adaptive substeps.
///
/// Each substep builds an `m`-dimensional Krylov space of `-iH` and
/// exponentiates the projected Hessenberg matrix. The local error is estimated
/// from the first neglected Arnoldi coefficient times the last entry of
/// `φ₁(τH_m)e₁`; substeps are shrunk until it is below the tolerance share of
/// the substep.
pub fn krylov_propagate(h: &OperatorMatrix, psi: &[C64], t: f64, opts: &KrylovOptions) -> Result<Vec<C64>> {
    let n = h.dimension();
    if psi.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: psi.len(),
        });
    }
    let mut w = psi.to_vec();
    if t == 0.0 {
        return Ok(w);
    }
    let sign = t.signum();
    let total = t.abs();
    let m_max = opts.subspace.clamp(1, n.max(1));
    let scale = h.max_abs().max(1e-300);
    let mut done = 0.0;
    let mut tau_next = total;
    let mut substeps = 0;
    let mut v: Vec<Vec<C64>> = Vec::with_capacity(m_max + 1);
    let mut p = vec![C64::new(0.0, 0.0); n];
    while done < total {
        let beta = norm(&w);
        if beta == 0.0 {
            return Ok(w);
        }
        v.clear();
        v.push(w.iter().map(|x| x / beta).collect());
        let mut hm = DMatrix::<C64>::zeros(m_max + 1, m_max + 1);
        let mut m = m_max;
        let mut breakdown = false;
        for j in 0..m_max {
            h.apply(&v[j], &mut p);
            for x in p.iter_mut() {
                *x *= C64::new(0.0, -sign);
            }
            for (i, vi) in v.iter().enumerate() {
                let c = dot(vi, &p);
                hm[(i, j)] = c;
                for (x, y) in p.iter_mut().zip(vi) {
                    *x -= c * y;
                }
            }
            let hn = norm(&p);
            hm[(j + 1, j)] = C64::new(hn, 0.0);
            if hn <= 1e-13 * scale {
                m = j + 1;
                breakdown = true;
                break;
            }
            v.push(p.iter().map(|x| x / hn).collect());
        }
        let h_next = hm[(m, m - 1)].re;
        loop {
            let tau = tau_next.min(total - done);
            // exp([[τH_m, e₁], [0, 0]]) carries φ₁(τH_m)e₁ in its last column
            let mut aug = DMatrix::<C64>::zeros(m + 1, m + 1);
            for r in 0..m {
                for c in 0..m {
                    aug[(r, c)] = hm[(r, c)] * tau;
                }
            }
            aug[(0, m)] = C64::new(1.0, 0.0);
            let e = aug.exp();
            let err = if breakdown {
                0.0
            } else {
                beta * h_next * tau * e[(m - 1, m)].norm()
            };
            let allowed = opts.tolerance * beta * tau / total;
            substeps += 1;
            if err <= allowed || breakdown {
                let mut out = vec![C64::new(0.0, 0.0); n];
                for k in 0..m {
                    let coef = e[(k, 0)] * beta;
                    for (o, vk) in out.iter_mut().zip(&v[k]) {
                        *o += coef * vk;
                    }
                }
                w = out;
                done += tau;
                if total - done <= 1e-15 * total {
                    done = total;
                }
                let growth = if err > 0.0 {
                    (0.9 * (allowed / err).powf(1.0 / m as f64)).min(2.0)
                } else {
                    2.0
                };
                tau_next = tau * growth.max(1.0);
                break;
            }
            let shrink = (0.9 * (allowed / err).powf(1.0 / m as f64)).clamp(0.1, 0.9);
            tau_next = tau * shrink;
            if substeps > opts.max_substeps || tau_next < 1e-14 * total {
                return Err(Error::KrylovNonConvergence {
                    residual: err,
                    tolerance: allowed,
                });
            }
        }
    }
    Ok(w)
}

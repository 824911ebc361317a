//! Difference-equation dynamics of the latent processes.
//!
//! With `Atilde(t_j) = I + delta * A(t_j)` the state evolves as
//! `Lambda(t_{j+1}) = Atilde(t_j) Lambda(t_j) + delta (X(t_{j+1}) gamma + Z(t_{j+1}) v)`,
//! starting from `Lambda(0) = X0 beta + u`. Unrolling gives
//! `Lambda(t_j) = mean_j + W_j w` with `w = (u, v) ~ N(0, B)` and
//! `W_j = [Psi(0,j,0) | delta sum_{s=1..j} Psi(0,j,s) Z(t_s)]`, so every
//! covariance block is `W_j B W_j'^T`. Expanding that product yields the four
//! terms `Psi B_u Psi'^T`, the two `B_uv` cross terms, and the `B_v` term.

use nalgebra::{DMatrix, DVector};

use crate::design::DesignSet;
use crate::error::{Error, Result};
use crate::params::{ParamLayout, Theta};

/// Temporal-influence matrix `A` for one regressor vector.
///
/// `alpha` is laid out as `D x D x r` (see [`Theta`]).
pub fn influence_at(alpha: &[f64], n_dims: usize, regressors: &[f64]) -> Result<DMatrix<f64>> {
    let r = regressors.len();
    if alpha.len() != n_dims * n_dims * r {
        return Err(Error::spec(format!(
            "alpha has {} entries but D={n_dims} and r={r} need {}",
            alpha.len(),
            n_dims * n_dims * r
        )));
    }
    Ok(DMatrix::from_fn(n_dims, n_dims, |d, d2| {
        let base = (d * n_dims + d2) * r;
        alpha[base..base + r].iter().zip(regressors).map(|(a, x)| a * x).sum()
    }))
}

/// `I + delta * A`.
pub fn transition(a: &DMatrix<f64>, delta: f64) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::identity(n, n) + a * delta
}

/// Transition matrices `Atilde(t_j)` for `j = 0..horizon`.
pub fn transitions(design: &DesignSet, theta: &Theta, n_dims: usize) -> Result<Vec<DMatrix<f64>>> {
    let horizon = design.horizon();
    design.r[..horizon]
        .iter()
        .map(|r| Ok(transition(&influence_at(&theta.alpha, n_dims, r)?, design.delta)))
        .collect()
}

/// Ordered product `Atilde(t0+t_{j-1}) ... Atilde(t0+t_s)`, or `I` when `s == j`.
pub fn psi(transitions: &[DMatrix<f64>], t0_index: usize, j: usize, s: usize) -> Result<DMatrix<f64>> {
    if s > j {
        return Err(Error::InvalidParameter(format!("psi needs s <= j, got s={s}, j={j}")));
    }
    let n = transitions.first().map(|m| m.nrows()).unwrap_or(0);
    let mut out = DMatrix::identity(n, n);
    for l in s..j {
        let a = transitions
            .get(t0_index + l)
            .ok_or_else(|| Error::InvalidParameter(format!("no transition at index {}", t0_index + l)))?;
        out = a * out;
    }
    Ok(out)
}

/// Mean path and random-effect loadings: `Lambda(t_j) = mean[j] + loading[j] * w`.
#[derive(Debug, Clone)]
pub struct LatentPaths {
    pub mean: Vec<DVector<f64>>,
    pub loading: Vec<DMatrix<f64>>,
}

pub fn latent_paths(design: &DesignSet, theta: &Theta, layout: &ParamLayout) -> Result<LatentPaths> {
    let s = &layout.structure;
    let nd = s.n_dims;
    let nr = s.n_random();
    let delta = design.delta;
    let beta = DVector::from_column_slice(&theta.beta);
    let gamma = DVector::from_column_slice(&theta.gamma);
    let trans = transitions(design, theta, nd)?;
    let horizon = design.horizon();

    let mut mean = Vec::with_capacity(horizon + 1);
    let mut loading = Vec::with_capacity(horizon + 1);
    let mut m = &design.x0 * &beta;
    let mut w = DMatrix::zeros(nd, nr);
    w.view_mut((0, 0), (nd, nd)).fill_with_identity();
    mean.push(m.clone());
    loading.push(w.clone());
    for j in 0..horizon {
        let a = &trans[j];
        m = a * &m + (&design.x[j + 1] * &gamma) * delta;
        w = a * &w;
        let mut vpart = w.view_mut((0, nd), (nd, nr - nd));
        vpart += &design.z[j + 1] * delta;
        mean.push(m.clone());
        loading.push(w.clone());
    }
    Ok(LatentPaths { mean, loading })
}

/// Stacked mean and covariance of the latent state over grid occasions.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    pub n_dims: usize,
    pub mu: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl LatentMoments {
    pub fn n_occasions(&self) -> usize {
        self.mu.len() / self.n_dims
    }

    pub fn mean_at(&self, j: usize) -> DVector<f64> {
        self.mu.rows(j * self.n_dims, self.n_dims).into_owned()
    }

    pub fn block(&self, j: usize, j2: usize) -> DMatrix<f64> {
        let d = self.n_dims;
        self.v.view((j * d, j2 * d), (d, d)).into_owned()
    }
}

impl LatentPaths {
    pub fn moments(&self, b: &DMatrix<f64>) -> LatentMoments {
        let nd = self.mean[0].len();
        let n = self.mean.len();
        let mut mu = DVector::zeros(nd * n);
        for (j, m) in self.mean.iter().enumerate() {
            mu.rows_mut(j * nd, nd).copy_from(m);
        }
        let stacked = DMatrix::from_fn(nd * n, b.nrows(), |row, col| self.loading[row / nd][(row % nd, col)]);
        let mut v = &stacked * b * stacked.transpose();
        // exact symmetry
        for i in 0..v.nrows() {
            for k in 0..i {
                let avg = 0.5 * (v[(i, k)] + v[(k, i)]);
                v[(i, k)] = avg;
                v[(k, i)] = avg;
            }
        }
        LatentMoments { n_dims: nd, mu, v }
    }
}

pub fn latent_mean(design: &DesignSet, theta: &Theta, layout: &ParamLayout) -> Result<Vec<DVector<f64>>> {
    Ok(latent_paths(design, theta, layout)?.mean)
}

pub fn latent_moments(design: &DesignSet, theta: &Theta, layout: &ParamLayout) -> Result<LatentMoments> {
    let b = layout.assemble_b(&theta.l_free);
    Ok(latent_paths(design, theta, layout)?.moments(&b))
}

pub fn latent_covariance(design: &DesignSet, theta: &Theta, layout: &ParamLayout) -> Result<DMatrix<f64>> {
    Ok(latent_moments(design, theta, layout)?.v)
}

/// Precomputed one-step dynamics, used to simulate trajectories without
/// per-step allocation.
#[derive(Debug, Clone)]
pub struct Dynamics {
    n_dims: usize,
    n_random: usize,
    delta: f64,
    initial: Vec<f64>,
    /// Row-major `Atilde(t_j)`.
    transitions: Vec<Vec<f64>>,
    /// `X(t_j) gamma`, index 0 unused.
    drift: Vec<Vec<f64>>,
    /// Row-major `Z(t_j)`, index 0 unused.
    z: Vec<Vec<f64>>,
}

impl Dynamics {
    pub fn new(design: &DesignSet, theta: &Theta, layout: &ParamLayout) -> Result<Self> {
        let s = &layout.structure;
        let nd = s.n_dims;
        let q = s.q();
        let beta = DVector::from_column_slice(&theta.beta);
        let gamma = DVector::from_column_slice(&theta.gamma);
        let row_major = |m: &DMatrix<f64>| -> Vec<f64> {
            (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |k| (i, k))).map(|ik| m[ik]).collect()
        };
        let trans = transitions(design, theta, nd)?;
        Ok(Dynamics {
            n_dims: nd,
            n_random: nd + q,
            delta: design.delta,
            initial: (&design.x0 * &beta).as_slice().to_vec(),
            transitions: trans.iter().map(row_major).collect(),
            drift: design.x.iter().map(|x| (x * &gamma).as_slice().to_vec()).collect(),
            z: design.z.iter().map(row_major).collect(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.transitions.len()
    }

    /// Run the recursion for random effects `u` (length D) and `v` (length q),
    /// calling `visit(j, state)` at every grid occasion.
    pub fn run<F: FnMut(usize, &[f64])>(&self, u: &[f64], v: &[f64], mut visit: F) {
        let nd = self.n_dims;
        let q = self.n_random - nd;
        assert_eq!(u.len(), nd);
        assert_eq!(v.len(), q);
        let mut state: Vec<f64> = self.initial.iter().zip(u).map(|(a, b)| a + b).collect();
        let mut next = vec![0.0; nd];
        visit(0, &state);
        for j in 0..self.horizon() {
            let a = &self.transitions[j];
            let drift = &self.drift[j + 1];
            let z = &self.z[j + 1];
            for d in 0..nd {
                let mut acc = 0.0;
                for k in 0..nd {
                    acc += a[d * nd + k] * state[k];
                }
                let mut forcing = drift[d];
                for k in 0..q {
                    forcing += z[d * q + k] * v[k];
                }
                next[d] = acc + self.delta * forcing;
            }
            std::mem::swap(&mut state, &mut next);
            visit(j + 1, &state);
        }
    }
}

/// Latent trajectory on the grid for given random effects.
pub fn forward_recursion(
    design: &DesignSet,
    theta: &Theta,
    layout: &ParamLayout,
    u: &[f64],
    v: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let s = &layout.structure;
    if u.len() != s.n_dims || v.len() != s.q() {
        return Err(Error::spec(format!(
            "random effects have lengths ({}, {}), expected ({}, {})",
            u.len(),
            v.len(),
            s.n_dims,
            s.q()
        )));
    }
    let dynamics = Dynamics::new(design, theta, layout)?;
    let mut out = Vec::with_capacity(dynamics.horizon() + 1);
    dynamics.run(u, v, |_, st| out.push(DVector::from_column_slice(st)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn influence_with_binary_covariate() {
        // a_12 = alpha^0 + alpha^1 * C2 with C2 = 1
        let mut alpha = vec![0.0; 2 * 2 * 2];
        alpha[2] = 0.115;
        alpha[3] = -0.092;
        let a = influence_at(&alpha, 2, &[1.0, 1.0]).unwrap();
        assert!((a[(0, 1)] - 0.023).abs() < 1e-15);
        assert_eq!(a[(0, 0)], 0.0);
    }

    #[test]
    fn influence_length_mismatch() {
        assert!(influence_at(&[0.0; 4], 2, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn psi_identity_and_power() {
        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, -0.05, 1.02]);
        let trans = vec![a.clone(); 5];
        assert_eq!(psi(&trans, 0, 3, 3).unwrap(), DMatrix::identity(2, 2));
        let p = psi(&trans, 0, 4, 1).unwrap();
        let expect = &a * &a * &a;
        assert!((p - expect).norm() < 1e-15);
        assert!(psi(&trans, 0, 1, 2).is_err());
    }

    #[test]
    fn psi_order_is_latest_leftmost() {
        let a0 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 1.0]);
        let a1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]);
        let p = psi(&[a0.clone(), a1.clone()], 0, 2, 0).unwrap();
        assert_eq!(p, &a1 * &a0);
        assert_ne!(p, &a0 * &a1);
    }

    #[test]
    fn psi_composes() {
        let a = DMatrix::from_row_slice(2, 2, &[0.95, 0.04, 0.02, 0.9]);
        let trans = vec![a; 8];
        let lhs = psi(&trans, 0, 7, 1).unwrap();
        let rhs = psi(&trans, 0, 7, 4).unwrap() * psi(&trans, 0, 4, 1).unwrap();
        assert!((lhs - rhs).norm() < 1e-14);
    }
}

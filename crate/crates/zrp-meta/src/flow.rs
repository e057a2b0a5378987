//! Antisymmetric edge functions on a chain's edge graph, their divergence,
//! the conductance-weighted inner product, and flows induced by functions.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{Chain, Variant};
use crate::error::{Error, Result};
use crate::numeric::{kahan_sum, KahanSum};

/// One value per chain edge, oriented from the lower to the higher index.
#[derive(Clone, Debug, PartialEq)]
pub struct Flow {
    values: Vec<f64>,
}

impl Flow {
    pub fn zero(chain: &Chain) -> Self {
        Self { values: vec![0.0; chain.num_edges()] }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `phi(u, v)`.
    pub fn get(&self, chain: &Chain, u: usize, v: usize) -> Result<f64> {
        let (e, s) = chain.edge_index(u, v).ok_or(Error::EdgeOutsideGraph(u, v))?;
        Ok(s * self.values[e])
    }

    /// `phi(u, v) += x` (and `phi(v, u) -= x`).
    pub fn add_at(&mut self, chain: &Chain, u: usize, v: usize, x: f64) -> Result<()> {
        let (e, s) = chain.edge_index(u, v).ok_or(Error::EdgeOutsideGraph(u, v))?;
        self.values[e] += s * x;
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self { values: self.values.iter().map(|v| k * v).collect() }
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: f64, other: &Flow) -> Self {
        Self { values: self.values.iter().zip(&other.values).map(|(a, b)| a + k * b).collect() }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `<<phi, psi>> = sum_e phi(e) psi(e) / c^s(e)`.
pub fn flow_inner(chain: &Chain, phi: &Flow, psi: &Flow) -> f64 {
    kahan_sum((0..chain.num_edges()).map(|e| phi.values[e] * psi.values[e] / chain.c_sym(e)))
}

pub fn flow_norm_sq(chain: &Chain, phi: &Flow) -> f64 {
    flow_inner(chain, phi, phi)
}

/// `(div phi)(u) = sum_v phi(u, v)` for every state.
pub fn divergence(chain: &Chain, phi: &Flow) -> Vec<f64> {
    let mut acc = vec![KahanSum::new(); chain.len()];
    for (e, &(u, v)) in chain.edges().iter().enumerate() {
        acc[u].add(phi.values[e]);
        acc[v].add(-phi.values[e]);
    }
    acc.iter().map(|a| a.value()).collect()
}

/// `(div phi)(A)`.
pub fn divergence_set(chain: &Chain, phi: &Flow, set: &[bool]) -> f64 {
    let d = divergence(chain, phi);
    kahan_sum(d.iter().zip(set).filter(|(_, &m)| m).map(|(&x, _)| x))
}

/// `Phi_f(u, v) = f(u) c(u, v) - f(v) c(v, u)`.
pub fn phi_flow(chain: &Chain, f: &[f64]) -> Flow {
    Flow {
        values: chain
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(u, v))| f[u] * chain.c_forward(e) - f[v] * chain.c_backward(e))
            .collect(),
    }
}

/// `Phi*_f(u, v) = f(u) c(v, u) - f(v) c(u, v)`.
pub fn phi_star_flow(chain: &Chain, f: &[f64]) -> Flow {
    Flow {
        values: chain
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(u, v))| f[u] * chain.c_backward(e) - f[v] * chain.c_forward(e))
            .collect(),
    }
}

/// `Psi_f(u, v) = c^s(u, v) (f(u) - f(v))`.
pub fn psi_flow(chain: &Chain, f: &[f64]) -> Flow {
    Flow {
        values: chain.edges().iter().enumerate().map(|(e, &(u, v))| chain.c_sym(e) * (f[u] - f[v])).collect(),
    }
}

/// `(Phi_f, Phi*_f, Psi_f)`.
pub fn induced_flows(chain: &Chain, f: &[f64]) -> (Flow, Flow, Flow) {
    (phi_flow(chain, f), phi_star_flow(chain, f), psi_flow(chain, f))
}

/// Largest relative residuals of the flow identities over random inputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowIdentityReport {
    /// `div Phi_f = -pi L* f` and `div Phi*_f = -pi L f`.
    pub divergence: f64,
    /// `<<Psi_f, Phi_g>> = <-L f, g>` and `<<Psi_f, Phi*_g>> = <-L* f, g>`.
    pub pairing: f64,
    /// `<<Psi_f, phi>> = sum f div phi`.
    pub summation_by_parts: f64,
    /// `||Psi_f||^2 = D(f)`.
    pub norm: f64,
    /// `sum_u (div phi)(u) = 0`.
    pub total_divergence: f64,
    /// `Psi_f = (Phi_f + Phi*_f) / 2`.
    pub average: f64,
}

impl FlowIdentityReport {
    pub fn max(&self) -> f64 {
        [self.divergence, self.pairing, self.summation_by_parts, self.norm, self.total_divergence, self.average]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(a.abs()).max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn flow_identity_suite(chain: &Chain, trials: usize, seed: u64) -> FlowIdentityReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.len();
    let mut rep = FlowIdentityReport::default();
    let mut rand_vec = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect() };
    for _ in 0..trials {
        let f = rand_vec(n);
        let g = rand_vec(n);
        let phi = Flow::from_values(rand_vec(chain.num_edges()));
        let (pf, psf, sf) = induced_flows(chain, &f);
        let lf = chain.generator_apply(&f, Variant::Primal);
        let lsf = chain.generator_apply(&f, Variant::Adjoint);
        let pi = chain.pi();

        let dpf = divergence(chain, &pf);
        let dpsf = divergence(chain, &psf);
        let scale = pi.iter().zip(&lf).map(|(p, l)| (p * l).abs()).fold(0.0, f64::max)
            .max(pi.iter().zip(&lsf).map(|(p, l)| (p * l).abs()).fold(0.0, f64::max));
        for u in 0..n {
            rep.divergence = rep.divergence.max(rel(dpf[u], -pi[u] * lsf[u], scale));
            rep.divergence = rep.divergence.max(rel(dpsf[u], -pi[u] * lf[u], scale));
        }

        let (pg, psg, _) = induced_flows(chain, &g);
        let neg_lf: Vec<f64> = lf.iter().map(|v| -v).collect();
        let neg_lsf: Vec<f64> = lsf.iter().map(|v| -v).collect();
        let lhs1 = flow_inner(chain, &sf, &pg);
        let rhs1 = chain.inner(&neg_lf, &g);
        let lhs2 = flow_inner(chain, &sf, &psg);
        let rhs2 = chain.inner(&neg_lsf, &g);
        let dscale = chain.dirichlet_form(&f).sqrt() * chain.dirichlet_form(&g).sqrt();
        rep.pairing = rep.pairing.max(rel(lhs1, rhs1, dscale)).max(rel(lhs2, rhs2, dscale));

        let dphi = divergence(chain, &phi);
        let lhs3 = flow_inner(chain, &sf, &phi);
        let rhs3 = kahan_sum(f.iter().zip(&dphi).map(|(a, b)| a * b));
        let s3 = kahan_sum(f.iter().zip(&dphi).map(|(a, b)| (a * b).abs()));
        rep.summation_by_parts = rep.summation_by_parts.max(rel(lhs3, rhs3, s3));

        rep.norm = rep.norm.max(rel(flow_norm_sq(chain, &sf), chain.dirichlet_form(&f), 0.0));

        let l1: f64 = phi.values.iter().map(|v| v.abs()).sum();
        rep.total_divergence = rep.total_divergence.max(kahan_sum(dphi.iter().copied()).abs() / l1.max(f64::MIN_POSITIVE));

        let avg = pf.axpy(1.0, &psf).scaled(0.5);
        let worst = avg.values.iter().zip(&sf.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        rep.average = rep.average.max(worst / sf.max_abs().max(f64::MIN_POSITIVE));
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edge_lookup_and_orientation() {
        let c = Chain::new(vec![0.5, 0.5], &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let mut f = Flow::zero(&c);
        f.add_at(&c, 1, 0, 2.0).unwrap();
        assert_eq!(f.get(&c, 0, 1).unwrap(), -2.0);
        assert_eq!(f.get(&c, 1, 0).unwrap(), 2.0);
        let c3 = Chain::new(vec![1.0 / 3.0; 3], &[(0, 1, 1.0), (1, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)]).unwrap();
        assert_eq!(Flow::zero(&c3).get(&c3, 0, 2), Err(Error::EdgeOutsideGraph(0, 2)));
    }

    #[test]
    fn identities_hold_on_random_chain() {
        // a cycle plus a weaker reversed cycle keeps the uniform law stationary
        let c = Chain::new(vec![1.0 / 3.0; 3], &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0), (1, 0, 0.5), (2, 1, 0.5), (0, 2, 0.5)])
            .unwrap();
        assert!(c.stationarity_residual() < 1e-15);
        let rep = flow_identity_suite(&c, 20, 7);
        assert!(rep.max() < 1e-12, "{rep:?}");
    }
}

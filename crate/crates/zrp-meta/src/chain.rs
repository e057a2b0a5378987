//! Finite continuous-time Markov chains with a known invariant measure:
//! generators (primal, adjoint, symmetrized), Dirichlet forms, harmonic
//! extensions and capacities.

use crate::error::{Error, Result};
use crate::linalg::SparseLu;
use crate::numeric::{kahan_sum, KahanSum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Primal,
    Adjoint,
    Symmetrized,
}

/// A chain on `0..n` with jump rates `R(u, v)` and invariant measure `pi`.
///
/// Edges are unordered pairs `{u, v}` with `R(u, v) + R(v, u) > 0`, stored once
/// as `(u, v)` with `u < v`.
#[derive(Clone, Debug)]
pub struct Chain {
    pi: Vec<f64>,
    ptr: Vec<usize>,
    nbr: Vec<usize>,
    rate: Vec<f64>,
    edge_of: Vec<usize>,
    edges: Vec<(usize, usize)>,
    c_fwd: Vec<f64>,
    c_bwd: Vec<f64>,
}

impl Chain {
    /// Duplicate transitions are summed; zero rates are dropped.
    pub fn new(pi: Vec<f64>, transitions: &[(usize, usize, f64)]) -> Result<Self> {
        let n = pi.len();
        let mut list: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * transitions.len());
        for &(u, v, r) in transitions {
            if u >= n || v >= n || u == v || !(r >= 0.0) {
                return Err(Error::InvalidWalk(format!("bad transition ({u}, {v}, {r})")));
            }
            if r > 0.0 {
                list.push((u, v, r));
                list.push((v, u, 0.0));
            }
        }
        list.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut ptr = vec![0usize; n + 1];
        let mut nbr = Vec::new();
        let mut rate = Vec::new();
        let mut i = 0;
        while i < list.len() {
            let (u, v, _) = list[i];
            let mut r = 0.0;
            while i < list.len() && list[i].0 == u && list[i].1 == v {
                r += list[i].2;
                i += 1;
            }
            nbr.push(v);
            rate.push(r);
            ptr[u + 1] += 1;
        }
        for u in 0..n {
            ptr[u + 1] += ptr[u];
        }
        let mut edges = Vec::new();
        let mut c_fwd = Vec::new();
        let mut c_bwd = Vec::new();
        let mut edge_of = vec![usize::MAX; nbr.len()];
        for u in 0..n {
            for k in ptr[u]..ptr[u + 1] {
                let v = nbr[k];
                if u < v {
                    edge_of[k] = edges.len();
                    edges.push((u, v));
                    c_fwd.push(pi[u] * rate[k]);
                    c_bwd.push(0.0);
                }
            }
        }
        for u in 0..n {
            for k in ptr[u]..ptr[u + 1] {
                let v = nbr[k];
                if u > v {
                    let kk = ptr[v] + nbr[ptr[v]..ptr[v + 1]].binary_search(&u).expect("symmetric adjacency");
                    let e = edge_of[kk];
                    edge_of[k] = e;
                    c_bwd[e] = pi[u] * rate[k];
                }
            }
        }
        Ok(Self { pi, ptr, nbr, rate, edge_of, edges, c_fwd, c_bwd })
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// `c(u, v) = pi(u) R(u, v)` for edge `e = (u, v)`, `u < v`.
    pub fn c_forward(&self, e: usize) -> f64 {
        self.c_fwd[e]
    }

    /// `c(v, u)` for edge `e = (u, v)`.
    pub fn c_backward(&self, e: usize) -> f64 {
        self.c_bwd[e]
    }

    /// `c^s = (c(u, v) + c(v, u)) / 2`.
    pub fn c_sym(&self, e: usize) -> f64 {
        0.5 * (self.c_fwd[e] + self.c_bwd[e])
    }

    /// Neighbours of `u` as `(v, R(u, v), edge id)`; `R(u, v)` may be zero.
    pub fn neighbors(&self, u: usize) -> impl Iterator<Item = (usize, f64, usize)> + '_ {
        (self.ptr[u]..self.ptr[u + 1]).map(move |k| (self.nbr[k], self.rate[k], self.edge_of[k]))
    }

    fn slot(&self, u: usize, v: usize) -> Option<usize> {
        let row = &self.nbr[self.ptr[u]..self.ptr[u + 1]];
        row.binary_search(&v).ok().map(|k| self.ptr[u] + k)
    }

    /// Edge id and orientation sign (`+1` if `u < v`).
    pub fn edge_index(&self, u: usize, v: usize) -> Option<(usize, f64)> {
        self.slot(u, v).map(|k| (self.edge_of[k], if u < v { 1.0 } else { -1.0 }))
    }

    pub fn rate(&self, u: usize, v: usize) -> f64 {
        self.slot(u, v).map_or(0.0, |k| self.rate[k])
    }

    pub fn conductance(&self, u: usize, v: usize) -> f64 {
        self.pi[u] * self.rate(u, v)
    }

    pub fn out_rate(&self, u: usize) -> f64 {
        self.rate[self.ptr[u]..self.ptr[u + 1]].iter().sum()
    }

    /// Rate from `u` to its neighbour at slot `k` under the given dynamics.
    #[inline]
    fn variant_rate(&self, u: usize, k: usize, variant: Variant) -> f64 {
        let e = self.edge_of[k];
        let v = self.nbr[k];
        let back = if u < v { self.c_bwd[e] } else { self.c_fwd[e] };
        let adj = back / self.pi[u];
        match variant {
            Variant::Primal => self.rate[k],
            Variant::Adjoint => adj,
            Variant::Symmetrized => 0.5 * (self.rate[k] + adj),
        }
    }

    pub fn generator_apply(&self, f: &[f64], variant: Variant) -> Vec<f64> {
        (0..self.len())
            .map(|u| {
                kahan_sum(
                    (self.ptr[u]..self.ptr[u + 1]).map(|k| self.variant_rate(u, k, variant) * (f[self.nbr[k]] - f[u])),
                )
            })
            .collect()
    }

    /// `<f, g>_pi`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        kahan_sum((0..self.len()).map(|u| self.pi[u] * f[u] * g[u]))
    }

    /// `sum_e c^s(e) (f(u) - f(v))^2`, shared by all three dynamics.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        kahan_sum(self.edges.iter().enumerate().map(|(e, &(u, v))| {
            let d = f[u] - f[v];
            self.c_sym(e) * d * d
        }))
    }

    /// `1/2 sum_{u in A} sum_v pi(u) R(u, v) (f(v) - f(u))^2`.
    pub fn dirichlet_form_on(&self, f: &[f64], set: &[bool]) -> Result<f64> {
        let mut acc = KahanSum::new();
        for u in (0..self.len()).filter(|&u| set[u]) {
            if f[u].is_nan() {
                return Err(Error::UndefinedOnNeighborhood);
            }
            for k in self.ptr[u]..self.ptr[u + 1] {
                let v = self.nbr[k];
                if f[v].is_nan() {
                    return Err(Error::UndefinedOnNeighborhood);
                }
                let d = f[v] - f[u];
                acc.add(0.5 * self.pi[u] * self.rate[k] * d * d);
            }
        }
        Ok(acc.value())
    }

    /// `max_u |sum_v pi(v) R(v, u) - pi(u) sum_v R(u, v)|`.
    pub fn stationarity_residual(&self) -> f64 {
        (0..self.len())
            .map(|u| {
                let inflow = kahan_sum(self.neighbors(u).map(|(v, _, _)| self.conductance(v, u)));
                (inflow - self.pi[u] * self.out_rate(u)).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Harmonic extension of `1_A` off `A ∪ B`.
    pub fn potential(&self, a: &[bool], b: &[bool], variant: Variant) -> Result<Vec<f64>> {
        check_masks(a, b)?;
        let boundary: Vec<bool> = a.iter().zip(b).map(|(&x, &y)| x || y).collect();
        let solver = HarmonicSolver::new(self, &boundary, variant)?;
        let g: Vec<f64> = a.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        let mut h = solver.extend(&g)?;
        for v in h.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(h)
    }

    /// Capacity between two sets with its three expressions for each dynamics.
    pub fn capacity(&self, a: &[bool], b: &[bool]) -> Result<PotentialSolution> {
        let h = self.potential(a, b, Variant::Primal)?;
        let h_star = self.potential(a, b, Variant::Adjoint)?;
        let h_sym = self.potential(a, b, Variant::Symmetrized)?;
        let lh = self.generator_apply(&h, Variant::Primal);
        let flux_from_a = -kahan_sum((0..self.len()).filter(|&u| a[u]).map(|u| self.pi[u] * lh[u]));
        let flux_into_b = kahan_sum((0..self.len()).filter(|&u| b[u]).map(|u| self.pi[u] * lh[u]));
        Ok(PotentialSolution {
            cap: self.dirichlet_form(&h),
            cap_star: self.dirichlet_form(&h_star),
            cap_sym: self.dirichlet_form(&h_sym),
            flux_from_a,
            flux_into_b,
            h,
            h_star,
            h_sym,
        })
    }
}

pub(crate) fn check_masks(a: &[bool], b: &[bool]) -> Result<()> {
    if a.len() != b.len() || !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::SetsOverlapOrEmpty);
    }
    if a.iter().zip(b).any(|(&x, &y)| x && y) {
        return Err(Error::SetsOverlapOrEmpty);
    }
    Ok(())
}

pub fn mask_from(n: usize, members: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &i in members {
        m[i] = true;
    }
    m
}

#[derive(Clone, Debug)]
pub struct PotentialSolution {
    /// `D(h)` for the primal potential.
    pub cap: f64,
    pub cap_star: f64,
    pub cap_sym: f64,
    /// `-sum_{A} pi (L h)`.
    pub flux_from_a: f64,
    /// `sum_{B} pi (L h)`.
    pub flux_into_b: f64,
    pub h: Vec<f64>,
    pub h_star: Vec<f64>,
    pub h_sym: Vec<f64>,
}

impl PotentialSolution {
    /// Largest relative disagreement among the Dirichlet-form, boundary-flux
    /// and adjoint expressions.
    pub fn consistency_gap(&self) -> f64 {
        let c = self.cap;
        [self.flux_from_a, self.flux_into_b, self.cap_star]
            .iter()
            .map(|&v| (v - c).abs() / c.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }
}

/// LU factorization of the interior block of a generator for a fixed boundary.
pub struct HarmonicSolver<'a> {
    chain: &'a Chain,
    variant: Variant,
    boundary: Vec<bool>,
    interior: Vec<usize>,
    local: Vec<usize>,
    lu: Option<SparseLu>,
}

impl<'a> HarmonicSolver<'a> {
    pub fn new(chain: &'a Chain, boundary: &[bool], variant: Variant) -> Result<Self> {
        let n = chain.len();
        let interior: Vec<usize> = (0..n).filter(|&u| !boundary[u]).collect();
        let mut local = vec![usize::MAX; n];
        for (i, &u) in interior.iter().enumerate() {
            local[u] = i;
        }
        let mut entries = Vec::new();
        for (i, &u) in interior.iter().enumerate() {
            let mut diag = 0.0;
            for k in chain.ptr[u]..chain.ptr[u + 1] {
                let r = chain.variant_rate(u, k, variant);
                if r == 0.0 {
                    continue;
                }
                diag += r;
                let v = chain.nbr[k];
                if !boundary[v] {
                    entries.push((i, local[v], r));
                }
            }
            entries.push((i, i, -diag));
        }
        let lu = if interior.is_empty() { None } else { Some(SparseLu::new(interior.len(), &entries)?) };
        Ok(Self { chain, variant, boundary: boundary.to_vec(), interior, local, lu })
    }

    /// Function equal to `g` on the boundary and harmonic elsewhere.
    pub fn extend(&self, g: &[f64]) -> Result<Vec<f64>> {
        let chain = self.chain;
        let mut out: Vec<f64> = (0..chain.len()).map(|u| if self.boundary[u] { g[u] } else { 0.0 }).collect();
        let Some(lu) = &self.lu else { return Ok(out) };
        let rhs: Vec<f64> = self
            .interior
            .iter()
            .map(|&u| {
                -kahan_sum((chain.ptr[u]..chain.ptr[u + 1]).filter(|&k| self.boundary[chain.nbr[k]]).map(|k| {
                    chain.variant_rate(u, k, self.variant) * g[chain.nbr[k]]
                }))
            })
            .collect();
        let sol = lu.solve(&rhs)?;
        for (i, &u) in self.interior.iter().enumerate() {
            debug_assert_eq!(self.local[u], i);
            out[u] = sol[i];
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn birth_death(n: usize) -> Chain {
        let pi = vec![1.0 / n as f64; n];
        let mut t = Vec::new();
        for u in 0..n - 1 {
            t.push((u, u + 1, 1.0));
            t.push((u + 1, u, 1.0));
        }
        Chain::new(pi, &t).unwrap()
    }

    #[test]
    fn linear_potential_on_a_path() {
        let c = birth_death(5);
        let a = mask_from(5, &[0]);
        let b = mask_from(5, &[4]);
        let h = c.potential(&a, &b, Variant::Primal).unwrap();
        for (u, hu) in h.iter().enumerate() {
            assert!((hu - (1.0 - u as f64 / 4.0)).abs() < 1e-14);
        }
        let rep = c.capacity(&a, &b).unwrap();
        // four unit resistors in series with conductance 1/5 each
        assert!((rep.cap - 0.05).abs() < 1e-15);
        assert!(rep.consistency_gap() < 1e-12);
    }

    #[test]
    fn one_way_edges_are_kept() {
        let c = Chain::new(vec![1.0 / 3.0; 3], &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap();
        assert_eq!(c.num_edges(), 3);
        assert_eq!(c.rate(1, 0), 0.0);
        assert!(c.stationarity_residual() < 1e-16);
        let f = [1.0, 0.0, 0.0];
        let adj = c.generator_apply(&f, Variant::Adjoint);
        // adjoint of the cycle runs backwards: from 1 it jumps to 0
        assert!((adj[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn restricted_form_needs_neighbourhood() {
        let c = birth_death(4);
        let f = [0.0, 1.0, f64::NAN, f64::NAN];
        assert_eq!(c.dirichlet_form_on(&f, &[true, false, false, false]).unwrap(), 0.125);
        assert_eq!(c.dirichlet_form_on(&f, &[false, true, false, false]), Err(Error::UndefinedOnNeighborhood));
    }
}

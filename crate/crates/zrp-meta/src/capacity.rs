//! Exact capacities, the sector constant, the optimizers of the two
//! variational formulas and the bounds that tolerate non-zero divergence.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::{check_masks, Chain, PotentialSolution, Variant};
use crate::error::{Error, Result};
use crate::flow::{divergence, flow_norm_sq, phi_flow, phi_star_flow, Flow};
use crate::numeric::kahan_sum;

/// Relative agreement required between the capacity expressions.
pub const CAP_TOL: f64 = 1e-10;

pub fn zrp_equilibrium_potential(chain: &Chain, a: &[bool], b: &[bool], variant: Variant) -> Result<Vec<f64>> {
    chain.potential(a, b, variant)
}

/// Potentials and capacities for the three dynamics, with the boundary-flux
/// forms checked against the Dirichlet form.
pub fn zrp_capacity(chain: &Chain, a: &[bool], b: &[bool]) -> Result<PotentialSolution> {
    let sol = chain.capacity(a, b)?;
    if sol.cap <= 0.0 {
        return Err(Error::ZeroCapacity);
    }
    let gap = sol.consistency_gap();
    if gap > CAP_TOL {
        return Err(Error::SolverFailure(format!("capacity expressions disagree by {gap:.3e}")));
    }
    Ok(sol)
}

/// `max <g, -L f>^2 / (D(f) D(g))` over random pairs.
pub fn sector_check(chain: &Chain, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.len();
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let f: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let df = chain.dirichlet_form(&f);
        let dg = chain.dirichlet_form(&g);
        if df == 0.0 || dg == 0.0 {
            continue;
        }
        let lf = chain.generator_apply(&f, Variant::Primal);
        let pair = -chain.inner(&g, &lf);
        best = best.max(pair * pair / (df * dg));
    }
    best
}

/// Interior divergence and set divergences of a flow relative to `(A, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceProfile {
    /// `max |div phi|` over `(A ∪ B)^c`.
    pub interior_max: f64,
    /// `(div phi)(A)`.
    pub on_a: f64,
    /// `(div phi)(B)`.
    pub on_b: f64,
}

pub fn divergence_profile(chain: &Chain, phi: &Flow, a: &[bool], b: &[bool]) -> DivergenceProfile {
    let d = divergence(chain, phi);
    let mut interior_max: f64 = 0.0;
    for u in 0..chain.len() {
        if !a[u] && !b[u] {
            interior_max = interior_max.max(d[u].abs());
        }
    }
    DivergenceProfile {
        interior_max,
        on_a: kahan_sum((0..chain.len()).filter(|&u| a[u]).map(|u| d[u])),
        on_b: kahan_sum((0..chain.len()).filter(|&u| b[u]).map(|u| d[u])),
    }
}

#[derive(Clone, Debug)]
pub struct DtReport {
    pub cap: f64,
    pub f0: Vec<f64>,
    pub phi0: Flow,
    pub g0: Vec<f64>,
    pub psi0: Flow,
    /// `||Phi_{f0} - phi0||^2`, equal to `cap`.
    pub upper_value: f64,
    /// `||Phi_{g0} - psi0||^2`, equal to `1 / cap`.
    pub lower_value: f64,
    pub phi0_divergence: DivergenceProfile,
    pub psi0_divergence: DivergenceProfile,
}

impl DtReport {
    /// Largest relative deviation from the optimality identities and class memberships.
    pub fn max_residual(&self) -> f64 {
        let c = self.cap;
        let flow_scale = self.psi0.max_abs().max(self.phi0.max_abs()).max(f64::MIN_POSITIVE);
        [
            (self.upper_value - c).abs() / c,
            (self.lower_value * c - 1.0).abs(),
            self.phi0_divergence.interior_max / flow_scale,
            self.phi0_divergence.on_a.abs() / flow_scale,
            self.psi0_divergence.interior_max / flow_scale,
            (self.psi0_divergence.on_a - 1.0).abs(),
            (self.psi0_divergence.on_b + 1.0).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Builds the optimizing pairs of the two variational formulas for `cap(A, B)`.
pub fn dt_optimizers(chain: &Chain, a: &[bool], b: &[bool]) -> Result<DtReport> {
    let sol = zrp_capacity(chain, a, b)?;
    let cap = sol.cap;
    let (h, hs) = (&sol.h, &sol.h_star);
    let f0: Vec<f64> = h.iter().zip(hs).map(|(x, y)| 0.5 * (x + y)).collect();
    let g0: Vec<f64> = h.iter().zip(hs).map(|(x, y)| (y - x) / (2.0 * cap)).collect();
    let p_hs = phi_flow(chain, hs);
    let ps_h = phi_star_flow(chain, h);
    let phi0 = p_hs.axpy(-1.0, &ps_h).scaled(0.5);
    let psi0 = p_hs.axpy(1.0, &ps_h).scaled(0.5 / cap);
    let upper_value = flow_norm_sq(chain, &phi_flow(chain, &f0).axpy(-1.0, &phi0));
    let lower_value = flow_norm_sq(chain, &phi_flow(chain, &g0).axpy(-1.0, &psi0));
    Ok(DtReport {
        cap,
        phi0_divergence: divergence_profile(chain, &phi0, a, b),
        psi0_divergence: divergence_profile(chain, &psi0, a, b),
        f0,
        phi0,
        g0,
        psi0,
        upper_value,
        lower_value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub bound: f64,
    /// Set divergence of the test flow on `A` (minus one for the lower bound).
    pub eps: f64,
    /// `sum_{(A ∪ B)^c} h div phi`.
    pub interior_term: f64,
    /// Lower bound only: the bracket was non-positive and the bound is reported as 0.
    pub bracket_nonpositive: bool,
}

fn interior_term(chain: &Chain, h: &[f64], phi: &Flow, a: &[bool], b: &[bool]) -> f64 {
    let d = divergence(chain, phi);
    kahan_sum((0..chain.len()).filter(|&u| !a[u] && !b[u]).map(|u| h[u] * d[u]))
}

const BOUNDARY_TOL: f64 = 1e-12;

/// `||Phi_f - phi||^2 + 2 eps + 2 sum_{(A ∪ B)^c} h div phi` with `eps = (div phi)(A)`.
/// `h` is the exact primal equilibrium potential of `(A, B)`.
pub fn generalized_upper_bound(
    chain: &Chain,
    a: &[bool],
    b: &[bool],
    h: &[f64],
    f: &[f64],
    phi: &Flow,
) -> Result<BoundReport> {
    check_masks(a, b)?;
    for u in 0..chain.len() {
        if (a[u] && (f[u] - 1.0).abs() > BOUNDARY_TOL) || (b[u] && f[u].abs() > BOUNDARY_TOL) {
            return Err(Error::BoundaryConditionViolated(format!("f({u}) = {}", f[u])));
        }
    }
    let eps = divergence_profile(chain, phi, a, b).on_a;
    let it = interior_term(chain, h, phi, a, b);
    let norm = flow_norm_sq(chain, &phi_flow(chain, f).axpy(-1.0, phi));
    let bound = norm + 2.0 * eps + 2.0 * it;
    check_against_cap(chain, h, bound, true)?;
    Ok(BoundReport { bound, eps, interior_term: it, bracket_nonpositive: false })
}

/// Both bounds follow from Cauchy-Schwarz against `Psi_h`, so a violation beyond rounding
/// means `h` is not the equilibrium potential of `(A, B)`.
fn check_against_cap(chain: &Chain, h: &[f64], bound: f64, upper: bool) -> Result<()> {
    let cap = chain.dirichlet_form(h);
    let slack = 1e-9 * cap.max(bound.abs());
    let violated = if upper { bound < cap - slack } else { bound > cap + slack };
    if violated {
        let side = if upper { "upper" } else { "lower" };
        return Err(Error::SolverFailure(format!("{side} bound {bound:.6e} is on the wrong side of cap {cap:.6e}")));
    }
    Ok(())
}

/// `[1 + 2 eps + 2 sum h div psi] / ||Phi_g - psi||^2` with `eps = (div psi)(A) - 1`.
/// Pairing with `Psi_h` gives `<<Phi_g - psi, Psi_h>> = -(1 + eps + sum h div psi)`, and
/// `(1 + x)^2 >= 1 + 2x` linearises the Cauchy-Schwarz bound.
pub fn generalized_lower_bound(
    chain: &Chain,
    a: &[bool],
    b: &[bool],
    h: &[f64],
    g: &[f64],
    psi: &Flow,
) -> Result<BoundReport> {
    check_masks(a, b)?;
    for u in 0..chain.len() {
        if (a[u] || b[u]) && g[u].abs() > BOUNDARY_TOL {
            return Err(Error::BoundaryConditionViolated(format!("g({u}) = {}", g[u])));
        }
    }
    let eps = divergence_profile(chain, psi, a, b).on_a - 1.0;
    let it = interior_term(chain, h, psi, a, b);
    let denom = flow_norm_sq(chain, &phi_flow(chain, g).axpy(-1.0, psi));
    if denom == 0.0 {
        return Err(Error::DegenerateDenominator);
    }
    let bracket = 1.0 + 2.0 * eps + 2.0 * it;
    if bracket <= 0.0 {
        return Ok(BoundReport { bound: 0.0, eps, interior_term: it, bracket_nonpositive: true });
    }
    let bound = bracket / denom;
    check_against_cap(chain, h, bound, false)?;
    Ok(BoundReport { bound, eps, interior_term: it, bracket_nonpositive: false })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandwichReport {
    pub cap: f64,
    pub trials: usize,
    /// `min (upper - cap) / cap`; non-negative when every upper bound holds.
    pub min_upper_gap: f64,
    /// `min (cap - lower) / cap`.
    pub min_lower_gap: f64,
}

impl SandwichReport {
    pub fn holds(&self, tol: f64) -> bool {
        self.min_upper_gap >= -tol && self.min_lower_gap >= -tol
    }
}

/// Evaluates both bounds on random admissible test pairs built by perturbing the
/// optimizers inside their function classes; the flows are not divergence-free.
pub fn bounds_sandwich_check(chain: &Chain, a: &[bool], b: &[bool], trials: usize, seed: u64) -> Result<SandwichReport> {
    let dt = dt_optimizers(chain, a, b)?;
    let sol = zrp_capacity(chain, a, b)?;
    let cap = dt.cap;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.len();
    let m = chain.num_edges();
    let mut min_up = f64::INFINITY;
    let mut min_lo = f64::INFINITY;
    for t in 0..trials {
        let amp = 0.5 * (t as f64 + 1.0) / trials as f64;
        let f: Vec<f64> = (0..n)
            .map(|u| if a[u] || b[u] { dt.f0[u] } else { dt.f0[u] + amp * (rng.random::<f64>() - 0.5) })
            .collect();
        let dphi: Vec<f64> = (0..m).map(|e| amp * chain.c_sym(e) * (rng.random::<f64>() - 0.5)).collect();
        let phi = dt.phi0.axpy(1.0, &Flow::from_values(dphi));
        let up = generalized_upper_bound(chain, a, b, &sol.h, &f, &phi)?;
        min_up = min_up.min((up.bound - cap) / cap);

        let g: Vec<f64> = (0..n)
            .map(|u| if a[u] || b[u] { 0.0 } else { dt.g0[u] + amp / cap * (rng.random::<f64>() - 0.5) })
            .collect();
        let dpsi: Vec<f64> = (0..m).map(|e| amp / cap * chain.c_sym(e) * (rng.random::<f64>() - 0.5)).collect();
        let psi = dt.psi0.axpy(1.0, &Flow::from_values(dpsi));
        let lo = generalized_lower_bound(chain, a, b, &sol.h, &g, &psi)?;
        min_lo = min_lo.min((cap - lo.bound) / cap);
    }
    Ok(SandwichReport { cap, trials, min_upper_gap: min_up, min_lower_gap: min_lo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::mask_from;
    use crate::walk::UnderlyingWalk;
    use crate::zrp::{ZrpModel, ZrpSystem};

    fn reversible_three_site(n: u32) -> (ZrpSystem, Vec<bool>, Vec<bool>) {
        let r = vec![vec![0.0, 0.2, 2.157747548215257], vec![0.2, 0.0, 0.2], vec![2.157747548215257, 0.2, 0.0]];
        let m = ZrpModel::new(UnderlyingWalk::new(r).unwrap(), 3.0).unwrap();
        let sys = ZrpSystem::new(&m, n).unwrap();
        let a = mask_from(sys.len(), &[sys.index_of(&[n, 0, 0])]);
        let b = mask_from(sys.len(), &[sys.index_of(&[0, 0, n])]);
        (sys, a, b)
    }

    #[test]
    fn lower_bound_stays_below_cap_for_flows_with_surplus_divergence() {
        let (sys, a, b) = reversible_three_site(3);
        let chain = &sys.chain;
        let dt = dt_optimizers(chain, &a, &b).unwrap();
        let h = zrp_capacity(chain, &a, &b).unwrap().h;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tight: f64 = 0.0;
        for _ in 0..2000 {
            let amp = 3.0 * rng.random::<f64>() / dt.cap;
            let g: Vec<f64> = (0..chain.len())
                .map(|u| if a[u] || b[u] { 0.0 } else { dt.g0[u] + amp * (rng.random::<f64>() - 0.5) })
                .collect();
            let d: Vec<f64> = (0..chain.num_edges()).map(|e| amp * chain.c_sym(e) * (rng.random::<f64>() - 0.5)).collect();
            let psi = dt.psi0.axpy(1.0, &Flow::from_values(d));
            let rep = generalized_lower_bound(chain, &a, &b, &h, &g, &psi).unwrap();
            assert!(rep.bound <= dt.cap * (1.0 + 1e-9));
            tight = tight.max(rep.bound / dt.cap);
        }
        // small perturbations come close to the optimum
        assert!(tight > 0.9, "{tight}");
    }

    #[test]
    fn optimizers_attain_both_bounds() {
        let (sys, a, b) = reversible_three_site(5);
        let chain = &sys.chain;
        let dt = dt_optimizers(chain, &a, &b).unwrap();
        let h = zrp_capacity(chain, &a, &b).unwrap().h;
        let up = generalized_upper_bound(chain, &a, &b, &h, &dt.f0, &dt.phi0).unwrap();
        let lo = generalized_lower_bound(chain, &a, &b, &h, &dt.g0, &dt.psi0).unwrap();
        assert!((up.bound - dt.cap).abs() <= 1e-9 * dt.cap);
        assert!((lo.bound - dt.cap).abs() <= 1e-9 * dt.cap);
        assert!(up.eps.abs() < 1e-12 && lo.eps.abs() < 1e-12);
    }

    #[test]
    fn wrong_potential_is_reported() {
        let (sys, a, b) = reversible_three_site(4);
        let chain = &sys.chain;
        let dt = dt_optimizers(chain, &a, &b).unwrap();
        let h: Vec<f64> = (0..chain.len()).map(|u| if a[u] { 1.0 } else { 0.0 }).collect();
        assert!(matches!(generalized_upper_bound(chain, &a, &b, &h, &dt.f0, &dt.phi0), Err(Error::SolverFailure(_))));
    }
}

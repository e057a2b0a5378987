//! Approximate equilibrium potentials built from a mollified ramp, and the
//! correction flows that move the tube divergence of their induced flows into
//! the valleys.

use crate::error::{Error, Result};
use crate::flow::{divergence, flow_norm_sq, phi_star_flow, Flow};
use crate::geometry::MetastableSets;
use crate::numeric::{i_alpha, integrate, kahan_sum};
use crate::walk::{
    adjoint_walk, build_limit_chain, canonical_paths, walk_capacity, walk_equilibrium_potential, CanonicalPathTable,
    LimitChain, UnderlyingWalk,
};
use crate::zrp::{apply_move, ZrpModel, ZrpSystem};

fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

/// Piecewise-linear ramp `gamma_hat`, its mollification `gamma`, and
/// `H = V o gamma`, `U = V'`.
#[derive(Clone, Debug)]
pub struct RampProfile {
    pub eps: f64,
    pub alpha: f64,
    pub i_alpha: f64,
    bump_mass: f64,
}

/// Measured properties of the ramp on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RampReport {
    pub grid_points: usize,
    /// `max |gamma|` on `[0, 3 eps]`.
    pub zero_region: f64,
    /// `max |gamma - (t - 3 eps)/(1 - 6 eps)|` on `[5 eps, 1 - 5 eps]`.
    pub linear_region: f64,
    /// `max |gamma - 1|` on `[1 - 3 eps, 1]`.
    pub one_region: f64,
    pub min_slope: f64,
    /// `max |gamma(1-t) - 1 + gamma(t)|`.
    pub symmetry: f64,
    /// `max gamma'` on `[0, 1]`, compared with `1 + sqrt(eps)`.
    pub max_slope: f64,
    /// `max gamma(t)/t` on `(0, 1]`, compared with `1 + sqrt(eps)`.
    pub max_ratio: f64,
    /// `min gamma(t)/t` on `[sqrt(eps), 1]`, compared with `1 - 4 sqrt(eps)`.
    pub min_ratio: f64,
    /// `max H'/U` on `(0, 1)`.
    pub h_prime_over_u_max: f64,
    /// Range of `H'/U` on `[sqrt(eps), 1 - sqrt(eps)]`.
    pub h_prime_over_u_middle: (f64, f64),
    pub holds: [bool; 5],
}

const RAMP_TOL: f64 = 1e-8;

impl RampProfile {
    /// Builds the ramp and checks its properties on a `10^4`-point grid.
    /// Fails only when the ramp is not flat/linear/symmetric as required or when
    /// `gamma(t)/t` drops below `1 - 4 sqrt(eps)`; the slope bound is reported.
    pub fn new(eps: f64, alpha: f64) -> Result<Self> {
        let ramp = Self::unchecked(eps, alpha)?;
        let rep = ramp.properties(10_000);
        let names = ["flat and linear pieces", "symmetry", "slope", "upper ratio", "lower ratio"];
        for (k, ok) in rep.holds.iter().enumerate() {
            if !ok && k != 2 {
                return Err(Error::PropertyCheckFailed(format!("{} at eps = {eps}", names[k])));
            }
        }
        Ok(ramp)
    }

    /// The ramp without the grid check.
    pub fn unchecked(eps: f64, alpha: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0 / 16.0) {
            return Err(Error::EpsOutOfRange(eps));
        }
        if !(alpha > 2.0) {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        let bump_mass = 2.0 * integrate(bump, 0.0, 1.0);
        Ok(Self { eps, alpha, i_alpha: i_alpha(alpha), bump_mass })
    }

    /// Normalized bump on `[-1, 1]`.
    pub fn mollifier(&self, u: f64) -> f64 {
        bump(u) / self.bump_mass
    }

    /// `int_{-1}^v phi`.
    fn bump_cdf(&self, v: f64) -> f64 {
        let v = v.clamp(-1.0, 1.0);
        if v <= 0.0 {
            integrate(bump, -1.0, v) / self.bump_mass
        } else {
            1.0 - integrate(bump, -1.0, -v) / self.bump_mass
        }
    }

    /// `int_{-1}^v u phi(u) du`; even in `v`.
    fn bump_first_moment(&self, v: f64) -> f64 {
        let v = v.clamp(-1.0, 1.0).abs();
        -integrate(|u| u * bump(u), v, 1.0) / self.bump_mass
    }

    fn slope(&self) -> f64 {
        1.0 / (1.0 - 6.0 * self.eps)
    }

    /// `0` up to `4 eps`, `(t - 3 eps)/(1 - 6 eps)` on `[4 eps, 1 - 4 eps]`, then `1`.
    pub fn gamma_hat(&self, t: f64) -> f64 {
        let e = self.eps;
        if t <= 4.0 * e {
            0.0
        } else if t < 1.0 - 4.0 * e {
            (t - 3.0 * e) * self.slope()
        } else {
            1.0
        }
    }

    fn window(&self, t: f64) -> (f64, f64) {
        let e = self.eps;
        (((t - (1.0 - 4.0 * e)) / e).clamp(-1.0, 1.0), ((t - 4.0 * e) / e).clamp(-1.0, 1.0))
    }

    /// `gamma = gamma_hat * phi_eps`.
    pub fn gamma(&self, t: f64) -> f64 {
        let e = self.eps;
        if t <= 3.0 * e {
            return 0.0;
        }
        if t >= 1.0 - 3.0 * e {
            return 1.0;
        }
        if t > 0.5 {
            return 1.0 - self.gamma(1.0 - t);
        }
        let (lo, hi) = self.window(t);
        let mass = self.bump_cdf(hi) - self.bump_cdf(lo);
        let moment = self.bump_first_moment(hi) - self.bump_first_moment(lo);
        ((t - 3.0 * e) * mass - e * moment) * self.slope() + self.bump_cdf(lo)
    }

    /// `gamma'`, including the two jump contributions of `gamma_hat`.
    pub fn gamma_prime(&self, t: f64) -> f64 {
        let e = self.eps;
        let (lo, hi) = self.window(t);
        let jump = e * self.slope();
        (self.bump_cdf(hi) - self.bump_cdf(lo)) * self.slope()
            + jump * (self.mollifier((t - 4.0 * e) / e) + self.mollifier((t - 1.0 + 4.0 * e) / e)) / e
    }

    /// `V(t) = (1/I_alpha) int_0^t s^alpha (1-s)^alpha ds`.
    pub fn v(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        if t > 0.5 {
            return 1.0 - self.v(1.0 - t);
        }
        let a = self.alpha;
        integrate(|s| (s * (1.0 - s)).powf(a), 0.0, t) / self.i_alpha
    }

    pub fn u(&self, t: f64) -> f64 {
        (t * (1.0 - t)).max(0.0).powf(self.alpha) / self.i_alpha
    }

    pub fn h(&self, t: f64) -> f64 {
        self.v(self.gamma(t))
    }

    pub fn h_prime(&self, t: f64) -> f64 {
        self.gamma_prime(t) * self.u(self.gamma(t))
    }

    /// `H(k/N)` for `k = 0..=N`, exactly antisymmetric about `N/2`.
    pub fn h_grid(&self, n: u32) -> Vec<f64> {
        let mut g = vec![0.0; n as usize + 1];
        for k in 0..=n as usize {
            if 2 * k <= n as usize {
                g[k] = self.h(k as f64 / n as f64);
            }
        }
        for k in 0..=n as usize {
            if 2 * k > n as usize {
                g[k] = 1.0 - g[n as usize - k];
            }
        }
        g
    }

    pub fn properties(&self, points: usize) -> RampReport {
        let e = self.eps;
        let se = e.sqrt();
        let mut rep = RampReport {
            grid_points: points + 1,
            zero_region: 0.0,
            linear_region: 0.0,
            one_region: 0.0,
            min_slope: f64::INFINITY,
            symmetry: 0.0,
            max_slope: 0.0,
            max_ratio: 0.0,
            min_ratio: f64::INFINITY,
            h_prime_over_u_max: 0.0,
            h_prime_over_u_middle: (f64::INFINITY, 0.0),
            holds: [false; 5],
        };
        for k in 0..=points {
            let t = k as f64 / points as f64;
            let g = self.gamma(t);
            let gp = self.gamma_prime(t);
            if t <= 3.0 * e {
                rep.zero_region = rep.zero_region.max(g.abs());
            }
            if (5.0 * e..=1.0 - 5.0 * e).contains(&t) {
                rep.linear_region = rep.linear_region.max((g - (t - 3.0 * e) * self.slope()).abs());
            }
            if t >= 1.0 - 3.0 * e {
                rep.one_region = rep.one_region.max((g - 1.0).abs());
            }
            rep.min_slope = rep.min_slope.min(gp);
            rep.symmetry = rep.symmetry.max((self.gamma(1.0 - t) - 1.0 + g).abs());
            rep.max_slope = rep.max_slope.max(gp);
            if t > 0.0 {
                rep.max_ratio = rep.max_ratio.max(g / t);
            }
            if t >= se {
                rep.min_ratio = rep.min_ratio.min(g / t);
            }
            if t > 0.0 && t < 1.0 {
                let ratio = self.h_prime(t) / self.u(t);
                rep.h_prime_over_u_max = rep.h_prime_over_u_max.max(ratio);
                if t >= se && t <= 1.0 - se {
                    let (lo, hi) = rep.h_prime_over_u_middle;
                    rep.h_prime_over_u_middle = (lo.min(ratio), hi.max(ratio));
                }
            }
        }
        rep.holds = [
            rep.zero_region <= RAMP_TOL
                && rep.linear_region <= RAMP_TOL
                && rep.one_region <= RAMP_TOL
                && rep.min_slope >= -RAMP_TOL,
            rep.symmetry <= 1e-10,
            rep.max_slope <= 1.0 + se + RAMP_TOL,
            rep.max_ratio <= 1.0 + se + RAMP_TOL,
            1.0 - 4.0 * se > 0.0 && rep.min_ratio >= 1.0 - 4.0 * se - RAMP_TOL,
        ];
        rep
    }
}

/// `W_{x,y}(eta) = sum_i [h(z_i) - h(z_{i+1})] H(eta^{(i)} / N)` on the tube.
#[derive(Clone, Debug)]
pub struct TubeFunction {
    pub x: usize,
    pub y: usize,
    pub n: u32,
    /// `z_1 = x, ..., z_kappa = y`.
    pub order: Vec<usize>,
    /// `h(z_i) - h(z_{i+1})`.
    pub gaps: Vec<f64>,
    /// Walk potential `h_{x,y}` by site.
    pub h: Vec<f64>,
    /// Walk rates the coefficients are built from.
    pub rates: Vec<Vec<f64>>,
    h_grid: Vec<f64>,
}

fn descending_order(h: &[f64], x: usize, y: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.len()).collect();
    let key = |s: usize| -> (i8, usize) {
        if s == x {
            (-1, 0)
        } else if s == y {
            (1, 0)
        } else {
            (0, s)
        }
    };
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(key(a).cmp(&key(b))));
    order
}

impl TubeFunction {
    /// Tube function for the walk `walk` (the primal or the adjoint one).
    /// `W_{y,x}` reuses the reversed enumeration of `W_{x,y}`, so `W_{y,x} = 1 - W_{x,y}`.
    pub fn new(walk: &UnderlyingWalk, x: usize, y: usize, n: u32, ramp: &RampProfile) -> Result<Self> {
        if x == y {
            return Err(Error::SetsOverlapOrEmpty);
        }
        let (lo, hi) = (x.min(y), x.max(y));
        let h_lo = walk_equilibrium_potential(walk, &[lo], &[hi])?;
        let mut order = descending_order(&h_lo, lo, hi);
        let h = if x == lo {
            h_lo
        } else {
            order.reverse();
            h_lo.iter().map(|v| 1.0 - v).collect()
        };
        let gaps = order.windows(2).map(|w| h[w[0]] - h[w[1]]).collect();
        Ok(Self { x, y, n, order, gaps, h, rates: walk.rates().to_vec(), h_grid: ramp.h_grid(n) })
    }

    fn hk(&self, k: i64) -> f64 {
        self.h_grid[k.clamp(0, self.n as i64) as usize]
    }

    /// `eta^{(i)}` for `i = 1..=kappa` (1-based as in the enumeration).
    fn partials(&self, eta: &[u32]) -> Vec<i64> {
        let mut acc = 0i64;
        self.order
            .iter()
            .map(|&z| {
                acc += eta[z] as i64;
                acc
            })
            .collect()
    }

    pub fn in_tube(&self, eta: &[u32], pi: u32) -> bool {
        (eta[self.x] + eta[self.y]) as i64 >= self.n as i64 - pi as i64
    }

    pub fn value(&self, eta: &[u32]) -> f64 {
        let p = self.partials(eta);
        kahan_sum(self.gaps.iter().enumerate().map(|(i, g)| g * self.hk(p[i])))
    }

    /// `B(eta; z_i)` for the 0-based enumeration position `i`.
    pub fn b_coefficient(&self, eta: &[u32], i: usize) -> f64 {
        let p = self.partials(eta);
        let k = self.order.len();
        let zi = self.order[i];
        let mut terms = Vec::new();
        for j in 0..k {
            let r = self.rates[zi][self.order[j]];
            if j == i || r == 0.0 {
                continue;
            }
            if j > i {
                for u in i..j {
                    terms.push(r * self.gaps[u] * (self.hk(p[u]) - self.hk(p[u] - 1)));
                }
            } else {
                for u in j..i {
                    terms.push(r * self.gaps[u] * (self.hk(p[u]) - self.hk(p[u] + 1)));
                }
            }
        }
        kahan_sum(terms)
    }

    /// `B(eta; z_i)` for every position; `OutsideTube` off `T^{x,y}`.
    pub fn b_coefficients(&self, eta: &[u32], pi: u32) -> Result<Vec<f64>> {
        if !self.in_tube(eta, pi) {
            return Err(Error::OutsideTube);
        }
        Ok((0..self.order.len()).map(|i| self.b_coefficient(eta, i)).collect())
    }

    /// `sum_i m(z_i) B(sigma^{x,z_i} eta; z_i)` and the largest term magnitude.
    pub fn b_identity(&self, m: &[f64], eta: &[u32]) -> (f64, f64) {
        assert!(eta[self.x] >= 1);
        let mut terms = Vec::new();
        for (i, &z) in self.order.iter().enumerate() {
            let moved = apply_move(eta, self.x, z);
            terms.push(m[z] * self.b_coefficient(&moved, i));
        }
        let scale = terms.iter().fold(0.0f64, |a, t| a.max(t.abs()));
        (kahan_sum(terms), scale)
    }
}

/// `W_{x,y}` extended by zero off the tube, as a vector over configurations.
pub fn tube_function_values(sys: &ZrpSystem, sets: &MetastableSets, tube: &TubeFunction) -> Vec<f64> {
    (0..sys.len())
        .map(|i| {
            let eta = sys.config(i);
            if sets.in_tube(i, tube.x, tube.y) {
                tube.value(eta)
            } else {
                0.0
            }
        })
        .collect()
}

/// Equilibrium potential of the limit chain, by site label (0 off `S_star`).
pub fn limit_potential(limit: &LimitChain, kappa: usize, a: &[usize], b: &[usize]) -> Result<Vec<f64>> {
    let pos = limit.potential(a, b)?;
    let mut out = vec![0.0; kappa];
    for (p, &s) in limit.sites.iter().enumerate() {
        out[s] = pos[p];
    }
    Ok(out)
}

pub fn limit_chain_of(model: &ZrpModel) -> Result<LimitChain> {
    let c = model.limit_constants();
    build_limit_chain(&model.walk, &model.profile, model.alpha, c.gamma_alpha, c.i_alpha)
}

fn check_sites(model: &ZrpModel, a: &[usize], b: &[usize]) -> Result<()> {
    let p = &model.profile;
    if a.is_empty() || b.is_empty() || a.iter().any(|s| b.contains(s)) || a.iter().chain(b).any(|&s| !p.is_star(s)) {
        return Err(Error::SetsOverlapOrEmpty);
    }
    Ok(())
}

/// `V_{A,B}`: the limit potential on wells, interpolated by tube functions on
/// saddle tubes, zero elsewhere. With `adjoint`, built from the adjoint walk.
pub fn global_test_function(
    sys: &ZrpSystem,
    sets: &MetastableSets,
    ramp: &RampProfile,
    a: &[usize],
    b: &[usize],
    adjoint: bool,
) -> Result<Vec<f64>> {
    let model = &sys.model;
    check_sites(model, a, b)?;
    let hh = limit_potential(&limit_chain_of(model)?, model.kappa(), a, b)?;
    let walk = if adjoint { adjoint_walk(&model.walk, &model.profile) } else { model.walk.clone() };
    let mut tubes = Vec::new();
    for &(x, y) in &sets.pairs {
        tubes.push(TubeFunction::new(&walk, x, y, sys.n(), ramp)?);
    }
    Ok((0..sys.len())
        .map(|i| {
            if let Some(x) = sets.well_of(i) {
                hh[x]
            } else if let Some((x, y)) = sets.saddle_of(i) {
                let p = sets.pairs.iter().position(|&q| q == (x, y)).expect("pair listed");
                hh[y] + (hh[x] - hh[y]) * tubes[p].value(sys.config(i))
            } else {
                0.0
            }
        })
        .collect())
}

/// Constants shared by the correction flows of one system.
#[derive(Clone, Debug)]
pub struct CorrectionContext {
    pub a_n: f64,
    /// `W_{N-1}` over all sites, normalizing `mu_{N-1}`.
    pub w_prev: f64,
    pub paths: CanonicalPathTable,
    pub i_alpha: f64,
}

impl CorrectionContext {
    pub fn new(model: &ZrpModel, n: u32) -> Result<Self> {
        let sites: Vec<usize> = (0..model.kappa()).collect();
        let w = model.weight_sums(n, &sites);
        Ok(Self {
            a_n: model.a_n(n),
            w_prev: w[n as usize - 1],
            paths: canonical_paths(&model.walk)?,
            i_alpha: i_alpha(model.alpha),
        })
    }

    fn mu_prev(&self, model: &ZrpModel, zeta: &[u32]) -> f64 {
        let sites: Vec<usize> = (0..model.kappa()).collect();
        model.weight(&sites, zeta) / self.w_prev
    }
}

/// `C(eta) = cap_X(x,y) m_star^eta a(eta_x) a(eta_y) / (N^{alpha+1} Z_N M_star I_alpha a(eta))`.
pub fn c_profile(sys: &ZrpSystem, cap_x: f64, i_alpha: f64, x: usize, y: usize, eta: &[u32]) -> f64 {
    let m = &sys.model;
    let sites: Vec<usize> = (0..m.kappa()).collect();
    let n = sys.n() as f64;
    cap_x * m.weight(&sites, eta) * m.a(eta[x]) * m.a(eta[y])
        / (n.powf(m.alpha + 1.0) * sys.z_n * m.profile.m_max * i_alpha)
}

/// Adds `value` on `(eta, sigma^{u,v} eta)`, routed along the canonical path
/// `u = w_1, ..., w_k = v` through `sigma^{w_1,w_j} eta` when `r(u, v) = 0`.
fn assign_routed(sys: &ZrpSystem, paths: &CanonicalPathTable, flow: &mut Flow, eta: &[u32], u: usize, v: usize, value: f64) {
    let path: Vec<usize> = if sys.model.walk.rate(u, v) > 0.0 { vec![u, v] } else { paths.path(u, v).to_vec() };
    let mut prev = sys.index_of(eta);
    for &w in &path[1..] {
        let next = sys.index_of(&apply_move(eta, u, w));
        flow.add_at(&sys.chain, prev, next, value).expect("routed edge lies in the configuration graph");
        prev = next;
    }
}

/// `chi^{(1)}`, `chi^{(2)}` and `C` for one ordered pair.
#[derive(Clone, Debug)]
pub struct TubeCorrection {
    pub x: usize,
    pub y: usize,
    pub tube: TubeFunction,
    pub chi1: Flow,
    pub chi2: Flow,
    pub chi: Flow,
    pub cap_x: f64,
    /// `C(eta)` on `T^{x,y}`, zero elsewhere.
    pub c: Vec<f64>,
}

pub fn correction_flow(
    sys: &ZrpSystem,
    sets: &MetastableSets,
    ctx: &CorrectionContext,
    tube: &TubeFunction,
) -> Result<TubeCorrection> {
    let model = &sys.model;
    let (x, y) = (tube.x, tube.y);
    let m = &model.profile.m;
    let cap_x = walk_capacity(&model.walk, &model.profile, &[x], &[y])?.cap;
    let k = tube.order.len();
    let mut chi1 = Flow::zero(&sys.chain);
    let mut chi2 = Flow::zero(&sys.chain);
    let mut c = vec![0.0; sys.len()];
    for i in 0..sys.len() {
        if !sets.in_tube(i, x, y) {
            continue;
        }
        let eta = sys.config(i);
        c[i] = c_profile(sys, cap_x, ctx.i_alpha, x, y, eta);
        for pos in 1..k - 1 {
            let z = tube.order[pos];
            if eta[z] == 0 {
                continue;
            }
            let removed = removed_one(eta, z);
            let val = -0.5 * ctx.a_n * ctx.mu_prev(model, &removed) * m[z] * tube.b_coefficient(eta, pos);
            assign_routed(sys, &ctx.paths, &mut chi1, eta, z, x, val);
            assign_routed(sys, &ctx.paths, &mut chi1, eta, z, y, val);
        }
        if eta[y] >= 1 {
            let removed = removed_one(eta, y);
            let moved = apply_move(eta, y, x);
            let bracket = m[x] * tube.b_coefficient(&moved, 0) - m[y] * tube.b_coefficient(eta, k - 1);
            let val = 0.5 * ctx.a_n * ctx.mu_prev(model, &removed) * bracket - c[i];
            assign_routed(sys, &ctx.paths, &mut chi2, eta, y, x, val);
        }
    }
    let chi = chi1.axpy(1.0, &chi2);
    Ok(TubeCorrection { x, y, tube: tube.clone(), chi1, chi2, chi, cap_x, c })
}

fn removed_one(eta: &[u32], z: usize) -> Vec<u32> {
    let mut v = eta.to_vec();
    v[z] -= 1;
    v
}

/// Corrected flow `Phi_{A,B} = Phi*_{V_{A,B}} + chi_{A,B}` with its parts.
#[derive(Clone, Debug)]
pub struct CorrectedFlow {
    pub v: Vec<f64>,
    pub phi_star_v: Flow,
    pub chi: Flow,
    pub phi: Flow,
    pub limit_potential: Vec<f64>,
    pub corrections: Vec<TubeCorrection>,
}

pub fn corrected_flow(
    sys: &ZrpSystem,
    sets: &MetastableSets,
    ramp: &RampProfile,
    a: &[usize],
    b: &[usize],
) -> Result<CorrectedFlow> {
    let model = &sys.model;
    check_sites(model, a, b)?;
    let hh = limit_potential(&limit_chain_of(model)?, model.kappa(), a, b)?;
    let ctx = CorrectionContext::new(model, sys.n())?;
    let v = global_test_function(sys, sets, ramp, a, b, false)?;
    let phi_star_v = phi_star_flow(&sys.chain, &v);
    let mut chi = Flow::zero(&sys.chain);
    let mut corrections = Vec::new();
    for &(x, y) in &sets.pairs {
        let tube = TubeFunction::new(&model.walk, x, y, sys.n(), ramp)?;
        let corr = correction_flow(sys, sets, &ctx, &tube)?;
        chi = chi.axpy(hh[x] - hh[y], &corr.chi);
        corrections.push(corr);
    }
    let phi = phi_star_v.axpy(1.0, &chi);
    Ok(CorrectedFlow { v, phi_star_v, chi, phi, limit_potential: hh, corrections })
}

/// Exact identities of one tube correction.
#[derive(Clone, Debug, PartialEq)]
pub struct PairChecks {
    pub x: usize,
    pub y: usize,
    /// `max |div chi|` off `V^x ∪ V^y ∪ J`, relative to `max |chi|`.
    pub divergence_free_off_support: f64,
    /// `max |div (Phi*_W + chi)|` on `J_int`, relative to the largest edge value.
    pub tube_interior_divergence: f64,
    /// `max |sum_i m B(sigma^{x,z_i} eta; z_i)|` relative to the largest term.
    pub b_identity: f64,
    /// `(div chi)(E^x)`.
    pub valley_divergence: f64,
    /// `sum C` over `E^x ∩ V^x`, where `div chi = C`.
    pub valley_c_sum: f64,
    /// `div chi > 0` on `E^x ∩ V^x`, `= 0` on the rest of `E^x`, `< 0` on `E^y ∩ V^y`.
    pub valley_signs: bool,
    /// `max |chi_{x,y} + chi_{y,x}|` relative to `max |chi_{x,y}|`.
    pub antisymmetry: f64,
    /// `||chi_{x,y}||^2`.
    pub chi_norm_sq: f64,
    /// `N^{1+alpha} (div chi)(E^x) Gamma(alpha) M_star I_alpha / cap_X`.
    pub valley_ratio: f64,
    /// `D_N(W; J_int)`.
    pub tube_dirichlet: f64,
    /// `max (U(eta_x/N) - a(eta_x) a(eta_y)/(N^{2 alpha} I_alpha)) N / pi` over the tube.
    pub profile_gap: f64,
    pub profile_gap_nonnegative: bool,
}

impl PairChecks {
    /// Worst of the exact identities.
    pub fn exact_max(&self) -> f64 {
        let valley_gap = (self.valley_divergence - self.valley_c_sum).abs() / self.valley_c_sum.abs().max(f64::MIN_POSITIVE);
        [self.divergence_free_off_support, self.tube_interior_divergence, self.b_identity, valley_gap, self.antisymmetry]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Full verification report for `(A, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApproxReport {
    pub n: u32,
    pub kappa_star: usize,
    pub cap_y: f64,
    pub pairs: Vec<PairChecks>,
    /// `N^{1+alpha} D_N(V_{A,B})`.
    pub scaled_dirichlet: f64,
    /// `N^{1+alpha} ||Phi_{A,B} - Phi*_V||^2`.
    pub scaled_correction_norm: f64,
    /// `N^{1+alpha} sum_{Delta} |div Phi_{A,B}|`.
    pub scaled_delta_divergence: f64,
    /// `N^{1+alpha} max_x |(div Phi_{A,B})(E^x)|` over `x` outside `A ∪ B`.
    pub scaled_other_valleys: f64,
    /// `N^{1+alpha} (div Phi_{A,B})(E(A))` and `(E(B))`.
    pub scaled_divergence_a: f64,
    pub scaled_divergence_b: f64,
    /// Positive on `E(A)`, negative on `E(B)`.
    pub sign_structure: bool,
    /// `V_{A,B}` constant on each valley with the limit potential value.
    pub valley_values_exact: bool,
    pub ramp: RampReport,
}

fn relative_max(values: impl Iterator<Item = f64>, scale: f64) -> f64 {
    values.fold(0.0f64, |a, v| a.max(v.abs())) / scale.max(f64::MIN_POSITIVE)
}

fn pair_checks(sys: &ZrpSystem, sets: &MetastableSets, ctx: &CorrectionContext, ramp: &RampProfile, corr: &TubeCorrection) -> Result<PairChecks> {
    let model = &sys.model;
    let chain = &sys.chain;
    let (x, y) = (corr.x, corr.y);
    let n = sys.n();
    let pi = sets.scales.pi;
    let alpha = model.alpha;
    let chi = &corr.chi;
    let div_chi = divergence(chain, chi);
    let v_x = sets.v_mask(x, y);
    let v_y = sets.v_mask(y, x);
    let j = sets.saddle_mask(x, y);
    let j_int = sets.saddle_interior(x, y);
    let chi_scale = chi.max_abs();
    let off = relative_max((0..sys.len()).filter(|&i| !v_x[i] && !v_y[i] && !j[i]).map(|i| div_chi[i]), chi_scale);

    let w = tube_function_values(sys, sets, &corr.tube);
    let phi_w = phi_star_flow(chain, &w);
    let phi_xy = phi_w.axpy(1.0, chi);
    let div_phi = divergence(chain, &phi_xy);
    let interior = relative_max((0..sys.len()).filter(|&i| j_int[i]).map(|i| div_phi[i]), phi_xy.max_abs());

    let mut b_id: f64 = 0.0;
    for i in 0..sys.len() {
        let eta = sys.config(i);
        if eta[x] >= 1 && (eta[x] + eta[y]) as i64 > n as i64 - pi as i64 {
            let (s, scale) = corr.tube.b_identity(&model.profile.m, eta);
            if scale > 0.0 {
                b_id = b_id.max(s.abs() / scale);
            }
        }
    }

    let e_x = sets.valley_mask(x);
    let e_y = sets.valley_mask(y);
    let valley_divergence = kahan_sum((0..sys.len()).filter(|&i| e_x[i]).map(|i| div_chi[i]));
    let valley_c_sum = kahan_sum((0..sys.len()).filter(|&i| e_x[i] && v_x[i]).map(|i| corr.c[i]));
    let tol = 1e-12 * chi_scale;
    let mut signs = true;
    for i in 0..sys.len() {
        if e_x[i] {
            signs &= if v_x[i] { div_chi[i] > 0.0 } else { div_chi[i].abs() <= tol };
        }
        if e_y[i] {
            signs &= if v_y[i] { div_chi[i] < 0.0 } else { div_chi[i].abs() <= tol };
        }
    }

    let reverse = TubeFunction::new(&model.walk, y, x, n, ramp)?;
    let rev = correction_flow(sys, sets, ctx, &reverse)?;
    let antisym = relative_max(chi.values().iter().zip(rev.chi.values()).map(|(a, b)| a + b), chi_scale);

    let c = model.limit_constants();
    let valley_ratio = (n as f64).powf(1.0 + alpha) * valley_divergence * c.gamma_alpha * model.profile.m_max * c.i_alpha
        / corr.cap_x;
    let tube_dirichlet = chain.dirichlet_form_on(&w, &j_int).unwrap_or(f64::NAN);

    let mut gap: f64 = 0.0;
    let mut nonneg = true;
    let nf = n as f64;
    for i in 0..sys.len() {
        if !sets.in_tube(i, x, y) {
            continue;
        }
        let eta = sys.config(i);
        let d = ramp.u(eta[x] as f64 / nf) - model.a(eta[x]) * model.a(eta[y]) / (nf.powf(2.0 * alpha) * ctx.i_alpha);
        nonneg &= d >= -1e-15;
        gap = gap.max(d * nf / pi.max(1) as f64);
    }

    Ok(PairChecks {
        x,
        y,
        divergence_free_off_support: off,
        tube_interior_divergence: interior,
        b_identity: b_id,
        valley_divergence,
        valley_c_sum,
        valley_signs: signs,
        antisymmetry: antisym,
        chi_norm_sq: flow_norm_sq(chain, chi),
        valley_ratio,
        tube_dirichlet,
        profile_gap: gap,
        profile_gap_nonnegative: nonneg,
    })
}

/// Builds every constituent for `(A, B)` and evaluates the exact identities and
/// the scaled diagnostics.
pub fn approx_verification(
    sys: &ZrpSystem,
    sets: &MetastableSets,
    ramp: &RampProfile,
    a: &[usize],
    b: &[usize],
) -> Result<ApproxReport> {
    if sets.len() != sys.len() || sets.scales.n != sys.n() {
        return Err(Error::ConstituentMissing("region labels do not match the system".into()));
    }
    let model = &sys.model;
    let cf = corrected_flow(sys, sets, ramp, a, b)?;
    let ctx = CorrectionContext::new(model, sys.n())?;
    let mut pairs = Vec::new();
    for corr in &cf.corrections {
        pairs.push(pair_checks(sys, sets, &ctx, ramp, corr)?);
    }
    let limit = limit_chain_of(model)?;
    let cap_y = limit.capacity(a, b)?;
    let scale = (sys.n() as f64).powf(1.0 + model.alpha);
    let chain = &sys.chain;
    let div = divergence(chain, &cf.phi);
    let delta = sets.delta_mask();
    let delta_sum = kahan_sum((0..sys.len()).filter(|&i| delta[i]).map(|i| div[i].abs()));
    let mut other: f64 = 0.0;
    for &x in &sets.s_star {
        if !a.contains(&x) && !b.contains(&x) {
            let e = sets.valley_mask(x);
            other = other.max(kahan_sum((0..sys.len()).filter(|&i| e[i]).map(|i| div[i])).abs());
        }
    }
    let ea = sets.valleys_mask(a);
    let eb = sets.valleys_mask(b);
    let da = kahan_sum((0..sys.len()).filter(|&i| ea[i]).map(|i| div[i]));
    let db = kahan_sum((0..sys.len()).filter(|&i| eb[i]).map(|i| div[i]));
    let mut exact_values = true;
    for i in 0..sys.len() {
        if let Some(x) = sets.valley_of(i) {
            exact_values &= cf.v[i] == cf.limit_potential[x];
        }
    }
    Ok(ApproxReport {
        n: sys.n(),
        kappa_star: model.profile.kappa_star,
        cap_y,
        pairs,
        scaled_dirichlet: scale * chain.dirichlet_form(&cf.v),
        scaled_correction_norm: scale * flow_norm_sq(chain, &cf.chi),
        scaled_delta_divergence: scale * delta_sum,
        scaled_other_valleys: scale * other,
        scaled_divergence_a: scale * da,
        scaled_divergence_b: scale * db,
        sign_structure: da > 0.0 && db < 0.0,
        valley_values_exact: exact_values,
        ramp: ramp.properties(2_000),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_sets, ScaleParams};

    fn two_site(alpha: f64) -> ZrpModel {
        ZrpModel::new(UnderlyingWalk::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(), alpha).unwrap()
    }

    #[test]
    fn ramp_midpoint_and_flat_ends() {
        let r = RampProfile::new(0.05, 3.0).unwrap();
        assert!((r.gamma(0.5) - 0.5).abs() < 1e-14);
        assert!((r.h(0.5) - 0.5).abs() < 1e-14);
        assert_eq!(r.h(0.15), 0.0);
        assert_eq!(r.h(0.85), 1.0);
    }

    #[test]
    fn ramp_rejects_eps() {
        assert_eq!(RampProfile::new(0.1, 3.0).unwrap_err(), Error::EpsOutOfRange(0.1));
        // 1 - 4 sqrt(1/16) = 0
        assert!(matches!(RampProfile::new(1.0 / 16.0, 3.0), Err(Error::PropertyCheckFailed(_))));
    }

    #[test]
    fn c_profile_plug_in() {
        let sys = ZrpSystem::new(&two_site(3.0), 2).unwrap();
        let c = c_profile(&sys, 0.5, 1.0 / 140.0, 0, 1, &[1, 1]);
        assert!((c - 0.875).abs() < 1e-12, "{c}");
    }

    #[test]
    fn two_site_tube_function_is_ramp() {
        let model = two_site(3.0);
        let ramp = RampProfile::new(0.05, 3.0).unwrap();
        let t = TubeFunction::new(&model.walk, 0, 1, 40, &ramp).unwrap();
        for k in 0..=40u32 {
            let eta = [k, 40 - k];
            assert!((t.value(&eta) - ramp.h(k as f64 / 40.0)).abs() < 1e-14);
            if k >= 1 {
                let b = t.b_coefficient(&eta, 0);
                let want = ramp.h(k as f64 / 40.0) - ramp.h((k as f64 - 1.0) / 40.0);
                assert!((b - want).abs() < 1e-14);
            }
        }
        let back = TubeFunction::new(&model.walk, 1, 0, 40, &ramp).unwrap();
        assert!((back.value(&[7, 33]) + t.value(&[7, 33]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn corrected_flow_identities_two_sites() {
        let model = two_site(3.0);
        let sys = ZrpSystem::new(&model, 50).unwrap();
        let scales = ScaleParams::relaxed(&model, 50, 0.05).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let ramp = RampProfile::new(0.05, 3.0).unwrap();
        let rep = approx_verification(&sys, &sets, &ramp, &[0], &[1]).unwrap();
        let p = &rep.pairs[0];
        assert!(p.exact_max() < 1e-11, "{p:?}");
        assert!(p.valley_signs && rep.sign_structure && rep.valley_values_exact);
    }

    fn three_site(alpha: f64) -> ZrpModel {
        // two condensate sites and one lighter site, circulating 0 -> 2 -> 1 -> 0
        let rates = vec![vec![0.0, 1.0, 0.5], vec![1.5, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        ZrpModel::new(UnderlyingWalk::new(rates).unwrap(), alpha).unwrap()
    }

    #[test]
    fn routed_corrections_keep_exact_identities() {
        let model = three_site(3.0);
        assert!(!model.walk.fully_supported());
        let sys = ZrpSystem::new(&model, 120).unwrap();
        let scales = ScaleParams::custom(&model, 120, 0.05, 3, 5).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let ramp = RampProfile::new(0.05, 3.0).unwrap();
        let rep = approx_verification(&sys, &sets, &ramp, &[0], &[1]).unwrap();
        let p = &rep.pairs[0];
        assert!(p.exact_max() < 1e-11, "{p:?}");
        assert!(p.valley_signs && rep.sign_structure, "{rep:?}");
    }
}

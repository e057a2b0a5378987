//! The underlying random walk on the finite site set `S`, its adjoint, its
//! potential theory, canonical paths and the limit chain on the maximizers
//! of the stationary measure.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::linalg::{dense_solve, symmetric_expm};
use crate::numeric::kahan_sum;

/// Masses within this relative distance of the maximum are treated as tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct UnderlyingWalk {
    rates: Vec<Vec<f64>>,
}

impl UnderlyingWalk {
    /// `rates[x][y]` is the jump rate from `x` to `y`.
    pub fn new(rates: Vec<Vec<f64>>) -> Result<Self> {
        let k = rates.len();
        if k < 2 {
            return Err(Error::InvalidWalk("need at least two sites".into()));
        }
        for (x, row) in rates.iter().enumerate() {
            if row.len() != k {
                return Err(Error::InvalidWalk(format!("row {x} has length {}", row.len())));
            }
            for (y, &r) in row.iter().enumerate() {
                if !r.is_finite() || r < 0.0 {
                    return Err(Error::InvalidWalk(format!("rate ({x},{y}) = {r}")));
                }
                if x == y && r != 0.0 {
                    return Err(Error::InvalidWalk(format!("diagonal rate at {x} must be 0")));
                }
            }
        }
        let w = Self { rates };
        if !w.strongly_connected() {
            return Err(Error::NotIrreducible);
        }
        Ok(w)
    }

    pub fn kappa(&self) -> usize {
        self.rates.len()
    }

    #[inline]
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        self.rates[x][y]
    }

    pub fn rates(&self) -> &[Vec<f64>] {
        &self.rates
    }

    pub fn out_rate(&self, x: usize) -> f64 {
        self.rates[x].iter().sum()
    }

    /// `r(u, v) > 0` for every ordered pair of distinct sites.
    pub fn fully_supported(&self) -> bool {
        let k = self.kappa();
        (0..k).all(|x| (0..k).all(|y| x == y || self.rates[x][y] > 0.0))
    }

    /// Directed edge set `{(x, y) : r(x, y) > 0}` in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let k = self.kappa();
        let mut e = Vec::new();
        for x in 0..k {
            for y in 0..k {
                if self.rates[x][y] > 0.0 {
                    e.push((x, y));
                }
            }
        }
        e
    }

    fn strongly_connected(&self) -> bool {
        let k = self.kappa();
        let reach = |forward: bool| {
            let mut seen = vec![false; k];
            let mut q = VecDeque::from([0usize]);
            seen[0] = true;
            while let Some(u) = q.pop_front() {
                for v in 0..k {
                    let r = if forward { self.rates[u][v] } else { self.rates[v][u] };
                    if r > 0.0 && !seen[v] {
                        seen[v] = true;
                        q.push_back(v);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        reach(true) && reach(false)
    }

    /// `(L f)(x) = sum_y r(x, y) (f(y) - f(x))`.
    pub fn generator_apply(&self, f: &[f64]) -> Vec<f64> {
        let k = self.kappa();
        (0..k)
            .map(|x| kahan_sum((0..k).map(|y| self.rates[x][y] * (f[y] - f[x]))))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkProfile {
    pub m: Vec<f64>,
    pub m_max: f64,
    pub s_star: Vec<usize>,
    pub kappa_star: usize,
    pub m_star: Vec<f64>,
}

impl WalkProfile {
    /// Builds the profile from a stationary vector with an explicit `S_star`.
    pub fn with_s_star(m: Vec<f64>, s_star: Vec<usize>) -> Result<Self> {
        let mut s_star = s_star;
        s_star.sort_unstable();
        s_star.dedup();
        if s_star.len() < 2 {
            return Err(Error::DegenerateModel(format!(
                "at least two maximizing sites are required, found {}",
                s_star.len()
            )));
        }
        if s_star.iter().any(|&x| x >= m.len()) {
            return Err(Error::InvalidWalk("S_star index out of range".into()));
        }
        let m_max = s_star.iter().map(|&x| m[x]).fold(f64::MIN, f64::max);
        let m_star = (0..m.len())
            .map(|x| if s_star.contains(&x) { 1.0 } else { (m[x] / m_max).min(1.0) })
            .collect();
        Ok(Self { kappa_star: s_star.len(), m, m_max, s_star, m_star })
    }

    pub fn is_star(&self, x: usize) -> bool {
        self.s_star.binary_search(&x).is_ok()
    }

    /// `C_1 = min m(x) r(x, y)` and `C_2 = max m(x) r(x, y)` over the edge set.
    pub fn rate_constants(&self, walk: &UnderlyingWalk) -> (f64, f64) {
        let vals: Vec<f64> = walk.edges().iter().map(|&(x, y)| self.m[x] * walk.rate(x, y)).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(0.0, f64::max);
        (lo, hi)
    }
}

/// Solves `m L = 0`, `sum m = 1` without the `kappa_star >= 2` requirement.
pub fn stationary_vector(walk: &UnderlyingWalk) -> Result<Vec<f64>> {
    let k = walk.kappa();
    // rows: transpose of the generator, last row replaced by normalization
    let mut a = vec![vec![0.0; k]; k];
    for x in 0..k {
        for y in 0..k {
            if x != y {
                a[y][x] += walk.rate(x, y);
                a[x][x] -= walk.rate(x, y);
            }
        }
    }
    a[k - 1] = vec![1.0; k];
    let mut b = vec![0.0; k];
    b[k - 1] = 1.0;
    let mut m = dense_solve(&a, &b);
    // one refinement step against the normalized residual
    let res: Vec<f64> = (0..k)
        .map(|i| b[i] - kahan_sum((0..k).map(|j| a[i][j] * m[j])))
        .collect();
    let dm = dense_solve(&a, &res);
    for i in 0..k {
        m[i] += dm[i];
    }
    let s = kahan_sum(m.iter().copied());
    for v in m.iter_mut() {
        *v /= s;
    }
    if m.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NotIrreducible);
    }
    let resid = stationarity_residual(walk, &m);
    let mmax = m.iter().cloned().fold(0.0, f64::max);
    if resid > 1e-12 * mmax {
        return Err(Error::SolverFailure(format!("stationarity residual {resid:.3e}")));
    }
    Ok(m)
}

/// `max_x |sum_y m(y) r(y, x) - m(x) sum_y r(x, y)|`.
pub fn stationarity_residual(walk: &UnderlyingWalk, m: &[f64]) -> f64 {
    let k = walk.kappa();
    (0..k)
        .map(|x| {
            let inflow = kahan_sum((0..k).map(|y| m[y] * walk.rate(y, x)));
            (inflow - m[x] * walk.out_rate(x)).abs()
        })
        .fold(0.0, f64::max)
}

pub fn stationary_measure(walk: &UnderlyingWalk) -> Result<WalkProfile> {
    let m = stationary_vector(walk)?;
    let mmax = m.iter().cloned().fold(0.0, f64::max);
    let s_star: Vec<usize> = (0..m.len()).filter(|&x| m[x] >= mmax * (1.0 - TIE_TOL)).collect();
    WalkProfile::with_s_star(m, s_star)
}

/// `r*(x, y) = r(y, x) m(y) / m(x)`.
pub fn adjoint_walk(walk: &UnderlyingWalk, profile: &WalkProfile) -> UnderlyingWalk {
    let k = walk.kappa();
    let m = &profile.m;
    let rates = (0..k)
        .map(|x| {
            (0..k)
                .map(|y| if x == y { 0.0 } else { walk.rate(y, x) * m[y] / m[x] })
                .collect()
        })
        .collect();
    UnderlyingWalk { rates }
}

/// `D_X(f) = 1/2 sum_{x,y} m(x) r(x, y) (f(y) - f(x))^2`.
pub fn walk_dirichlet_form(walk: &UnderlyingWalk, profile: &WalkProfile, f: &[f64]) -> f64 {
    let k = walk.kappa();
    let mut terms = Vec::with_capacity(k * k);
    for x in 0..k {
        for y in 0..k {
            let d = f[y] - f[x];
            terms.push(0.5 * profile.m[x] * walk.rate(x, y) * d * d);
        }
    }
    kahan_sum(terms)
}

fn check_sets(k: usize, a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::SetsOverlapOrEmpty);
    }
    if a.iter().chain(b).any(|&x| x >= k) || a.iter().any(|x| b.contains(x)) {
        return Err(Error::SetsOverlapOrEmpty);
    }
    Ok(())
}

/// Harmonic function equal to 1 on `a` and 0 on `b`.
pub fn walk_equilibrium_potential(walk: &UnderlyingWalk, a: &[usize], b: &[usize]) -> Result<Vec<f64>> {
    let k = walk.kappa();
    check_sets(k, a, b)?;
    let mut h = vec![0.0; k];
    for &x in a {
        h[x] = 1.0;
    }
    let interior: Vec<usize> = (0..k).filter(|x| !a.contains(x) && !b.contains(x)).collect();
    if interior.is_empty() {
        return Ok(h);
    }
    let n = interior.len();
    let mut mat = vec![vec![0.0; n]; n];
    let mut rhs = vec![0.0; n];
    for (i, &x) in interior.iter().enumerate() {
        mat[i][i] = -walk.out_rate(x);
        for y in 0..k {
            let r = walk.rate(x, y);
            if r == 0.0 {
                continue;
            }
            if let Some(j) = interior.iter().position(|&z| z == y) {
                mat[i][j] += r;
            } else {
                rhs[i] -= r * h[y];
            }
        }
    }
    let sol = dense_solve(&mat, &rhs);
    for (i, &x) in interior.iter().enumerate() {
        h[x] = sol[i].clamp(0.0, 1.0);
    }
    Ok(h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WalkCapacity {
    /// `D_X(h_{A,B})`.
    pub cap: f64,
    /// `-sum_{x in A} m(x) (L h)(x)`.
    pub flux_from_a: f64,
    /// `sum_{x in B} m(x) (L h)(x)`.
    pub flux_into_b: f64,
    pub reversed: f64,
    pub adjoint: f64,
}

fn capacity_value(walk: &UnderlyingWalk, profile: &WalkProfile, a: &[usize], b: &[usize]) -> Result<(f64, f64, f64)> {
    let h = walk_equilibrium_potential(walk, a, b)?;
    let lh = walk.generator_apply(&h);
    let cap = walk_dirichlet_form(walk, profile, &h);
    let fa = -kahan_sum(a.iter().map(|&x| profile.m[x] * lh[x]));
    let fb = kahan_sum(b.iter().map(|&x| profile.m[x] * lh[x]));
    Ok((cap, fa, fb))
}

/// Capacity with its boundary-flux forms, the reversed pair and the adjoint walk.
pub fn walk_capacity(walk: &UnderlyingWalk, profile: &WalkProfile, a: &[usize], b: &[usize]) -> Result<WalkCapacity> {
    let (cap, fa, fb) = capacity_value(walk, profile, a, b)?;
    let (rev, _, _) = capacity_value(walk, profile, b, a)?;
    let adj = adjoint_walk(walk, profile);
    let (cap_adj, _, _) = capacity_value(&adj, profile, a, b)?;
    let out = WalkCapacity { cap, flux_from_a: fa, flux_into_b: fb, reversed: rev, adjoint: cap_adj };
    let scale = cap.abs().max(f64::MIN_POSITIVE);
    for (name, v) in [("flux from A", fa), ("flux into B", fb), ("reversed pair", rev), ("adjoint walk", cap_adj)] {
        if (v - cap).abs() > 1e-10 * scale {
            return Err(Error::SolverFailure(format!("capacity mismatch ({name}): {v} vs {cap}")));
        }
    }
    Ok(out)
}

/// Shortest directed paths, lexicographically smallest among shortest ones.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalPathTable {
    paths: Vec<Vec<Vec<usize>>>,
}

impl CanonicalPathTable {
    /// Path `u = z_1, ..., z_k = v`; `[u]` when `u == v`.
    pub fn path(&self, u: usize, v: usize) -> &[usize] {
        &self.paths[u][v]
    }

    pub fn max_len(&self) -> usize {
        self.paths.iter().flatten().map(|p| p.len()).max().unwrap_or(0)
    }
}

pub fn canonical_paths(walk: &UnderlyingWalk) -> Result<CanonicalPathTable> {
    let k = walk.kappa();
    let mut paths = vec![vec![Vec::new(); k]; k];
    for v in 0..k {
        // distances to v along the reversed graph
        let mut dist = vec![usize::MAX; k];
        dist[v] = 0;
        let mut q = VecDeque::from([v]);
        while let Some(w) = q.pop_front() {
            for u in 0..k {
                if walk.rate(u, w) > 0.0 && dist[u] == usize::MAX {
                    dist[u] = dist[w] + 1;
                    q.push_back(u);
                }
            }
        }
        for u in 0..k {
            if dist[u] == usize::MAX {
                return Err(Error::NotIrreducible);
            }
            let mut p = vec![u];
            let mut cur = u;
            while cur != v {
                let next = (0..k)
                    .find(|&w| walk.rate(cur, w) > 0.0 && dist[w] + 1 == dist[cur])
                    .expect("BFS layer has a successor");
                p.push(next);
                cur = next;
            }
            paths[u][v] = p;
        }
    }
    Ok(CanonicalPathTable { paths })
}

/// Markov chain on `S_star` with rates `a(x, y) = cap_X(x, y) / (M_star Gamma(alpha) I_alpha)`.
///
/// The null state carries no mass and no rates, so it is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitChain {
    pub sites: Vec<usize>,
    pub rates: Vec<Vec<f64>>,
    pub mu: f64,
}

pub fn build_limit_chain(
    walk: &UnderlyingWalk,
    profile: &WalkProfile,
    alpha: f64,
    gamma_alpha: f64,
    i_alpha: f64,
) -> Result<LimitChain> {
    if !(alpha > 2.0) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let sites = profile.s_star.clone();
    let ks = sites.len();
    let mut rates = vec![vec![0.0; ks]; ks];
    for i in 0..ks {
        for j in (i + 1)..ks {
            let c = walk_capacity(walk, profile, &[sites[i]], &[sites[j]])?.cap;
            let a = c / (profile.m_max * gamma_alpha * i_alpha);
            rates[i][j] = a;
            rates[j][i] = a;
        }
    }
    let lc = LimitChain { sites, rates, mu: 1.0 / ks as f64 };
    let db = lc.detailed_balance_residual();
    if db > 1e-12 * lc.max_rate().max(1.0) {
        return Err(Error::SolverFailure(format!("limit chain detailed balance residual {db:.3e}")));
    }
    Ok(lc)
}

impl LimitChain {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    /// Position of a site label inside `S_star`.
    pub fn position(&self, site: usize) -> Option<usize> {
        self.sites.iter().position(|&s| s == site)
    }

    /// Rate between two site labels of `S_star`.
    pub fn rate(&self, x: usize, y: usize) -> f64 {
        match (self.position(x), self.position(y)) {
            (Some(i), Some(j)) => self.rates[i][j],
            _ => 0.0,
        }
    }

    fn max_rate(&self) -> f64 {
        self.rates.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn detailed_balance_residual(&self) -> f64 {
        let n = self.len();
        let mut r: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                r = r.max((self.mu * self.rates[i][j] - self.mu * self.rates[j][i]).abs());
            }
        }
        r
    }

    /// `(L_Y f)(x) = sum_y a(x, y) (f(y) - f(x))`, indexed by position in `S_star`.
    pub fn generator_apply(&self, f: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n).map(|i| kahan_sum((0..n).map(|j| self.rates[i][j] * (f[j] - f[i])))).collect()
    }

    /// `D_Y(f) = 1/2 sum mu(x) a(x, y) (f(y) - f(x))^2`.
    pub fn dirichlet_form(&self, f: &[f64]) -> f64 {
        let n = self.len();
        let mut terms = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let d = f[j] - f[i];
                terms.push(0.5 * self.mu * self.rates[i][j] * d * d);
            }
        }
        kahan_sum(terms)
    }

    fn positions(&self, set: &[usize]) -> Result<Vec<usize>> {
        set.iter().map(|&s| self.position(s).ok_or(Error::SetsOverlapOrEmpty)).collect()
    }

    /// Equilibrium potential between two sets of site labels, indexed by position.
    pub fn potential(&self, a: &[usize], b: &[usize]) -> Result<Vec<f64>> {
        let pa = self.positions(a)?;
        let pb = self.positions(b)?;
        let tmp = UnderlyingWalk { rates: self.rates.clone() };
        if self.len() < 2 {
            return Err(Error::SetsOverlapOrEmpty);
        }
        walk_equilibrium_potential(&tmp, &pa, &pb)
    }

    pub fn capacity(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        let h = self.potential(a, b)?;
        Ok(self.dirichlet_form(&h))
    }

    /// `Q_x[Y_t = y]` for positions in `S_star`.
    pub fn transition_probabilities(&self, t: f64) -> Result<Vec<Vec<f64>>> {
        let n = self.len();
        let mut q = self.rates.clone();
        for (i, row) in q.iter_mut().enumerate() {
            let out: f64 = (0..n).filter(|&j| j != i).map(|j| self.rates[i][j]).sum();
            row[i] = -out;
        }
        symmetric_expm(&q, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_cycle() -> UnderlyingWalk {
        UnderlyingWalk::new(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap()
    }

    #[test]
    fn rejects_reducible_and_bad_rates() {
        let r = UnderlyingWalk::new(vec![vec![0.0, 1.0], vec![0.0, 0.0]]);
        assert_eq!(r, Err(Error::NotIrreducible));
        assert!(UnderlyingWalk::new(vec![vec![1.0, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(UnderlyingWalk::new(vec![vec![0.0, -1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn cycle_adjoint_reverses() {
        let w = three_cycle();
        let p = stationary_measure(&w).unwrap();
        let adj = adjoint_walk(&w, &p);
        assert_eq!(adj.rate(1, 0), 1.0);
        assert_eq!(adj.rate(2, 1), 1.0);
        assert_eq!(adj.rate(0, 2), 1.0);
        assert_eq!(adj.rate(0, 1), 0.0);
    }

    #[test]
    fn degenerate_single_maximizer() {
        let w = UnderlyingWalk::new(vec![vec![0.0, 1.0], vec![2.0, 0.0]]).unwrap();
        assert!(matches!(stationary_measure(&w), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn canonical_path_prefers_smallest_index() {
        // 0 -> 1 -> 3 and 0 -> 2 -> 3 are both shortest
        let mut r = vec![vec![0.0; 4]; 4];
        r[0][1] = 1.0;
        r[0][2] = 1.0;
        r[1][3] = 1.0;
        r[2][3] = 1.0;
        r[3][0] = 1.0;
        let w = UnderlyingWalk::new(r).unwrap();
        let t = canonical_paths(&w).unwrap();
        assert_eq!(t.path(0, 3), &[0, 1, 3]);
        assert_eq!(t.path(3, 2), &[3, 0, 2]);
    }
}

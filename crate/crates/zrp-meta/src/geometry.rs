//! Scale sequences and the valley / well / tube decomposition of the
//! configuration space.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::zrp::{ZrpModel, ZrpSystem};

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub n: u32,
    pub eps: f64,
    /// Valley depth `ell_N`.
    pub ell: u32,
    /// Tube width `pi_N`.
    pub pi: u32,
    /// Occupation cap `b_N(z)` on non-condensate sites; `None` on `S_star`.
    pub b: Vec<Option<u32>>,
    /// Well threshold `ceil(N (1 - 2 eps))`.
    pub d: u32,
    /// `ell^{1 + alpha (kappa - 1)} / N^{1 + alpha} * prod m_star(z)^{-b(z)}`.
    pub product_condition: f64,
    /// Built without enforcing `floor(N eps) > pi > ell >= 1`.
    pub relaxed: bool,
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1.0 / 16.0) {
        return Err(Error::EpsOutOfRange(eps));
    }
    Ok(())
}

fn well_threshold(n: u32, eps: f64) -> u32 {
    (n as f64 * (1.0 - 2.0 * eps) - 1e-9).ceil().max(0.0) as u32
}

fn default_pi(alpha: f64, n: u32) -> u32 {
    (n as f64).powf(1.0 / alpha + 0.5).floor() as u32
}

fn default_ell(kappa: usize, n: u32) -> u32 {
    (n as f64).powf(1.0 / (2.0 * (kappa as f64 - 1.0))).floor() as u32
}

fn order_holds(n: u64, eps: f64, pi: u64, ell: u64) -> bool {
    let ne = (n as f64 * eps).floor() as u64;
    ne > pi && pi > ell && ell >= 1
}

fn default_order_holds(model: &ZrpModel, n: u64, eps: f64) -> bool {
    let pi = (n as f64).powf(1.0 / model.alpha + 0.5).floor() as u64;
    let ell = (n as f64).powf(1.0 / (2.0 * (model.kappa() as f64 - 1.0))).floor() as u64;
    order_holds(n, eps, pi, ell)
}

/// Smallest `N` (searched along doublings, then bisected) at which the default
/// scales satisfy the order condition.
pub fn minimal_admissible_n(model: &ZrpModel, eps: f64) -> u64 {
    let mut hi: u64 = 1;
    while !default_order_holds(model, hi, eps) {
        if hi > u64::MAX / 4 {
            return u64::MAX;
        }
        hi *= 2;
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = lo + (hi - lo) / 2;
        if default_order_holds(model, mid, eps) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

impl ScaleParams {
    fn assemble(model: &ZrpModel, n: u32, eps: f64, ell: u32, pi: u32, relaxed: bool) -> Self {
        let k = model.kappa();
        let p = &model.profile;
        let b: Vec<Option<u32>> = (0..k)
            .map(|z| {
                if p.is_star(z) {
                    None
                } else {
                    Some(((n as f64).ln() / (-2.0 * k as f64 * p.m_star[z].ln())).floor().max(0.0) as u32)
                }
            })
            .collect();
        let d = well_threshold(n, eps);
        let mut log_prod = (1.0 + model.alpha * (k as f64 - 1.0)) * (ell.max(1) as f64).ln()
            - (1.0 + model.alpha) * (n as f64).ln();
        for z in 0..k {
            if let Some(bz) = b[z] {
                log_prod -= bz as f64 * p.m_star[z].ln();
            }
        }
        Self { n, eps, ell, pi, b, d, product_condition: log_prod.exp(), relaxed }
    }

    pub fn order_holds(&self) -> bool {
        order_holds(self.n as u64, self.eps, self.pi as u64, self.ell as u64)
    }

    /// User-chosen `ell` and `pi`; the order condition is enforced.
    pub fn custom(model: &ZrpModel, n: u32, eps: f64, ell: u32, pi: u32) -> Result<Self> {
        check_eps(eps)?;
        let s = Self::assemble(model, n, eps, ell, pi, false);
        if !s.order_holds() {
            return Err(Error::ScaleOrderViolated { n, min_n: minimal_admissible_n(model, eps) });
        }
        Ok(s)
    }

    /// Default sequences without the order condition, for sizes where it cannot hold.
    /// `ell` is capped at `N - d` so that every valley stays inside its well. With three or
    /// more condensate sites `pi` is capped at `(N - d) / 2`, which keeps the tubes of
    /// different pairs disjoint outside the wells.
    pub fn relaxed(model: &ZrpModel, n: u32, eps: f64) -> Result<Self> {
        check_eps(eps)?;
        let d = well_threshold(n, eps);
        let ell = default_ell(model.kappa(), n).min(n - d).max(1);
        let mut pi = default_pi(model.alpha, n);
        if model.profile.s_star.len() >= 3 {
            pi = pi.min((n - d) / 2).max(1);
        }
        Ok(Self::assemble(model, n, eps, ell, pi, true))
    }

    /// Relaxed scales with explicit `ell` and `pi`.
    pub fn relaxed_with(model: &ZrpModel, n: u32, eps: f64, ell: u32, pi: u32) -> Result<Self> {
        check_eps(eps)?;
        Ok(Self::assemble(model, n, eps, ell, pi, true))
    }
}

/// `pi_N = floor(N^{1/alpha + 1/2})`, `ell_N = floor(N^{1/(2(kappa-1))})`,
/// `b_N(z) = floor(log N / (-2 kappa log m_star(z)))`.
pub fn default_scales(model: &ZrpModel, n: u32, eps: f64) -> Result<ScaleParams> {
    check_eps(eps)?;
    let s = ScaleParams::assemble(model, n, eps, default_ell(model.kappa(), n), default_pi(model.alpha, n), false);
    if !s.order_holds() {
        return Err(Error::ScaleOrderViolated { n, min_n: minimal_admissible_n(model, eps) });
    }
    Ok(s)
}

/// Region labels of every configuration of a fully enumerated system.
#[derive(Clone, Debug)]
pub struct MetastableSets {
    pub scales: ScaleParams,
    pub s_star: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    configs: Vec<Vec<u32>>,
    valley: Vec<Option<usize>>,
    well: Vec<Option<usize>>,
    saddle: Vec<Option<usize>>,
}

impl MetastableSets {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn config(&self, i: usize) -> &[u32] {
        &self.configs[i]
    }

    pub fn valley_of(&self, i: usize) -> Option<usize> {
        self.valley[i]
    }

    pub fn well_of(&self, i: usize) -> Option<usize> {
        self.well[i]
    }

    /// Pair `(x, y)`, `x < y`, whose saddle tube contains configuration `i`.
    pub fn saddle_of(&self, i: usize) -> Option<(usize, usize)> {
        self.saddle[i].map(|p| self.pairs[p])
    }

    pub fn in_tube(&self, i: usize, x: usize, y: usize) -> bool {
        tube(&self.scales, &self.configs[i], x, y)
    }

    fn in_any_tube_from(&self, i: usize, x: usize) -> bool {
        self.s_star.iter().any(|&y| y != x && self.in_tube(i, x, y))
    }

    pub fn in_g(&self, i: usize) -> bool {
        self.well[i].is_some() || self.saddle[i].is_some()
    }

    fn mask<F: Fn(usize) -> bool>(&self, f: F) -> Vec<bool> {
        (0..self.len()).map(f).collect()
    }

    pub fn valley_mask(&self, x: usize) -> Vec<bool> {
        self.mask(|i| self.valley[i] == Some(x))
    }

    /// `E(A)`.
    pub fn valleys_mask(&self, set: &[usize]) -> Vec<bool> {
        self.mask(|i| self.valley[i].is_some_and(|x| set.contains(&x)))
    }

    /// `E_N`.
    pub fn all_valleys_mask(&self) -> Vec<bool> {
        self.mask(|i| self.valley[i].is_some())
    }

    /// `Delta_N`, the complement of the valleys.
    pub fn delta_mask(&self) -> Vec<bool> {
        self.mask(|i| self.valley[i].is_none())
    }

    pub fn well_mask(&self, x: usize) -> Vec<bool> {
        self.mask(|i| self.well[i] == Some(x))
    }

    pub fn tube_mask(&self, x: usize, y: usize) -> Vec<bool> {
        self.mask(|i| self.in_tube(i, x, y))
    }

    pub fn saddle_mask(&self, x: usize, y: usize) -> Vec<bool> {
        let (a, b) = (x.min(y), x.max(y));
        self.mask(|i| self.saddle_of(i) == Some((a, b)))
    }

    /// `partial^in J^{x,y}`.
    pub fn saddle_inner_boundary(&self, x: usize, y: usize) -> Vec<bool> {
        let edge = self.scales.n.saturating_sub(self.scales.pi);
        let s = self.saddle_mask(x, y);
        self.mask(|i| s[i] && self.configs[i][x] + self.configs[i][y] == edge)
    }

    pub fn saddle_interior(&self, x: usize, y: usize) -> Vec<bool> {
        let s = self.saddle_mask(x, y);
        let bd = self.saddle_inner_boundary(x, y);
        self.mask(|i| s[i] && !bd[i])
    }

    /// `partial^out J^{x,y}`.
    pub fn saddle_outer_boundary(&self, x: usize, y: usize) -> Vec<bool> {
        let n = self.scales.n as i64;
        let edge = n - self.scales.pi as i64 - 1;
        self.mask(|i| !self.in_g(i) && (self.configs[i][x] + self.configs[i][y]) as i64 == edge)
    }

    /// `partial^in D^x`.
    pub fn well_inner_boundary(&self, x: usize) -> Vec<bool> {
        self.mask(|i| self.well[i] == Some(x) && self.configs[i][x] == self.scales.d && !self.in_any_tube_from(i, x))
    }

    pub fn well_interior(&self, x: usize) -> Vec<bool> {
        let bd = self.well_inner_boundary(x);
        self.mask(|i| self.well[i] == Some(x) && !bd[i])
    }

    /// `partial^out D^x`.
    pub fn well_outer_boundary(&self, x: usize) -> Vec<bool> {
        let d = self.scales.d as i64;
        self.mask(|i| !self.in_g(i) && self.configs[i][x] as i64 == d - 1 && !self.in_any_tube_from(i, x))
    }

    pub fn g_mask(&self) -> Vec<bool> {
        self.mask(|i| self.in_g(i))
    }

    pub fn g_inner_boundary(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &x in &self.s_star {
            or_into(&mut m, &self.well_inner_boundary(x));
        }
        for &(x, y) in &self.pairs {
            or_into(&mut m, &self.saddle_inner_boundary(x, y));
        }
        m
    }

    pub fn g_outer_boundary(&self) -> Vec<bool> {
        let mut m = vec![false; self.len()];
        for &x in &self.s_star {
            or_into(&mut m, &self.well_outer_boundary(x));
        }
        for &(x, y) in &self.pairs {
            or_into(&mut m, &self.saddle_outer_boundary(x, y));
        }
        m
    }

    /// `(G^c)_int`.
    pub fn g_complement_interior(&self) -> Vec<bool> {
        let out = self.g_outer_boundary();
        self.mask(|i| !self.in_g(i) && !out[i])
    }

    /// `V^x = {eta in T^{x,y} : eta_y = 0}`.
    pub fn v_mask(&self, x: usize, y: usize) -> Vec<bool> {
        self.mask(|i| self.in_tube(i, x, y) && self.configs[i][y] == 0)
    }

    /// `E^x` complement within the valleys.
    pub fn other_valleys(&self, x: usize) -> Vec<bool> {
        self.mask(|i| self.valley[i].is_some_and(|z| z != x))
    }

    /// Valleys other than `E^x` and `E^y`.
    pub fn other_valleys_pair(&self, x: usize, y: usize) -> Vec<bool> {
        self.mask(|i| self.valley[i].is_some_and(|z| z != x && z != y))
    }

    /// `N eps <= eta_x, eta_y <= N (1 - 2 eps)` on every saddle tube.
    pub fn saddle_bounds_hold(&self) -> bool {
        let n = self.scales.n as f64;
        let eps = self.scales.eps;
        (0..self.len()).all(|i| match self.saddle_of(i) {
            None => true,
            Some((x, y)) => [x, y].iter().all(|&s| {
                let v = self.configs[i][s] as f64;
                v >= n * eps - 1e-9 && v <= n * (1.0 - 2.0 * eps) + 1e-9
            }),
        })
    }
}

fn or_into(m: &mut [bool], other: &[bool]) {
    for (a, &b) in m.iter_mut().zip(other) {
        *a |= b;
    }
}

fn tube(s: &ScaleParams, eta: &[u32], x: usize, y: usize) -> bool {
    (eta[x] + eta[y]) as i64 >= s.n as i64 - s.pi as i64
}

fn valley_label(s: &ScaleParams, s_star: &[usize], eta: &[u32]) -> Option<usize> {
    let n = s.n as i64;
    let caps_ok = eta.iter().zip(&s.b).all(|(&v, b)| b.map_or(true, |bz| v <= bz));
    if !caps_ok {
        return None;
    }
    s_star.iter().copied().find(|&x| eta[x] as i64 >= n - s.ell as i64)
}

pub fn build_sets(sys: &ZrpSystem, scales: &ScaleParams) -> Result<MetastableSets> {
    if scales.n != sys.n() {
        return Err(Error::InvalidWalk(format!("scales built for N = {}, system has N = {}", scales.n, sys.n())));
    }
    if !scales.relaxed && !scales.order_holds() {
        return Err(Error::ScaleOrderViolated { n: scales.n, min_n: minimal_admissible_n(&sys.model, scales.eps) });
    }
    let s_star = sys.model.profile.s_star.clone();
    let mut pairs = Vec::new();
    for (i, &x) in s_star.iter().enumerate() {
        for &y in &s_star[i + 1..] {
            pairs.push((x, y));
        }
    }
    let configs: Vec<Vec<u32>> = (0..sys.len()).map(|i| sys.config(i).to_vec()).collect();
    let mut valley = Vec::with_capacity(configs.len());
    let mut well = Vec::with_capacity(configs.len());
    let mut saddle = Vec::with_capacity(configs.len());
    let violation = || Error::ScaleOrderViolated { n: scales.n, min_n: minimal_admissible_n(&sys.model, scales.eps) };
    for eta in &configs {
        valley.push(valley_label(scales, &s_star, eta));
        let wells: Vec<usize> = s_star.iter().copied().filter(|&x| eta[x] >= scales.d).collect();
        if wells.len() > 1 {
            return Err(violation());
        }
        let w = wells.first().copied();
        well.push(w);
        let mut hit = None;
        for (p, &(x, y)) in pairs.iter().enumerate() {
            if w.is_none() && tube(scales, eta, x, y) {
                if hit.is_some() {
                    return Err(violation());
                }
                hit = Some(p);
            }
        }
        saddle.push(hit);
    }
    let sets = MetastableSets { scales: scales.clone(), s_star, pairs, configs, valley, well, saddle };
    sets.check_decompositions().map_err(|_| violation())?;
    Ok(sets)
}

impl MetastableSets {
    /// `G` is the disjoint union of well interiors, saddle interiors and `partial^in G`;
    /// valleys sit inside their wells; outer boundaries lie in `G^c`.
    fn check_decompositions(&self) -> std::result::Result<(), String> {
        let n = self.len();
        let mut count = vec![0u8; n];
        for &x in &self.s_star {
            for (i, &m) in self.well_interior(x).iter().enumerate() {
                count[i] += m as u8;
            }
        }
        for &(x, y) in &self.pairs {
            for (i, &m) in self.saddle_interior(x, y).iter().enumerate() {
                count[i] += m as u8;
            }
        }
        for (i, &m) in self.g_inner_boundary().iter().enumerate() {
            count[i] += m as u8;
        }
        let out = self.g_outer_boundary();
        for i in 0..n {
            let expect = self.in_g(i) as u8;
            if count[i] != expect {
                return Err(format!("decomposition of G fails at configuration {i}"));
            }
            if out[i] && self.in_g(i) {
                return Err(format!("outer boundary meets G at configuration {i}"));
            }
            if let Some(x) = self.valley[i] {
                if self.well[i] != Some(x) {
                    return Err(format!("valley not inside well at configuration {i}"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SetMeasures {
    pub n: u32,
    pub valleys: BTreeMap<usize, f64>,
    pub delta: f64,
    pub wells: BTreeMap<usize, f64>,
    pub saddles: BTreeMap<(usize, usize), f64>,
    pub g_inner_boundary: f64,
    pub g_outer_boundary: f64,
    /// `kappa_star * mu_N(E^x)` averaged over `x`.
    pub valley_ratio: f64,
    /// `N^{1+alpha} mu_N(partial^in G)`.
    pub scaled_inner_boundary: f64,
    /// `max N^{alpha-1} mu_N(J^{x,y})`.
    pub scaled_saddle: f64,
}

pub fn set_measures(sys: &ZrpSystem, sets: &MetastableSets) -> SetMeasures {
    let n = sys.n();
    let alpha = sys.model.alpha;
    let valleys: BTreeMap<usize, f64> =
        sets.s_star.iter().map(|&x| (x, sys.set_measure(&sets.valley_mask(x)))).collect();
    let wells = sets.s_star.iter().map(|&x| (x, sys.set_measure(&sets.well_mask(x)))).collect();
    let saddles: BTreeMap<(usize, usize), f64> =
        sets.pairs.iter().map(|&(x, y)| ((x, y), sys.set_measure(&sets.saddle_mask(x, y)))).collect();
    let gin = sys.set_measure(&sets.g_inner_boundary());
    let gout = sys.set_measure(&sets.g_outer_boundary());
    let ks = sets.s_star.len() as f64;
    let nf = n as f64;
    SetMeasures {
        n,
        valley_ratio: ks * valleys.values().sum::<f64>() / ks,
        delta: sys.set_measure(&sets.delta_mask()),
        scaled_inner_boundary: nf.powf(1.0 + alpha) * gin,
        scaled_saddle: saddles.values().fold(0.0f64, |m, &v| m.max(nf.powf(alpha - 1.0) * v)),
        valleys,
        wells,
        saddles,
        g_inner_boundary: gin,
        g_outer_boundary: gout,
    }
}

/// Valley membership for an arbitrary configuration, without enumerating the space.
pub fn valley_of_config(scales: &ScaleParams, s_star: &[usize], eta: &[u32]) -> Option<usize> {
    valley_label(scales, s_star, eta)
}

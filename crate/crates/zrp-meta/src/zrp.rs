//! The zero-range process with interaction `g(n) = a(n)/a(n-1)`, `a(n) = n^alpha`:
//! configuration spaces, invariant measure, partition sums and generator.

use crate::chain::{Chain, Variant};
use crate::error::{Error, Result};
use crate::numeric::{i_alpha, kahan_sum, site_series, KahanSum};
use crate::walk::{stationary_measure, UnderlyingWalk, WalkProfile};

/// Occupation numbers indexed by position in the owning site list.
pub type Config = Vec<u32>;

#[derive(Clone, Debug)]
pub struct ZrpModel {
    pub walk: UnderlyingWalk,
    pub profile: WalkProfile,
    pub alpha: f64,
}

impl ZrpModel {
    pub fn new(walk: UnderlyingWalk, alpha: f64) -> Result<Self> {
        let profile = stationary_measure(&walk)?;
        Self::with_profile(walk, profile, alpha)
    }

    pub fn with_profile(walk: UnderlyingWalk, profile: WalkProfile, alpha: f64) -> Result<Self> {
        if !(alpha > 2.0) || !alpha.is_finite() {
            return Err(Error::AlphaOutOfRange(alpha));
        }
        Ok(Self { walk, profile, alpha })
    }

    pub fn kappa(&self) -> usize {
        self.walk.kappa()
    }

    #[inline]
    pub fn a(&self, n: u32) -> f64 {
        if n == 0 {
            1.0
        } else {
            (n as f64).powf(self.alpha)
        }
    }

    #[inline]
    pub fn g(&self, n: u32) -> f64 {
        if n == 0 {
            0.0
        } else {
            self.a(n) / self.a(n - 1)
        }
    }

    /// `(a(n), g(n))`.
    pub fn interaction_rates(&self, n: u32) -> (f64, f64) {
        (self.a(n), self.g(n))
    }

    /// `m_star^eta / a(eta)` for a configuration on the sites `sites`.
    pub fn weight(&self, sites: &[usize], eta: &[u32]) -> f64 {
        let mut w = 1.0;
        for (&x, &k) in sites.iter().zip(eta) {
            if k > 0 {
                w *= self.profile.m_star[x].powi(k as i32) / self.a(k);
            }
        }
        w
    }

    /// `W_k = sum_{zeta in H_{k,S0}} m_star^zeta / a(zeta)` for `k = 0..=k_max`,
    /// by convolving the single-site sequences.
    pub fn weight_sums(&self, k_max: u32, sites: &[usize]) -> Vec<f64> {
        let len = k_max as usize + 1;
        let single = |x: usize| -> Vec<f64> {
            let q = self.profile.m_star[x];
            (0..len).map(|j| q.powi(j as i32) / self.a(j as u32)).collect()
        };
        let mut acc = single(sites[0]);
        for &x in &sites[1..] {
            let s = single(x);
            let mut next = vec![0.0; len];
            for (k, slot) in next.iter_mut().enumerate() {
                let mut sum = KahanSum::new();
                for j in 0..=k {
                    sum.add(acc[k - j] * s[j]);
                }
                *slot = sum.value();
            }
            acc = next;
        }
        acc
    }

    /// `Z_{k,S0} = k^alpha W_k`.
    pub fn partition_function(&self, k: u32, sites: &[usize]) -> f64 {
        let w = self.weight_sums(k, sites);
        (k as f64).powf(self.alpha) * w[k as usize]
    }

    /// `a_N = W_{N-1} / (W_N M_star)`, the constant of the particle-removal identity.
    pub fn a_n(&self, n: u32) -> f64 {
        assert!(n >= 1);
        let all: Vec<usize> = (0..self.kappa()).collect();
        let w = self.weight_sums(n, &all);
        w[n as usize - 1] / (w[n as usize] * self.profile.m_max)
    }

    pub fn limit_constants(&self) -> ZrpConstants {
        let gamma_x: Vec<f64> = self.profile.m_star.iter().map(|&q| site_series(q, self.alpha)).collect();
        let gamma_alpha = site_series(1.0, self.alpha);
        let ks = self.profile.kappa_star;
        let mut z = ks as f64 * gamma_alpha.powi(ks as i32 - 1);
        for x in 0..self.kappa() {
            if !self.profile.is_star(x) {
                z *= gamma_x[x];
            }
        }
        ZrpConstants { gamma_x, gamma_alpha, z_limit: z, i_alpha: i_alpha(self.alpha) }
    }

    /// Sums `sum_{k <= d} W_k(S0)`, increasing in `d` towards `prod Gamma_x`.
    pub fn tail_partial_sums(&self, d_max: u32, sites: &[usize]) -> Vec<f64> {
        let w = self.weight_sums(d_max, sites);
        let mut acc = KahanSum::new();
        w.iter()
            .map(|&v| {
                acc.add(v);
                acc.value()
            })
            .collect()
    }

    /// Weight sum over `H_{k,S0}(d)`: configurations with `zeta_x < k - d` for
    /// every condensate site `x` in `S0`. Enumerates the space.
    pub fn truncated_weight_sum(&self, k: u32, sites: &[usize], d: u32) -> Result<f64> {
        let space = ConfigSpace::new(k, sites.to_vec())?;
        let cut = k.saturating_sub(d);
        let mut acc = KahanSum::new();
        for i in 0..space.len() {
            let eta = space.unrank(i);
            let ok = sites.iter().zip(&eta).all(|(&x, &v)| !self.profile.is_star(x) || v < cut);
            if ok {
                acc.add(self.weight(sites, &eta));
            }
        }
        Ok(acc.value())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZrpConstants {
    /// `Gamma_x = sum_j m_star(x)^j / a(j)`.
    pub gamma_x: Vec<f64>,
    /// `Gamma(alpha) = 1 + zeta(alpha)`.
    pub gamma_alpha: f64,
    /// Limit of the partition function.
    pub z_limit: f64,
    pub i_alpha: f64,
}

/// Weak compositions of `n` over a site list, ranked colexicographically.
#[derive(Clone, Debug)]
pub struct ConfigSpace {
    n: u32,
    sites: Vec<usize>,
    size: usize,
    // binom[i][p] = C(p, i) for i < k, p <= n + k - 1
    binom: Vec<Vec<usize>>,
}

fn binom_u128(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k.min(n));
    let mut r: u128 = 1;
    for i in 0..k {
        r = r.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(r)
}

impl ConfigSpace {
    pub fn new(n: u32, sites: Vec<usize>) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::InvalidWalk("empty site set".into()));
        }
        let k = sites.len();
        let top = n as u64 + k as u64 - 1;
        let size = binom_u128(top, k as u64 - 1).ok_or(Error::Overflow)?;
        if size > usize::MAX as u128 / 4 {
            return Err(Error::Overflow);
        }
        let plen = top as usize + 1;
        let mut binom = vec![vec![0usize; plen]; k];
        for p in 0..plen {
            binom[0][p] = 1;
        }
        for i in 1..k {
            for p in 0..plen {
                binom[i][p] = if p < i {
                    0
                } else if p == i {
                    1
                } else {
                    binom[i][p - 1].checked_add(binom[i - 1][p - 1]).ok_or(Error::Overflow)?
                };
            }
        }
        Ok(Self { n, sites, size: size as usize, binom })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Colex rank: bar positions `p_i = eta_0 + ... + eta_{i-1} + (i - 1)`,
    /// rank `= sum_i C(p_i, i)`.
    pub fn rank(&self, eta: &[u32]) -> usize {
        debug_assert_eq!(eta.len(), self.sites.len());
        let mut r = 0;
        let mut partial = 0usize;
        for i in 1..self.sites.len() {
            partial += eta[i - 1] as usize;
            r += self.binom[i][partial + i - 1];
        }
        r
    }

    pub fn unrank(&self, mut r: usize) -> Config {
        let k = self.sites.len();
        let mut eta = vec![0u32; k];
        let mut upper = self.n as usize + k - 1;
        let mut bars = vec![0usize; k];
        for i in (1..k).rev() {
            // largest p < upper with C(p, i) <= r
            let row = &self.binom[i];
            let (mut lo, mut hi) = (i - 1, upper - 1);
            while lo < hi {
                let mid = (lo + hi + 1) / 2;
                if row[mid] <= r {
                    lo = mid;
                } else {
                    hi = mid - 1;
                }
            }
            bars[i] = lo;
            r -= row[lo];
            upper = lo;
        }
        let mut prev: isize = -1;
        for i in 1..k {
            eta[i - 1] = (bars[i] as isize - prev - 1) as u32;
            prev = bars[i] as isize;
        }
        eta[k - 1] = (self.n as isize + k as isize - 2 - prev) as u32;
        eta
    }
}

/// `sigma^{x,y} eta`: one particle from `x` to `y`; identity if `eta_x = 0` or `x = y`.
pub fn apply_move(eta: &[u32], x: usize, y: usize) -> Config {
    let mut out = eta.to_vec();
    if x != y && out[x] > 0 {
        out[x] -= 1;
        out[y] += 1;
    }
    out
}

/// The zero-range process at a fixed particle number, fully enumerated.
#[derive(Clone, Debug)]
pub struct ZrpSystem {
    pub model: ZrpModel,
    pub space: ConfigSpace,
    configs: Vec<u32>,
    pub mu: Vec<f64>,
    pub z_n: f64,
    pub chain: Chain,
}

impl ZrpSystem {
    pub fn new(model: &ZrpModel, n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidWalk("particle number must be positive".into()));
        }
        let k = model.kappa();
        let sites: Vec<usize> = (0..k).collect();
        let space = ConfigSpace::new(n, sites.clone())?;
        let len = space.len();
        let mut configs = Vec::with_capacity(len * k);
        for i in 0..len {
            configs.extend(space.unrank(i));
        }
        let w = model.weight_sums(n, &sites);
        let wn = w[n as usize];
        let z_n = (n as f64).powf(model.alpha) * wn;
        let mu: Vec<f64> = (0..len).map(|i| model.weight(&sites, &configs[i * k..(i + 1) * k]) / wn).collect();
        let mut trans = Vec::new();
        let edges = model.walk.edges();
        let mut buf = vec![0u32; k];
        for i in 0..len {
            let eta = &configs[i * k..(i + 1) * k];
            for &(x, y) in &edges {
                if eta[x] == 0 {
                    continue;
                }
                buf.copy_from_slice(eta);
                buf[x] -= 1;
                buf[y] += 1;
                trans.push((i, space.rank(&buf), model.g(eta[x]) * model.walk.rate(x, y)));
            }
        }
        let chain = Chain::new(mu.clone(), &trans)?;
        Ok(Self { model: model.clone(), space, configs, mu, z_n, chain })
    }

    pub fn n(&self) -> u32 {
        self.space.n()
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        self.space.is_empty()
    }

    pub fn kappa(&self) -> usize {
        self.model.kappa()
    }

    #[inline]
    pub fn config(&self, i: usize) -> &[u32] {
        let k = self.kappa();
        &self.configs[i * k..(i + 1) * k]
    }

    pub fn index_of(&self, eta: &[u32]) -> usize {
        self.space.rank(eta)
    }

    /// Index of `sigma^{x,y} eta`.
    pub fn move_index(&self, i: usize, x: usize, y: usize) -> usize {
        self.space.rank(&apply_move(self.config(i), x, y))
    }

    /// `mu_N(eta)`.
    pub fn stationary_weight(&self, i: usize) -> f64 {
        self.mu[i]
    }

    /// `mu_N` of a set given as a membership mask.
    pub fn set_measure(&self, mask: &[bool]) -> f64 {
        kahan_sum(self.mu.iter().zip(mask).filter(|(_, &m)| m).map(|(&p, _)| p))
    }

    /// `mu_k(xi) = (m_star^xi / a(xi)) / W_k` on `H_k` for any `k >= 0`.
    pub fn measure_at_level(&self, xi: &[u32]) -> f64 {
        let k: u32 = xi.iter().sum();
        let sites: Vec<usize> = (0..self.kappa()).collect();
        let w = self.model.weight_sums(k, &sites);
        self.model.weight(&sites, xi) / w[k as usize]
    }

    pub fn generator_apply(&self, f: &[f64], variant: Variant) -> Vec<f64> {
        self.chain.generator_apply(f, variant)
    }

    /// Dirichlet form; with `restrict_to`, the half-sum over configurations in the set.
    /// Entries of `f` may be `NaN` away from the neighbourhood of the set.
    pub fn dirichlet_form(&self, f: &[f64], restrict_to: Option<&[bool]>) -> Result<f64> {
        match restrict_to {
            None => Ok(self.chain.dirichlet_form(f)),
            Some(mask) => self.chain.dirichlet_form_on(f, mask),
        }
    }

    /// Dirichlet form written over `H_{N-1}` by removing the jumping particle.
    pub fn dirichlet_form_particle_removal(&self, f: &[f64]) -> Result<f64> {
        let n = self.n();
        let k = self.kappa();
        let lower = ConfigSpace::new(n - 1, (0..k).collect())?;
        let sites: Vec<usize> = (0..k).collect();
        let w = self.model.weight_sums(n - 1, &sites);
        let an = self.model.a_n(n);
        let m = &self.model.profile.m;
        let edges = self.model.walk.edges();
        let mut acc = KahanSum::new();
        for j in 0..lower.len() {
            let xi = lower.unrank(j);
            let mu1 = self.model.weight(&sites, &xi) / w[(n - 1) as usize];
            for &(x, y) in &edges {
                let mut ex = xi.clone();
                ex[x] += 1;
                let mut ey = xi.clone();
                ey[y] += 1;
                let d = f[self.index_of(&ey)] - f[self.index_of(&ex)];
                acc.add(0.5 * an * mu1 * m[x] * self.model.walk.rate(x, y) * d * d);
            }
        }
        Ok(acc.value())
    }

    /// `max |mu_N(eta) g(eta_u) - a_N mu_{N-1}(eta - omega^u) m(u)|` relative to the
    /// largest left-hand side.
    pub fn particle_removal_identity(&self) -> f64 {
        let n = self.n();
        let k = self.kappa();
        let sites: Vec<usize> = (0..k).collect();
        let w = self.model.weight_sums(n, &sites);
        let an = w[n as usize - 1] / (w[n as usize] * self.model.profile.m_max);
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in 0..self.len() {
            let eta = self.config(i);
            for u in 0..k {
                if eta[u] == 0 {
                    continue;
                }
                let lhs = self.mu[i] * self.model.g(eta[u]);
                let mut xi = eta.to_vec();
                xi[u] -= 1;
                let rhs = an * self.model.weight(&sites, &xi) / w[n as usize - 1] * self.model.profile.m[u];
                worst = worst.max((lhs - rhs).abs());
                scale = scale.max(lhs.abs());
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }

    /// Largest relative gap between `mu_N(eta) g(eta_x) r(x,y)` and
    /// `a_N mu_{N-1}(eta - omega^x) m(x) r(x,y)` over all directed edges.
    pub fn conductance_forms_gap(&self) -> f64 {
        let n = self.n();
        let k = self.kappa();
        let sites: Vec<usize> = (0..k).collect();
        let w = self.model.weight_sums(n, &sites);
        let an = w[n as usize - 1] / (w[n as usize] * self.model.profile.m_max);
        let mut worst: f64 = 0.0;
        for i in 0..self.len() {
            let eta = self.config(i);
            for (x, y) in self.model.walk.edges() {
                if eta[x] == 0 {
                    continue;
                }
                let j = self.move_index(i, x, y);
                let c1 = self.chain.conductance(i, j);
                let mut xi = eta.to_vec();
                xi[x] -= 1;
                let c2 = an * self.model.weight(&sites, &xi) / w[n as usize - 1]
                    * self.model.profile.m[x]
                    * self.model.walk.rate(x, y);
                worst = worst.max((c1 - c2).abs() / c1.abs().max(c2.abs()));
            }
        }
        worst
    }

    /// Indicator mask of a predicate over configurations.
    pub fn mask<F: Fn(&[u32]) -> bool>(&self, pred: F) -> Vec<bool> {
        (0..self.len()).map(|i| pred(self.config(i))).collect()
    }

    /// Configuration with all particles at `x`.
    pub fn condensed_at(&self, x: usize) -> usize {
        let mut eta = vec![0u32; self.kappa()];
        eta[x] = self.n();
        self.index_of(&eta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_roundtrip_small() {
        let s = ConfigSpace::new(5, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(s.len(), 56);
        let mut seen = vec![false; s.len()];
        for i in 0..s.len() {
            let eta = s.unrank(i);
            assert_eq!(eta.iter().sum::<u32>(), 5);
            assert_eq!(s.rank(&eta), i);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn two_site_rank_is_first_occupation() {
        let s = ConfigSpace::new(2, vec![0, 1]).unwrap();
        assert_eq!(s.unrank(0), vec![0, 2]);
        assert_eq!(s.unrank(1), vec![1, 1]);
        assert_eq!(s.unrank(2), vec![2, 0]);
    }

    #[test]
    fn empty_configuration() {
        let s = ConfigSpace::new(0, vec![0, 1, 2]).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.unrank(0), vec![0, 0, 0]);
    }

    #[test]
    fn overflow_detected() {
        assert_eq!(ConfigSpace::new(u32::MAX, (0..40).collect()).unwrap_err(), Error::Overflow);
    }

    #[test]
    fn moves() {
        assert_eq!(apply_move(&[2, 0], 0, 1), vec![1, 1]);
        assert_eq!(apply_move(&[0, 2], 0, 1), vec![0, 2]);
        assert_eq!(apply_move(&[1, 2], 1, 1), vec![1, 2]);
    }
}

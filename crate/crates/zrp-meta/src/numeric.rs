//! Small numerical helpers: compensated summation, the single-site series
//! and one-dimensional quadrature.

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut acc = KahanSum::new();
    for x in it {
        acc.add(x);
    }
    acc.value()
}

/// `sum_{j >= 0} q^j / a(j)` with `a(0) = 1`, `a(j) = j^alpha`.
///
/// For `q = 1` the tail beyond `j = 100` is taken from the Euler-Maclaurin
/// expansion, which is accurate far below 1e-16 for `alpha > 2`.
pub fn site_series(q: f64, alpha: f64) -> f64 {
    assert!(q > 0.0 && q <= 1.0 + 1e-12, "site weight must lie in (0, 1]");
    if q >= 1.0 - 1e-15 {
        const CUT: u32 = 100;
        let mut acc = KahanSum::new();
        acc.add(1.0);
        for j in 1..CUT {
            acc.add((j as f64).powf(-alpha));
        }
        let n = CUT as f64;
        let a = alpha;
        acc.add(n.powf(1.0 - a) / (a - 1.0));
        acc.add(0.5 * n.powf(-a));
        acc.add(a * n.powf(-a - 1.0) / 12.0);
        acc.add(-a * (a + 1.0) * (a + 2.0) * n.powf(-a - 3.0) / 720.0);
        acc.add(a * (a + 1.0) * (a + 2.0) * (a + 3.0) * (a + 4.0) * n.powf(-a - 5.0) / 30240.0);
        return acc.value();
    }
    let mut acc = KahanSum::new();
    acc.add(1.0);
    let mut j = 1u64;
    loop {
        let term = (q.ln() * j as f64 - alpha * (j as f64).ln()).exp();
        acc.add(term);
        if term < 1e-18 * acc.value() || j > 10_000_000 {
            break;
        }
        j += 1;
    }
    acc.value()
}

/// Definite integral by the double-exponential rule.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    quadrature::double_exponential::integrate(f, a, b, 1e-15).integral
}

/// `I_alpha = int_0^1 u^alpha (1-u)^alpha du`.
pub fn i_alpha(alpha: f64) -> f64 {
    integrate(|u| (u * (1.0 - u)).powf(alpha), 0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeta_three() {
        // 1 + zeta(3)
        let v = site_series(1.0, 3.0);
        assert!((v - 2.202_056_903_159_594_2).abs() < 1e-14, "{v}");
    }

    #[test]
    fn geometric_weight_series() {
        // alpha -> the j = 1 term dominates; compare against a long direct sum
        let q: f64 = 0.5;
        let direct: f64 = 1.0 + (1..200).map(|j| q.powi(j) / (j as f64).powi(3)).sum::<f64>();
        assert!((site_series(q, 3.0) - direct).abs() < 1e-15);
    }

    #[test]
    fn beta_four_four() {
        assert!((i_alpha(3.0) - 1.0 / 140.0).abs() < 1e-15);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut v = vec![1.0];
        v.extend(std::iter::repeat(1e-16).take(1000));
        assert!((kahan_sum(v) - (1.0 + 1e-13)).abs() < 1e-16);
    }
}

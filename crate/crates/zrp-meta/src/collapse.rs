//! Chains obtained by merging one set of states (a valley) into a single
//! point, with the induced maps on functions and flows.

use crate::chain::{Chain, Variant};
use crate::error::{Error, Result};
use crate::flow::{flow_norm_sq, Flow};
use crate::numeric::kahan_sum;

#[derive(Clone, Debug)]
pub struct CollapsedChain {
    pub chain: Chain,
    valley: Vec<bool>,
    /// Collapsed index of every original state; valley states map to the collapsed point.
    to_new: Vec<usize>,
    /// Original index of every collapsed state except the collapsed point.
    to_old: Vec<usize>,
}

/// Merges `valley` into a single state, placed last.
pub fn collapse_chain(chain: &Chain, valley: &[bool]) -> Result<CollapsedChain> {
    let n = chain.len();
    let size = valley.iter().filter(|&&v| v).count();
    if size == 0 || size == n {
        return Err(Error::EmptyOrFullValley);
    }
    let mut to_new = vec![0usize; n];
    let mut to_old = Vec::with_capacity(n - size);
    for u in 0..n {
        if !valley[u] {
            to_new[u] = to_old.len();
            to_old.push(u);
        }
    }
    let o = to_old.len();
    for u in 0..n {
        if valley[u] {
            to_new[u] = o;
        }
    }
    let pi = chain.pi();
    let pi_valley = kahan_sum((0..n).filter(|&u| valley[u]).map(|u| pi[u]));
    let mut new_pi: Vec<f64> = to_old.iter().map(|&u| pi[u]).collect();
    new_pi.push(pi_valley);
    let mut trans = Vec::new();
    for u in 0..n {
        for (v, r, _) in chain.neighbors(u) {
            if r == 0.0 || (valley[u] && valley[v]) {
                continue;
            }
            let rate = if valley[u] { pi[u] * r / pi_valley } else { r };
            trans.push((to_new[u], to_new[v], rate));
        }
    }
    let collapsed = Chain::new(new_pi, &trans)?;
    Ok(CollapsedChain { chain: collapsed, valley: valley.to_vec(), to_new, to_old })
}

impl CollapsedChain {
    /// Index of the collapsed point.
    pub fn point(&self) -> usize {
        self.to_old.len()
    }

    pub fn valley(&self) -> &[bool] {
        &self.valley
    }

    pub fn new_index(&self, old: usize) -> usize {
        self.to_new[old]
    }

    /// Original index, `None` for the collapsed point.
    pub fn old_index(&self, new: usize) -> Option<usize> {
        self.to_old.get(new).copied()
    }

    /// Image of an original set; a set meeting the valley contains the collapsed point.
    pub fn project_mask(&self, mask: &[bool]) -> Vec<bool> {
        let mut out = vec![false; self.chain.len()];
        for (u, &m) in mask.iter().enumerate() {
            if m {
                out[self.to_new[u]] = true;
            }
        }
        out
    }

    /// `f` restricted off the valley with its common value at the collapsed point.
    pub fn collapse_function(&self, f: &[f64]) -> Result<Vec<f64>> {
        let mut vals = (0..f.len()).filter(|&u| self.valley[u]).map(|u| f[u]);
        let first = vals.next().expect("valley is non-empty");
        let scale = first.abs().max(1.0);
        if vals.any(|v| (v - first).abs() > 1e-12 * scale) {
            return Err(Error::NotConstantOnValley);
        }
        let mut out: Vec<f64> = self.to_old.iter().map(|&u| f[u]).collect();
        out.push(first);
        Ok(out)
    }

    /// Sums flow values over merged edges and drops edges inside the valley.
    pub fn collapse_flow(&self, original: &Chain, phi: &Flow) -> Flow {
        let mut out = Flow::zero(&self.chain);
        for (e, &(u, v)) in original.edges().iter().enumerate() {
            if self.valley[u] && self.valley[v] {
                continue;
            }
            out.add_at(&self.chain, self.to_new[u], self.to_new[v], phi.values()[e])
                .expect("collapsed edge exists");
        }
        out
    }

    /// `(||phi_bar||^2, ||phi||^2)`.
    pub fn norm_contraction(&self, original: &Chain, phi: &Flow) -> (f64, f64) {
        (flow_norm_sq(&self.chain, &self.collapse_flow(original, phi)), flow_norm_sq(original, phi))
    }

    /// Whether `phi` vanishes on valley-internal edges and `phi / c^s` is constant
    /// over the edges joining each outside state to the valley.
    pub fn equality_conditions(&self, original: &Chain, phi: &Flow, tol: f64) -> bool {
        let scale = phi.max_abs().max(f64::MIN_POSITIVE);
        for (e, &(u, v)) in original.edges().iter().enumerate() {
            if self.valley[u] && self.valley[v] && phi.values()[e].abs() > tol * scale {
                return false;
            }
        }
        for u in (0..original.len()).filter(|&u| !self.valley[u]) {
            let mut ratio: Option<f64> = None;
            for (v, _, e) in original.neighbors(u) {
                if !self.valley[v] {
                    continue;
                }
                let (_, s) = original.edge_index(u, v).expect("neighbour edge");
                let r = s * phi.values()[e] / original.c_sym(e);
                match ratio {
                    None => ratio = Some(r),
                    Some(r0) => {
                        if (r - r0).abs() > tol * r0.abs().max(r.abs()).max(scale / original.c_sym(e)) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// `(cap_bar, cap_bar^s)` between two sets of collapsed states.
    pub fn capacity(&self, a: &[bool], b: &[bool]) -> Result<(f64, f64)> {
        let sol = self.chain.capacity(a, b)?;
        Ok((sol.cap, sol.cap_sym))
    }

    /// Probability, started from the collapsed point, of reaching `A` before `B`.
    /// With `B` empty the chain reaches `A` almost surely.
    pub fn hitting_from_point(&self, a: &[bool], b: &[bool]) -> Result<f64> {
        let o = self.point();
        if a[o] || b[o] || !a.iter().any(|&x| x) {
            return Err(Error::SetsOverlapOrEmpty);
        }
        if !b.iter().any(|&x| x) {
            return Ok(1.0);
        }
        let h = self.chain.potential(a, b, Variant::Primal)?;
        Ok(h[o])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::mask_from;

    fn path(n: usize) -> Chain {
        let mut t = Vec::new();
        for u in 0..n - 1 {
            t.push((u, u + 1, 1.0));
            t.push((u + 1, u, 1.0));
        }
        Chain::new(vec![1.0 / n as f64; n], &t).unwrap()
    }

    #[test]
    fn rejects_trivial_valleys() {
        let c = path(3);
        assert_eq!(collapse_chain(&c, &[false; 3]).unwrap_err(), Error::EmptyOrFullValley);
        assert_eq!(collapse_chain(&c, &[true; 3]).unwrap_err(), Error::EmptyOrFullValley);
    }

    #[test]
    fn merged_path_keeps_capacity() {
        let c = path(5);
        let valley = mask_from(5, &[3, 4]);
        let cc = collapse_chain(&c, &valley).unwrap();
        assert!(cc.chain.stationarity_residual() < 1e-15);
        let a = cc.project_mask(&mask_from(5, &[0]));
        let o = mask_from(cc.chain.len(), &[cc.point()]);
        let (cap_bar, _) = cc.capacity(&a, &o).unwrap();
        let cap = c.capacity(&mask_from(5, &[0]), &valley).unwrap().cap;
        assert!((cap_bar - cap).abs() < 1e-14);
    }

    #[test]
    fn hitting_with_nothing_to_avoid() {
        let c = path(4);
        let cc = collapse_chain(&c, &mask_from(4, &[0])).unwrap();
        let a = cc.project_mask(&mask_from(4, &[2]));
        let b = vec![false; cc.chain.len()];
        assert_eq!(cc.hitting_from_point(&a, &b).unwrap(), 1.0);
        // line graph: valley, then A, then B behind it
        let b = cc.project_mask(&mask_from(4, &[3]));
        assert!((cc.hitting_from_point(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }
}

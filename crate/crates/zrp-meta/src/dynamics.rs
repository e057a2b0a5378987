//! Kinetic Monte Carlo for the zero-range process, the exact trace chain on the
//! valleys, and the finite-N diagnostics of the metastability hypotheses.

use std::collections::HashMap;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::chain::{mask_from, Chain, HarmonicSolver, Variant};
use crate::collapse::collapse_chain;
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;
use crate::geometry::{valley_of_config, MetastableSets, ScaleParams};
use crate::numeric::{kahan_sum, KahanSum};
use crate::walk::{adjoint_walk, LimitChain};
use crate::zrp::{Config, ConfigSpace, ZrpModel, ZrpSystem};

/// One RNG stream per trajectory: `(seed, stream)` fixes the path bitwise.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Jump rates of single-particle moves, tabulated for a fixed particle number.
#[derive(Clone, Debug)]
struct Kinetics {
    g: Vec<f64>,
    moves: Vec<(usize, usize, f64)>,
}

impl Kinetics {
    fn new(model: &ZrpModel, n: u32, variant: Variant) -> Self {
        let k = model.kappa();
        let primal = &model.walk;
        let adjoint = adjoint_walk(primal, &model.profile);
        let mut moves = Vec::new();
        for x in 0..k {
            for y in 0..k {
                if x == y {
                    continue;
                }
                let r = match variant {
                    Variant::Primal => primal.rate(x, y),
                    Variant::Adjoint => adjoint.rate(x, y),
                    Variant::Symmetrized => 0.5 * (primal.rate(x, y) + adjoint.rate(x, y)),
                };
                if r > 0.0 {
                    moves.push((x, y, r));
                }
            }
        }
        let g = (0..=n).map(|m| model.g(m)).collect();
        Self { g, moves }
    }

    #[inline]
    fn total(&self, eta: &[u32]) -> f64 {
        let mut t = 0.0;
        for &(x, _, r) in &self.moves {
            t += self.g[eta[x] as usize] * r;
        }
        t
    }

    /// Move selected by `u` uniform on `[0, total)`.
    #[inline]
    fn pick(&self, eta: &[u32], mut u: f64) -> (usize, usize) {
        let mut last = None;
        for &(x, y, r) in &self.moves {
            let w = self.g[eta[x] as usize] * r;
            if w == 0.0 {
                continue;
            }
            if u < w {
                return (x, y);
            }
            u -= w;
            last = Some((x, y));
        }
        // rounding at the top end of the range
        last.expect("configuration with no admissible move")
    }

    /// Advances `eta` by one jump and returns the exponential holding time spent before it.
    #[inline]
    fn step<R: Rng>(&self, eta: &mut [u32], rng: &mut R) -> f64 {
        let total = self.total(eta);
        let hold: f64 = rng.sample::<f64, _>(Exp1) / total;
        let (x, y) = self.pick(eta, rng.random::<f64>() * total);
        eta[x] -= 1;
        eta[y] += 1;
        hold
    }
}

/// A simulated path: the start, then every jump as `(time, rank of the new configuration)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub stream: u64,
    pub start: Config,
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn n(&self) -> u32 {
        self.start.iter().sum()
    }

    /// Configuration at time `t` (right-continuous).
    pub fn state_at(&self, space: &ConfigSpace, t: f64) -> Config {
        let i = self.jumps.partition_point(|&(s, _)| s <= t);
        if i == 0 {
            self.start.clone()
        } else {
            space.unrank(self.jumps[i - 1].1)
        }
    }
}

/// Exponential-clock simulation started at `eta0` up to time `horizon`.
///
/// Each move `x -> y` fires at rate `g(eta_x) r(x, y)`, with `r` replaced by the
/// adjoint or symmetrized walk for the other variants. Only the current
/// configuration is kept in memory besides the jump records.
pub fn simulate(model: &ZrpModel, eta0: &[u32], horizon: f64, seed: u64, stream: u64, variant: Variant) -> Result<Trajectory> {
    if eta0.len() != model.kappa() {
        return Err(Error::InvalidWalk(format!("start has {} sites, walk has {}", eta0.len(), model.kappa())));
    }
    let n: u32 = eta0.iter().sum();
    let space = ConfigSpace::new(n, (0..model.kappa()).collect())?;
    let kin = Kinetics::new(model, n, variant);
    let mut rng = stream_rng(seed, stream);
    let mut eta = eta0.to_vec();
    let mut t = 0.0;
    let mut jumps = Vec::new();
    if n > 0 {
        loop {
            t += kin.step(&mut eta, &mut rng);
            if t > horizon {
                break;
            }
            jumps.push((t, space.rank(&eta)));
        }
    }
    Ok(Trajectory { seed, stream, start: eta0.to_vec(), jumps, horizon })
}

/// The trace of the process on the union of the valleys.
#[derive(Clone, Debug)]
pub struct TraceChainExact {
    /// Condensation sites, in the order used by all per-valley vectors.
    pub sites: Vec<usize>,
    /// Configuration indices of the union of the valleys.
    pub states: Vec<usize>,
    /// `j_N(eta, zeta)` for `eta != zeta` in the valleys, as configuration indices.
    pub jump_rates: Vec<(usize, usize, f64)>,
    /// `r_N(x, y)` by position in `sites`.
    pub mean_rates: Vec<Vec<f64>>,
    /// `lambda_N(x) = sum_y r_N(x, y)`.
    pub holding_rates: Vec<f64>,
    pub valley_measures: Vec<f64>,
    /// `cap_N(E^x, union of the other valleys)`.
    pub capacities: Vec<f64>,
    /// Hitting probability of `E^y` before the remaining valleys, from the collapsed `E^x`.
    pub collapsed_hitting: Vec<Vec<f64>>,
    /// Largest relative gap in `lambda_N(x) mu_N(E^x) = cap_N(E^x, rest)`.
    pub holding_capacity_gap: f64,
    /// Largest gap in `r_N(x, y) / lambda_N(x) = collapsed hitting probability`.
    pub collapsed_hitting_gap: f64,
}

const TRACE_IDENTITY_TOL: f64 = 1e-9;

/// Exact trace chain on the valleys `(site, mask)`.
///
/// `j_N(eta, zeta) = R(eta, zeta) + sum_{xi outside} R(eta, xi) P_xi[first valley entry at zeta]`,
/// with one absorbing solve per entry state. Both identities tying `r_N` to
/// capacities and to the collapsed chain are checked to `1e-9`.
pub fn trace_chain_exact(sys: &ZrpSystem, valleys: &[(usize, Vec<bool>)]) -> Result<TraceChainExact> {
    let len = sys.len();
    let chain = &sys.chain;
    let kv = valleys.len();
    if kv < 2 {
        return Err(Error::SetsOverlapOrEmpty);
    }
    let mut label = vec![usize::MAX; len];
    for (p, (_, mask)) in valleys.iter().enumerate() {
        if mask.len() != len || !mask.iter().any(|&b| b) {
            return Err(Error::SetsOverlapOrEmpty);
        }
        for u in 0..len {
            if mask[u] {
                if label[u] != usize::MAX {
                    return Err(Error::SetsOverlapOrEmpty);
                }
                label[u] = p;
            }
        }
    }
    let in_e: Vec<bool> = label.iter().map(|&l| l != usize::MAX).collect();
    let states: Vec<usize> = (0..len).filter(|&u| in_e[u]).collect();
    let entries: Vec<usize> = states
        .iter()
        .copied()
        .filter(|&z| chain.neighbors(z).any(|(u, _, _)| !in_e[u]))
        .collect();
    let solver = HarmonicSolver::new(chain, &in_e, Variant::Primal)?;
    let mut jump = std::collections::BTreeMap::<(usize, usize), KahanSum>::new();
    for &eta in &states {
        for (v, r, _) in chain.neighbors(eta) {
            if r > 0.0 && in_e[v] && v != eta {
                jump.entry((eta, v)).or_default().add(r);
            }
        }
    }
    for &zeta in &entries {
        let mut g = vec![0.0; len];
        g[zeta] = 1.0;
        let h = solver.extend(&g)?;
        for &eta in &states {
            let via = kahan_sum(chain.neighbors(eta).filter(|&(v, r, _)| r > 0.0 && !in_e[v]).map(|(v, r, _)| r * h[v]));
            if via != 0.0 && eta != zeta {
                jump.entry((eta, zeta)).or_default().add(via);
            }
        }
    }
    let jump_rates: Vec<(usize, usize, f64)> = jump.into_iter().map(|((a, b), s)| (a, b, s.value())).collect();
    let valley_measures: Vec<f64> = valleys.iter().map(|(_, m)| sys.set_measure(m)).collect();
    let mut flux = vec![vec![KahanSum::new(); kv]; kv];
    for &(a, b, r) in &jump_rates {
        let (p, q) = (label[a], label[b]);
        if p != q {
            flux[p][q].add(sys.mu[a] * r);
        }
    }
    let mean_rates: Vec<Vec<f64>> =
        (0..kv).map(|p| (0..kv).map(|q| flux[p][q].value() / valley_measures[p]).collect()).collect();
    let holding_rates: Vec<f64> = mean_rates.iter().map(|row| kahan_sum(row.iter().copied())).collect();

    let mut capacities = Vec::with_capacity(kv);
    let mut holding_capacity_gap = 0.0f64;
    for p in 0..kv {
        let rest: Vec<bool> = (0..len).map(|u| in_e[u] && label[u] != p).collect();
        let cap = chain.capacity(&valleys[p].1, &rest)?.cap;
        let gap = (holding_rates[p] * valley_measures[p] - cap).abs() / cap.abs().max(f64::MIN_POSITIVE);
        holding_capacity_gap = holding_capacity_gap.max(gap);
        capacities.push(cap);
    }
    let mut collapsed_hitting = vec![vec![0.0; kv]; kv];
    let mut collapsed_hitting_gap = 0.0f64;
    for p in 0..kv {
        let cc = collapse_chain(chain, &valleys[p].1)?;
        for q in 0..kv {
            if q == p {
                continue;
            }
            let target = cc.project_mask(&valleys[q].1);
            let others: Vec<bool> = (0..len).map(|u| in_e[u] && label[u] != p && label[u] != q).collect();
            let hit = cc.hitting_from_point(&target, &cc.project_mask(&others))?;
            collapsed_hitting[p][q] = hit;
            let gap = (mean_rates[p][q] / holding_rates[p] - hit).abs();
            collapsed_hitting_gap = collapsed_hitting_gap.max(gap);
        }
    }
    if holding_capacity_gap > TRACE_IDENTITY_TOL || collapsed_hitting_gap > TRACE_IDENTITY_TOL {
        return Err(Error::SolverFailure(format!(
            "trace chain identities off by {holding_capacity_gap:.3e} (capacity) and {collapsed_hitting_gap:.3e} (collapsed hitting)"
        )));
    }
    Ok(TraceChainExact {
        sites: valleys.iter().map(|(x, _)| *x).collect(),
        states,
        jump_rates,
        mean_rates,
        holding_rates,
        valley_measures,
        capacities,
        collapsed_hitting,
        holding_capacity_gap,
        collapsed_hitting_gap,
    })
}

/// Trace chain on the valleys of a decomposition.
pub fn trace_chain_of_sets(sys: &ZrpSystem, sets: &MetastableSets) -> Result<TraceChainExact> {
    let valleys: Vec<(usize, Vec<bool>)> = sets.s_star.iter().map(|&x| (x, sets.valley_mask(x))).collect();
    trace_chain_exact(sys, &valleys)
}

impl TraceChainExact {
    fn position(&self, x: usize) -> usize {
        self.sites.iter().position(|&s| s == x).expect("site is not a valley label")
    }

    /// `r_N(x, y)` by site label.
    pub fn mean_rate(&self, x: usize, y: usize) -> f64 {
        self.mean_rates[self.position(x)][self.position(y)]
    }

    /// `j_N(eta, zeta)`, zero when absent.
    pub fn jump_rate(&self, eta: usize, zeta: usize) -> f64 {
        self.jump_rates
            .binary_search_by(|&(a, b, _)| (a, b).cmp(&(eta, zeta)))
            .map_or(0.0, |i| self.jump_rates[i].2)
    }
}

/// Valley-to-valley transition counts of the traced path and the derived rate estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct McRates {
    pub sites: Vec<usize>,
    /// `counts[x][y]`: transitions of the trace from `E^x` to `E^y`.
    pub counts: Vec<Vec<u64>>,
    /// Time spent in each valley.
    pub occupation: Vec<f64>,
    /// Time spent outside the valleys, excised from the trace.
    pub excursion_time: f64,
    pub rates: Vec<Vec<f64>>,
    /// `sqrt(count) / occupation`.
    pub std_err: Vec<Vec<f64>>,
    /// Simulated single-particle jumps.
    pub jumps: u64,
    /// Valley sojourns drawn from their exit law.
    pub sojourns: u64,
}

impl McRates {
    pub fn transitions(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// How valley sojourns are generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sampler {
    /// Every jump is simulated.
    Stepwise,
    /// A sojourn in a valley is drawn in one piece from its exact exit law
    /// (phase-type holding time, then exit configuration); outside the valleys
    /// every jump is simulated. Valleys whose restricted dynamics is not
    /// reversible are stepped through.
    ValleyExit,
}

/// Largest valley handled by the spectral exit law.
const MAX_VALLEY_BLOCK: usize = 4000;

/// Exit law of the process from one valley, by spectral expansion of the
/// symmetrized sub-generator restricted to the valley.
#[derive(Clone, Debug)]
struct ValleyExit {
    index: HashMap<Config, usize>,
    exits: Vec<Config>,
    rates: Vec<f64>,
    slowest: f64,
    /// Survival from entry `e`: `sum_j surv[e][j] exp(rates[j] t)`.
    surv: Vec<Vec<f64>>,
    /// Density of leaving through exit `w` at time `t`: `sum_j dens[e][w][j] exp(rates[j] t)`.
    dens: Vec<Vec<Vec<f64>>>,
}

impl ValleyExit {
    fn build(model: &ZrpModel, kin: &Kinetics, scales: &ScaleParams, x: usize) -> Result<Option<Self>> {
        let k = model.kappa();
        let n = scales.n;
        let s_star = &model.profile.s_star;
        let others: Vec<usize> = (0..k).filter(|&z| z != x).collect();
        let mut members: Vec<Config> = Vec::new();
        for m in 0..=scales.ell.min(n) {
            let sp = ConfigSpace::new(m, others.clone())?;
            if sp.len() > MAX_VALLEY_BLOCK {
                return Ok(None);
            }
            for r in 0..sp.len() {
                let sub = sp.unrank(r);
                let mut eta = vec![0u32; k];
                eta[x] = n - m;
                for (i, &z) in others.iter().enumerate() {
                    eta[z] = sub[i];
                }
                if valley_of_config(scales, s_star, &eta) == Some(x) {
                    members.push(eta);
                }
            }
            if members.len() > MAX_VALLEY_BLOCK {
                return Ok(None);
            }
        }
        let size = members.len();
        let index: HashMap<Config, usize> = members.iter().cloned().enumerate().map(|(i, c)| (c, i)).collect();
        let mut q = vec![vec![0.0; size]; size];
        let mut exit_of: HashMap<Config, usize> = HashMap::new();
        let mut exits: Vec<Config> = Vec::new();
        let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); size];
        for (v, eta) in members.iter().enumerate() {
            for &(a, b, r) in &kin.moves {
                if eta[a] == 0 {
                    continue;
                }
                let rate = kin.g[eta[a] as usize] * r;
                let mut next = eta.clone();
                next[a] -= 1;
                next[b] += 1;
                q[v][v] -= rate;
                match index.get(&next) {
                    Some(&u) => q[v][u] += rate,
                    None => {
                        let w = *exit_of.entry(next.clone()).or_insert_with(|| {
                            exits.push(next);
                            exits.len() - 1
                        });
                        out[v].push((w, rate));
                    }
                }
            }
        }
        let sites: Vec<usize> = (0..k).collect();
        let log_w: Vec<f64> = members.iter().map(|eta| model.weight(&sites, eta).ln()).collect();
        let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sq: Vec<f64> = log_w.iter().map(|&l| (0.5 * (l - top)).exp()).collect();
        let mut sym = vec![vec![0.0; size]; size];
        for v in 0..size {
            sym[v][v] = q[v][v];
            for u in (v + 1)..size {
                let fwd = sq[v] * sq[v] * q[v][u];
                let bwd = sq[u] * sq[u] * q[u][v];
                if (fwd - bwd).abs() > 1e-12 * fwd.abs().max(bwd.abs()) {
                    return Ok(None);
                }
                let s = 0.5 * (sq[v] / sq[u] * q[v][u] + sq[u] / sq[v] * q[u][v]);
                sym[v][u] = s;
                sym[u][v] = s;
            }
        }
        let (rates, vecs) = symmetric_eigen(&sym)?;
        if rates.iter().any(|&l| !(l < 0.0)) {
            return Err(Error::SolverFailure("valley sub-generator is not strictly negative".into()));
        }
        let slowest = rates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let nexit = exits.len();
        let mass: Vec<f64> = (0..size).map(|j| kahan_sum((0..size).map(|v| vecs[v][j] * sq[v]))).collect();
        let mut flux = vec![vec![0.0; nexit]; size];
        for j in 0..size {
            for v in 0..size {
                for &(w, r) in &out[v] {
                    flux[j][w] += vecs[v][j] * sq[v] * r;
                }
            }
        }
        let surv = (0..size).map(|e| (0..size).map(|j| vecs[e][j] / sq[e] * mass[j]).collect()).collect();
        let dens = (0..size)
            .map(|e| (0..nexit).map(|w| (0..size).map(|j| vecs[e][j] / sq[e] * flux[j][w]).collect()).collect())
            .collect();
        Ok(Some(Self { index, exits, rates, slowest, surv, dens }))
    }

    fn survival(&self, e: usize, t: f64) -> (f64, f64) {
        let mut s = 0.0;
        let mut ds = 0.0;
        for (j, &l) in self.rates.iter().enumerate() {
            let term = self.surv[e][j] * (l * t).exp();
            s += term;
            ds += l * term;
        }
        (s, ds)
    }

    /// Holding time and exit index for a sojourn entered at local state `e`.
    fn sample<R: Rng>(&self, e: usize, rng: &mut R) -> (f64, usize) {
        let level = 1.0 - rng.random::<f64>();
        let mut lo = 0.0f64;
        let mut hi = 1.0 / -self.slowest;
        while self.survival(e, hi).0 > level {
            lo = hi;
            hi *= 2.0;
        }
        // safeguarded Newton on log S(t) = log level
        let mut t = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (s, ds) = self.survival(e, t);
            if s > level {
                lo = t;
            } else {
                hi = t;
            }
            let mut next = if s > 0.0 && ds < 0.0 { t - (s.ln() - level.ln()) * s / ds } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let done = (next - t).abs() <= 1e-14 * t.max(f64::MIN_POSITIVE) || hi - lo <= 1e-14 * hi;
            t = next;
            if done {
                break;
            }
        }
        let exps: Vec<f64> = self.rates.iter().map(|&l| (l * t).exp()).collect();
        let weights: Vec<f64> = self.dens[e]
            .iter()
            .map(|d| d.iter().zip(&exps).map(|(a, b)| a * b).sum::<f64>().max(0.0))
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (w, &p) in weights.iter().enumerate() {
            if u < p {
                pick = w;
                break;
            }
            u -= p;
        }
        (t, pick)
    }
}

#[derive(Clone, Copy, Debug)]
enum Event {
    Jump(usize, usize),
    /// Leave the valley at this position through the given exit.
    Exit(usize, usize),
}

/// Event generator shared by the rate estimator and the projection sampler.
struct Engine {
    kin: Kinetics,
    scales: ScaleParams,
    s_star: Vec<usize>,
    valley_exits: Vec<Option<ValleyExit>>,
}

impl Engine {
    fn new(model: &ZrpModel, scales: &ScaleParams, sampler: Sampler) -> Result<Self> {
        let kin = Kinetics::new(model, scales.n, Variant::Primal);
        let s_star = model.profile.s_star.clone();
        let valley_exits = match sampler {
            Sampler::Stepwise => s_star.iter().map(|_| None).collect(),
            Sampler::ValleyExit => {
                s_star.iter().map(|&x| ValleyExit::build(model, &kin, scales, x)).collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self { kin, scales: scales.clone(), s_star, valley_exits })
    }

    /// Position in `S_star` of the valley containing `eta`.
    fn label(&self, eta: &[u32]) -> Option<usize> {
        valley_of_config(&self.scales, &self.s_star, eta).map(|x| self.s_star.iter().position(|&s| s == x).unwrap())
    }

    /// Time until the next event from `eta`, and the event.
    #[inline]
    fn sample<R: Rng>(&self, eta: &[u32], label: Option<usize>, rng: &mut R) -> (f64, Event) {
        if let Some(ve) = label.and_then(|p| self.valley_exits[p].as_ref()) {
            let e = ve.index[eta];
            let (t, w) = ve.sample(e, rng);
            return (t, Event::Exit(label.unwrap(), w));
        }
        let total = self.kin.total(eta);
        let hold: f64 = rng.sample::<f64, _>(Exp1) / total;
        let (x, y) = self.kin.pick(eta, rng.random::<f64>() * total);
        (hold, Event::Jump(x, y))
    }

    #[inline]
    fn apply(&self, eta: &mut [u32], ev: Event) {
        match ev {
            Event::Jump(x, y) => {
                eta[x] -= 1;
                eta[y] += 1;
            }
            Event::Exit(p, w) => eta.copy_from_slice(&self.valley_exits[p].as_ref().unwrap().exits[w]),
        }
    }
}

/// Estimates `r_N(x, .)` from one long path started at `eta0` in a valley.
///
/// Excursions outside the valleys are cut out of the clock; a transition
/// `x -> y` is counted when the path enters `E^y` with `E^x` as the last
/// valley visited. Runs until `n_transitions` transitions have been seen.
pub fn mean_jump_rate_mc(
    model: &ZrpModel,
    scales: &ScaleParams,
    eta0: &[u32],
    n_transitions: u64,
    seed: u64,
    sampler: Sampler,
) -> Result<McRates> {
    assert!(n_transitions >= 100, "at least 100 valley transitions are needed");
    let n: u32 = eta0.iter().sum();
    if n != scales.n || eta0.len() != model.kappa() {
        return Err(Error::InvalidWalk("start configuration does not match the scales".into()));
    }
    let engine = Engine::new(model, scales, sampler)?;
    let mut last = engine.label(eta0).expect("start must lie in a valley");
    let kv = engine.s_star.len();
    let mut rng = stream_rng(seed, 0);
    let mut eta = eta0.to_vec();
    let mut counts = vec![vec![0u64; kv]; kv];
    let mut occ = vec![KahanSum::new(); kv];
    let mut excursion = KahanSum::new();
    let (mut seen, mut jumps, mut sojourns) = (0u64, 0u64, 0u64);
    let mut current = Some(last);
    // holding times accumulated in plain f64 between valley changes, then folded in
    let mut run = 0.0f64;
    while seen < n_transitions {
        let (dt, ev) = engine.sample(&eta, current, &mut rng);
        run += dt;
        engine.apply(&mut eta, ev);
        match ev {
            Event::Jump(..) => jumps += 1,
            Event::Exit(..) => sojourns += 1,
        }
        let now = engine.label(&eta);
        if now != current {
            match current {
                Some(p) => occ[p].add(run),
                None => excursion.add(run),
            }
            run = 0.0;
            if let Some(q) = now {
                if q != last {
                    counts[last][q] += 1;
                    seen += 1;
                }
                last = q;
            }
            current = now;
        }
    }
    match current {
        Some(p) => occ[p].add(run),
        None => excursion.add(run),
    }
    let occupation: Vec<f64> = occ.iter().map(|s| s.value()).collect();
    let rates = (0..kv).map(|p| (0..kv).map(|q| counts[p][q] as f64 / occupation[p]).collect()).collect();
    let std_err = (0..kv).map(|p| (0..kv).map(|q| (counts[p][q] as f64).sqrt() / occupation[p]).collect()).collect();
    Ok(McRates {
        sites: engine.s_star.clone(),
        counts,
        occupation,
        excursion_time: excursion.value(),
        rates,
        std_err,
        jumps,
        sojourns,
    })
}

/// `W_N(t) = Psi(eta_N(N^{1+alpha} t))` on a grid of rescaled times; `None` is the null state.
pub fn projection_process(traj: &Trajectory, scales: &ScaleParams, model: &ZrpModel, grid: &[f64]) -> Result<Vec<Option<usize>>> {
    let n = traj.n();
    let space = ConfigSpace::new(n, (0..traj.start.len()).collect())?;
    let speed = (n as f64).powf(1.0 + model.alpha);
    Ok(grid
        .iter()
        .map(|&t| valley_of_config(scales, &model.profile.s_star, &traj.state_at(&space, speed * t)))
        .collect())
}

/// Projections of `paths` independent paths from `eta0`, path `i` on stream `i`.
///
/// Paths are simulated without storing jumps; each stops at the last grid time.
pub fn sample_projections(
    model: &ZrpModel,
    scales: &ScaleParams,
    eta0: &[u32],
    grid: &[f64],
    paths: usize,
    seed: u64,
    sampler: Sampler,
) -> Result<Vec<Vec<Option<usize>>>> {
    if grid.windows(2).any(|w| w[1] < w[0]) || grid.iter().any(|&t| t < 0.0) {
        return Err(Error::InvalidWalk("time grid must be non-negative and sorted".into()));
    }
    let n: u32 = eta0.iter().sum();
    if n != scales.n || eta0.len() != model.kappa() {
        return Err(Error::InvalidWalk("start configuration does not match the scales".into()));
    }
    let engine = Engine::new(model, scales, sampler)?;
    let speed = (n as f64).powf(1.0 + model.alpha);
    let mut out = Vec::with_capacity(paths);
    for i in 0..paths {
        let mut rng = stream_rng(seed, i as u64);
        let mut eta = eta0.to_vec();
        let mut cur = engine.label(&eta);
        let mut row = Vec::with_capacity(grid.len());
        let mut t = 0.0;
        let (mut dt, mut ev) = engine.sample(&eta, cur, &mut rng);
        for &s in grid {
            let target = speed * s;
            while t + dt <= target {
                t += dt;
                engine.apply(&mut eta, ev);
                cur = engine.label(&eta);
                (dt, ev) = engine.sample(&eta, cur, &mut rng);
            }
            row.push(cur.map(|p| engine.s_star[p]));
        }
        out.push(row);
    }
    Ok(out)
}

/// Empirical one-time laws and two-time laws of consecutive grid points.
///
/// States are the given valley labels followed by the null state.
#[derive(Clone, Debug, PartialEq)]
pub struct FddTable {
    pub labels: Vec<usize>,
    pub paths: usize,
    /// `one_time[k][s]`.
    pub one_time: Vec<Vec<f64>>,
    /// `two_time[k][s][s']` for grid points `k` and `k + 1`.
    pub two_time: Vec<Vec<Vec<f64>>>,
    /// Fraction of (path, grid time) pairs in the null state.
    pub null_fraction: f64,
}

pub fn empirical_fdd(paths: &[Vec<Option<usize>>], labels: &[usize]) -> FddTable {
    let ns = labels.len() + 1;
    let idx = |w: Option<usize>| w.and_then(|x| labels.iter().position(|&l| l == x)).unwrap_or(labels.len());
    let steps = paths.first().map_or(0, |p| p.len());
    let np = paths.len().max(1) as f64;
    let mut one = vec![vec![0.0; ns]; steps];
    let mut two = vec![vec![vec![0.0; ns]; ns]; steps.saturating_sub(1)];
    let mut nulls = 0usize;
    for p in paths {
        for k in 0..steps {
            let s = idx(p[k]);
            one[k][s] += 1.0 / np;
            nulls += (s == labels.len()) as usize;
            if k + 1 < steps {
                two[k][s][idx(p[k + 1])] += 1.0 / np;
            }
        }
    }
    FddTable {
        labels: labels.to_vec(),
        paths: paths.len(),
        one_time: one,
        two_time: two,
        null_fraction: nulls as f64 / (np * steps.max(1) as f64),
    }
}

impl FddTable {
    /// Per grid time, `max_y |P_hat[W = y] - Q_x[Y_t = y]|` and the binomial standard
    /// error at the maximizing state, for a path started in valley `x`.
    pub fn limit_gap(&self, limit: &LimitChain, x: usize, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
        let px = limit.position(x).ok_or(Error::SetsOverlapOrEmpty)?;
        let mut out = Vec::with_capacity(grid.len());
        for (k, &t) in grid.iter().enumerate() {
            let q = limit.transition_probabilities(t)?;
            let mut worst = (0.0, 0.0);
            for (s, &lab) in self.labels.iter().enumerate() {
                let target = limit.position(lab).map_or(0.0, |py| q[px][py]);
                let p = self.one_time[k][s];
                let gap = (p - target).abs();
                if gap >= worst.0 {
                    worst = (gap, (p * (1.0 - p) / self.paths.max(1) as f64).sqrt());
                }
            }
            out.push(worst);
        }
        Ok(out)
    }
}

/// Finite-N proxies for the metastability hypotheses, per condensation site.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisReport {
    pub n: u32,
    pub sites: Vec<usize>,
    /// `sup_{eta in E^x, eta != xi^x} cap_N(E^x, rest) / cap_N(eta, xi^x)`; zero for a singleton valley.
    pub valley_mixing: Vec<f64>,
    /// `mu_N(Delta_N) / mu_N(E^x)`.
    pub outside_mass: Vec<f64>,
}

pub fn hypothesis_diagnostics(sys: &ZrpSystem, sets: &MetastableSets) -> Result<HypothesisReport> {
    let len = sys.len();
    let chain: &Chain = &sys.chain;
    let delta = sys.set_measure(&sets.delta_mask());
    let mut valley_mixing = Vec::new();
    let mut outside_mass = Vec::new();
    for &x in &sets.s_star {
        let vx = sets.valley_mask(x);
        let cap = chain.capacity(&vx, &sets.other_valleys(x))?.cap;
        let xi = sys.condensed_at(x);
        let xi_mask = mask_from(len, &[xi]);
        let mut worst = 0.0f64;
        for u in (0..len).filter(|&u| vx[u] && u != xi) {
            let c = chain.capacity(&mask_from(len, &[u]), &xi_mask)?.cap;
            worst = worst.max(cap / c);
        }
        valley_mixing.push(worst);
        outside_mass.push(delta / sys.set_measure(&vx));
    }
    Ok(HypothesisReport { n: sys.n(), sites: sets.s_star.clone(), valley_mixing, outside_mass })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_sets;
    use crate::walk::UnderlyingWalk;

    fn two_site(alpha: f64) -> ZrpModel {
        ZrpModel::new(UnderlyingWalk::new(vec![vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(), alpha).unwrap()
    }

    #[test]
    fn two_particle_trace_chain() {
        let sys = ZrpSystem::new(&two_site(3.0), 2).unwrap();
        let valleys = vec![(0, mask_from(3, &[sys.index_of(&[2, 0])])), (1, mask_from(3, &[sys.index_of(&[0, 2])]))];
        let tc = trace_chain_exact(&sys, &valleys).unwrap();
        let (a, b) = (sys.index_of(&[2, 0]), sys.index_of(&[0, 2]));
        // g(2) = 8 into (1,1), which then splits evenly
        assert!((tc.jump_rate(a, b) - 4.0).abs() < 1e-12);
        assert!((tc.holding_rates[0] - 4.0).abs() < 1e-12);
        assert!((tc.capacities[0] - 0.4).abs() < 1e-12);
        assert!((tc.valley_measures[0] - 0.1).abs() < 1e-12);
        assert_eq!(tc.collapsed_hitting[0][1], 1.0);
    }

    #[test]
    fn first_jump_from_full_site_is_forced() {
        let model = two_site(3.0);
        for s in 0..20 {
            let tr = simulate(&model, &[2, 0], 10.0, 7, s, Variant::Primal).unwrap();
            let space = ConfigSpace::new(2, vec![0, 1]).unwrap();
            assert_eq!(space.unrank(tr.jumps[0].1), vec![1, 1]);
        }
    }

    #[test]
    fn trajectory_times_increase_and_moves_are_adjacent() {
        let model = two_site(3.0);
        let tr = simulate(&model, &[5, 3], 50.0, 1, 0, Variant::Adjoint).unwrap();
        let space = ConfigSpace::new(8, vec![0, 1]).unwrap();
        let mut prev = (0.0, tr.start.clone());
        for &(t, r) in &tr.jumps {
            let eta = space.unrank(r);
            assert!(t > prev.0);
            let moved: u32 = eta.iter().zip(&prev.1).map(|(a, b)| a.abs_diff(*b)).sum();
            assert_eq!(moved, 2);
            prev = (t, eta);
        }
        assert_eq!(tr, simulate(&model, &[5, 3], 50.0, 1, 0, Variant::Adjoint).unwrap());
    }

    #[test]
    fn single_move_holding_time_is_exponential() {
        // from (1, 0) the only move is 0 -> 1 at rate g(1) r = 1
        let model = two_site(3.0);
        let kin = Kinetics::new(&model, 1, Variant::Primal);
        let mut rng = stream_rng(11, 3);
        let mut xs: Vec<f64> = (0..10_000)
            .map(|_| {
                let mut eta = [1u32, 0];
                kin.step(&mut eta, &mut rng)
            })
            .collect();
        xs.sort_by(f64::total_cmp);
        let n = xs.len() as f64;
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = 1.0 - (-x).exp();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        // Kolmogorov critical value at level 1e-3
        assert!(d < 1.949 / n.sqrt(), "{d}");
    }

    #[test]
    fn valley_occupation_matches_measure() {
        let model = two_site(3.0);
        let n = 10;
        let sys = ZrpSystem::new(&model, n).unwrap();
        let scales = ScaleParams::relaxed(&model, n, 0.05).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let est = mean_jump_rate_mc(&model, &scales, &[n, 0], 4000, 5, Sampler::Stepwise).unwrap();
        let total = est.occupation.iter().sum::<f64>() + est.excursion_time;
        let target = sys.set_measure(&sets.valley_mask(0));
        // occupation of E^0 over alternating sojourns: binomial-like error from the sojourn count
        let frac = est.occupation[0] / total;
        let se = (target * (1.0 - target) / (est.transitions() as f64 / 2.0)).sqrt();
        assert!((frac - target).abs() < 3.0 * se, "{frac} {target} {se}");
        let tc = trace_chain_of_sets(&sys, &sets).unwrap();
        let r = tc.mean_rate(0, 1);
        assert!((est.rates[0][1] - r).abs() < 3.0 * est.std_err[0][1], "{:?} {r}", est.rates);
        // estimator definition
        assert!((est.rates[0][1] * est.occupation[0] - est.counts[0][1] as f64).abs() < 1e-6);
    }

    #[test]
    fn symmetric_three_valleys_have_equal_rates() {
        let model =
            ZrpModel::new(UnderlyingWalk::new(vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]).unwrap(), 3.0)
                .unwrap();
        let scales = ScaleParams::relaxed(&model, 8, 0.05).unwrap();
        let est = mean_jump_rate_mc(&model, &scales, &[8, 0, 0], 3000, 2, Sampler::ValleyExit).unwrap();
        for x in 0..3 {
            let others: Vec<usize> = (0..3).filter(|&y| y != x).collect();
            let (a, b) = (others[0], others[1]);
            let diff = (est.rates[x][a] - est.rates[x][b]).abs();
            let se = est.std_err[x][a].hypot(est.std_err[x][b]);
            assert!(diff < 3.0 * se, "{:?}", est.rates);
        }
    }

    #[test]
    fn constant_projection_inside_a_valley() {
        let model = two_site(3.0);
        let scales = ScaleParams::relaxed(&model, 40, 0.05).unwrap();
        let tr = Trajectory { seed: 0, stream: 0, start: vec![40, 0], jumps: vec![], horizon: 1.0 };
        let w = projection_process(&tr, &scales, &model, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(w, vec![Some(0); 3]);
        let table = empirical_fdd(&[w.clone(), w], &[0, 1]);
        assert_eq!(table.one_time[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(table.null_fraction, 0.0);
    }

    #[test]
    fn trace_identities_on_a_routed_three_site_model() {
        let rates = vec![vec![0.0, 1.0, 0.5], vec![1.5, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        let model = ZrpModel::new(UnderlyingWalk::new(rates).unwrap(), 3.0).unwrap();
        let sys = ZrpSystem::new(&model, 30).unwrap();
        let scales = ScaleParams::relaxed(&model, 30, 0.05).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let tc = trace_chain_of_sets(&sys, &sets).unwrap();
        assert!(tc.holding_capacity_gap < 1e-9 && tc.collapsed_hitting_gap < 1e-9);
        let h = hypothesis_diagnostics(&sys, &sets).unwrap();
        assert!(h.outside_mass.iter().all(|&r| r > 0.0));
    }

    #[test]
    fn singleton_valley_has_no_mixing_term() {
        let model = two_site(3.0);
        let sys = ZrpSystem::new(&model, 6).unwrap();
        let scales = ScaleParams::relaxed_with(&model, 6, 0.05, 0, 1).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let h = hypothesis_diagnostics(&sys, &sets).unwrap();
        assert_eq!(h.valley_mixing, vec![0.0, 0.0]);
    }

    #[test]
    fn valley_exit_time_matches_expected_exit_time() {
        let model = two_site(3.0);
        let n = 12;
        let sys = ZrpSystem::new(&model, n).unwrap();
        let scales = ScaleParams::relaxed_with(&model, n, 0.05, 3, 4).unwrap();
        let kin = Kinetics::new(&model, n, Variant::Primal);
        let ve = ValleyExit::build(&model, &kin, &scales, 0).unwrap().unwrap();
        // expected exit time from (12, 0): solve -L tau = 1 on the valley with the full chain's rates
        let members: Vec<usize> = (0..=3).map(|m| sys.index_of(&[n - m, m])).collect();
        let q: Vec<Vec<f64>> = members
            .iter()
            .map(|&u| {
                members
                    .iter()
                    .map(|&v| if u == v { -sys.chain.out_rate(u) } else { sys.chain.rate(u, v) })
                    .collect()
            })
            .collect();
        let tau = crate::linalg::dense_solve(&q, &[-1.0; 4])[0];
        let e = ve.index[&vec![n, 0]];
        let mut rng = stream_rng(4, 0);
        let samples: Vec<f64> = (0..20_000).map(|_| ve.sample(e, &mut rng).0).collect();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let var = samples.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
        let se = (var / samples.len() as f64).sqrt();
        assert!((mean - tau).abs() < 3.0 * se, "{mean} {tau} {se}");
        assert_eq!(ve.exits, vec![vec![n - 4, 4]]);
    }

    #[test]
    fn both_samplers_agree_with_the_exact_rate() {
        let model = two_site(3.0);
        let n = 14;
        let sys = ZrpSystem::new(&model, n).unwrap();
        let scales = ScaleParams::relaxed(&model, n, 0.05).unwrap();
        let sets = build_sets(&sys, &scales).unwrap();
        let exact = trace_chain_of_sets(&sys, &sets).unwrap().mean_rate(0, 1);
        for sampler in [Sampler::Stepwise, Sampler::ValleyExit] {
            let est = mean_jump_rate_mc(&model, &scales, &[n, 0], 3000, 9, sampler).unwrap();
            assert!((est.rates[0][1] - exact).abs() < 3.0 * est.std_err[0][1], "{sampler:?} {:?} {exact}", est.rates);
            assert_eq!(est.sojourns > 0, sampler == Sampler::ValleyExit);
        }
    }

    #[test]
    fn non_reversible_valleys_fall_back_to_steps() {
        let rates = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]];
        let model = ZrpModel::new(UnderlyingWalk::new(rates).unwrap(), 3.0).unwrap();
        let scales = ScaleParams::relaxed(&model, 9, 0.05).unwrap();
        let kin = Kinetics::new(&model, 9, Variant::Primal);
        assert!(ValleyExit::build(&model, &kin, &scales, 0).unwrap().is_none());
        let est = mean_jump_rate_mc(&model, &scales, &[9, 0, 0], 200, 1, Sampler::ValleyExit).unwrap();
        assert_eq!(est.sojourns, 0);
    }
}

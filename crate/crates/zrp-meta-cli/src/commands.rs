//! The seven experiment commands. Each sweeps the configured particle numbers on a worker
//! pool and returns its tables in configuration order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::RngExt;
use serde_json::{json, Map};

use zrp_meta::approx::{approx_verification, limit_chain_of, RampProfile};
use zrp_meta::capacity::{bounds_sandwich_check, dt_optimizers};
use zrp_meta::chain::Chain;
use zrp_meta::collapse::collapse_chain;
use zrp_meta::dynamics::{empirical_fdd, mean_jump_rate_mc, sample_projections, stream_rng, trace_chain_of_sets};
use zrp_meta::flow::{flow_identity_suite, phi_flow, phi_star_flow, psi_flow, Flow};
use zrp_meta::geometry::{build_sets, set_measures, MetastableSets, ScaleParams};
use zrp_meta::walk::{LimitChain, UnderlyingWalk};
use zrp_meta::zrp::{ZrpModel, ZrpSystem};
use zrp_meta::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{Cell, Report, Table};

pub const COMMANDS: [&str; 7] = ["exact", "principles", "collapse", "asymptotics", "approx", "rates", "simulate"];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Module(#[from] Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn invalid(field: impl Into<String>, message: impl Into<String>) -> RunError {
    RunError::Config(ConfigError::Invalid { field: field.into(), message: message.into() })
}

/// Builds the model and checks the preconditions that depend on it.
pub fn build_model(cfg: &ExperimentConfig) -> Result<ZrpModel, RunError> {
    let walk = UnderlyingWalk::new(cfg.walk.clone()).map_err(|e| invalid("walk", e.to_string()))?;
    let model = ZrpModel::new(walk, cfg.alpha).map_err(|e| match e {
        Error::AlphaOutOfRange(_) => invalid("alpha", e.to_string()),
        _ => invalid("walk", e.to_string()),
    })?;
    let s_star = &model.profile.s_star;
    if s_star.len() < 2 {
        return Err(invalid("walk", "the stationary measure has a single maximiser; no metastable transitions"));
    }
    for (name, set) in [("a", &cfg.a), ("b", &cfg.b)] {
        if let Some(i) = set.iter().position(|s| !s_star.contains(s)) {
            return Err(invalid(format!("{name}[{i}]"), format!("site {} is not a condensation site (those are {s_star:?})", set[i])));
        }
    }
    Ok(model)
}

/// Maps `f` over `items` on `threads` workers; results come back in input order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots poisoned")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots poisoned").into_iter().map(|r| r.expect("every item is processed")).collect()
}

fn sweep<R: Send>(
    cfg: &ExperimentConfig,
    threads: usize,
    f: impl Fn(u32) -> Result<R, Error> + Sync,
) -> Result<Vec<R>, RunError> {
    par_map(threads, &cfg.n, |&n| f(n)).into_iter().map(|r| r.map_err(RunError::from)).collect()
}

pub fn scales(cfg: &ExperimentConfig, model: &ZrpModel, n: u32) -> Result<ScaleParams, Error> {
    let base = ScaleParams::relaxed(model, n, cfg.eps)?;
    if cfg.ell.is_none() && cfg.pi.is_none() {
        return Ok(base);
    }
    ScaleParams::relaxed_with(model, n, cfg.eps, cfg.ell.unwrap_or(base.ell), cfg.pi.unwrap_or(base.pi))
}

struct Point {
    sys: ZrpSystem,
    sets: MetastableSets,
    a: Vec<bool>,
    b: Vec<bool>,
}

fn point(cfg: &ExperimentConfig, model: &ZrpModel, n: u32) -> Result<Point, Error> {
    let sys = ZrpSystem::new(model, n)?;
    let sets = build_sets(&sys, &scales(cfg, model, n)?)?;
    let a = sets.valleys_mask(&cfg.a);
    let b = sets.valleys_mask(&cfg.b);
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return Err(Error::SetsOverlapOrEmpty);
    }
    Ok(Point { sys, sets, a, b })
}

fn point_seed(seed: u64, n: u32) -> u64 {
    seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn scale(model: &ZrpModel, n: u32) -> f64 {
    (n as f64).powf(1.0 + model.alpha)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn limit_capacity(limit: &LimitChain, cfg: &ExperimentConfig) -> Result<f64, Error> {
    limit.capacity(&cfg.a, &cfg.b)
}

pub fn run(command: &str, cfg: &ExperimentConfig, model: &ZrpModel, seed: u64, threads: usize) -> Result<Report, RunError> {
    match command {
        "exact" => exact(cfg, model, threads),
        "principles" => principles(cfg, model, seed, threads),
        "collapse" => collapse(cfg, model, seed, threads),
        "asymptotics" => asymptotics(cfg, model, threads),
        "approx" => approx(cfg, model, threads),
        "rates" => rates(cfg, model, threads),
        "simulate" => simulate(cfg, model, seed),
        other => Err(invalid("<command>", format!("unknown command `{other}`"))),
    }
}

fn exact(cfg: &ExperimentConfig, model: &ZrpModel, threads: usize) -> Result<Report, RunError> {
    let rows = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let sol = p.sys.chain.capacity(&p.a, &p.b)?;
        Ok(vec![
            Cell::from(n),
            p.sys.len().into(),
            sol.cap.into(),
            sol.cap_star.into(),
            sol.cap_sym.into(),
            sol.flux_from_a.into(),
            sol.flux_into_b.into(),
            sol.consistency_gap().into(),
            (scale(model, n) * sol.cap).into(),
        ])
    })?;
    let mut t = Table::new(&["n", "states", "cap", "cap_star", "cap_sym", "flux_from_a", "flux_into_b", "consistency_gap", "scaled_cap"]);
    rows.into_iter().for_each(|r| t.push(r));
    Ok(Report { tables: vec![("exact", t)], summary: Map::new() })
}

fn principles(cfg: &ExperimentConfig, model: &ZrpModel, seed: u64, threads: usize) -> Result<Report, RunError> {
    let rows = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let chain: &Chain = &p.sys.chain;
        let s = point_seed(seed, n);
        let fl = flow_identity_suite(chain, cfg.trials, s);
        let dt = dt_optimizers(chain, &p.a, &p.b)?;
        let sw = bounds_sandwich_check(chain, &p.a, &p.b, cfg.trials, s.wrapping_add(1))?;
        Ok(vec![
            Cell::from(n),
            dt.cap.into(),
            fl.divergence.into(),
            fl.pairing.into(),
            fl.summation_by_parts.into(),
            fl.norm.into(),
            fl.total_divergence.into(),
            fl.average.into(),
            dt.upper_value.into(),
            dt.lower_value.into(),
            dt.max_residual().into(),
            sw.trials.into(),
            sw.min_upper_gap.into(),
            sw.min_lower_gap.into(),
            sw.holds(1e-9).into(),
        ])
    })?;
    let mut t = Table::new(&[
        "n",
        "cap",
        "flow_divergence",
        "flow_pairing",
        "flow_summation_by_parts",
        "flow_norm",
        "flow_total_divergence",
        "flow_average",
        "upper_optimum",
        "lower_optimum",
        "optimizer_residual",
        "bound_trials",
        "min_upper_gap",
        "min_lower_gap",
        "bounds_hold",
    ]);
    rows.into_iter().for_each(|r| t.push(r));
    Ok(Report { tables: vec![("principles", t)], summary: Map::new() })
}

fn collapse(cfg: &ExperimentConfig, model: &ZrpModel, seed: u64, threads: usize) -> Result<Report, RunError> {
    let rows = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let chain: &Chain = &p.sys.chain;
        let len = chain.len();
        let valley = &p.a;
        let cc = collapse_chain(chain, valley)?;
        let mut point_mask = vec![false; cc.chain.len()];
        point_mask[cc.point()] = true;
        let mut rng = stream_rng(point_seed(seed, n), 0);

        let mut cap_gap: f64 = 0.0;
        let mut cap_pairs = 0u64;
        let mut targets = vec![p.b.clone()];
        for _ in 0..cfg.trials {
            let m: Vec<bool> = (0..len).map(|u| !valley[u] && rng.random::<f64>() < 0.1).collect();
            if m.iter().any(|&x| x) {
                targets.push(m);
            }
        }
        for set in &targets {
            let (cbar, _) = cc.capacity(&cc.project_mask(set), &point_mask)?;
            let c = chain.capacity(set, valley)?.cap;
            cap_gap = cap_gap.max(rel(cbar, c));
            cap_pairs += 1;
        }

        let mut ratio: f64 = 0.0;
        let mut edge_gap: f64 = 0.0;
        let mut equality_gap: f64 = 0.0;
        for _ in 0..cfg.trials {
            let phi = Flow::from_values((0..chain.num_edges()).map(|_| rng.random::<f64>() - 0.5).collect());
            let (nb, no) = cc.norm_contraction(chain, &phi);
            ratio = ratio.max(nb / no);
            let f: Vec<f64> = (0..len).map(|u| if valley[u] { 0.5 } else { rng.random::<f64>() }).collect();
            let fbar = cc.collapse_function(&f)?;
            let psi = psi_flow(chain, &f);
            if cc.equality_conditions(chain, &psi, 1e-12) {
                let (nb, no) = cc.norm_contraction(chain, &psi);
                equality_gap = equality_gap.max(rel(nb, no));
            }
            for (orig, coll) in [
                (phi_flow(chain, &f), phi_flow(&cc.chain, &fbar)),
                (phi_star_flow(chain, &f), phi_star_flow(&cc.chain, &fbar)),
                (psi, psi_flow(&cc.chain, &fbar)),
            ] {
                let mapped = cc.collapse_flow(chain, &orig);
                edge_gap = edge_gap.max(mapped.axpy(-1.0, &coll).max_abs() / coll.max_abs().max(f64::MIN_POSITIVE));
            }
        }
        Ok(vec![
            Cell::from(n),
            valley.iter().filter(|&&x| x).count().into(),
            cc.chain.len().into(),
            cap_pairs.into(),
            cap_gap.into(),
            ratio.into(),
            (ratio <= 1.0 + 1e-12).into(),
            equality_gap.into(),
            edge_gap.into(),
        ])
    })?;
    let mut t = Table::new(&[
        "n",
        "valley_states",
        "collapsed_states",
        "capacity_pairs",
        "collapsed_cap_gap",
        "max_norm_ratio",
        "contraction_holds",
        "constant_on_valley_norm_gap",
        "edgewise_flow_gap",
    ]);
    rows.into_iter().for_each(|r| t.push(r));
    Ok(Report { tables: vec![("collapse", t)], summary: Map::new() })
}

fn asymptotics(cfg: &ExperimentConfig, model: &ZrpModel, threads: usize) -> Result<Report, RunError> {
    let limit = limit_chain_of(model)?;
    let cap_y = limit_capacity(&limit, cfg)?;
    let z = model.limit_constants().z_limit;
    let rows = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let meas = set_measures(&p.sys, &p.sets);
        let cap = scale(model, n) * p.sys.chain.capacity(&p.a, &p.b)?.cap;
        Ok(vec![
            Cell::from(n),
            p.sys.len().into(),
            p.sets.scales.ell.into(),
            p.sets.scales.pi.into(),
            p.sys.z_n.into(),
            rel(p.sys.z_n, z).into(),
            meas.valley_ratio.into(),
            (meas.valley_ratio - 1.0).abs().into(),
            cap.into(),
            rel(cap, cap_y).into(),
            meas.scaled_inner_boundary.into(),
            meas.scaled_saddle.into(),
        ])
    })?;
    let mut t = Table::new(&[
        "n",
        "states",
        "ell",
        "pi",
        "z_n",
        "z_rel_err",
        "valley_ratio",
        "valley_ratio_err",
        "scaled_cap",
        "cap_rel_gap",
        "scaled_inner_boundary",
        "scaled_saddle",
    ]);
    rows.into_iter().for_each(|r| t.push(r));
    let mut summary = Map::new();
    summary.insert("z_limit".into(), json!(z));
    summary.insert("limit_capacity".into(), json!(cap_y));
    Ok(Report { tables: vec![("asymptotics", t)], summary })
}

fn approx(cfg: &ExperimentConfig, model: &ZrpModel, threads: usize) -> Result<Report, RunError> {
    let ramp = RampProfile::unchecked(cfg.eps, model.alpha)?;
    let results = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let rep = approx_verification(&p.sys, &p.sets, &ramp, &cfg.a, &cfg.b)?;
        let main = vec![
            Cell::from(n),
            rep.scaled_dirichlet.into(),
            rep.cap_y.into(),
            rel(rep.scaled_dirichlet, rep.cap_y).into(),
            rep.scaled_correction_norm.into(),
            rep.scaled_delta_divergence.into(),
            rep.scaled_other_valleys.into(),
            rep.scaled_divergence_a.into(),
            rep.scaled_divergence_b.into(),
            rep.sign_structure.into(),
            rep.valley_values_exact.into(),
        ];
        let pairs: Vec<Vec<Cell>> = rep
            .pairs
            .iter()
            .map(|q| {
                vec![
                    Cell::from(n),
                    q.x.into(),
                    q.y.into(),
                    q.b_identity.into(),
                    q.tube_interior_divergence.into(),
                    q.divergence_free_off_support.into(),
                    q.antisymmetry.into(),
                    q.valley_signs.into(),
                    q.valley_ratio.into(),
                    (scale(model, n) * q.chi_norm_sq).into(),
                ]
            })
            .collect();
        Ok((main, pairs, rep.ramp))
    })?;
    let mut t = Table::new(&[
        "n",
        "scaled_dirichlet",
        "limit_capacity",
        "dirichlet_rel_gap",
        "scaled_correction_norm",
        "scaled_delta_divergence",
        "scaled_other_valleys",
        "scaled_divergence_a",
        "scaled_divergence_b",
        "sign_structure",
        "valley_values_exact",
    ]);
    let mut tp = Table::new(&[
        "n",
        "x",
        "y",
        "b_identity",
        "tube_interior_divergence",
        "divergence_free_off_support",
        "antisymmetry",
        "valley_signs",
        "valley_ratio",
        "scaled_chi_norm_sq",
    ]);
    let mut ramp = None;
    for (main, pairs, r) in results {
        t.push(main);
        pairs.into_iter().for_each(|r| tp.push(r));
        ramp.get_or_insert(r);
    }
    let mut summary = Map::new();
    if let Some(r) = ramp {
        summary.insert(
            "ramp".into(),
            json!({
                "zero_region": r.zero_region,
                "linear_region": r.linear_region,
                "one_region": r.one_region,
                "min_slope": r.min_slope,
                "symmetry": r.symmetry,
                "max_slope": r.max_slope,
                "max_ratio": r.max_ratio,
                "min_ratio": r.min_ratio,
                "holds": r.holds.to_vec(),
            }),
        );
    }
    Ok(Report { tables: vec![("approx", t), ("approx_pairs", tp)], summary })
}

fn rates(cfg: &ExperimentConfig, model: &ZrpModel, threads: usize) -> Result<Report, RunError> {
    let limit = limit_chain_of(model)?;
    let results = sweep(cfg, threads, |n| {
        let p = point(cfg, model, n)?;
        let tc = trace_chain_of_sets(&p.sys, &p.sets)?;
        let k = scale(model, n);
        let mut pairs = Vec::new();
        for &x in &tc.sites {
            for &y in &tc.sites {
                if x != y {
                    let r = k * tc.mean_rate(x, y);
                    let a = limit.rate(x, y);
                    pairs.push(vec![Cell::from(n), x.into(), y.into(), r.into(), a.into(), rel(r, a).into()]);
                }
            }
        }
        let valleys: Vec<Vec<Cell>> = tc
            .sites
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                vec![
                    Cell::from(n),
                    x.into(),
                    tc.valley_measures[i].into(),
                    tc.holding_rates[i].into(),
                    tc.capacities[i].into(),
                    tc.holding_capacity_gap.into(),
                    tc.collapsed_hitting_gap.into(),
                ]
            })
            .collect();
        Ok((pairs, valleys))
    })?;
    let mut tr = Table::new(&["n", "x", "y", "scaled_rate", "limit_rate", "rel_gap"]);
    let mut tv = Table::new(&["n", "x", "valley_measure", "holding_rate", "capacity", "holding_capacity_gap", "collapsed_hitting_gap"]);
    for (pairs, valleys) in results {
        pairs.into_iter().for_each(|r| tr.push(r));
        valleys.into_iter().for_each(|r| tv.push(r));
    }
    Ok(Report { tables: vec![("rates", tr), ("rates_valleys", tv)], summary: Map::new() })
}

fn simulate(cfg: &ExperimentConfig, model: &ZrpModel, seed: u64) -> Result<Report, RunError> {
    let n = cfg.mc_n();
    let p = point(cfg, model, n)?;
    let tc = trace_chain_of_sets(&p.sys, &p.sets)?;
    let limit = limit_chain_of(model)?;
    let start = cfg.a[0];
    let mut eta0 = vec![0u32; model.kappa()];
    eta0[start] = n;
    let sampler = cfg.sampler.into();
    let k = scale(model, n);

    let est = mean_jump_rate_mc(model, &p.sets.scales, &eta0, cfg.mc_transitions, seed, sampler)?;
    let mut tr = Table::new(&["n", "x", "y", "transitions", "occupation", "scaled_rate", "scaled_std_err", "scaled_exact", "z_score"]);
    for (i, &x) in est.sites.iter().enumerate() {
        for (j, &y) in est.sites.iter().enumerate() {
            if i == j {
                continue;
            }
            let exact = tc.mean_rate(x, y);
            let se = est.std_err[i][j];
            let z = if se > 0.0 { (est.rates[i][j] - exact) / se } else { f64::NAN };
            tr.push(vec![
                Cell::from(n),
                x.into(),
                y.into(),
                est.counts[i][j].into(),
                est.occupation[i].into(),
                (k * est.rates[i][j]).into(),
                (k * se).into(),
                (k * exact).into(),
                z.into(),
            ]);
        }
    }
    let mut summary = Map::new();
    summary.insert("n".into(), json!(n));
    summary.insert("transitions".into(), json!(est.transitions()));
    summary.insert("jumps".into(), json!(est.jumps));
    summary.insert("valley_sojourns".into(), json!(est.sojourns));
    summary.insert("excursion_time".into(), json!(est.excursion_time));

    let mut tables = vec![("simulate", tr)];
    if !cfg.fdd_times.is_empty() {
        let paths = sample_projections(model, &p.sets.scales, &eta0, &cfg.fdd_times, cfg.fdd_paths, seed.wrapping_add(1), sampler)?;
        let table = empirical_fdd(&paths, &p.sets.s_star);
        let gaps = table.limit_gap(&limit, start, &cfg.fdd_times)?;
        let px = limit.position(start).ok_or(Error::SetsOverlapOrEmpty)?;
        let mut tf = Table::new(&["t", "state", "empirical", "limit", "worst_gap", "sigma"]);
        for (step, &t) in cfg.fdd_times.iter().enumerate() {
            let q = limit.transition_probabilities(t)?;
            for (s, &lab) in table.labels.iter().enumerate() {
                let target = limit.position(lab).map_or(0.0, |py| q[px][py]);
                tf.push(vec![
                    Cell::from(t),
                    lab.to_string().as_str().into(),
                    table.one_time[step][s].into(),
                    target.into(),
                    gaps[step].0.into(),
                    gaps[step].1.into(),
                ]);
            }
            tf.push(vec![
                Cell::from(t),
                "null".into(),
                table.one_time[step][table.labels.len()].into(),
                0.0.into(),
                gaps[step].0.into(),
                gaps[step].1.into(),
            ]);
        }
        summary.insert("fdd_paths".into(), json!(table.paths));
        summary.insert("null_fraction".into(), json!(table.null_fraction));
        tables.push(("simulate_fdd", tf));
    }
    Ok(Report { tables, summary })
}

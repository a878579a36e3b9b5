//! The four subcommands and the run-directory layout:
//!
//! ```text
//! <out>/config.toml      resolved configuration
//! <out>/trace.csv        stage, epoch, outer and inner loss
//! <out>/timing.csv       wall-clock seconds per epoch (not reproducible)
//! <out>/weights/         alpha_k.w, b_k.w
//! <out>/grids/           value and oracle grids
//! <out>/tables/          reports, sweeps and success counts
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use diffgame::benchmarks::{Preset, Reference};
use diffgame::game::{self, Objective, StrategyPair};
use diffgame::metrics::{self, LevelSetGrid};
use diffgame::nn::Network;
use diffgame::oracle;
use diffgame::{Error, Result};

use crate::config::{cfg_err, objective_name, parse_algorithm, Resolved, RunConfig};

struct Layout {
    root: PathBuf,
    weights: PathBuf,
    grids: PathBuf,
    tables: PathBuf,
}

fn layout(r: &Resolved) -> Result<Layout> {
    let root = r.out.clone();
    let l = Layout { weights: root.join("weights"), grids: root.join("grids"), tables: root.join("tables"), root };
    for d in [&l.root, &l.weights, &l.grids, &l.tables] {
        fs::create_dir_all(d)?;
    }
    let mut snapshot = r.config.clone();
    snapshot.seed = Some(r.seed);
    snapshot.workers = Some(r.workers);
    snapshot.out = Some(r.out.clone());
    fs::write(l.root.join("config.toml"), snapshot.to_toml()?)?;
    Ok(l)
}

fn save_pair(dir: &Path, pair: &StrategyPair) -> Result<()> {
    for (k, (a, b)) in pair.alpha.iter().zip(&pair.beta).enumerate() {
        fs::write(dir.join(format!("alpha_{k}.w")), a.to_bytes())?;
        fs::write(dir.join(format!("b_{k}.w")), b.to_bytes())?;
    }
    Ok(())
}

fn load_net(path: &Path) -> Result<Network> {
    let bytes = fs::read(path).map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    Network::from_bytes(&bytes).map_err(|e| Error::Load(format!("{}: {e}", path.display())))
}

pub fn load_pair(dir: &Path, spec: &game::GameSpec) -> Result<StrategyPair> {
    let mut pair = StrategyPair { alpha: Vec::new(), beta: Vec::new() };
    for k in 0..spec.steps {
        pair.alpha.push(load_net(&dir.join(format!("alpha_{k}.w")))?);
        pair.beta.push(load_net(&dir.join(format!("b_{k}.w")))?);
    }
    pair.check(spec)?;
    Ok(pair)
}

fn level_set(p: &Preset, values: Vec<f64>) -> Result<Vec<u8>> {
    let mut csv = Vec::new();
    LevelSetGrid::from_values(p.eval.clone(), values)?.write_csv(&mut csv)?;
    Ok(csv)
}

fn reference(p: &Preset) -> Result<Vec<f64>> {
    match p.reference_values(&p.eval)? {
        Some(r) => Ok(r),
        None => cfg_err(format!("preset '{}' has no reference value", p.name)),
    }
}

pub fn train(r: &Resolved) -> Result<()> {
    let p = &r.preset;
    let l = layout(r)?;
    let tr = game::train(&p.spec, &p.train, p.mode, r.seed)?;
    save_pair(&l.weights, &tr.pair)?;
    let mut trace = String::from("stage,epoch,outer_loss,inner_loss\n");
    let mut timing = String::from("stage,epoch,wall_seconds\n");
    for row in &tr.trace {
        writeln!(trace, "{},{},{:.16e},{:.16e}", row.stage, row.epoch, row.outer, row.inner).unwrap();
        writeln!(timing, "{},{},{:.6}", row.stage, row.epoch, row.wall).unwrap();
    }
    fs::write(l.root.join("trace.csv"), trace)?;
    fs::write(l.root.join("timing.csv"), timing)?;
    if let Some(last) = tr.trace.last() {
        println!("trained {} ({} mode, N = {}): final outer loss {:.6e}", p.name, p.mode.name(), p.spec.steps, last.outer);
    }
    println!("weights written to {}", l.weights.display());
    Ok(())
}

pub fn evaluate(r: &Resolved) -> Result<()> {
    let p = &r.preset;
    let weights = r.config.eval.weights.clone().unwrap_or_else(|| r.out.join("weights"));
    let pair = load_pair(&weights, &p.spec)?;
    let l = layout(r)?;
    let values = game::batch_values(&p.spec, &pair, &p.eval.points())?;
    fs::write(l.grids.join("value.csv"), level_set(p, values.clone())?)?;
    if let Some(reference) = p.reference_values(&p.eval)? {
        let e = metrics::error_report(&values, &reference, r.eta)?;
        let table = format!(
            "metric,value\ne_l1_loc,{:.16e}\ne_l1,{:.16e}\nsign_agreement,{:.16e}\nband_nodes,{}\nnodes,{}\neta,{}\n",
            e.local_l1, e.global_l1, e.sign_agreement, e.band_nodes, e.nodes, e.eta
        );
        fs::write(l.tables.join("report.csv"), &table)?;
        println!("e_l1_loc = {:.6e} ({} of {} nodes in the band)", e.local_l1, e.band_nodes, e.nodes);
        println!("e_l1 = {:.6e}, sign agreement {:.4}", e.global_l1, e.sign_agreement);
    } else {
        println!("no reference for '{}'; wrote the value grid only", p.name);
    }
    if let Some(other_dir) = &r.config.eval.compare_with {
        compare(r, &l, &values, other_dir)?;
    }
    Ok(())
}

/// Fraction of nodes where the lower value exceeds the upper by more than
/// the tolerance; the run trained with the inf-sup objective is the lower one.
fn compare(r: &Resolved, l: &Layout, values: &[f64], other_dir: &Path) -> Result<()> {
    let p = &r.preset;
    let cfg_path = other_dir.join("config.toml");
    if !cfg_path.is_file() {
        return Err(Error::Load(format!("{} is missing", cfg_path.display())));
    }
    let other = RunConfig::load(&cfg_path)?.resolve()?;
    let q = &other.preset;
    if q.spec.state_dim() != p.spec.state_dim() {
        return Err(Error::Load("compared runs have different state dimensions".into()));
    }
    if q.train.objective == p.train.objective {
        return cfg_err("compared runs must use opposite objectives");
    }
    let other_pair = load_pair(&other_dir.join("weights"), &q.spec)?;
    let other_values = game::batch_values(&q.spec, &other_pair, &p.eval.points())?;
    let (lower, upper) =
        if p.train.objective == Objective::InfSup { (values, &other_values[..]) } else { (&other_values[..], values) };
    let tol = r.config.eval.compare_tol.unwrap_or(0.05);
    let violations = lower.iter().zip(upper).filter(|(m, u)| **m > **u + tol).count();
    let frac = violations as f64 / lower.len() as f64;
    let table = format!(
        "this_objective,other_run,tol,nodes,violations,violation_fraction\n{},{},{tol},{},{violations},{frac:.16e}\n",
        objective_name(p.train.objective),
        other_dir.display(),
        lower.len()
    );
    fs::write(l.tables.join("compare.csv"), table)?;
    println!("lower <= upper + {tol} fails on {violations} of {} nodes (fraction {frac:.4})", lower.len());
    Ok(())
}

pub fn oracle(r: &Resolved, task: Option<&str>) -> Result<()> {
    let task = task.or(r.config.oracle.task.as_deref()).unwrap_or("dpp");
    match task {
        "dpp" => oracle_dpp(r),
        "theorem1" => oracle_theorem1(r),
        "rate-check" => oracle_rate(r),
        _ => cfg_err(format!("unknown oracle task '{task}' (expected dpp, theorem1 or rate-check)")),
    }
}

fn oracle_dpp(r: &Resolved) -> Result<()> {
    let p = &r.preset;
    let l = layout(r)?;
    let v = oracle::dpp_value(&p.spec, &p.dpp)?;
    let mut csv = Vec::new();
    v.write_csv(&mut csv)?;
    fs::write(l.grids.join("dpp_v0.csv"), csv)?;
    let values: Vec<f64> = (0..p.eval.len()).map(|n| v.interpolate(&p.eval.point(n))).collect();
    fs::write(l.grids.join("dpp_eval.csv"), level_set(p, values.clone())?)?;
    println!("V0 on a {} grid ({} nodes) written to {}", p.dpp.res, v.len(), l.grids.display());
    if !matches!(p.reference, Reference::GridDpp | Reference::None) {
        let reference = reference(p)?;
        let e = metrics::error_report(&values, &reference, r.eta)?;
        fs::write(l.tables.join("oracle_report.csv"), format!("metric,value\ne_l1_loc,{:.16e}\ne_l1,{:.16e}\n", e.local_l1, e.global_l1))?;
        println!("e_l1_loc against the closed form = {:.6e}", e.local_l1);
    }
    Ok(())
}

fn oracle_theorem1(r: &Resolved) -> Result<()> {
    let o = &r.config.oracle;
    let instances = o.instances.unwrap_or(1);
    let budget = o.budget.unwrap_or(2e6);
    if instances == 0 || !(budget >= 1.0) {
        return cfg_err("theorem1 needs instances >= 1 and budget >= 1");
    }
    let l = layout(r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
    let mut table = String::from("instance,steps,na,nb,v0,v_bar,v_tilde,open_loop,max_gap\n");
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let g = oracle::random_finite_game(&mut rng, budget);
        let t = oracle::theorem1_enumerate(&g)?;
        worst = worst.max(t.max_gap());
        writeln!(
            table,
            "{i},{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:e}",
            g.steps,
            g.na,
            g.nb,
            t.v0,
            t.v_bar,
            t.v_tilde,
            t.open_loop,
            t.max_gap()
        )
        .unwrap();
        if instances == 1 {
            println!("V0 = {:.12}  V_bar = {:.12}  V_tilde = {:.12}", t.v0, t.v_bar, t.v_tilde);
        }
    }
    fs::write(l.tables.join("theorem1.csv"), table)?;
    println!("{instances} instance(s), max pairwise gap {worst:e}");
    Ok(())
}

fn oracle_rate(r: &Resolved) -> Result<()> {
    let p = &r.preset;
    let o = &r.config.oracle;
    let steps = o.rate_steps.clone().unwrap_or_else(|| vec![2, 4, 8, 16]);
    let reference_steps = o.reference_steps.unwrap_or(64);
    let l = layout(r)?;
    let rep = oracle::o_tau_rate_check(&p.spec, &steps, reference_steps, &p.dpp, &p.eval)?;
    let mut table = String::from("N,dt,error\n");
    for ((n, dt), e) in rep.steps.iter().zip(&rep.dts).zip(&rep.errors) {
        writeln!(table, "{n},{dt:.16e},{e:.16e}").unwrap();
    }
    fs::write(l.tables.join("rate.csv"), table)?;
    fs::write(l.tables.join("rate_slope.csv"), format!("reference_N,slope\n{reference_steps},{:.16e}\n", rep.slope))?;
    println!("fitted slope {:.4} over N = {:?} against N = {reference_steps}", rep.slope, rep.steps);
    Ok(())
}

pub fn bench(r: &Resolved) -> Result<()> {
    let b = &r.config.bench;
    let kind = match (&b.kind, &b.steps, &b.algorithms) {
        (Some(k), _, _) => k.as_str(),
        (None, Some(_), None) => "steps",
        (None, None, Some(_)) => "algorithms",
        _ => return cfg_err("bench needs 'kind' = \"steps\" or \"algorithms\""),
    };
    match kind {
        "steps" => bench_steps(r),
        "algorithms" => bench_algorithms(r),
        _ => cfg_err(format!("unknown bench kind '{kind}' (expected steps or algorithms)")),
    }
}

fn bench_steps(r: &Resolved) -> Result<()> {
    let steps = r.config.bench.steps.clone().unwrap_or_else(|| vec![2, 4, 8, 16]);
    if steps.is_empty() || steps.contains(&0) {
        return cfg_err("bench.steps must be a nonempty list of positive step counts");
    }
    let l = layout(r)?;
    let mut errors = Vec::new();
    for &n in &steps {
        let mut p = r.preset.clone();
        p.spec.steps = n;
        let tr = game::train(&p.spec, &p.train, p.mode, r.seed)?;
        let values = game::batch_values(&p.spec, &tr.pair, &p.eval.points())?;
        let e = metrics::local_l1_error(&values, &reference(&p)?, r.eta)?;
        fs::write(l.grids.join(format!("steps_N{n}.csv")), level_set(&p, values)?)?;
        println!("N = {n:>3}: e_l1_loc = {e:.4e}");
        errors.push(e);
    }
    let mut table = Vec::new();
    metrics::write_order_table(&mut table, &steps, &errors)?;
    fs::write(l.tables.join("steps.csv"), table)?;
    if steps.len() >= 2 {
        let dts: Vec<f64> = steps.iter().map(|&n| r.preset.spec.horizon / n as f64).collect();
        println!("fitted order {:.3}", metrics::fitted_order(&dts, &errors)?);
    }
    Ok(())
}

fn bench_algorithms(r: &Resolved) -> Result<()> {
    let b = &r.config.bench;
    let names = b.algorithms.clone().unwrap_or_else(|| ["sgda", "agda", "gamma-gda", "pote+adam", "pote+sg"].map(String::from).to_vec());
    if names.is_empty() {
        return cfg_err("bench.algorithms must not be empty");
    }
    let algs = names.iter().map(|n| parse_algorithm(n)).collect::<Result<Vec<_>>>()?;
    let seeds = b.seeds.unwrap_or(10);
    let threshold = b.success.unwrap_or(0.1);
    if seeds == 0 {
        return cfg_err("bench.seeds must be at least 1");
    }
    let l = layout(r)?;
    let reference = reference(&r.preset)?;
    let mut table = String::from("algorithm,successes,runs\n");
    let mut runs = String::from("algorithm,seed,e_l1_loc\n");
    for (name, (alg, opt)) in names.iter().zip(algs) {
        let mut p = r.preset.clone();
        p.train.minimax.algorithm = alg;
        p.train.minimax.optimizer = opt;
        let mut ok = 0;
        for k in 0..seeds {
            let seed = r.seed.wrapping_add(k);
            let tr = game::train(&p.spec, &p.train, p.mode, seed)?;
            let values = game::batch_values(&p.spec, &tr.pair, &p.eval.points())?;
            let e = metrics::local_l1_error(&values, &reference, r.eta)?;
            writeln!(runs, "{name},{seed},{e:.16e}").unwrap();
            if e <= threshold {
                ok += 1;
            }
        }
        writeln!(table, "{name},{ok},{seeds}").unwrap();
        println!("{name:<12} {ok}/{seeds} runs with e_l1_loc <= {threshold}");
    }
    fs::write(l.tables.join("success.csv"), table)?;
    fs::write(l.tables.join("runs.csv"), runs)?;
    Ok(())
}

//! Reference values: grid dynamic programming, closed-form values of the
//! planar examples, and exhaustive enumeration on finite games.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::substep_path;
use crate::error::{config, Error, Result};
use crate::game::{BoxDomain, ControlSet, GameSpec, Objective};
use crate::metrics::{fitted_order, EvalGrid};

/// Values on a Cartesian grid, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridValue {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub res: Vec<usize>,
    pub values: Vec<f64>,
    strides: Vec<usize>,
}

impl GridValue {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, res: Vec<usize>) -> Result<Self> {
        BoxDomain::new(lo.clone(), hi.clone())?;
        if res.len() != lo.len() || res.iter().any(|&r| r < 2) {
            return config("grid needs at least 2 nodes on every axis");
        }
        let mut strides = vec![1; res.len()];
        for k in (0..res.len() - 1).rev() {
            strides[k] = strides[k + 1] * res[k + 1];
        }
        let n = strides[0] * res[0];
        Ok(GridValue { lo, hi, res, values: vec![0.0; n], strides })
    }

    pub fn on_box(domain: &BoxDomain, res: usize) -> Result<Self> {
        GridValue::new(domain.lo.clone(), domain.hi.clone(), vec![res; domain.dim()])
    }

    pub fn from_fn(mut self, f: impl Fn(&[f64]) -> f64) -> Self {
        let mut x = vec![0.0; self.dim()];
        for n in 0..self.len() {
            self.node_into(n, &mut x);
            self.values[n] = f(&x);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.res.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / (self.res[k] - 1) as f64
    }

    pub fn node_into(&self, n: usize, x: &mut [f64]) {
        let mut rem = n;
        for k in 0..self.dim() {
            let i = rem / self.strides[k];
            rem %= self.strides[k];
            x[k] = self.lo[k] + self.spacing(k) * i as f64;
        }
    }

    pub fn node(&self, n: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_into(n, &mut x);
        x
    }

    /// Multilinear interpolation; points outside the box are clamped to it.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = 0;
        let mut frac = [0.0f64; 8];
        let mut step = [0usize; 8];
        assert!(d <= 8, "interpolation supports up to 8 dimensions");
        for k in 0..d {
            let h = self.spacing(k);
            let mut t = ((x[k] - self.lo[k]) / h).clamp(0.0, (self.res[k] - 1) as f64);
            // Node coordinates do not round-trip exactly through (x − lo)/h.
            let r = t.round();
            if (t - r).abs() < 1e-9 {
                t = r;
            }
            let mut i = t.floor() as usize;
            if i >= self.res[k] - 1 {
                i = self.res[k] - 2;
            }
            frac[k] = t - i as f64;
            base += i * self.strides[k];
            step[k] = self.strides[k];
        }
        if d == 2 {
            let v = &self.values;
            let (fx, fy) = (frac[0], frac[1]);
            let (sx, sy) = (step[0], step[1]);
            let a = v[base] + fy * (v[base + sy] - v[base]);
            let b = v[base + sx] + fy * (v[base + sx + sy] - v[base + sx]);
            return a + fx * (b - a);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = base;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    w *= frac[k];
                    idx += step[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                acc += w * self.values[idx];
            }
        }
        acc
    }

    /// Metadata line, header, then one row per node.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        let res: Vec<String> = self.res.iter().map(|r| r.to_string()).collect();
        writeln!(w, "# lo={} hi={} res={}", join(&self.lo), join(&self.hi), res.join(","))?;
        let header: Vec<String> = (1..=self.dim()).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},value", header.join(","))?;
        let mut x = vec![0.0; self.dim()];
        for n in 0..self.len() {
            self.node_into(n, &mut x);
            for c in &x {
                write!(w, "{c:.16e},")?;
            }
            writeln!(w, "{:.16e}", self.values[n])?;
        }
        Ok(())
    }
}

/// Finite subsets of the control sets.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
}

fn linspace(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect()
}

/// `points` nodes per axis for cubes and intervals; for planar balls,
/// `points` angles on each of `points / 4` rings plus the center.
pub fn discretize(set: ControlSet, points: usize) -> Vec<Vec<f64>> {
    let points = points.max(1);
    match set {
        ControlSet::Cube(n) | ControlSet::Ball(n) if n == 1 => linspace(points).into_iter().map(|v| vec![v]).collect(),
        ControlSet::Cube(n) => {
            let axis = linspace(points);
            let mut out: Vec<Vec<f64>> = vec![vec![]];
            for _ in 0..n {
                out = out.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
            }
            out
        }
        ControlSet::Ball(2) => {
            let rings = (points / 4).max(1);
            let mut out = vec![vec![0.0, 0.0]];
            for r in 1..=rings {
                let rad = r as f64 / rings as f64;
                for j in 0..points {
                    let t = 2.0 * PI * j as f64 / points as f64;
                    out.push(vec![rad * t.cos(), rad * t.sin()]);
                }
            }
            out
        }
        ControlSet::Ball(n) => discretize(ControlSet::Cube(n), points)
            .into_iter()
            .filter(|p| p.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12)
            .collect(),
    }
}

impl ControlGrid {
    pub fn for_spec(spec: &GameSpec, points: usize) -> Self {
        ControlGrid { a: discretize(spec.control_a, points), b: discretize(spec.control_b, points) }
    }
}

/// Grid and solver settings for [`grid_dpp_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct DppConfig {
    pub res: usize,
    pub controls: usize,
    /// Fraction of each side added on both ends of Ω.
    pub margin: f64,
    pub objective: Objective,
    pub workers: usize,
}

impl Default for DppConfig {
    fn default() -> Self {
        DppConfig { res: 201, controls: 41, margin: 0.1, objective: Objective::InfSup, workers: 1 }
    }
}

struct Transition {
    ai: usize,
    bi: usize,
    /// Substep offsets Y_j − x for state-independent dynamics.
    offsets: Option<Vec<Vec<f64>>>,
}

/// Backward recursion V_k(x) = max_b min_a (G(x, a, b) ∨ V_{k+1}(F(x, a, b)))
/// from V_N = φ ∨ g, with the same step scheme as the rollouts. Returns
/// V_0, ..., V_N (index k holds V_k). With `SupInf` the roles of max and
/// min are exchanged, the minimizer keeping the information advantage.
///
/// States leaving the grid box are clamped to it.
pub fn grid_dpp_solve(spec: &GameSpec, grid: &GridValue, controls: &ControlGrid, objective: Objective, workers: usize) -> Result<Vec<GridValue>> {
    let mut check = spec.clone();
    check.steps = check.steps.max(1);
    check.validate()?;
    if grid.dim() != spec.state_dim() {
        return config("grid dimension differs from the state dimension");
    }
    if controls.a.is_empty() || controls.b.is_empty() {
        return config("control grids must be nonempty");
    }
    let sign = match objective {
        Objective::InfSup => 1.0,
        Objective::SupInf => -1.0,
    };
    let terminal = |x: &[f64]| {
        let p = spec.phi.eval(x);
        spec.g.as_ref().map_or(p, |g| g.eval(x).max(p))
    };
    let mut levels = vec![grid.clone().from_fn(terminal)];
    if spec.steps == 0 {
        return Ok(levels);
    }
    let dt = spec.dt();
    let independent = spec.dynamics.is_state_independent();
    let d = spec.state_dim();
    let origin = vec![0.0; d];
    let mut pairs = Vec::with_capacity(controls.a.len() * controls.b.len());
    for bi in 0..controls.b.len() {
        for ai in 0..controls.a.len() {
            let offsets = independent.then(|| substep_path(&spec.dynamics, spec.scheme, &origin, &controls.a[ai], &controls.b[bi], dt));
            pairs.push(Transition { ai, bi, offsets });
        }
    }
    let na = controls.a.len();
    // G(x, a, b) does not depend on the level; it is cached per node only
    // when it is cheap to hold.
    for _ in 0..spec.steps {
        let next = levels.last().unwrap();
        let mut cur = grid.clone();
        let solve_node = |n: usize, x: &mut Vec<f64>, y: &mut Vec<f64>| -> f64 {
            next.node_into(n, x);
            let mut best = f64::NEG_INFINITY;
            for bpairs in pairs.chunks(na) {
                let mut worst = f64::INFINITY;
                for t in bpairs {
                    let (end, gmax) = match &t.offsets {
                        Some(off) => {
                            let mut gm: Option<f64> = None;
                            if let Some(g) = &spec.g {
                                for o in &off[..off.len() - 1] {
                                    for k in 0..d {
                                        y[k] = x[k] + o[k];
                                    }
                                    let v = g.eval(y);
                                    gm = Some(gm.map_or(v, |m: f64| m.max(v)));
                                }
                            }
                            let last = &off[off.len() - 1];
                            for k in 0..d {
                                y[k] = x[k] + last[k];
                            }
                            (next.interpolate(y), gm)
                        }
                        None => {
                            let path = substep_path(&spec.dynamics, spec.scheme, x, &controls.a[t.ai], &controls.b[t.bi], dt);
                            let gm = spec.g.as_ref().map(|g| path[..path.len() - 1].iter().map(|p| g.eval(p)).fold(f64::NEG_INFINITY, f64::max));
                            (next.interpolate(&path[path.len() - 1]), gm)
                        }
                    };
                    let v = sign * gmax.map_or(end, |g| g.max(end));
                    if v < worst {
                        worst = v;
                        if worst <= best {
                            break;
                        }
                    }
                }
                if worst > best {
                    best = worst;
                }
            }
            sign * best
        };
        let n = cur.len();
        let workers = workers.max(1).min(n);
        let chunk = n.div_ceil(workers);
        std::thread::scope(|sc| {
            let solve_node = &solve_node;
            let handles: Vec<_> = cur
                .values
                .chunks_mut(chunk)
                .enumerate()
                .map(|(c, out)| {
                    sc.spawn(move || {
                        let mut x = vec![0.0; d];
                        let mut y = vec![0.0; d];
                        for (i, o) in out.iter_mut().enumerate() {
                            *o = solve_node(c * chunk + i, &mut x, &mut y);
                        }
                    })
                })
                .collect();
            for h in handles {
                h.join().expect("grid worker panicked");
            }
        });
        if cur.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Rollout { step: spec.steps - levels.len(), detail: "grid value is not finite".into() });
        }
        levels.push(cur);
    }
    levels.reverse();
    Ok(levels)
}

/// V_0 on the grid over Ω enlarged by `cfg.margin`.
pub fn dpp_value(spec: &GameSpec, cfg: &DppConfig) -> Result<GridValue> {
    let grid = GridValue::on_box(&spec.omega.enlarged(cfg.margin), cfg.res)?;
    let controls = ControlGrid::for_spec(spec, cfg.controls);
    Ok(grid_dpp_solve(spec, &grid, &controls, cfg.objective, cfg.workers)?.swap_remove(0))
}

pub const EX1_T0: f64 = 0.25;
pub const EX1_CENTER: f64 = 2.0;
pub const EX1_RADIUS: f64 = 1.2;

/// ū(s, x) = clamp(max(|‖x‖ − 2| + c s, 2π|θ − θ_p|) − 1.2, −0.5, 0.5) with
/// θ the polar angle of x and θ_p its projection on [−s, s]. The value at
/// time-to-go t is ū(t + t₀, x) with t₀ = 0.25.
pub fn analytic_example1(s: f64, x: &[f64], c: f64) -> f64 {
    let r = x[0].hypot(x[1]);
    let theta = x[1].atan2(x[0]);
    let theta_p = theta.clamp(-s, s);
    let radial = (r - EX1_CENTER).abs() + c * s;
    let angular = 2.0 * PI * (theta - theta_p).abs();
    (radial.max(angular) - EX1_RADIUS).clamp(-0.5, 0.5)
}

fn plane_cut(t: f64, x: f64, y: f64) -> f64 {
    let (x1, y1) = (1.0 - 2.0 * t, 1.0);
    let (x2, y2) = (1.0 + 2.0 * t, 1.0 - 2.0 * t);
    let (x3, y3, z3) = (1.5 + 2.0 * t, 1.5 - 2.0 * t, 0.5);
    let p = z3 / ((x2 - x1) * (y3 - y1) - (y2 - y1) * (x3 - x1));
    p * ((x2 - x1) * (y - y1) - (y2 - y1) * (x - x1))
}

/// Value of the second planar example at time-to-go `t`.
pub fn analytic_example2(t: f64, x: &[f64]) -> f64 {
    let (px, py) = (x[0], x[1]);
    let r1 = (-1.0 - 2.0 * t - px).max(px - (1.0 + 2.0 * t));
    let r2 = (-1.0 - py).max(py - 1.0);
    if t <= 0.0 {
        return r1.max(r2).clamp(-0.5, 0.5);
    }
    let r3 = plane_cut(t, px, py);
    let r4 = plane_cut(t, -px, -py);
    r1.max(r2).max(r3).max(r4).clamp(-0.5, 0.5)
}

/// Values of the symmetric example at time-to-go `t`: the lower value
/// (maximizer first) or, with `upper`, the upper value.
pub fn analytic_example3(t: f64, x: &[f64], upper: bool) -> f64 {
    let (px, py) = (x[0], x[1]);
    let r1 = if upper { (-1.0 - px).max(px - (1.0 - 2.0 * t)) } else { (-1.0 - 2.0 * t - px).max(px - 1.0) };
    let r2 = (-1.0 - py).max(py - 1.0);
    if t <= 0.0 {
        return r1.max(r2).clamp(-0.5, 0.5);
    }
    let r3 = plane_cut(t, -px, py);
    let r4 = plane_cut(t, -px, -py);
    r1.max(r2).max(r3).max(r4).clamp(-0.5, 0.5)
}

/// A deterministic finite game: states `0..states`, controls `0..na` and
/// `0..nb`, transition `next[(s, a, b)]` and stage cost `cost[(s, a, b)]`,
/// terminal cost `phi[s]`. The payoff is max_k cost_k ∨ φ(x_N).
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteGame {
    pub states: usize,
    pub na: usize,
    pub nb: usize,
    pub steps: usize,
    pub next: Vec<usize>,
    pub cost: Vec<f64>,
    pub phi: Vec<f64>,
    pub x0: usize,
}

pub const ENUMERATION_LIMIT: f64 = 1e7;

#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report {
    /// Infimum over non-anticipative strategies of the supremum over controls.
    pub v0: f64,
    /// Alternating max-min recursion.
    pub v_bar: f64,
    /// Infimum over per-step feedback maps (x, b) ↦ a.
    pub v_tilde: f64,
    /// min over open-loop a of max over b, for comparison.
    pub open_loop: f64,
    pub strategies: f64,
    pub feedback_maps: f64,
}

impl Theorem1Report {
    pub fn max_gap(&self) -> f64 {
        (self.v0 - self.v_bar).abs().max((self.v0 - self.v_tilde).abs()).max((self.v_bar - self.v_tilde).abs())
    }
}

/// Increments a mixed-radix counter; false once it wraps around.
fn bump(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

impl FiniteGame {
    fn idx(&self, s: usize, a: usize, b: usize) -> usize {
        (s * self.na + a) * self.nb + b
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states * self.na * self.nb;
        if self.states == 0 || self.na == 0 || self.nb == 0 {
            return config("finite game needs states and controls");
        }
        if self.next.len() != n || self.cost.len() != n || self.phi.len() != self.states || self.x0 >= self.states {
            return config("finite game tables have wrong sizes");
        }
        if self.next.iter().any(|&s| s >= self.states) {
            return config("transition leaves the state set");
        }
        Ok(())
    }

    /// Random game; transitions uniform, costs uniform in [−1, 1].
    pub fn random(rng: &mut ChaCha8Rng, states: usize, na: usize, nb: usize, steps: usize) -> Self {
        let n = states * na * nb;
        FiniteGame {
            states,
            na,
            nb,
            steps,
            next: (0..n).map(|_| rng.gen_range(0..states)).collect(),
            cost: (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            phi: (0..states).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            x0: 0,
        }
    }

    /// Reachable states per step, in increasing order.
    pub fn reachable(&self) -> Vec<Vec<usize>> {
        let mut out = vec![vec![self.x0]];
        for _ in 0..self.steps {
            let mut seen = vec![false; self.states];
            for &s in out.last().unwrap() {
                for a in 0..self.na {
                    for b in 0..self.nb {
                        seen[self.next[self.idx(s, a, b)]] = true;
                    }
                }
            }
            out.push((0..self.states).filter(|&s| seen[s]).collect());
        }
        out
    }

    /// |A| to the number of adverse histories b_0..b_k, k < N.
    pub fn strategy_count(&self) -> f64 {
        let entries: f64 = (1..=self.steps).map(|k| (self.nb as f64).powi(k as i32)).sum();
        (self.na as f64).powf(entries)
    }

    pub fn feedback_count(&self) -> f64 {
        let entries: usize = self.reachable()[..self.steps].iter().map(|r| r.len() * self.nb).sum();
        (self.na as f64).powi(entries as i32)
    }

    fn alternating(&self, k: usize, s: usize) -> f64 {
        if k == self.steps {
            return self.phi[s];
        }
        let mut best = f64::NEG_INFINITY;
        for b in 0..self.nb {
            let mut worst = f64::INFINITY;
            for a in 0..self.na {
                let i = self.idx(s, a, b);
                worst = worst.min(self.cost[i].max(self.alternating(k + 1, self.next[i])));
            }
            best = best.max(worst);
        }
        best
    }

    /// sup over b sequences of the payoff, with a chosen by `pick(k, s, history, b)`.
    fn sup_over_b(&self, k: usize, s: usize, hist: usize, run: f64, pick: &dyn Fn(usize, usize, usize, usize) -> usize) -> f64 {
        if k == self.steps {
            return run.max(self.phi[s]);
        }
        let mut best = f64::NEG_INFINITY;
        for b in 0..self.nb {
            let h = hist * self.nb + b;
            let a = pick(k, s, h, b);
            let i = self.idx(s, a, b);
            best = best.max(self.sup_over_b(k + 1, self.next[i], h, run.max(self.cost[i]), pick));
        }
        best
    }

    fn open_loop(&self) -> f64 {
        let mut a_seq = vec![0usize; self.steps];
        let mut best = f64::INFINITY;
        loop {
            let v = self.sup_over_b(0, self.x0, 0, f64::NEG_INFINITY, &|k, _, _, _| a_seq[k]);
            best = best.min(v);
            if !bump(&mut a_seq, self.na) {
                break;
            }
        }
        best
    }
}

/// V₀ by enumerating non-anticipative strategies, V̄₀ by the alternating
/// recursion, Ṽ₀ by enumerating feedback tables on the reachable states.
pub fn theorem1_enumerate(game: &FiniteGame) -> Result<Theorem1Report> {
    game.validate()?;
    let strategies = game.strategy_count();
    let feedback_maps = game.feedback_count();
    if strategies > ENUMERATION_LIMIT || feedback_maps > ENUMERATION_LIMIT {
        return Err(Error::Size(format!(
            "{strategies:e} strategies and {feedback_maps:e} feedback maps exceed the limit {ENUMERATION_LIMIT:e}"
        )));
    }
    let nb = game.nb;
    // History tables: a_k depends on (b_0, ..., b_k), a prefix number h < nb^(k+1).
    let mut offsets = vec![0usize; game.steps + 1];
    for k in 0..game.steps {
        offsets[k + 1] = offsets[k] + nb.pow(k as u32 + 1);
    }
    let mut table = vec![0usize; offsets[game.steps]];
    let mut v0 = f64::INFINITY;
    loop {
        let v = game.sup_over_b(0, game.x0, 0, f64::NEG_INFINITY, &|k, _, h, _| table[offsets[k] + h]);
        v0 = v0.min(v);
        if !bump(&mut table, game.na) {
            break;
        }
    }
    let reach = game.reachable();
    let mut pos = vec![vec![usize::MAX; game.states]; game.steps];
    let mut foff = vec![0usize; game.steps + 1];
    for k in 0..game.steps {
        for (j, &s) in reach[k].iter().enumerate() {
            pos[k][s] = j;
        }
        foff[k + 1] = foff[k] + reach[k].len() * nb;
    }
    let mut fb = vec![0usize; foff[game.steps]];
    let mut v_tilde = f64::INFINITY;
    loop {
        let v = game.sup_over_b(0, game.x0, 0, f64::NEG_INFINITY, &|k, s, _, b| fb[foff[k] + pos[k][s] * nb + b]);
        v_tilde = v_tilde.min(v);
        if !bump(&mut fb, game.na) {
            break;
        }
    }
    Ok(Theorem1Report {
        v0,
        v_bar: game.alternating(0, game.x0),
        v_tilde,
        open_loop: game.open_loop(),
        strategies,
        feedback_maps,
    })
}

/// A random instance whose enumeration stays below `budget` payoff evaluations.
pub fn random_finite_game(rng: &mut ChaCha8Rng, budget: f64) -> FiniteGame {
    loop {
        let steps = rng.gen_range(1..=3);
        let na = rng.gen_range(2..=4);
        let nb = rng.gen_range(2..=4);
        let states = rng.gen_range(1..=4);
        let game = FiniteGame::random(rng, states, na, nb, steps);
        let leaves = (nb as f64).powi(steps as i32);
        if (game.strategy_count() + game.feedback_count()) * leaves <= budget {
            return game;
        }
    }
}

/// One step, A = B = {−1, 1}, payoff 1 − |a − b|: the minimizer wins only
/// when it sees b, so open-loop play is strictly worse.
pub fn matching_pennies_game() -> FiniteGame {
    let mut cost = Vec::new();
    for a in [-1.0f64, 1.0] {
        for b in [-1.0f64, 1.0] {
            cost.push(1.0 - (a - b).abs());
        }
    }
    FiniteGame { states: 1, na: 2, nb: 2, steps: 1, next: vec![0; 4], cost, phi: vec![-1.0], x0: 0 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    pub steps: Vec<usize>,
    pub dts: Vec<f64>,
    pub errors: Vec<f64>,
    pub slope: f64,
}

/// Max-node gap between V₀ at each N and a fine-N reference, with the
/// fitted log-log slope in Δt.
pub fn o_tau_rate_check(spec: &GameSpec, steps: &[usize], reference_steps: usize, dpp: &DppConfig, eval: &EvalGrid) -> Result<RateReport> {
    if steps.len() < 2 {
        return Err(Error::Metric("a slope needs at least two step counts".into()));
    }
    let solve = |n: usize| dpp_value(&GameSpec { steps: n, ..spec.clone() }, dpp);
    let reference = solve(reference_steps)?;
    let points: Vec<Vec<f64>> = (0..eval.len()).map(|n| eval.point(n)).collect();
    let ref_vals: Vec<f64> = points.iter().map(|p| reference.interpolate(p)).collect();
    let mut errors = Vec::new();
    for &n in steps {
        let v = solve(n)?;
        let e = points.iter().zip(&ref_vals).map(|(p, r)| (v.interpolate(p) - r).abs()).fold(0.0, f64::max);
        errors.push(e);
    }
    let dts: Vec<f64> = steps.iter().map(|&n| spec.horizon / n as f64).collect();
    let slope = fitted_order(&dts, &errors)?;
    Ok(RateReport { steps: steps.to_vec(), dts, errors, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Dynamics, StepScheme};
    use crate::game::CostFn;
    use rand::SeedableRng;

    fn box_phi() -> CostFn {
        CostFn::Clamp(Box::new(CostFn::Cube { dims: vec![0, 1], center: vec![0.0, 0.0], radius: 1.0 }), -0.5, 0.5)
    }

    fn planar(dynamics: Dynamics, g: Option<CostFn>, steps: usize) -> GameSpec {
        GameSpec {
            dynamics,
            phi: box_phi(),
            g,
            horizon: 0.4,
            steps,
            scheme: StepScheme::default(),
            omega: BoxDomain::cube(2, 3.0),
            control_a: ControlSet::Cube(1),
            control_b: ControlSet::Cube(1),
        }
    }

    fn obstacle() -> CostFn {
        CostFn::Clamp(Box::new(CostFn::Neg(Box::new(CostFn::Ball { dims: vec![0, 1], center: vec![0.5, 1.5], radius: 0.5 }))), -0.2, 0.2)
    }

    #[test]
    fn interpolation_exact_at_nodes_and_linear() {
        let g = GridValue::new(vec![-1.0, 0.0, 2.0], vec![1.0, 3.0, 4.0], vec![5, 4, 3]).unwrap();
        assert_eq!(g.len(), 60);
        let lin = |x: &[f64]| 2.0 * x[0] - x[1] + 0.5 * x[2] + 1.0;
        let g = g.from_fn(lin);
        for n in 0..g.len() {
            assert_eq!(g.interpolate(&g.node(n)), g.values[n]);
        }
        let p = [0.3, 1.7, 2.9];
        assert!((g.interpolate(&p) - lin(&p)).abs() < 1e-12);
        assert!((g.interpolate(&[5.0, 1.7, 2.9]) - lin(&[1.0, 1.7, 2.9])).abs() < 1e-12);
        let lin2 = |x: &[f64]| 2.0 * x[0] - x[1] + 1.0;
        let q = GridValue::new(vec![0.0, 0.0], vec![1.0, 2.0], vec![3, 5]).unwrap().from_fn(lin2);
        assert!((q.interpolate(&[0.77, 1.31]) - lin2(&[0.77, 1.31])).abs() < 1e-12);
        assert!(GridValue::new(vec![0.0], vec![1.0], vec![1]).is_err());
    }

    #[test]
    fn control_grids_stay_inside() {
        assert_eq!(discretize(ControlSet::Cube(1), 41).len(), 41);
        assert_eq!(discretize(ControlSet::Cube(2), 5).len(), 25);
        let ball = discretize(ControlSet::Ball(2), 16);
        assert_eq!(ball.len(), 1 + 4 * 16);
        for p in ball.iter().chain(&discretize(ControlSet::Ball(3), 5)) {
            assert!(p.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn still_dynamics_keep_terminal() {
        let spec = planar(Dynamics::zero(2, 1, 1), Some(obstacle()), 3);
        let grid = GridValue::on_box(&spec.omega, 21).unwrap();
        let levels = grid_dpp_solve(&spec, &grid, &ControlGrid::for_spec(&spec, 5), Objective::InfSup, 1).unwrap();
        assert_eq!(levels.len(), 4);
        for n in 0..grid.len() {
            let x = grid.node(n);
            assert_eq!(levels[0].values[n], box_phi().eval(&x).max(obstacle().eval(&x)));
        }
        let none = GameSpec { steps: 0, ..spec };
        let l = grid_dpp_solve(&none, &grid, &ControlGrid::for_spec(&none, 5), Objective::InfSup, 1).unwrap();
        assert_eq!(l.len(), 1);
    }

    #[test]
    fn dpp_above_obstacle_and_monotone() {
        let spec = planar(Dynamics::Ex2, Some(obstacle()), 3);
        let grid = GridValue::on_box(&spec.omega.enlarged(0.1), 41).unwrap();
        let cg = ControlGrid::for_spec(&spec, 9);
        let base = grid_dpp_solve(&spec, &grid, &cg, Objective::InfSup, 1).unwrap();
        let raised = GameSpec { g: Some(CostFn::Max(vec![obstacle(), CostFn::Coord(0).shifted(-0.5)])), ..spec.clone() };
        let high = grid_dpp_solve(&raised, &grid, &cg, Objective::InfSup, 1).unwrap();
        for k in 0..base.len() {
            for n in 0..grid.len() {
                let x = grid.node(n);
                assert!(base[k].values[n] >= obstacle().eval(&x));
                assert!(high[k].values[n] >= base[k].values[n]);
            }
        }
        let parallel = grid_dpp_solve(&spec, &grid, &cg, Objective::InfSup, 3).unwrap();
        assert_eq!(parallel, base);
    }

    #[test]
    fn state_dependent_path_matches_translation() {
        // The same affine field, once flagged state-independent and once not.
        let affine = |m: Vec<f64>| Dynamics::Affine { d: 2, na: 1, nb: 1, m, pa: vec![1.0, 1.0], pb: vec![-2.0, 1.0], c: vec![0.0; 2] };
        let fast = planar(affine(vec![0.0; 4]), Some(obstacle()), 2);
        let slow = planar(affine(vec![0.0, 0.0, 0.0, 1e-300]), Some(obstacle()), 2);
        assert!(fast.dynamics.is_state_independent() && !slow.dynamics.is_state_independent());
        let grid = GridValue::on_box(&fast.omega.enlarged(0.1), 31).unwrap();
        let cg = ControlGrid::for_spec(&fast, 7);
        let a = grid_dpp_solve(&fast, &grid, &cg, Objective::InfSup, 1).unwrap();
        let b = grid_dpp_solve(&slow, &grid, &cg, Objective::InfSup, 1).unwrap();
        for (u, v) in a[0].values.iter().zip(&b[0].values) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn example2_terminal_limit() {
        assert_eq!(analytic_example2(0.0, &[0.5, 0.0]), -0.5);
        assert!((analytic_example2(1e-9, &[0.5, 0.0]) + 0.5).abs() < 1e-6);
        for i in 0..21 {
            for j in 0..21 {
                let x = [-3.0 + 0.3 * i as f64, -3.0 + 0.3 * j as f64];
                let v = analytic_example2(0.4, &x);
                assert!(v.abs() <= 0.5);
                assert!(analytic_example3(0.4, &x, true) >= analytic_example3(0.4, &x, false));
                assert_eq!(analytic_example3(0.0, &x, true), box_phi().eval(&x));
                assert_eq!(analytic_example2(0.0, &x), box_phi().eval(&x));
            }
        }
    }

    #[test]
    fn example1_terminal_and_bounds() {
        let phi = CostFn::RotatingTarget { s: EX1_T0, c: 0.3, center: EX1_CENTER, radius: EX1_RADIUS, lo: -0.5, hi: 0.5 };
        for i in 0..25 {
            let x = [-3.0 + 0.25 * i as f64, 1.5 - 0.13 * i as f64];
            let v = analytic_example1(EX1_T0, &x, 0.3);
            assert_eq!(v, phi.eval(&x));
            assert!(analytic_example1(0.6 * PI + EX1_T0, &x, 0.3).abs() <= 0.5);
        }
    }

    #[test]
    fn example2_dpp_close_to_formula() {
        // Coarse version of the full-resolution acceptance check.
        let spec = planar(Dynamics::Ex2, None, 4);
        let v = dpp_value(&spec, &DppConfig { res: 81, controls: 11, ..Default::default() }).unwrap();
        let eval = EvalGrid::square(3.0, 41);
        let (mut sum, mut n) = (0.0, 0);
        for k in 0..eval.len() {
            let p = eval.point(k);
            let r = analytic_example2(0.4, &p);
            if r.abs() <= 0.2 {
                sum += (v.interpolate(&p) - r).abs();
                n += 1;
            }
        }
        assert!(sum / n as f64 <= 0.06, "{}", sum / n as f64);
    }

    #[test]
    fn theorem1_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let g = FiniteGame::random(&mut rng, 3, 3, 3, 1);
            let r = theorem1_enumerate(&g).unwrap();
            assert_eq!(r.v0, r.v_bar);
            assert_eq!(r.v_tilde, r.v_bar);
        }
        for _ in 0..20 {
            let g = FiniteGame::random(&mut rng, 4, 2, 2, 2);
            let r = theorem1_enumerate(&g).unwrap();
            assert!(r.max_gap() <= 1e-12, "{r:?}");
            assert!(r.open_loop >= r.v0);
        }
        let r = theorem1_enumerate(&matching_pennies_game()).unwrap();
        assert_eq!((r.v0, r.v_bar, r.v_tilde), (-1.0, -1.0, -1.0));
        assert_eq!(r.open_loop, 1.0);
    }

    #[test]
    fn theorem1_size_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = FiniteGame::random(&mut rng, 4, 4, 4, 3);
        assert!(matches!(theorem1_enumerate(&g), Err(Error::Size(_))));
    }

    #[test]
    fn rate_check_needs_two_steps() {
        let spec = planar(Dynamics::Ex2, None, 2);
        let e = o_tau_rate_check(&spec, &[4], 8, &DppConfig::default(), &EvalGrid::square(1.0, 5));
        assert!(matches!(e, Err(Error::Metric(_))));
    }
}

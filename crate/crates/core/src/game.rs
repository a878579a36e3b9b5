//! Semi-discrete games, rollouts under neural feedback strategies, and the
//! global, local and reversed training schemes.
//!
//! The cost of a trajectory is the running maximum of the obstacle over all
//! substeps, joined with the terminal cost:
//! `J = max_k G(x_k, a_k, b_k) ∨ φ(x_N)`.

use std::ops::Range;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Scalar, Tape, Traced, Var};
use crate::derive_seed;
use crate::dynamics::{step_with_max, Dynamics, StepScheme};
use crate::error::{config, Error, Result};
use crate::minimax::{self, EvalCounter, MinMaxConfig, MinMaxProblem, MinMaxState, TraceRow};
use crate::nn::{Network, OutputActivation};

/// Scalar fields on the state space, composable and usable on tapes.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum CostFn {
    Constant(f64),
    Coord(usize),
    /// ‖x[dims] − center‖₂ − radius
    Ball { dims: Vec<usize>, center: Vec<f64>, radius: f64 },
    /// ‖x[dims] − center‖∞ − radius
    Cube { dims: Vec<usize>, center: Vec<f64>, radius: f64 },
    /// ‖x[first] − x[second]‖₂
    Separation { first: Vec<usize>, second: Vec<usize> },
    /// Closed-form rotating target ū(s, ·); see [`crate::oracle::analytic_example1`].
    RotatingTarget { s: f64, c: f64, center: f64, radius: f64, lo: f64, hi: f64 },
    Neg(Box<CostFn>),
    Shift(Box<CostFn>, f64),
    Clamp(Box<CostFn>, f64, f64),
    Max(Vec<CostFn>),
}

fn norm2<S: Scalar>(v: &[S]) -> S {
    let mut s = v[0] * v[0];
    for &t in &v[1..] {
        s = s + t * t;
    }
    // Keeps the square root differentiable when the argument vanishes.
    s.max_c(1e-16).sqrt()
}

impl CostFn {
    pub fn eval<S: Scalar>(&self, x: &[S]) -> S {
        match self {
            CostFn::Constant(c) => x[0].lift(*c),
            CostFn::Coord(i) => x[*i],
            CostFn::Ball { dims, center, radius } => {
                let d: Vec<S> = dims.iter().zip(center).map(|(&i, &c)| x[i].add_c(-c)).collect();
                norm2(&d).add_c(-radius)
            }
            CostFn::Cube { dims, center, radius } => {
                let mut m = x[dims[0]].add_c(-center[0]).abs();
                for (&i, &c) in dims.iter().zip(center).skip(1) {
                    m = m.max(x[i].add_c(-c).abs());
                }
                m.add_c(-radius)
            }
            CostFn::Separation { first, second } => {
                let d: Vec<S> = first.iter().zip(second).map(|(&i, &j)| x[i] - x[j]).collect();
                norm2(&d)
            }
            CostFn::RotatingTarget { s, c, center, radius, lo, hi } => {
                let r = norm2(&x[..2]);
                let theta = x[1].atan2(x[0]);
                let theta_p = theta.clamp(-s, *s);
                let radial = r.add_c(-center).abs().add_c(c * s);
                let angular = (theta - theta_p).abs().mul_c(2.0 * std::f64::consts::PI);
                radial.max(angular).add_c(-radius).clamp(*lo, *hi)
            }
            CostFn::Neg(f) => -f.eval(x),
            CostFn::Shift(f, c) => f.eval(x).add_c(*c),
            CostFn::Clamp(f, lo, hi) => f.eval(x).clamp(*lo, *hi),
            CostFn::Max(fs) => {
                let mut m = fs[0].eval(x);
                for f in &fs[1..] {
                    m = m.max(f.eval(x));
                }
                m
            }
        }
    }

    pub fn shifted(self, c: f64) -> CostFn {
        CostFn::Shift(Box::new(self), c)
    }

    /// Checks that every coordinate index is below `d` and that paired
    /// lists agree in length.
    pub fn check(&self, d: usize) -> Result<()> {
        let idx = |dims: &[usize]| dims.iter().all(|&i| i < d);
        let ok = match self {
            CostFn::Constant(_) => true,
            CostFn::Coord(i) => *i < d,
            CostFn::Ball { dims, center, .. } | CostFn::Cube { dims, center, .. } => {
                !dims.is_empty() && dims.len() == center.len() && idx(dims)
            }
            CostFn::Separation { first, second } => !first.is_empty() && first.len() == second.len() && idx(first) && idx(second),
            CostFn::RotatingTarget { lo, hi, .. } => d >= 2 && lo <= hi,
            CostFn::Neg(f) | CostFn::Shift(f, _) => return f.check(d),
            CostFn::Clamp(f, lo, hi) => {
                if !(lo <= hi) {
                    return config("clamp bounds must satisfy lo <= hi");
                }
                return f.check(d);
            }
            CostFn::Max(fs) => {
                if fs.is_empty() {
                    return config("max of an empty list");
                }
                return fs.iter().try_for_each(|f| f.check(d));
            }
        };
        if ok {
            Ok(())
        } else {
            config(format!("cost term {self:?} does not fit a {d}-dimensional state"))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return config("domain must be a nonempty box with lo < hi");
        }
        Ok(BoxDomain { lo, hi })
    }

    pub fn cube(d: usize, half: f64) -> Self {
        BoxDomain { lo: vec![-half; d], hi: vec![half; d] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Grows every side by `frac` of its length on both ends.
    pub fn enlarged(&self, frac: f64) -> Self {
        let (lo, hi) = self
            .lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| {
                let w = (b - a) * frac;
                (a - w, b + w)
            })
            .unzip();
        BoxDomain { lo, hi }
    }

    /// `m` points drawn uniformly, one per row.
    pub fn sample(&self, rng: &mut ChaCha8Rng, m: usize) -> Mat {
        let d = self.dim();
        let dists: Vec<Uniform<f64>> = self.lo.iter().zip(&self.hi).map(|(&a, &b)| Uniform::new(a, b)).collect();
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            for u in &dists {
                data.push(u.sample(rng));
            }
        }
        Mat::from_vec(m, d, data)
    }
}

/// Compact control sets: the cube [−1, 1]^n or the closed unit ball in ℝ^n.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum ControlSet {
    Cube(usize),
    Ball(usize),
}

impl ControlSet {
    pub fn dim(self) -> usize {
        match self {
            ControlSet::Cube(n) | ControlSet::Ball(n) => n,
        }
    }

    pub fn activation(self) -> OutputActivation {
        match self {
            ControlSet::Cube(_) => OutputActivation::Tanh,
            ControlSet::Ball(_) => OutputActivation::UnitBall,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GameSpec {
    pub dynamics: Dynamics,
    pub phi: CostFn,
    /// `None` is the g ≡ −∞ convention: no obstacle term at all.
    pub g: Option<CostFn>,
    pub horizon: f64,
    pub steps: usize,
    pub scheme: StepScheme,
    pub omega: BoxDomain,
    pub control_a: ControlSet,
    pub control_b: ControlSet,
}

impl GameSpec {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return config("steps must be at least 1");
        }
        if !(self.horizon > 0.0) {
            return config("horizon must be positive");
        }
        if self.scheme.substeps == 0 {
            return config("substeps must be at least 1");
        }
        if self.omega.dim() != self.state_dim() {
            return config("sampling domain dimension differs from the state dimension");
        }
        BoxDomain::new(self.omega.lo.clone(), self.omega.hi.clone())?;
        if let Dynamics::Affine { d, na, nb, m, pa, pb, c } = &self.dynamics {
            if *d == 0 || m.len() != d * d || pa.len() != d * na || pb.len() != d * nb || c.len() != *d {
                return config("affine dynamics matrices do not match their dimensions");
            }
        }
        self.phi.check(self.state_dim())?;
        if let Some(g) = &self.g {
            g.check(self.state_dim())?;
        }
        if self.dynamics.control_dims() != (self.control_a.dim(), self.control_b.dim()) {
            return config("control set dimensions differ from the dynamics");
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    /// Macro step and substep obstacle maximum at one state.
    pub fn step<S: Scalar>(&self, x: &[S], a: &[S], b: &[S]) -> (Vec<S>, Option<S>) {
        let g = self.g.as_ref();
        let gf = move |y: &[S]| g.unwrap().eval(y);
        let gref: Option<&dyn Fn(&[S]) -> S> = if g.is_some() { Some(&gf) } else { None };
        step_with_max(&self.dynamics, self.scheme, x, a, b, self.dt(), gref)
    }
}

/// Per-step strategy networks: `alpha[k]` maps (x, b) to A, or x alone in
/// the reversed formulation; `beta[k]` maps x to B.
#[derive(Clone, Debug, PartialEq)]
pub struct StrategyPair {
    pub alpha: Vec<Network>,
    pub beta: Vec<Network>,
}

pub const ALPHA_STREAM: u64 = 1_000;
pub const BETA_STREAM: u64 = 2_000;
pub const STAGE_STREAM: u64 = 3_000;

impl StrategyPair {
    pub fn new(spec: &GameSpec, hidden: usize, width: usize, seed: u64, feedback: bool) -> Result<Self> {
        spec.validate()?;
        let d = spec.state_dim();
        let (na, nb) = (spec.control_a.dim(), spec.control_b.dim());
        let d_alpha = if feedback { d + nb } else { d };
        let mut alpha = Vec::with_capacity(spec.steps);
        let mut beta = Vec::with_capacity(spec.steps);
        for k in 0..spec.steps as u64 {
            alpha.push(Network::new(d_alpha, na, hidden, width, spec.control_a.activation(), derive_seed(seed, ALPHA_STREAM + k))?);
            beta.push(Network::new(d, nb, hidden, width, spec.control_b.activation(), derive_seed(seed, BETA_STREAM + k))?);
        }
        Ok(StrategyPair { alpha, beta })
    }

    /// Whether α reacts to the adverse control.
    pub fn feedback(&self) -> bool {
        self.alpha[0].d_in > self.beta[0].d_in
    }

    /// Checks that the networks fit the game; mismatches are artifact errors.
    pub fn check(&self, spec: &GameSpec) -> Result<()> {
        let d = spec.state_dim();
        let (na, nb) = (spec.control_a.dim(), spec.control_b.dim());
        if self.alpha.len() != spec.steps || self.beta.len() != spec.steps {
            return Err(Error::Load(format!(
                "expected {} networks per player, found {} and {}",
                spec.steps,
                self.alpha.len(),
                self.beta.len()
            )));
        }
        for (k, (a, b)) in self.alpha.iter().zip(&self.beta).enumerate() {
            let a_ok = (a.d_in == d + nb || a.d_in == d) && a.d_out == na && a.d_in == self.alpha[0].d_in;
            if !a_ok || b.d_in != d || b.d_out != nb {
                return Err(Error::Load(format!("network dims at step {k} do not match the game")));
            }
        }
        Ok(())
    }
}

/// A recorded trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// Substep obstacle maxima G_k (absent without obstacle).
    pub gmax: Vec<Option<f64>>,
    pub cost: f64,
}

pub const BLOWUP: f64 = 1e6;

fn guard(step: usize, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) && x.iter().map(|v| v * v).sum::<f64>().sqrt() <= BLOWUP {
        Ok(())
    } else {
        Err(Error::Rollout { step, detail: format!("state {x:?} left the bounded region") })
    }
}

/// Trajectory from `x` under the strategies, with
/// `b_k = b_k(x_k)` and `a_k = α_k(x_k, b_k)`.
///
/// No clamping to Ω is applied; points far outside still evaluate.
pub fn rollout(spec: &GameSpec, pair: &StrategyPair, x: &[f64]) -> Result<Rollout> {
    if x.len() != spec.state_dim() {
        return config(format!("state has {} entries, expected {}", x.len(), spec.state_dim()));
    }
    let mut r = Rollout { states: vec![x.to_vec()], a: vec![], b: vec![], gmax: vec![], cost: 0.0 };
    let mut xk = x.to_vec();
    let mut running: Option<f64> = None;
    for k in 0..spec.steps {
        let b = pair.beta[k].forward_one(&xk)?;
        let a = if pair.feedback() {
            let mut inp = xk.clone();
            inp.extend_from_slice(&b);
            pair.alpha[k].forward_one(&inp)?
        } else {
            pair.alpha[k].forward_one(&xk)?
        };
        let (next, g) = spec.step(&xk, &a, &b);
        guard(k, &next)?;
        running = match (running, g) {
            (Some(m), Some(g)) => Some(Scalar::max(m, g)),
            (None, g) => g,
            (m, None) => m,
        };
        r.a.push(a);
        r.b.push(b);
        r.gmax.push(g);
        r.states.push(next.clone());
        xk = next;
    }
    let phi = spec.phi.eval(&xk);
    r.cost = match running {
        Some(m) => Scalar::max(m, phi),
        None => phi,
    };
    Ok(r)
}

pub fn value_estimate(spec: &GameSpec, pair: &StrategyPair, x: &[f64]) -> Result<f64> {
    Ok(rollout(spec, pair, x)?.cost)
}

/// Parameter sources for [`trace_costs`]: one `1 x P` row per network.
pub struct Thetas {
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
}

impl Thetas {
    pub fn constants(tape: &Tape, pair: &StrategyPair) -> Self {
        Thetas {
            alpha: pair.alpha.iter().map(|n| tape.constant(Mat::row(&n.params))).collect(),
            beta: pair.beta.iter().map(|n| tape.constant(Mat::row(&n.params))).collect(),
        }
    }
}

fn check_block(tape: &Tape, step: usize, cols: &[Var]) -> Result<()> {
    let mut worst: f64 = 0.0;
    let mut rows = vec![0.0; tape.shape(cols[0]).0];
    for &c in cols {
        let v = tape.value(c);
        for (r, x) in rows.iter_mut().zip(&v.data) {
            *r += x * x;
        }
    }
    for r in rows {
        if !r.is_finite() {
            worst = f64::INFINITY;
            break;
        }
        worst = worst.max(r.sqrt());
    }
    if worst > BLOWUP {
        return Err(Error::Rollout { step, detail: format!("state norm {worst:e} exceeds {BLOWUP:e}") });
    }
    Ok(())
}

/// Per-row costs `m x 1` of a batch rollout recorded on `tape`, starting at
/// step `start` from the rows of `x0`. With `terminal_g` the obstacle at
/// the final state joins the cost, as in the local scheme's g ∨ φ terminal.
pub fn trace_costs(
    tape: &Tape,
    spec: &GameSpec,
    pair: &StrategyPair,
    th: &Thetas,
    x0: Var,
    start: usize,
    terminal_g: bool,
) -> Result<Var> {
    let d = spec.state_dim();
    let tr = |v: Var| Traced::new(tape, v);
    let mut x = x0;
    let mut cols: Vec<Traced> = (0..d).map(|j| tr(tape.col(x0, j))).collect();
    let mut running: Option<Traced> = None;
    let feedback = pair.feedback();
    for k in start..spec.steps {
        let b = pair.beta[k].trace(tape, th.beta[k], x);
        let a_in = if feedback { tape.concat_cols(&[x, b]) } else { x };
        let a = pair.alpha[k].trace(tape, th.alpha[k], a_in);
        let a_cols: Vec<Traced> = (0..spec.control_a.dim()).map(|j| tr(tape.col(a, j))).collect();
        let b_cols: Vec<Traced> = (0..spec.control_b.dim()).map(|j| tr(tape.col(b, j))).collect();
        let (next, g) = spec.step(&cols, &a_cols, &b_cols);
        let vars: Vec<Var> = next.iter().map(|c| c.var).collect();
        check_block(tape, k, &vars)?;
        if let Some(g) = g {
            running = Some(match running {
                Some(m) => m.max(g),
                None => g,
            });
        }
        cols = next;
        x = tape.concat_cols(&vars);
    }
    let mut terminal = spec.phi.eval(&cols);
    if terminal_g {
        if let Some(g) = &spec.g {
            terminal = g.eval(&cols).max(terminal);
        }
    }
    Ok(match running {
        Some(m) => m.max(terminal).var,
        None => terminal.var,
    })
}

const EVAL_CHUNK: usize = 4096;

/// Plug-in values V̂_0 at each row of `xs`.
pub fn batch_values(spec: &GameSpec, pair: &StrategyPair, xs: &Mat) -> Result<Vec<f64>> {
    pair.check(spec)?;
    let d = spec.state_dim();
    if xs.cols != d {
        return config(format!("points have {} coordinates, expected {d}", xs.cols));
    }
    let mut out = Vec::with_capacity(xs.rows);
    for chunk in xs.data.chunks(EVAL_CHUNK * d) {
        let tape = Tape::new();
        let th = Thetas::constants(&tape, pair);
        let x0 = tape.constant(Mat::from_vec(chunk.len() / d, d, chunk.to_vec()));
        let c = trace_costs(&tape, spec, pair, &th, x0, 0, false)?;
        out.extend_from_slice(&tape.value(c).data);
    }
    Ok(out)
}

/// Mean rollout cost over a batch.
pub fn batch_cost(spec: &GameSpec, pair: &StrategyPair, xs: &Mat) -> Result<f64> {
    if xs.rows == 0 {
        return config("empty batch");
    }
    let v = batch_values(spec, pair, xs)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    A,
    B,
}

/// Which value the α player targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// inf over α of sup over b (α minimizes the cost).
    InfSup,
    /// sup over α of inf over b (α maximizes the cost).
    SupInf,
}

impl Objective {
    fn alpha_sign(self) -> f64 {
        match self {
            Objective::InfSup => 1.0,
            Objective::SupInf => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Global,
    Local,
    Reversed,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Mode::Global),
            "local" => Ok(Mode::Local),
            "reversed" => Ok(Mode::Reversed),
            _ => config(format!("unknown mode '{s}' (expected global, local or reversed)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Global => "global",
            Mode::Local => "local",
            Mode::Reversed => "reversed",
        }
    }
}

fn pack(nets: &[Network], steps: Range<usize>) -> Vec<f64> {
    nets[steps].iter().flat_map(|n| n.params.iter().copied()).collect()
}

fn unpack(nets: &mut [Network], steps: Range<usize>, flat: &[f64]) {
    let mut off = 0;
    for n in &mut nets[steps] {
        let len = n.params.len();
        n.params.copy_from_slice(&flat[off..off + len]);
        off += len;
    }
}

/// The batch-mean game cost as a min-max problem over network parameters.
///
/// `x` holds the outer player's networks for `steps`, `y` the inner
/// player's; the other steps use the stored networks of `pair` as constants.
pub struct GameProblem<'a> {
    pub spec: &'a GameSpec,
    pub pair: &'a StrategyPair,
    pub steps: Range<usize>,
    pub outer: Player,
    /// +1 when the outer player minimizes the cost, −1 when it maximizes.
    pub sign: f64,
    pub batch: usize,
    pub terminal_g: bool,
}

impl GameProblem<'_> {
    fn thetas(&self, tape: &Tape, x: Var, y: Var) -> Thetas {
        let mut th = Thetas::constants(tape, self.pair);
        let (xa, xb) = match self.outer {
            Player::A => (x, y),
            Player::B => (y, x),
        };
        let mut off = 0;
        for k in self.steps.clone() {
            let len = self.pair.alpha[k].params.len();
            th.alpha[k] = tape.slice(xa, off, 1, len);
            off += len;
        }
        let mut off = 0;
        for k in self.steps.clone() {
            let len = self.pair.beta[k].params.len();
            th.beta[k] = tape.slice(xb, off, 1, len);
            off += len;
        }
        th
    }

    pub fn initial(&self) -> (Vec<f64>, Vec<f64>) {
        let a = pack(&self.pair.alpha, self.steps.clone());
        let b = pack(&self.pair.beta, self.steps.clone());
        match self.outer {
            Player::A => (a, b),
            Player::B => (b, a),
        }
    }

    pub fn store(&self, pair: &mut StrategyPair, x: &[f64], y: &[f64]) {
        let (a, b) = match self.outer {
            Player::A => (x, y),
            Player::B => (y, x),
        };
        unpack(&mut pair.alpha, self.steps.clone(), a);
        unpack(&mut pair.beta, self.steps.clone(), b);
    }
}

impl MinMaxProblem for GameProblem<'_> {
    type Sample = Mat;

    fn x_len(&self) -> usize {
        self.initial().0.len()
    }

    fn y_len(&self) -> usize {
        self.initial().1.len()
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Mat {
        self.spec.omega.sample(rng, self.batch)
    }

    fn record(&self, tape: &Tape, x: Var, y: Var, s: &Mat) -> Result<Var> {
        if s.rows == 0 {
            return config("empty batch");
        }
        let th = self.thetas(tape, x, y);
        let x0 = tape.constant(s.clone());
        let c = trace_costs(tape, self.spec, self.pair, &th, x0, self.steps.start, self.terminal_g)?;
        let m = tape.mean(c);
        Ok(if self.sign == 1.0 { m } else { tape.scale(m, self.sign) })
    }

    fn split(&self, s: &Mat, parts: usize) -> Vec<(Mat, f64)> {
        let per = s.rows.div_ceil(parts.max(1)).max(1);
        s.data
            .chunks(per * s.cols)
            .map(|c| {
                let rows = c.len() / s.cols;
                (Mat::from_vec(rows, s.cols, c.to_vec()), rows as f64 / s.rows as f64)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub minimax: MinMaxConfig,
    pub hidden_layers: usize,
    pub width: usize,
    pub objective: Objective,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { minimax: MinMaxConfig::default(), hidden_layers: 3, width: 20, objective: Objective::InfSup, workers: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub pair: StrategyPair,
    pub trace: Vec<TraceRow>,
    pub counter: EvalCounter,
}

fn stage_rng(seed: u64, stage: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, STAGE_STREAM + stage as u64))
}

fn train_stage(problem: &GameProblem, cfg: &TrainConfig, seed: u64, stage: usize, out: &mut Trained) -> Result<()> {
    let (x, y) = problem.initial();
    let mut st = MinMaxState::new(x, y, cfg.minimax.optimizer);
    st.workers = cfg.workers.max(1);
    let mut rng = stage_rng(seed, stage);
    minimax::run(problem, &mut st, &mut rng, &cfg.minimax, stage, &mut out.trace)?;
    out.counter.grad_evals += st.counter.grad_evals;
    out.counter.unrolled_evals += st.counter.unrolled_evals;
    let mut pair = out.pair.clone();
    problem.store(&mut pair, &st.x, &st.y);
    out.pair = pair;
    Ok(())
}

/// All time steps trained jointly against the full-horizon cost.
pub fn algorithm1_global(spec: &GameSpec, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let pair = StrategyPair::new(spec, cfg.hidden_layers, cfg.width, seed, true)?;
    let mut out = Trained { pair, trace: Vec::new(), counter: EvalCounter::default() };
    let init = out.pair.clone();
    let problem = GameProblem {
        spec,
        pair: &init,
        steps: 0..spec.steps,
        outer: Player::A,
        sign: cfg.objective.alpha_sign(),
        batch: cfg.minimax.batch,
        terminal_g: false,
    };
    train_stage(&problem, cfg, seed, 0, &mut out)?;
    Ok(out)
}

/// Backward march n = N−1, …, 0; each stage trains the step-n pair against
/// the one-step cost whose continuation re-simulates the stored suffix.
pub fn algorithm2_local(spec: &GameSpec, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let pair = StrategyPair::new(spec, cfg.hidden_layers, cfg.width, seed, true)?;
    let mut out = Trained { pair, trace: Vec::new(), counter: EvalCounter::default() };
    for n in (0..spec.steps).rev() {
        let frozen = out.pair.clone();
        let problem = GameProblem {
            spec,
            pair: &frozen,
            steps: n..n + 1,
            outer: Player::A,
            sign: cfg.objective.alpha_sign(),
            batch: cfg.minimax.batch,
            terminal_g: true,
        };
        train_stage(&problem, cfg, seed, n, &mut out)?;
    }
    Ok(out)
}

/// sup over b of inf over state-feedback a: the outer loop ascends on the
/// b-networks, the inner loop descends on α, whose input is the state only.
pub fn reversed_supinf(spec: &GameSpec, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let pair = StrategyPair::new(spec, cfg.hidden_layers, cfg.width, seed, false)?;
    let mut out = Trained { pair, trace: Vec::new(), counter: EvalCounter::default() };
    let init = out.pair.clone();
    let problem = GameProblem {
        spec,
        pair: &init,
        steps: 0..spec.steps,
        outer: Player::B,
        sign: -cfg.objective.alpha_sign(),
        batch: cfg.minimax.batch,
        terminal_g: false,
    };
    train_stage(&problem, cfg, seed, 0, &mut out)?;
    Ok(out)
}

pub fn train(spec: &GameSpec, cfg: &TrainConfig, mode: Mode, seed: u64) -> Result<Trained> {
    match mode {
        Mode::Global => algorithm1_global(spec, cfg, seed),
        Mode::Local => algorithm2_local(spec, cfg, seed),
        Mode::Reversed => reversed_supinf(spec, cfg, seed),
    }
}

/// How much `q` fresh inner ascent steps (ADAM at the inner rate, fresh
/// batches) improve the inner player's objective, measured on one fixed
/// evaluation batch. Small values certify an approximate argmax.
pub fn ascent_gain(spec: &GameSpec, pair: &StrategyPair, cfg: &TrainConfig, mode: Mode, seed: u64) -> Result<f64> {
    let (outer, sign, terminal_g) = match mode {
        Mode::Reversed => (Player::B, -cfg.objective.alpha_sign(), false),
        Mode::Global => (Player::A, cfg.objective.alpha_sign(), false),
        Mode::Local => (Player::A, cfg.objective.alpha_sign(), true),
    };
    let problem = GameProblem { spec, pair, steps: 0..spec.steps, outer, sign, batch: cfg.minimax.batch, terminal_g };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xCE47));
    let eval = problem.sample(&mut rng);
    let (x, y) = problem.initial();
    let f0 = minimax::evaluate(&problem, &x, &y, &eval, false, false, 1)?.value;
    let mut st = MinMaxState::new(x, y, minimax::OptimizerKind::Adam);
    for _ in 0..cfg.minimax.inner_steps.max(1) {
        let w = problem.sample(&mut rng);
        let e = minimax::evaluate(&problem, &st.x, &st.y, &w, false, true, 1)?;
        st.uy.ascend(&mut st.y, e.gy.as_deref().unwrap(), cfg.minimax.inner_rate)?;
    }
    let f1 = minimax::evaluate(&problem, &st.x, &st.y, &eval, false, false, 1)?.value;
    Ok(f1 - f0)
}

/// Sampling law of the tiny one-step game.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TinyLaw {
    Uniform(f64, f64),
    PointMass(f64),
}

/// One-step game with scalar state and finite control grids.
#[derive(Clone, Debug)]
pub struct TinyGame {
    pub q: fn(f64, f64, f64) -> f64,
    pub controls: Vec<f64>,
    pub law: TinyLaw,
    pub samples: usize,
    /// Bins of the state axis on which feedback tables are tabulated.
    pub bins: usize,
}

impl TinyGame {
    /// Q(x, a, b) = 1 − |a − b| + x(a + b)/2 on an 11-point grid of [−1, 1].
    /// Pointwise, min_a max_b Q and max_b min_a Q differ.
    pub fn example3_like(law: TinyLaw) -> Self {
        TinyGame {
            q: |x, a, b| 1.0 - (a - b).abs() + 0.5 * x * (a + b),
            controls: (0..11).map(|i| -1.0 + 0.2 * i as f64).collect(),
            law,
            samples: 10_000,
            bins: 400,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self.law {
            TinyLaw::Uniform(lo, hi) => {
                let u = Uniform::new(lo, hi);
                (0..self.samples).map(|_| u.sample(rng)).collect()
            }
            TinyLaw::PointMass(x) => vec![x; self.samples],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McReport {
    /// Sample mean of the pointwise value max_b min_a Q(X, a, b).
    pub pointwise: f64,
    /// Value of the game over tabulated feedback controls, on the sample mean.
    pub tabulated: f64,
    pub gap: f64,
    pub std_err: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var)
}

/// Compares E[Ṽ(X)] with inf over α tables of sup over b tables of the
/// sampled mean cost, on two independent sample sets.
///
/// Tables are indexed by a bin of the state axis (and, for α, by b). The
/// tabulated game separates across bins, so its exact value is
/// Σ_bins max_b min_a Σ_{i ∈ bin} Q(X_i, a, b); the optimal table is then
/// evaluated sample by sample.
pub fn mc_expectation_equivalence_test(game: &TinyGame, seed: u64) -> McReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s1 = game.draw(&mut rng);
    let s2 = game.draw(&mut rng);
    let cs = &game.controls;
    let pointwise_vals: Vec<f64> = s1
        .iter()
        .map(|&x| {
            cs.iter()
                .map(|&b| cs.iter().map(|&a| (game.q)(x, a, b)).fold(f64::INFINITY, f64::min))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (lo, hi) = match game.law {
        TinyLaw::Uniform(lo, hi) => (lo, hi),
        TinyLaw::PointMass(x) => (x - 1.0, x + 1.0),
    };
    let bins = game.bins.max(1);
    let bin_of = |x: f64| (((x - lo) / (hi - lo) * bins as f64).floor().max(0.0) as usize).min(bins - 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); bins];
    for (i, &x) in s2.iter().enumerate() {
        members[bin_of(x)].push(i);
    }
    let n = cs.len();
    let mut choice = vec![(0usize, 0usize); bins];
    for (bin, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for bi in 0..n {
            let mut worst = (f64::INFINITY, 0);
            for ai in 0..n {
                let s: f64 = idx.iter().map(|&i| (game.q)(s2[i], cs[ai], cs[bi])).sum();
                if s < worst.0 {
                    worst = (s, ai);
                }
            }
            if worst.0 > best.0 {
                best = (worst.0, worst.1, bi);
            }
        }
        choice[bin] = (best.1, best.2);
    }
    let tab_vals: Vec<f64> = s2
        .iter()
        .map(|&x| {
            let (ai, bi) = choice[bin_of(x)];
            (game.q)(x, cs[ai], cs[bi])
        })
        .collect();
    let (m1, v1) = mean_var(&pointwise_vals);
    let (m2, v2) = mean_var(&tab_vals);
    let std_err = (v1 / s1.len() as f64 + v2 / s2.len() as f64).sqrt();
    McReport { pointwise: m1, tabulated: m2, gap: (m1 - m2).abs(), std_err }
}

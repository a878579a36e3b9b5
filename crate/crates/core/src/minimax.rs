//! Stochastic min-max optimizers for `min_x max_y E[Q(x, y, Z)]`.
//!
//! Each algorithm works against a [`MinMaxProblem`], which draws minibatches
//! and records the sampled objective on a tape. Updates go through an
//! [`Updater`], either plain gradient steps or ADAM with one state per
//! parameter group.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Sgda,
    Agda,
    GammaGda,
    Pote,
    Poteb,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sgda => "sgda",
            Algorithm::Agda => "agda",
            Algorithm::GammaGda => "gamma-gda",
            Algorithm::Pote => "pote",
            Algorithm::Poteb => "poteb",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "sgda" => Algorithm::Sgda,
            "agda" => Algorithm::Agda,
            "gamma-gda" => Algorithm::GammaGda,
            "pote" => Algorithm::Pote,
            "poteb" => Algorithm::Poteb,
            _ => return config(format!("unknown algorithm '{s}'")),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    /// Plain steps with the rate decayed linearly to [`SG_FLOOR`].
    SgLinearDecay,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::SgLinearDecay => "sg",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sg" => Ok(OptimizerKind::SgLinearDecay),
            _ => config(format!("unknown optimizer '{s}'")),
        }
    }
}

pub const SG_FLOOR: f64 = 1e-5;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MAX_UNROLL: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct MinMaxConfig {
    pub algorithm: Algorithm,
    pub optimizer: OptimizerKind,
    /// Outer iterations M_epoch.
    pub epochs: usize,
    /// Inner iterations q (POTE family).
    pub inner_steps: usize,
    pub batch: usize,
    /// Outer rate η.
    pub outer_rate: f64,
    /// Inner rate ρ.
    pub inner_rate: f64,
    /// Timescale ratio for γ-GDA.
    pub gamma: f64,
}

impl Default for MinMaxConfig {
    fn default() -> Self {
        MinMaxConfig {
            algorithm: Algorithm::Pote,
            optimizer: OptimizerKind::Adam,
            epochs: 500,
            inner_steps: 5,
            batch: 1000,
            outer_rate: 2e-3,
            inner_rate: 2e-3,
            gamma: 2.0,
        }
    }
}

impl MinMaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_rate >= 0.0 && self.inner_rate >= 0.0) {
            return config("learning rates must be non-negative");
        }
        if matches!(self.algorithm, Algorithm::Pote | Algorithm::Poteb) && self.inner_steps == 0 {
            return config("inner_steps must be at least 1");
        }
        if self.algorithm == Algorithm::Poteb && self.inner_steps > MAX_UNROLL {
            return config(format!("poteb unrolls at most {MAX_UNROLL} inner steps"));
        }
        if self.algorithm == Algorithm::GammaGda && !(self.gamma >= 1.0) {
            return config("gamma must be at least 1");
        }
        if self.batch == 0 {
            return config("batch must be positive");
        }
        Ok(())
    }

    /// Rate used at outer iteration `i`: constant under ADAM, linear from
    /// `rate` down to `SG_FLOOR` under plain SG.
    pub fn schedule(&self, i: usize, rate: f64) -> f64 {
        match self.optimizer {
            OptimizerKind::Adam => rate,
            OptimizerKind::SgLinearDecay => {
                if self.epochs <= 1 || rate <= SG_FLOOR {
                    rate
                } else {
                    let t = i as f64 / (self.epochs - 1) as f64;
                    rate * (1.0 - t) + SG_FLOOR * t
                }
            }
        }
    }
}

/// ADAM moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// Bias-corrected ADAM step: `params -= rate * m̂ / (√v̂ + ε)`.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Optimizer("gradient and parameter shapes differ".into()));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Optimizer("non-finite gradient".into()));
    }
    state.t += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        params[i] -= rate * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Applies descent steps to one parameter group.
#[derive(Clone, Debug)]
pub enum Updater {
    Sg,
    Adam(AdamState),
}

impl Updater {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Updater::Adam(AdamState::new(n)),
            OptimizerKind::SgLinearDecay => Updater::Sg,
        }
    }

    pub fn descend(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
        match self {
            Updater::Adam(s) => adam_update(s, params, grads, rate),
            Updater::Sg => {
                if grads.len() != params.len() {
                    return Err(Error::Optimizer("gradient and parameter shapes differ".into()));
                }
                if grads.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Optimizer("non-finite gradient".into()));
                }
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= rate * g;
                }
                Ok(())
            }
        }
    }

    pub fn ascend(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
        let neg: Vec<f64> = grads.iter().map(|g| -g).collect();
        self.descend(params, &neg, rate)
    }
}

/// A sampled objective `f(x, y, z)` to be minimized in `x` and maximized in `y`.
pub trait MinMaxProblem: Sync {
    type Sample: Clone + Send + Sync;

    fn x_len(&self) -> usize;
    fn y_len(&self) -> usize;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Self::Sample;
    /// Records the scalar objective for `1 x len` parameter rows `x`, `y`.
    fn record(&self, tape: &Tape, x: Var, y: Var, sample: &Self::Sample) -> Result<Var>;
    /// Splits a sample into weighted parts whose weighted objectives sum to the whole.
    fn split(&self, sample: &Self::Sample, parts: usize) -> Vec<(Self::Sample, f64)> {
        let _ = parts;
        vec![(sample.clone(), 1.0)]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalCounter {
    /// Forward-backward passes of the sampled objective.
    pub grad_evals: usize,
    /// Backward passes through an unrolled inner loop (POTEB).
    pub unrolled_evals: usize,
}

#[derive(Clone, Debug)]
pub struct Evaluated {
    pub value: f64,
    pub gx: Option<Vec<f64>>,
    pub gy: Option<Vec<f64>>,
}

/// Value and selected gradients of the sampled objective.
pub fn evaluate<P: MinMaxProblem>(
    p: &P,
    x: &[f64],
    y: &[f64],
    s: &P::Sample,
    want_x: bool,
    want_y: bool,
    workers: usize,
) -> Result<Evaluated> {
    let one = |s: &P::Sample| -> Result<Evaluated> {
        let tape = Tape::new();
        let xv = if want_x { tape.input(Mat::row(x)) } else { tape.constant(Mat::row(x)) };
        let yv = if want_y { tape.input(Mat::row(y)) } else { tape.constant(Mat::row(y)) };
        let f = p.record(&tape, xv, yv, s)?;
        let value = tape.scalar(f);
        let mut wrt = Vec::new();
        if want_x {
            wrt.push(xv);
        }
        if want_y {
            wrt.push(yv);
        }
        let mut g = if wrt.is_empty() { Vec::new() } else { tape.gradients(f, &wrt) }.into_iter();
        let gx = if want_x { g.next().map(|m| m.data) } else { None };
        let gy = if want_y { g.next().map(|m| m.data) } else { None };
        Ok(Evaluated { value, gx, gy })
    };
    if workers <= 1 {
        return one(s);
    }
    let parts = p.split(s, workers);
    let results: Vec<Result<Evaluated>> = std::thread::scope(|sc| {
        let handles: Vec<_> = parts.iter().map(|(s, _)| sc.spawn(|| one(s))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut total = Evaluated {
        value: 0.0,
        gx: want_x.then(|| vec![0.0; x.len()]),
        gy: want_y.then(|| vec![0.0; y.len()]),
    };
    for (r, (_, w)) in results.into_iter().zip(&parts) {
        let r = r?;
        total.value += w * r.value;
        if let (Some(t), Some(g)) = (total.gx.as_mut(), r.gx) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
        }
        if let (Some(t), Some(g)) = (total.gy.as_mut(), r.gy) {
            t.iter_mut().zip(g).for_each(|(a, b)| *a += w * b);
        }
    }
    Ok(total)
}

/// Iterates and optimizer state of a min-max run.
pub struct MinMaxState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub ux: Updater,
    pub uy: Updater,
    pub counter: EvalCounter,
    pub workers: usize,
}

impl MinMaxState {
    pub fn new(x: Vec<f64>, y: Vec<f64>, kind: OptimizerKind) -> Self {
        let (nx, ny) = (x.len(), y.len());
        MinMaxState { x, y, ux: Updater::new(kind, nx), uy: Updater::new(kind, ny), counter: EvalCounter::default(), workers: 1 }
    }

    fn eval<P: MinMaxProblem>(&mut self, p: &P, s: &P::Sample, wx: bool, wy: bool) -> Result<Evaluated> {
        self.counter.grad_evals += 1;
        evaluate(p, &self.x, &self.y, s, wx, wy, self.workers)
    }
}

/// Losses observed during one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLoss {
    pub outer: f64,
    pub inner: f64,
}

/// Simultaneous step on a shared minibatch; `x_rate` and `y_rate` allow the γ-GDA variant.
fn simultaneous<P: MinMaxProblem>(p: &P, st: &mut MinMaxState, rng: &mut ChaCha8Rng, x_rate: f64, y_rate: f64) -> Result<StepLoss> {
    let s = p.sample(rng);
    let e = st.eval(p, &s, true, true)?;
    st.ux.descend(&mut st.x, e.gx.as_deref().unwrap(), x_rate)?;
    st.uy.ascend(&mut st.y, e.gy.as_deref().unwrap(), y_rate)?;
    Ok(StepLoss { outer: e.value, inner: e.value })
}

pub fn sgda_step<P: MinMaxProblem>(p: &P, st: &mut MinMaxState, rng: &mut ChaCha8Rng, rate: f64) -> Result<StepLoss> {
    simultaneous(p, st, rng, rate, rate)
}

pub fn gamma_gda_step<P: MinMaxProblem>(p: &P, st: &mut MinMaxState, rng: &mut ChaCha8Rng, rate: f64, gamma: f64) -> Result<StepLoss> {
    if !(gamma >= 1.0) {
        return config("gamma must be at least 1");
    }
    simultaneous(p, st, rng, rate / gamma, rate)
}

/// x first on one minibatch, then y at the new x on an independent minibatch.
pub fn agda_step<P: MinMaxProblem>(p: &P, st: &mut MinMaxState, rng: &mut ChaCha8Rng, x_rate: f64, y_rate: f64) -> Result<StepLoss> {
    let sx = p.sample(rng);
    let ex = st.eval(p, &sx, true, false)?;
    st.ux.descend(&mut st.x, ex.gx.as_deref().unwrap(), x_rate)?;
    let sy = p.sample(rng);
    let ey = st.eval(p, &sy, false, true)?;
    st.uy.ascend(&mut st.y, ey.gy.as_deref().unwrap(), y_rate)?;
    Ok(StepLoss { outer: ex.value, inner: ey.value })
}

/// q ascent steps on y with fresh minibatches, then one descent step on x.
pub fn pote_outer<P: MinMaxProblem>(
    p: &P,
    st: &mut MinMaxState,
    rng: &mut ChaCha8Rng,
    q: usize,
    outer_rate: f64,
    inner_rate: f64,
) -> Result<StepLoss> {
    if q == 0 {
        return config("inner_steps must be at least 1");
    }
    let mut inner = f64::NAN;
    for _ in 0..q {
        let w = p.sample(rng);
        let e = st.eval(p, &w, false, true)?;
        st.uy.ascend(&mut st.y, e.gy.as_deref().unwrap(), inner_rate)?;
        inner = e.value;
    }
    let z = p.sample(rng);
    let e = st.eval(p, &z, true, false)?;
    st.ux.descend(&mut st.x, e.gx.as_deref().unwrap(), outer_rate)?;
    Ok(StepLoss { outer: e.value, inner })
}

/// φ₁(x, y) = f(x, y^q, z) after q plain ascent steps y^{k+1} = y^k + ρ ∇_y f(x, y^k, w^k),
/// together with ∇_x φ₁ taken through the unrolled loop and y^q.
pub fn unrolled_objective<P: MinMaxProblem>(
    p: &P,
    x: &[f64],
    y: &[f64],
    inner: &[P::Sample],
    outer: &P::Sample,
    rho: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let xv = tape.input(Mat::row(x));
    let mut yk = tape.input(Mat::row(y));
    for w in inner {
        let f = p.record(&tape, xv, yk, w)?;
        let g = tape.grad(f, &[yk])[0];
        let step = tape.scale(g, rho);
        yk = tape.add(yk, step);
    }
    let phi = p.record(&tape, xv, yk, outer)?;
    let value = tape.scalar(phi);
    let yq = tape.value(yk).data.clone();
    let gx = tape.gradients(phi, &[xv]).remove(0).data;
    Ok((value, gx, yq))
}

pub fn poteb_step<P: MinMaxProblem>(
    p: &P,
    st: &mut MinMaxState,
    rng: &mut ChaCha8Rng,
    q: usize,
    outer_rate: f64,
    inner_rate: f64,
) -> Result<StepLoss> {
    if q == 0 {
        return config("inner_steps must be at least 1");
    }
    if q > MAX_UNROLL {
        return config(format!("poteb unrolls at most {MAX_UNROLL} inner steps"));
    }
    let inner: Vec<P::Sample> = (0..q).map(|_| p.sample(rng)).collect();
    let z = p.sample(rng);
    let (value, gx, yq) = unrolled_objective(p, &st.x, &st.y, &inner, &z, inner_rate)?;
    st.counter.grad_evals += q;
    st.counter.unrolled_evals += 1;
    st.ux.descend(&mut st.x, &gx, outer_rate)?;
    st.y = yq;
    Ok(StepLoss { outer: value, inner: value })
}

/// One outer iteration of the configured algorithm at iteration index `i`.
pub fn outer_step<P: MinMaxProblem>(p: &P, st: &mut MinMaxState, rng: &mut ChaCha8Rng, cfg: &MinMaxConfig, i: usize) -> Result<StepLoss> {
    let eta = cfg.schedule(i, cfg.outer_rate);
    let rho = cfg.schedule(i, cfg.inner_rate);
    match cfg.algorithm {
        Algorithm::Sgda => sgda_step(p, st, rng, eta),
        Algorithm::Agda => agda_step(p, st, rng, eta, rho),
        Algorithm::GammaGda => gamma_gda_step(p, st, rng, eta, cfg.gamma),
        Algorithm::Pote => pote_outer(p, st, rng, cfg.inner_steps, eta, rho),
        Algorithm::Poteb => poteb_step(p, st, rng, cfg.inner_steps, eta, rho),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub stage: usize,
    pub epoch: usize,
    pub outer: f64,
    pub inner: f64,
    pub wall: f64,
}

/// Runs `cfg.epochs` outer iterations, recording one trace row per epoch.
pub fn run<P: MinMaxProblem>(
    p: &P,
    st: &mut MinMaxState,
    rng: &mut ChaCha8Rng,
    cfg: &MinMaxConfig,
    stage: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    cfg.validate()?;
    let t0 = Instant::now();
    for i in 0..cfg.epochs {
        let loss = outer_step(p, st, rng, cfg, i).map_err(|e| match e {
            Error::Optimizer(m) => Error::Training { epoch: i, detail: m },
            other => other,
        })?;
        if !loss.outer.is_finite() || !loss.inner.is_finite() {
            return Err(Error::Training { epoch: i, detail: "loss is not finite".into() });
        }
        trace.push(TraceRow { stage, epoch: i, outer: loss.outer, inner: loss.inner, wall: t0.elapsed().as_secs_f64() });
    }
    Ok(())
}

/// A deterministic-or-noisy objective given by a closure, mainly for tests
/// and small benchmarks. The sample is an optional noise row.
pub struct ClosureProblem<F> {
    pub nx: usize,
    pub ny: usize,
    pub noise_dim: usize,
    pub noise_scale: f64,
    pub f: F,
}

impl<F> MinMaxProblem for ClosureProblem<F>
where
    F: Fn(&Tape, Var, Var, Var) -> Var + Sync,
{
    type Sample = Vec<f64>;

    fn x_len(&self) -> usize {
        self.nx
    }
    fn y_len(&self) -> usize {
        self.ny
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        (0..self.noise_dim).map(|_| self.noise_scale * rng.gen_range(-1.0..1.0)).collect()
    }
    fn record(&self, tape: &Tape, x: Var, y: Var, s: &Vec<f64>) -> Result<Var> {
        let z = tape.constant(Mat::row(if s.is_empty() { &[0.0] } else { s }));
        Ok((self.f)(tape, x, y, z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn problem(f: impl Fn(&Tape, Var, Var, Var) -> Var + Sync) -> ClosureProblem<impl Fn(&Tape, Var, Var, Var) -> Var + Sync> {
        ClosureProblem { nx: 1, ny: 1, noise_dim: 0, noise_scale: 0.0, f }
    }

    fn bilinear(t: &Tape, x: Var, y: Var, _: Var) -> Var {
        t.mul(x, y)
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn sg(x: f64, y: f64) -> MinMaxState {
        MinMaxState::new(vec![x], vec![y], OptimizerKind::SgLinearDecay)
    }

    #[test]
    fn sgda_hand_step() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        sgda_step(&p, &mut st, &mut rng(), 0.1).unwrap();
        assert!((st.x[0] - 0.9).abs() < 1e-15 && (st.y[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn agda_hand_step() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        agda_step(&p, &mut st, &mut rng(), 0.1, 0.1).unwrap();
        assert!((st.x[0] - 0.9).abs() < 1e-15 && (st.y[0] - 1.09).abs() < 1e-15);
    }

    #[test]
    fn gamma_gda_hand_step() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        gamma_gda_step(&p, &mut st, &mut rng(), 0.1, 2.0).unwrap();
        assert!((st.x[0] - 0.95).abs() < 1e-15 && (st.y[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn gamma_large_freezes_x() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        gamma_gda_step(&p, &mut st, &mut rng(), 0.1, 1e300).unwrap();
        assert_eq!(st.x[0], 1.0);
        assert!(st.y[0] > 1.0);
    }

    #[test]
    fn zero_gradients_leave_params() {
        let p = problem(|t, x, _, _| {
            let c = t.scale(x, 0.0);
            t.sum(c)
        });
        for alg in [Algorithm::Sgda, Algorithm::Agda, Algorithm::GammaGda, Algorithm::Pote, Algorithm::Poteb] {
            for kind in [OptimizerKind::Adam, OptimizerKind::SgLinearDecay] {
                let cfg = MinMaxConfig { algorithm: alg, optimizer: kind, epochs: 5, inner_steps: 2, ..Default::default() };
                let mut st = MinMaxState::new(vec![0.3], vec![-0.7], kind);
                run(&p, &mut st, &mut rng(), &cfg, 0, &mut Vec::new()).unwrap();
                assert_eq!((st.x[0], st.y[0]), (0.3, -0.7), "{alg:?} {kind:?}");
            }
        }
    }

    #[test]
    fn zero_rates_leave_params() {
        let p = ClosureProblem {
            nx: 1,
            ny: 1,
            noise_dim: 1,
            noise_scale: 0.5,
            f: |t: &Tape, x: Var, y: Var, z: Var| {
                let xy = t.mul(x, y);
                let xz = t.mul(x, z);
                let s = t.add(xy, xz);
                t.sum(s)
            },
        };
        for alg in [Algorithm::Sgda, Algorithm::Agda, Algorithm::GammaGda, Algorithm::Pote, Algorithm::Poteb] {
            for kind in [OptimizerKind::Adam, OptimizerKind::SgLinearDecay] {
                let cfg = MinMaxConfig { algorithm: alg, optimizer: kind, epochs: 4, inner_steps: 3, outer_rate: 0.0, inner_rate: 0.0, ..Default::default() };
                let mut st = MinMaxState::new(vec![0.3], vec![-0.7], kind);
                run(&p, &mut st, &mut rng(), &cfg, 0, &mut Vec::new()).unwrap();
                assert_eq!((st.x[0], st.y[0]), (0.3, -0.7), "{alg:?} {kind:?}");
            }
        }
    }

    #[test]
    fn sgda_spirals_outward_on_bilinear() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        let mut norm = 2f64.sqrt();
        for _ in 0..100 {
            sgda_step(&p, &mut st, &mut rng(), 0.05).unwrap();
            let n = st.x[0].hypot(st.y[0]);
            assert!(n >= norm);
            norm = n;
        }
    }

    #[test]
    fn agda_converges_on_strongly_convex_concave() {
        let p = problem(|t, x, y, _| {
            let xx = t.mul(x, x);
            let yy = t.mul(y, y);
            let xy = t.mul(x, y);
            let s = t.sub(xx, yy);
            let s = t.add(s, xy);
            t.sum(s)
        });
        let mut st = sg(1.0, -1.0);
        let mut steps = 0;
        while st.x[0].hypot(st.y[0]) > 1e-3 {
            agda_step(&p, &mut st, &mut rng(), 0.05, 0.05).unwrap();
            steps += 1;
            assert!(steps <= 10_000);
        }
    }

    #[test]
    fn gamma_one_matches_sgda() {
        let p = ClosureProblem {
            nx: 2,
            ny: 1,
            noise_dim: 2,
            noise_scale: 1.0,
            f: |t: &Tape, x: Var, y: Var, z: Var| {
                let a = t.mul(x, z);
                let s = t.sum(a);
                let yy = t.mul(y, y);
                let e = t.mul(s, y);
                let d = t.sub(e, yy);
                t.sum(d)
            },
        };
        for kind in [OptimizerKind::Adam, OptimizerKind::SgLinearDecay] {
            let mut a = MinMaxState::new(vec![0.2, -0.1], vec![0.5], kind);
            let mut b = MinMaxState::new(vec![0.2, -0.1], vec![0.5], kind);
            let (mut ra, mut rb) = (rng(), rng());
            for _ in 0..20 {
                sgda_step(&p, &mut a, &mut ra, 0.1).unwrap();
                gamma_gda_step(&p, &mut b, &mut rb, 0.1, 1.0).unwrap();
            }
            assert_eq!((a.x, a.y), (b.x, b.y));
        }
    }

    #[test]
    fn pote_single_inner_is_y_first_alternation() {
        let f = |t: &Tape, x: Var, y: Var, _: Var| {
            let xy = t.mul(x, y);
            let yy = t.mul(y, y);
            let xx = t.mul(x, x);
            let s = t.sub(xy, yy);
            let s = t.add(s, xx);
            t.sum(s)
        };
        let p = problem(f);
        let mut st = sg(1.0, 0.5);
        pote_outer(&p, &mut st, &mut rng(), 1, 0.1, 0.2).unwrap();
        assert_eq!(st.counter.grad_evals, 2);
        // y ← y + ρ(x − 2y), then x ← x − η(y + 2x)
        let y1 = 0.5 + 0.2 * (1.0 - 1.0);
        let x1 = 1.0 - 0.1 * (y1 + 2.0);
        assert!((st.y[0] - y1).abs() < 1e-15 && (st.x[0] - x1).abs() < 1e-15);
    }

    #[test]
    fn pote_converges_on_saddle() {
        // Q = x² + 2xy − 2y²: y*(x) = x/2 and max_y Q = 1.5x², saddle at the origin.
        let p = problem(|t, x, y, _| {
            let xx = t.mul(x, x);
            let xy = t.mul(x, y);
            let yy = t.mul(y, y);
            let s = t.add(xx, t.scale(xy, 2.0));
            let s = t.sub(s, t.scale(yy, 2.0));
            t.sum(s)
        });
        let mut st = sg(1.0, -1.0);
        for _ in 0..2000 {
            pote_outer(&p, &mut st, &mut rng(), 5, 0.05, 0.1).unwrap();
        }
        assert!(st.x[0].abs() < 1e-6 && st.y[0].abs() < 1e-6);
        // Inner loop tracks y ≈ x/2 along the way.
        let mut st = sg(1.0, -1.0);
        pote_outer(&p, &mut st, &mut rng(), 40, 0.0, 0.1).unwrap();
        assert!((st.y[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn pote_counts_evaluations() {
        let p = problem(bilinear);
        for q in 1..4 {
            let mut st = sg(1.0, 1.0);
            pote_outer(&p, &mut st, &mut rng(), q, 0.1, 0.1).unwrap();
            assert_eq!(st.counter.grad_evals, q + 1);
            let mut st = sg(1.0, 1.0);
            poteb_step(&p, &mut st, &mut rng(), q, 0.1, 0.1).unwrap();
            assert_eq!(st.counter, EvalCounter { grad_evals: q, unrolled_evals: 1 });
        }
    }

    #[test]
    fn poteb_rejects_zero_inner() {
        let p = problem(bilinear);
        let mut st = sg(1.0, 1.0);
        assert!(matches!(poteb_step(&p, &mut st, &mut rng(), 0, 0.1, 0.1), Err(Error::Config(_))));
        let cfg = MinMaxConfig { algorithm: Algorithm::Poteb, inner_steps: 0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn poteb_without_y_is_gradient_descent() {
        let p = problem(|t, x, _, _| {
            let xx = t.mul(x, x);
            t.sum(xx)
        });
        let mut st = sg(1.0, 0.3);
        poteb_step(&p, &mut st, &mut rng(), 3, 0.1, 0.5).unwrap();
        assert!((st.x[0] - 0.8).abs() < 1e-15);
        assert_eq!(st.y[0], 0.3);
    }

    #[test]
    fn poteb_gradient_matches_finite_differences() {
        // Q = −(x−1)² + 2xy − y²
        let p = problem(|t, x, y, _| {
            let xm = t.shift(x, -1.0);
            let a = t.mul(xm, xm);
            let xy = t.mul(x, y);
            let yy = t.mul(y, y);
            let s = t.sub(t.scale(xy, 2.0), a);
            let s = t.sub(s, yy);
            t.sum(s)
        });
        let inner = vec![vec![]; 4];
        let phi = |x: f64| unrolled_objective(&p, &[x], &[0.3], &inner, &vec![], 0.2).unwrap();
        for &x in &[-0.7, 0.1, 1.4] {
            let (_, g, _) = phi(x);
            let h = 1e-5;
            let fd = (phi(x + h).0 - phi(x - h).0) / (2.0 * h);
            assert!(crate::autodiff::rel_err(g[0], fd) < 1e-4, "{} vs {}", g[0], fd);
        }
    }

    #[test]
    fn adam_first_step_is_rate() {
        for &g in &[1e-3, 0.7, -25.0] {
            let mut s = AdamState::new(1);
            let mut p = [0.0];
            adam_update(&mut s, &mut p, &[g], 0.01).unwrap();
            assert!((p[0].abs() - 0.01).abs() < 1e-6);
            assert_eq!(p[0].signum(), -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_fixed() {
        let mut s = AdamState::new(2);
        let mut p = [0.4, -1.0];
        for _ in 0..50 {
            adam_update(&mut s, &mut p, &[0.0, 0.0], 0.1).unwrap();
        }
        assert_eq!(p, [0.4, -1.0]);
    }

    #[test]
    fn adam_constant_gradient_steps() {
        let mut s = AdamState::new(1);
        let mut p = [0.0];
        let mut last_gap = f64::INFINITY;
        for _ in 0..100 {
            let before = p[0];
            adam_update(&mut s, &mut p, &[0.3], 0.01).unwrap();
            let gap = ((before - p[0]) - 0.01).abs();
            assert!(gap <= last_gap + 1e-15);
            assert!(gap < 1e-6);
            last_gap = gap;
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let mut s = AdamState::new(1);
        assert!(matches!(adam_update(&mut s, &mut [0.0], &[f64::NAN], 0.1), Err(Error::Optimizer(_))));
        let p = problem(|t, x, y, _| {
            let d = t.div(x, t.scale(y, 0.0));
            t.sum(d)
        });
        let mut st = sg(0.0, 1.0);
        assert!(sgda_step(&p, &mut st, &mut rng(), 0.1).is_err());
    }

    #[test]
    fn sg_schedule_reaches_floor() {
        let cfg = MinMaxConfig { optimizer: OptimizerKind::SgLinearDecay, epochs: 11, ..Default::default() };
        assert_eq!(cfg.schedule(0, 0.1), 0.1);
        assert!((cfg.schedule(10, 0.1) - SG_FLOOR).abs() < 1e-18);
        assert!(cfg.schedule(5, 0.1) < 0.1);
        let adam = MinMaxConfig::default();
        assert_eq!(adam.schedule(7, 0.1), 0.1);
    }

    #[test]
    fn runs_are_deterministic() {
        let p = ClosureProblem {
            nx: 1,
            ny: 1,
            noise_dim: 1,
            noise_scale: 0.3,
            f: |t: &Tape, x: Var, y: Var, z: Var| {
                let xz = t.add(x, z);
                let a = t.mul(xz, y);
                let yy = t.mul(y, y);
                let s = t.sub(a, yy);
                t.sum(s)
            },
        };
        let go = || {
            let cfg = MinMaxConfig { epochs: 30, ..Default::default() };
            let mut st = MinMaxState::new(vec![0.5], vec![0.1], OptimizerKind::Adam);
            let mut tr = Vec::new();
            run(&p, &mut st, &mut rng(), &cfg, 0, &mut tr).unwrap();
            (st.x, st.y, tr.iter().map(|r| r.outer).collect::<Vec<_>>())
        };
        assert_eq!(go(), go());
    }
}

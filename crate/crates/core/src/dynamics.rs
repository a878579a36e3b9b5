//! Controlled vector fields and their time discretization.
//!
//! A macro step of length Δt is split into `p` substeps of size h = Δt/p,
//! with the controls frozen across the substeps.

use crate::autodiff::Scalar;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Dynamics {
    /// f = M x + P_a a + P_b b + c, all matrices row-major.
    Affine {
        d: usize,
        na: usize,
        nb: usize,
        m: Vec<f64>,
        pa: Vec<f64>,
        pb: Vec<f64>,
        c: Vec<f64>,
    },
    /// f = a R x + c b x/‖x‖ with R the quarter-turn rotation.
    Rotation { c: f64 },
    /// f = (2 clamp(b − 2a, −1, 1), a + b).
    Ex2,
    /// f = (2(1 − |a − b|), a + b); `legacy` selects (2 clamp(|a − b|, −1, 1), a + b).
    Ex3 { legacy: bool },
    /// Two planar point masses with speeds v1 (minimizer) and v2 (maximizer).
    Ex4 { v1: f64, v2: f64 },
}

impl Dynamics {
    pub fn zero(d: usize, na: usize, nb: usize) -> Self {
        Dynamics::Affine { d, na, nb, m: vec![0.0; d * d], pa: vec![0.0; d * na], pb: vec![0.0; d * nb], c: vec![0.0; d] }
    }

    pub fn constant(v: Vec<f64>, na: usize, nb: usize) -> Self {
        let d = v.len();
        Dynamics::Affine { d, na, nb, m: vec![0.0; d * d], pa: vec![0.0; d * na], pb: vec![0.0; d * nb], c: v }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::Affine { d, .. } => *d,
            Dynamics::Rotation { .. } | Dynamics::Ex2 | Dynamics::Ex3 { .. } => 2,
            Dynamics::Ex4 { .. } => 4,
        }
    }

    pub fn control_dims(&self) -> (usize, usize) {
        match self {
            Dynamics::Affine { na, nb, .. } => (*na, *nb),
            Dynamics::Rotation { .. } | Dynamics::Ex2 | Dynamics::Ex3 { .. } => (1, 1),
            Dynamics::Ex4 { .. } => (2, 2),
        }
    }

    /// True when f does not depend on x, so a step is a pure translation.
    pub fn is_state_independent(&self) -> bool {
        match self {
            Dynamics::Affine { m, .. } => m.iter().all(|&v| v == 0.0),
            Dynamics::Rotation { .. } => false,
            Dynamics::Ex2 | Dynamics::Ex3 { .. } | Dynamics::Ex4 { .. } => true,
        }
    }

    pub fn velocity<S: Scalar>(&self, x: &[S], a: &[S], b: &[S]) -> Vec<S> {
        match self {
            Dynamics::Affine { d, na, nb, m, pa, pb, c } => (0..*d)
                .map(|i| {
                    let mut acc: Option<S> = None;
                    let terms = (0..*d)
                        .map(|j| (m[i * d + j], x[j]))
                        .chain((0..*na).map(|j| (pa[i * na + j], a[j])))
                        .chain((0..*nb).map(|j| (pb[i * nb + j], b[j])));
                    for (w, v) in terms {
                        if w != 0.0 {
                            let t = if w == 1.0 { v } else { v.mul_c(w) };
                            acc = Some(match acc {
                                None => t,
                                Some(s) => s + t,
                            });
                        }
                    }
                    match acc {
                        Some(s) if c[i] != 0.0 => s.add_c(c[i]),
                        Some(s) => s,
                        None => x[0].lift(c[i]),
                    }
                })
                .collect(),
            Dynamics::Rotation { c } => {
                let r = (x[0] * x[0] + x[1] * x[1]).max_c(1e-16).sqrt();
                let cb = b[0].mul_c(*c) / r;
                vec![-(a[0] * x[1]) + cb * x[0], a[0] * x[0] + cb * x[1]]
            }
            Dynamics::Ex2 => vec![(b[0] - a[0].mul_c(2.0)).clamp(-1.0, 1.0).mul_c(2.0), a[0] + b[0]],
            Dynamics::Ex3 { legacy } => {
                let gap = (a[0] - b[0]).abs();
                let first = if *legacy { gap.clamp(-1.0, 1.0).mul_c(2.0) } else { (-gap).add_c(1.0).mul_c(2.0) };
                vec![first, a[0] + b[0]]
            }
            Dynamics::Ex4 { v1, v2 } => vec![a[0].mul_c(*v1), a[1].mul_c(*v1), b[0].mul_c(*v2), b[1].mul_c(*v2)],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum SchemeKind {
    Euler,
    Heun,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepScheme {
    pub kind: SchemeKind,
    pub substeps: usize,
}

impl Default for StepScheme {
    fn default() -> Self {
        StepScheme { kind: SchemeKind::Heun, substeps: 5 }
    }
}

fn axpy<S: Scalar>(x: &[S], h: f64, v: &[S]) -> Vec<S> {
    x.iter().zip(v).map(|(&xi, &vi)| xi + vi.mul_c(h)).collect()
}

pub fn euler_step<S: Scalar>(f: &Dynamics, x: &[S], a: &[S], b: &[S], h: f64) -> Vec<S> {
    axpy(x, h, &f.velocity(x, a, b))
}

/// x' = x + (h/2)(f(x) + f(x + h f(x))).
pub fn heun_step<S: Scalar>(f: &Dynamics, x: &[S], a: &[S], b: &[S], h: f64) -> Vec<S> {
    let k1 = f.velocity(x, a, b);
    let pred = axpy(x, h, &k1);
    let k2 = f.velocity(&pred, a, b);
    x.iter().zip(k1.iter().zip(&k2)).map(|(&xi, (&p, &q))| xi + (p + q).mul_c(0.5 * h)).collect()
}

fn substep<S: Scalar>(f: &Dynamics, kind: SchemeKind, x: &[S], a: &[S], b: &[S], h: f64) -> Vec<S> {
    match kind {
        SchemeKind::Euler => euler_step(f, x, a, b, h),
        SchemeKind::Heun => heun_step(f, x, a, b, h),
    }
}

/// The macro step y = F(x, a, b).
pub fn multi_step<S: Scalar>(f: &Dynamics, scheme: StepScheme, x: &[S], a: &[S], b: &[S], dt: f64) -> Vec<S> {
    let h = dt / scheme.substeps as f64;
    let mut y = x.to_vec();
    for _ in 0..scheme.substeps {
        y = substep(f, scheme.kind, &y, a, b, h);
    }
    y
}

/// The macro step together with G(x, a, b) = max_{0 ≤ j < p} g(Y_j).
///
/// The endpoint Y_p is not included; it is the next step's Y_0.
pub fn step_with_max<S: Scalar>(
    f: &Dynamics,
    scheme: StepScheme,
    x: &[S],
    a: &[S],
    b: &[S],
    dt: f64,
    g: Option<&dyn Fn(&[S]) -> S>,
) -> (Vec<S>, Option<S>) {
    let h = dt / scheme.substeps as f64;
    let mut y = x.to_vec();
    let mut gmax = g.map(|g| g(&y));
    for j in 0..scheme.substeps {
        y = substep(f, scheme.kind, &y, a, b, h);
        if j + 1 < scheme.substeps {
            if let (Some(g), Some(m)) = (g, gmax) {
                gmax = Some(m.max(g(&y)));
            }
        }
    }
    (y, gmax)
}

/// Substep states Y_0 = x, ..., Y_p = F(x, a, b).
pub fn substep_path<S: Scalar>(f: &Dynamics, scheme: StepScheme, x: &[S], a: &[S], b: &[S], dt: f64) -> Vec<Vec<S>> {
    let h = dt / scheme.substeps as f64;
    let mut path = Vec::with_capacity(scheme.substeps + 1);
    path.push(x.to_vec());
    for j in 0..scheme.substeps {
        let next = substep(f, scheme.kind, &path[j], a, b, h);
        path.push(next);
    }
    path
}

pub fn substep_max<S: Scalar>(
    f: &Dynamics,
    scheme: StepScheme,
    x: &[S],
    a: &[S],
    b: &[S],
    dt: f64,
    g: &dyn Fn(&[S]) -> S,
) -> S {
    step_with_max(f, scheme, x, a, b, dt, Some(g)).1.unwrap()
}

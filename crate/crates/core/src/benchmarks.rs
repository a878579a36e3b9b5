//! Named game presets with recommended training settings and references.

use std::f64::consts::PI;

use crate::dynamics::{Dynamics, SchemeKind, StepScheme};
use crate::error::{config, Result};
use crate::game::{BoxDomain, ControlSet, CostFn, GameSpec, Mode, Objective, TrainConfig};
use crate::metrics::{EvalGrid, EVAL_RES};
use crate::minimax::MinMaxConfig;
use crate::oracle::{self, DppConfig, EX1_CENTER, EX1_RADIUS, EX1_T0};

pub const PRESETS: [&str; 8] = ["ex1", "ex1-obstacle", "ex2", "ex3-minmax", "ex3-maxmin", "ex4", "rotation", "separable"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reference {
    /// ū(T + t₀, x) with rotation speed c.
    Example1 { c: f64 },
    Example2,
    Example3 { upper: bool },
    GridDpp,
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: String,
    pub spec: GameSpec,
    pub train: TrainConfig,
    pub mode: Mode,
    pub reference: Reference,
    pub eval: EvalGrid,
    /// Settings for grid references and oracle runs.
    pub dpp: DppConfig,
}

fn box_target() -> CostFn {
    CostFn::Clamp(Box::new(CostFn::Cube { dims: vec![0, 1], center: vec![0.0, 0.0], radius: 1.0 }), -0.5, 0.5)
}

fn paper_training() -> TrainConfig {
    TrainConfig {
        minimax: MinMaxConfig { epochs: 500, inner_steps: 5, batch: 1000, outer_rate: 2e-3, inner_rate: 2e-3, ..Default::default() },
        hidden_layers: 3,
        width: 20,
        objective: Objective::InfSup,
        workers: 1,
    }
}

fn planar(dynamics: Dynamics, phi: CostFn, horizon: f64, half: f64) -> GameSpec {
    GameSpec {
        dynamics,
        phi,
        g: None,
        horizon,
        steps: 4,
        scheme: StepScheme::default(),
        omega: BoxDomain::cube(2, half),
        control_a: ControlSet::Cube(1),
        control_b: ControlSet::Cube(1),
    }
}

fn ex1(c: f64, obstacle: bool) -> GameSpec {
    let phi = CostFn::RotatingTarget { s: EX1_T0, c, center: EX1_CENTER, radius: EX1_RADIUS, lo: -0.5, hi: 0.5 };
    let mut spec = planar(Dynamics::Rotation { c }, phi, 0.6 * PI, 3.0);
    if obstacle {
        let dist = CostFn::Ball { dims: vec![0, 1], center: vec![0.5, 1.5], radius: 0.5 };
        spec.g = Some(CostFn::Clamp(Box::new(CostFn::Neg(Box::new(dist))), -0.2, 0.2));
    }
    spec
}

fn ex4() -> GameSpec {
    let target = CostFn::Ball { dims: vec![0, 1], center: vec![3.0, 0.0], radius: 1.0 };
    let wall = CostFn::Neg(Box::new(CostFn::Cube { dims: vec![0, 1], center: vec![0.5, 1.5], radius: 0.75 }));
    let capture = CostFn::Neg(Box::new(CostFn::Separation { first: vec![0, 1], second: vec![2, 3] })).shifted(1.0);
    GameSpec {
        dynamics: Dynamics::Ex4 { v1: 1.0, v2: 0.7 },
        phi: target,
        g: Some(CostFn::Max(vec![wall, capture])),
        horizon: 4.0,
        steps: 4,
        scheme: StepScheme::default(),
        omega: BoxDomain::cube(4, 5.0),
        control_a: ControlSet::Ball(2),
        control_b: ControlSet::Ball(2),
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    let base_dpp = DppConfig { res: 201, controls: 41, ..Default::default() };
    let p = |spec: GameSpec, train: TrainConfig, mode: Mode, reference: Reference, eval: EvalGrid, dpp: DppConfig| Preset {
        name: name.to_string(),
        spec,
        train,
        mode,
        reference,
        eval,
        dpp,
    };
    let preset = match name {
        "ex1" => p(ex1(0.3, false), paper_training(), Mode::Global, Reference::Example1 { c: 0.3 }, EvalGrid::square(3.0, EVAL_RES), DppConfig { res: 161, controls: 21, ..base_dpp }),
        "ex1-obstacle" => p(ex1(0.3, true), paper_training(), Mode::Global, Reference::GridDpp, EvalGrid::square(3.0, EVAL_RES), DppConfig { res: 161, controls: 21, ..base_dpp }),
        "ex2" => p(planar(Dynamics::Ex2, box_target(), 0.4, 3.0), paper_training(), Mode::Global, Reference::Example2, EvalGrid::square(3.0, EVAL_RES), base_dpp),
        "ex3-minmax" | "ex3-maxmin" => {
            let upper = name == "ex3-maxmin";
            let mut train = paper_training();
            // Reduced from the 8000-point, 3000-epoch reference setting.
            train.minimax.batch = 2000;
            train.minimax.epochs = 800;
            train.objective = if upper { Objective::SupInf } else { Objective::InfSup };
            let dpp = DppConfig { objective: train.objective, ..base_dpp };
            p(planar(Dynamics::Ex3 { legacy: false }, box_target(), 0.4, 3.0), train, Mode::Global, Reference::Example3 { upper }, EvalGrid::square(3.0, EVAL_RES), dpp)
        }
        "ex4" => {
            let mut train = paper_training();
            train.minimax.batch = 20000;
            train.minimax.epochs = 1000;
            train.minimax.inner_steps = 10;
            let eval = EvalGrid { lo: [-5.0; 2], hi: [5.0; 2], res: [EVAL_RES; 2], tail: vec![0.0, -2.0] };
            p(ex4(), train, Mode::Reversed, Reference::None, eval, DppConfig { res: 21, controls: 8, ..base_dpp })
        }
        "rotation" => {
            let phi = CostFn::Clamp(Box::new(CostFn::Ball { dims: vec![0, 1], center: vec![1.0, 0.0], radius: 0.5 }), -0.5, 0.5);
            let spec = GameSpec { omega: BoxDomain::cube(2, 2.0), ..planar(Dynamics::Rotation { c: 0.2 }, phi, 0.6 * PI, 2.0) };
            p(spec, paper_training(), Mode::Global, Reference::GridDpp, EvalGrid::square(2.0, EVAL_RES), DppConfig { res: 161, controls: 21, ..base_dpp })
        }
        "separable" => {
            let dynamics = Dynamics::Affine { d: 2, na: 1, nb: 1, m: vec![-1.0, 0.0, 0.0, -1.0], pa: vec![1.0, 0.0], pb: vec![0.0, 1.0], c: vec![0.0; 2] };
            let phi = CostFn::Ball { dims: vec![0, 1], center: vec![0.0, 0.0], radius: 1.0 };
            let spec = GameSpec {
                scheme: StepScheme { kind: SchemeKind::Euler, substeps: 1 },
                omega: BoxDomain::cube(2, 2.0),
                ..planar(dynamics, phi, 1.0, 2.0)
            };
            p(spec, paper_training(), Mode::Global, Reference::GridDpp, EvalGrid::square(2.0, 41), DppConfig { res: 101, controls: 21, ..base_dpp })
        }
        _ => return config(format!("unknown preset '{name}' (known: {})", PRESETS.join(", "))),
    };
    Ok(preset)
}

impl Preset {
    /// Reference values at the nodes of `grid`, if the preset has one.
    pub fn reference_values(&self, grid: &EvalGrid) -> Result<Option<Vec<f64>>> {
        let t = self.spec.horizon;
        let pts = (0..grid.len()).map(|n| grid.point(n));
        Ok(match self.reference {
            Reference::Example1 { c } => Some(pts.map(|x| oracle::analytic_example1(t + EX1_T0, &x, c)).collect()),
            Reference::Example2 => Some(pts.map(|x| oracle::analytic_example2(t, &x)).collect()),
            Reference::Example3 { upper } => Some(pts.map(|x| oracle::analytic_example3(t, &x, upper)).collect()),
            Reference::GridDpp => {
                let v = oracle::dpp_value(&self.spec, &self.dpp)?;
                Some(pts.map(|x| v.interpolate(&x)).collect())
            }
            Reference::None => None,
        })
    }
}

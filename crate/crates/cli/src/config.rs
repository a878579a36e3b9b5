//! Run configuration: a TOML file with top-level keys and the sections
//! `[game]`, `[train]`, `[eval]`, `[oracle]` and `[bench]`.
//!
//! Either `preset = "<name>"` or an inline `[spec]` table selects the game;
//! every other key overrides the preset's defaults. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use diffgame::benchmarks::{self, Preset, Reference};
use diffgame::dynamics::SchemeKind;
use diffgame::game::{GameSpec, Mode, Objective, TrainConfig};
use diffgame::metrics::{EvalGrid, ETA_LOC, EVAL_RES};
use diffgame::minimax::{Algorithm, MinMaxConfig, OptimizerKind};
use diffgame::oracle::DppConfig;
use diffgame::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<GameSpec>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub game: GameSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub oracle: OracleSection,
    #[serde(default, skip_serializing_if = "is_default")]
    pub bench: BenchSection,
}

fn is_default<T: Default + PartialEq>(t: &T) -> bool {
    *t == T::default()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// "euler" or "heun".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub substeps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outer_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// "infsup" or "supinf".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub res: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lo: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hi: Option<[f64; 2]>,
    /// Fixed values of the state coordinates beyond the first two.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    /// Directory holding `alpha_k.w` and `b_k.w`; defaults to `<out>/weights`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    /// Another run directory to compare against (lower vs upper value).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_with: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare_tol: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// "dpp" (default), "theorem1" or "rate-check".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub res: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub controls: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instances: Option<usize>,
    /// Upper bound on the strategy count of random finite games.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_steps: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_steps: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    /// "steps" (error and order table over N) or "algorithms" (success counts).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    /// Names such as "sgda", "pote+adam" or "pote+sg".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algorithms: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<u64>,
    /// A run succeeds when its local error is at most this.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success: Option<f64>,
}

pub fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Everything a command needs, validated.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub preset: Preset,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub eta: f64,
    pub config: RunConfig,
}

pub fn parse_objective(s: &str) -> Result<Objective> {
    match s {
        "infsup" => Ok(Objective::InfSup),
        "supinf" => Ok(Objective::SupInf),
        _ => cfg_err(format!("unknown objective '{s}' (expected infsup or supinf)")),
    }
}

pub fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::InfSup => "infsup",
        Objective::SupInf => "supinf",
    }
}

/// "alg" or "alg+optimizer"; the optimizer defaults to ADAM.
pub fn parse_algorithm(s: &str) -> Result<(Algorithm, OptimizerKind)> {
    let (a, o) = s.split_once('+').unwrap_or((s, "adam"));
    Ok((Algorithm::parse(a)?, OptimizerKind::parse(o)?))
}

/// The default game for an inline spec: paper-scale training, a grid
/// reference in the plane, and an evaluation slice through the centre of Ω.
fn custom_preset(spec: GameSpec) -> Result<Preset> {
    spec.validate()?;
    let (lo, hi) = (&spec.omega.lo, &spec.omega.hi);
    if lo.len() < 2 {
        return cfg_err("inline specs need at least two state dimensions");
    }
    let tail = lo.iter().zip(hi).skip(2).map(|(a, b)| 0.5 * (a + b)).collect();
    let eval = EvalGrid::new([lo[0], lo[1]], [hi[0], hi[1]], [EVAL_RES; 2], tail)?;
    let reference = if spec.state_dim() == 2 { Reference::GridDpp } else { Reference::None };
    let train = benchmarks::preset("ex2")?.train;
    Ok(Preset { name: "custom".into(), spec, train, mode: Mode::Global, reference, eval, dpp: DppConfig::default() })
}

fn apply_train(t: &TrainSection, train: &mut TrainConfig) -> Result<()> {
    let m: &mut MinMaxConfig = &mut train.minimax;
    if let Some(a) = &t.algorithm {
        let (alg, opt) = parse_algorithm(a)?;
        m.algorithm = alg;
        if a.contains('+') {
            m.optimizer = opt;
        }
    }
    if let Some(o) = &t.optimizer {
        m.optimizer = OptimizerKind::parse(o)?;
    }
    m.epochs = t.epochs.unwrap_or(m.epochs);
    m.inner_steps = t.inner_steps.unwrap_or(m.inner_steps);
    m.batch = t.batch.unwrap_or(m.batch);
    m.outer_rate = t.outer_rate.unwrap_or(m.outer_rate);
    m.inner_rate = t.inner_rate.unwrap_or(m.inner_rate);
    m.gamma = t.gamma.unwrap_or(m.gamma);
    m.validate()?;
    train.hidden_layers = t.hidden_layers.unwrap_or(train.hidden_layers);
    train.width = t.width.unwrap_or(train.width);
    if train.hidden_layers == 0 || train.width == 0 {
        return cfg_err("networks need at least one hidden layer of positive width");
    }
    if let Some(o) = &t.objective {
        train.objective = parse_objective(o)?;
    }
    Ok(())
}

impl RunConfig {
    /// Folds the overrides into the selected preset and validates the result.
    pub fn resolve(&self) -> Result<Resolved> {
        let mut preset = match (&self.preset, &self.spec) {
            (Some(_), Some(_)) => return cfg_err("give either 'preset' or '[spec]', not both"),
            (Some(name), None) => benchmarks::preset(name)?,
            (None, Some(spec)) => custom_preset(spec.clone())?,
            (None, None) => return cfg_err("the config needs 'preset' or an inline '[spec]' table"),
        };
        if let Some(m) = &self.mode {
            preset.mode = Mode::parse(m)?;
        }
        let g = &self.game;
        let spec = &mut preset.spec;
        spec.steps = g.steps.unwrap_or(spec.steps);
        spec.horizon = g.horizon.unwrap_or(spec.horizon);
        spec.scheme.substeps = g.substeps.unwrap_or(spec.scheme.substeps);
        if let Some(s) = &g.scheme {
            spec.scheme.kind = match s.as_str() {
                "euler" => SchemeKind::Euler,
                "heun" => SchemeKind::Heun,
                _ => return cfg_err(format!("unknown scheme '{s}' (expected euler or heun)")),
            };
        }
        spec.validate()?;
        apply_train(&self.train, &mut preset.train)?;

        let workers = self.workers.unwrap_or(1);
        if workers == 0 {
            return cfg_err("workers must be at least 1");
        }
        preset.train.workers = workers;
        preset.dpp.workers = workers;
        preset.dpp.objective = preset.train.objective;

        let e = &self.eval;
        let grid = &preset.eval;
        let res = e.res.map(|r| [r; 2]).unwrap_or(grid.res);
        let tail = e.tail.clone().unwrap_or_else(|| grid.tail.clone());
        if tail.len() + 2 != preset.spec.state_dim() {
            return cfg_err(format!("eval.tail needs {} values", preset.spec.state_dim().saturating_sub(2)));
        }
        preset.eval = EvalGrid::new(e.lo.unwrap_or(grid.lo), e.hi.unwrap_or(grid.hi), res, tail)?;
        let eta = e.eta.unwrap_or(ETA_LOC);
        if !(eta > 0.0) {
            return cfg_err("eval.eta must be positive");
        }

        let o = &self.oracle;
        preset.dpp.res = o.res.unwrap_or(preset.dpp.res);
        preset.dpp.controls = o.controls.unwrap_or(preset.dpp.controls);
        preset.dpp.margin = o.margin.unwrap_or(preset.dpp.margin);
        if preset.dpp.res < 2 || preset.dpp.controls == 0 || !(preset.dpp.margin >= 0.0) {
            return cfg_err("oracle needs res >= 2, controls >= 1 and margin >= 0");
        }

        Ok(Resolved {
            preset,
            seed: self.seed.unwrap_or(0),
            workers,
            out: self.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            eta,
            config: self.clone(),
        })
    }
}

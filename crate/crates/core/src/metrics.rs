//! Error measures against a reference, convergence orders, and level-set
//! grids for reporting.

use std::io::Write;

use crate::autodiff::Mat;
use crate::error::{Error, Result};

/// Default half-width of the band around the zero level set.
pub const ETA_LOC: f64 = 0.2;
/// Default evaluation resolution per axis.
pub const EVAL_RES: usize = 101;

fn same_len(v: &[f64], r: &[f64]) -> Result<()> {
    if v.len() != r.len() {
        return Err(Error::Metric(format!("value count {} differs from reference count {}", v.len(), r.len())));
    }
    if v.is_empty() {
        return Err(Error::Metric("no values".into()));
    }
    Ok(())
}

/// Mean |V − v_ref| over the nodes with |v_ref| ≤ η.
pub fn local_l1_error(v: &[f64], v_ref: &[f64], eta: f64) -> Result<f64> {
    same_len(v, v_ref)?;
    let (sum, n) = v
        .iter()
        .zip(v_ref)
        .filter(|(_, r)| r.abs() <= eta)
        .fold((0.0, 0usize), |(s, n), (a, r)| (s + (a - r).abs(), n + 1));
    if n == 0 {
        return Err(Error::Metric(format!("no reference value within {eta} of zero")));
    }
    Ok(sum / n as f64)
}

pub fn global_l1_error(v: &[f64], v_ref: &[f64]) -> Result<f64> {
    same_len(v, v_ref)?;
    Ok(v.iter().zip(v_ref).map(|(a, r)| (a - r).abs()).sum::<f64>() / v.len() as f64)
}

/// Zero counts as non-negative.
pub fn is_negative(v: f64) -> bool {
    v < 0.0
}

/// Fraction of nodes where V and v_ref have the same sign.
pub fn sign_agreement(v: &[f64], v_ref: &[f64]) -> Result<f64> {
    same_len(v, v_ref)?;
    let agree = v.iter().zip(v_ref).filter(|(a, r)| is_negative(**a) == is_negative(**r)).count();
    Ok(agree as f64 / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorReport {
    pub local_l1: f64,
    pub global_l1: f64,
    pub sign_agreement: f64,
    pub band_nodes: usize,
    pub nodes: usize,
    pub eta: f64,
}

pub fn error_report(v: &[f64], v_ref: &[f64], eta: f64) -> Result<ErrorReport> {
    Ok(ErrorReport {
        local_l1: local_l1_error(v, v_ref, eta)?,
        global_l1: global_l1_error(v, v_ref)?,
        sign_agreement: sign_agreement(v, v_ref)?,
        band_nodes: v_ref.iter().filter(|r| r.abs() <= eta).count(),
        nodes: v.len(),
        eta,
    })
}

/// log2(e_N / e_2N) for consecutive entries of a doubling sequence.
pub fn convergence_order(errors: &[f64]) -> Result<Vec<f64>> {
    if let Some(e) = errors.iter().find(|e| !(**e > 0.0)) {
        return Err(Error::Metric(format!("errors must be positive, found {e}")));
    }
    Ok(errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect())
}

/// Least-squares slope of log(error) against log(step size).
pub fn fitted_order(dts: &[f64], errors: &[f64]) -> Result<f64> {
    if dts.len() != errors.len() {
        return Err(Error::Metric("step and error lists differ in length".into()));
    }
    if dts.len() < 2 {
        return Err(Error::Metric("a slope needs at least two step sizes".into()));
    }
    if errors.iter().chain(dts).any(|e| !(*e > 0.0)) {
        return Err(Error::Metric("step sizes and errors must be positive".into()));
    }
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Metric("step sizes are all equal".into()));
    }
    Ok(sxy / sxx)
}

/// A planar evaluation grid, optionally a slice of a higher-dimensional
/// space with the remaining coordinates fixed to `tail`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub res: [usize; 2],
    pub tail: Vec<f64>,
}

impl EvalGrid {
    pub fn new(lo: [f64; 2], hi: [f64; 2], res: [usize; 2], tail: Vec<f64>) -> Result<Self> {
        if res[0] < 2 || res[1] < 2 {
            return Err(Error::Config("evaluation grid needs at least 2 nodes per axis".into()));
        }
        if !(lo[0] < hi[0] && lo[1] < hi[1]) {
            return Err(Error::Config("evaluation grid needs lo < hi".into()));
        }
        Ok(EvalGrid { lo, hi, res, tail })
    }

    pub fn square(half: f64, res: usize) -> Self {
        EvalGrid { lo: [-half; 2], hi: [half; 2], res: [res; 2], tail: vec![] }
    }

    pub fn len(&self) -> usize {
        self.res[0] * self.res[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        2 + self.tail.len()
    }

    pub fn axis(&self, k: usize, i: usize) -> f64 {
        self.lo[k] + (self.hi[k] - self.lo[k]) * i as f64 / (self.res[k] - 1) as f64
    }

    /// Node `n` in row-major order (second axis fastest), full dimension.
    pub fn point(&self, n: usize) -> Vec<f64> {
        let mut p = vec![self.axis(0, n / self.res[1]), self.axis(1, n % self.res[1])];
        p.extend_from_slice(&self.tail);
        p
    }

    pub fn points(&self) -> Mat {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.len() * d);
        for n in 0..self.len() {
            data.extend(self.point(n));
        }
        Mat::from_vec(self.len(), d, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSetGrid {
    pub grid: EvalGrid,
    pub values: Vec<f64>,
    /// −1 for negative values, +1 otherwise.
    pub signs: Vec<i8>,
}

impl LevelSetGrid {
    pub fn from_values(grid: EvalGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Metric(format!("{} values for {} grid nodes", values.len(), grid.len())));
        }
        let signs = values.iter().map(|&v| if is_negative(v) { -1 } else { 1 }).collect();
        Ok(LevelSetGrid { grid, values, signs })
    }

    pub fn negative_nodes(&self) -> impl Iterator<Item = (Vec<f64>, f64)> + '_ {
        (0..self.values.len()).filter(|&n| self.signs[n] < 0).map(|n| (self.grid.point(n), self.values[n]))
    }

    /// Metadata line, header, then one row per node with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        let tail: Vec<String> = g.tail.iter().map(|t| format!("{t}")).collect();
        writeln!(
            w,
            "# lo={},{} hi={},{} res={},{} slice={}",
            g.lo[0],
            g.lo[1],
            g.hi[0],
            g.hi[1],
            g.res[0],
            g.res[1],
            tail.join(",")
        )?;
        writeln!(w, "x1,x2,value,sign")?;
        for n in 0..g.len() {
            let p = g.point(n);
            writeln!(w, "{:.16e},{:.16e},{:.16e},{}", p[0], p[1], self.values[n], self.signs[n])?;
        }
        Ok(())
    }
}

pub fn level_set_grid(f: impl Fn(&[f64]) -> f64, grid: &EvalGrid) -> Result<LevelSetGrid> {
    let values = (0..grid.len()).map(|n| f(&grid.point(n))).collect();
    LevelSetGrid::from_values(grid.clone(), values)
}

/// Error and order table rows for a sweep over step counts.
pub fn write_order_table<W: Write>(mut w: W, steps: &[usize], errors: &[f64]) -> Result<()> {
    let orders = convergence_order(errors)?;
    writeln!(w, "N,e_l1_loc,order")?;
    for (i, (n, e)) in steps.iter().zip(errors).enumerate() {
        let o = if i == 0 { String::new() } else { format!("{:.16e}", orders[i - 1]) };
        writeln!(w, "{n},{e:.16e},{o}")?;
    }
    Ok(())
}

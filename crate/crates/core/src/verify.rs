//! Independent verification of constructed functions.
//!
//! Every number a check compares is recomputed here from the function
//! values, the space and the target: measures by direct summation, chart
//! derivatives by [`differential`] on the finished `u`, quadratic decay by
//! exhaustive pair scans. Pipeline logs only supply the tolerances the
//! construction promises (the α sequence, stage tolerances and budgets).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Serialize, Serializer};
use serde_json::{json, Value};

use crate::charts::{differential, ChartAtlas};
use crate::cubes::CubeTree;
use crate::error::{Error, Result};
use crate::lipfield::{lip_field, lip_norm};
use crate::lusin::LusinResult;
use crate::prescribe::{prescribe, PrescriptionResult, TargetField, DEFAULT_N_MAX, P_REPORT};
use crate::space::{estimate_quasiconvexity, PointSet, Space, EXHAUSTIVE_AUDIT_POINTS};

/// Slope window around `1/p - 1/η` accepted by a sweep.
pub const SLOPE_WINDOW: f64 = 0.75;

/// Largest accepted max/min ratio of `‖Lip_u‖_p / (ε^{1/p-1/η} ‖F‖_p)` in a sweep.
pub const RATIO_SPREAD_LIMIT: f64 = 25.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    /// multiple of `h` added to the derivative bound
    pub h_slack: f64,
    /// absolute slack for accumulated rounding
    pub abs: f64,
    /// differential window in multiples of `h`
    pub window: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            h_slack: 2.0,
            abs: 1e-9,
            window: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub id: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
    /// point responsible for the measured value
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<usize>,
}

impl Check {
    pub fn new(id: &str, reference: &str, measured: f64, bound: f64) -> Self {
        Self {
            id: id.into(),
            reference: reference.into(),
            measured,
            bound,
            pass: measured <= bound,
            witness: None,
        }
    }

    fn at(mut self, witness: Option<usize>) -> Self {
        self.witness = witness;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<Check>,
    pub env: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepTable>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }

    pub fn check(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }
}

fn p_label(p: f64) -> String {
    if p.is_infinite() {
        "inf".into()
    } else {
        format!("{p}")
    }
}

fn ser_p<S: Serializer>(p: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if p.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*p)
    }
}

fn sum_weights(space: &Space, pts: impl Iterator<Item = usize>) -> f64 {
    let mut total = 0.0;
    for x in pts {
        total += space.weight(x);
    }
    total
}

fn inv_p(p: f64) -> f64 {
    if p.is_infinite() {
        0.0
    } else {
        1.0 / p
    }
}

/// `(Σ_j LIP(φ_j)^p ∫_{Ω ∩ U_j} |f_j|^p)^{1/p}`, or the sup form for `p = ∞`.
fn target_norm(space: &Space, atlas: &ChartAtlas, omega: &PointSet, f: &TargetField, p: f64) -> f64 {
    let scaled = |x: usize| {
        let v = &f.values[x];
        atlas.chart_of(x).lip_phi * v.iter().map(|c| c * c).sum::<f64>().sqrt()
    };
    if p.is_infinite() {
        omega.iter().map(scaled).fold(0.0, f64::max)
    } else {
        let mut s = 0.0;
        for x in omega.iter() {
            s += scaled(x).powf(p) * space.weight(x);
        }
        s.powf(1.0 / p)
    }
}

fn check_len(what: &str, found: usize, n: usize) -> Result<()> {
    if found != n {
        return Err(Error::InvalidParam(format!("{what} has {found} entries, space has {n} points")));
    }
    Ok(())
}

fn worst_over(
    points: &[usize],
    eval: impl Fn(usize) -> (f64, f64) + Sync,
) -> (f64, f64, Option<usize>) {
    // (measured, bound, witness) at the point with the largest excess; ties keep the lower index
    let rows: Vec<(usize, f64, f64)> = points
        .par_iter()
        .map(|&x| {
            let (m, b) = eval(x);
            (x, m, b)
        })
        .collect();
    let mut best: Option<(usize, f64, f64)> = None;
    for (x, m, b) in rows {
        let excess = if m.is_nan() { f64::INFINITY } else { m - b };
        match best {
            Some((_, bm, bb)) if !(excess > bm - bb) => {}
            _ => best = Some((x, m, b)),
        }
    }
    match best {
        Some((x, m, b)) => (if m.is_nan() { f64::INFINITY } else { m }, b, Some(x)),
        None => (0.0, 0.0, None),
    }
}

/// Checks a prescription run: exceptional-set budget, support, and the
/// first-order defect of the target at every kept point.
///
/// The defect at `x` is the larger of `|f(x) - d u(x)|` and the residual of
/// the fitted slope over the window, so both a wrong slope and a
/// non-affine `u` near `x` are caught.
pub fn verify_alberti(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    result: &PrescriptionResult,
    tol: &Tolerance,
) -> Result<Report> {
    let n = space.len();
    check_len("u", result.u.len(), n)?;
    check_len("target", f.values.len(), n)?;
    if !result.omega.is_subset(omega) {
        return Err(Error::InvalidParam("result domain is not inside Ω".into()));
    }
    if omega.iter().any(|x| !result.omega.contains(x) && Some(x) != result.dropped) {
        return Err(Error::InvalidParam("result domain misses points of Ω".into()));
    }
    if !result.kept.is_subset(&result.omega) {
        return Err(Error::InvalidParam("kept set leaves the domain".into()));
    }
    let h = space.resolution();
    let rho = tol.window * h;
    let dom = &result.omega;
    let mut report = Report::default();

    let missing: Vec<usize> = dom.iter().filter(|&x| !result.kept.contains(x)).collect();
    let a_measure = sum_weights(space, missing.iter().copied());
    let allowed = result.eps * sum_weights(space, dom.iter());
    report.checks.push(Check::new("budget", "alberti:budget", a_measure, allowed));
    let mismatch = missing.iter().filter(|&&x| !result.exceptional.contains(x)).count()
        + result.exceptional.iter().filter(|&x| result.kept.contains(x) || !dom.contains(x)).count();
    report
        .checks
        .push(Check::new("exceptional_set", "plumbing", mismatch as f64, 0.0));

    let outside: Vec<usize> = (0..n).filter(|&x| !dom.contains(x) && result.u.values[x] != 0.0).collect();
    report.checks.push(
        Check::new("support", "alberti:support", outside.len() as f64, 0.0).at(outside.first().copied()),
    );

    let alpha = result.constants.alphas.last().copied().unwrap_or(0.0);
    let bound = alpha + result.tail + tol.h_slack * h + tol.abs;
    let kept: Vec<usize> = result.kept.indices().to_vec();
    let (measured, bound, witness) = worst_over(&kept, |x| {
        let defect = match differential(space, atlas, &result.u, x, rho) {
            Ok(d) => {
                let gap = d
                    .g
                    .iter()
                    .zip(&f.values[x])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                gap.max(d.residual)
            }
            Err(_) => f64::INFINITY,
        };
        (defect, bound)
    });
    report
        .checks
        .push(Check::new("derivative", "alberti:match", measured, bound).at(witness));

    let lip = lip_field(space, &result.u, rho)?;
    let eta = tree.constants.eta;
    let norms: Vec<Value> = P_REPORT
        .iter()
        .map(|&p| {
            let lp = lip_norm(space, &lip, p, None).unwrap_or(f64::NAN);
            let formula = result.eps.powf(inv_p(p) - 1.0 / eta) * target_norm(space, atlas, dom, f, p);
            let ratio = if formula > 0.0 { lp / formula } else { 0.0 };
            json!({"p": p_label(p), "lip_norm": lp, "formula": formula, "ratio": ratio})
        })
        .collect();
    let env = &mut report.env;
    env.insert("eps".into(), json!(result.eps));
    env.insert("h".into(), json!(h));
    env.insert("window".into(), json!(rho));
    env.insert("C1".into(), json!(tree.constants.c1));
    env.insert("eta".into(), json!(eta));
    env.insert("M".into(), json!(result.constants.m));
    env.insert("alpha_final".into(), json!(alpha));
    env.insert("tail".into(), json!(result.tail));
    env.insert("kept".into(), json!(kept.len()));
    env.insert("exceptional_measure".into(), json!(a_measure));
    env.insert("dropped".into(), json!(result.dropped));
    env.insert("norms".into(), Value::Array(norms));
    insert_quasiconvexity(space, env);
    Ok(report)
}

fn insert_quasiconvexity(space: &Space, env: &mut BTreeMap<String, Value>) {
    if space.len() <= EXHAUSTIVE_AUDIT_POINTS {
        if let Ok(c) = estimate_quasiconvexity(space) {
            env.insert("C_q".into(), json!(c));
        }
    }
}

/// `‖Δb‖₂ / σ_min(A)` for the weighted design at `x`, with `|Δb_y| ≤ e·d(x, y)`:
/// how far later stages can move the windowed slope at an earlier capture.
pub fn interference_bound(space: &Space, atlas: &ChartAtlas, x: usize, rho: f64, e: f64) -> f64 {
    if e == 0.0 {
        return 0.0;
    }
    let chart = atlas.chart_of(x);
    let rows: Vec<(usize, f64)> = (0..space.len())
        .filter(|&y| y != x)
        .map(|y| (y, space.dist(x, y)))
        .filter(|&(_, d)| d <= rho)
        .collect();
    if rows.is_empty() || chart.k == 0 {
        return f64::INFINITY;
    }
    let a = DMatrix::from_fn(rows.len(), chart.k, |r, i| {
        let (y, d) = rows[r];
        (chart.phi[y][i] - chart.phi[x][i]) / d
    });
    let smin = a.singular_values().min();
    if !(smin > 0.0) {
        return f64::INFINITY;
    }
    let db = rows.iter().map(|&(_, d)| (e * d) * (e * d)).sum::<f64>().sqrt();
    db / smin
}

/// Checks an exhaustion run: sup norm, support, flatness outside `Ω` and
/// the derivative at every captured point against its stage tolerance.
pub fn verify_lusin(
    space: &Space,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    result: &LusinResult,
    tol: &Tolerance,
) -> Result<Report> {
    let n = space.len();
    check_len("u", result.u.len(), n)?;
    check_len("target", f.values.len(), n)?;
    if !result.captured.is_subset(omega) {
        return Err(Error::InvalidParam("captured set leaves Ω".into()));
    }
    if result.stage_of.len() != result.captured.len()
        || result.stage_of.keys().any(|&x| !result.captured.contains(x))
    {
        return Err(Error::InvalidParam("stage map disagrees with the captured set".into()));
    }
    let h = space.resolution();
    let rho = tol.window * h;
    let eps = result.eps;
    let u = &result.u.values;
    let mut report = Report::default();

    let (sup, at) = (0..n).fold((0.0f64, None), |(m, w), x| {
        if u[x].abs() > m {
            (u[x].abs(), Some(x))
        } else {
            (m, w)
        }
    });
    report.checks.push(Check::new("sup", "lusin:sup", sup, eps).at(at));

    let outside: Vec<usize> = (0..n).filter(|&x| !omega.contains(x)).collect();
    let leaks: Vec<usize> = outside.iter().copied().filter(|&x| u[x] != 0.0).collect();
    report
        .checks
        .push(Check::new("support", "lusin:support", leaks.len() as f64, 0.0).at(leaks.first().copied()));

    let (decay, _, witness) = worst_over(&outside, |x| {
        let mut worst = 0.0f64;
        for y in 0..n {
            if y != x {
                let d = space.dist(x, y);
                worst = worst.max((u[y] - u[x]).abs() / (d * d));
            }
        }
        (worst, eps)
    });
    report.checks.push(Check::new("decay", "lusin:flat", decay, eps).at(witness));

    let lip = lip_field(space, &result.u, rho)?;
    let (ext, at) = outside.iter().fold((0.0f64, None), |(m, w), &x| {
        if lip.values[x] > m {
            (lip.values[x], Some(x))
        } else {
            (m, w)
        }
    });
    report
        .checks
        .push(Check::new("exterior_lip", "lusin:flat", ext, eps * rho).at(at));

    let stage_tol: BTreeMap<usize, f64> = result.stages.iter().map(|s| (s.i, s.tolerance)).collect();
    let captured: Vec<usize> = result.captured.indices().to_vec();
    let (measured, bound, witness) = worst_over(&captured, |x| {
        let i = result.stage_of[&x];
        let bound = stage_tol.get(&i).copied().unwrap_or(0.0)
            + interference_bound(space, atlas, x, rho, result.eps_after(i))
            + tol.abs;
        let defect = match differential(space, atlas, &result.u, x, rho) {
            Ok(d) => d
                .g
                .iter()
                .zip(&f.values[x])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Err(_) => f64::INFINITY,
        };
        (defect, bound)
    });
    report
        .checks
        .push(Check::new("derivative", "lusin:match", measured, bound).at(witness));

    let env = &mut report.env;
    env.insert("eps".into(), json!(eps));
    env.insert("h".into(), json!(h));
    env.insert("window".into(), json!(rho));
    env.insert("basepoint".into(), json!(result.basepoint));
    env.insert("captured".into(), json!(captured.len()));
    env.insert("captured_measure".into(), json!(sum_weights(space, captured.iter().copied())));
    let left = omega.iter().filter(|&x| !result.captured.contains(x));
    env.insert("uncaptured_measure".into(), json!(sum_weights(space, left)));
    env.insert(
        "stages".into(),
        Value::Array(
            result
                .stages
                .iter()
                .map(|s| json!({"i": s.i, "radius": s.radius, "eps": s.eps, "captured": s.captured.len(), "tolerance": s.tolerance}))
                .collect(),
        ),
    );
    insert_quasiconvexity(space, env);
    Ok(report)
}

// ---------------------------------------------------------------------------
// ε sweeps

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub eps: f64,
    #[serde(serialize_with = "ser_p")]
    pub p: f64,
    pub lip_norm: f64,
    pub formula: f64,
    pub ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlopeFit {
    #[serde(serialize_with = "ser_p")]
    pub p: f64,
    pub slope: Option<f64>,
    pub expected: f64,
    pub r2: Option<f64>,
    pub points: usize,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub eta: f64,
    pub rows: Vec<SweepRow>,
    pub fits: Vec<SlopeFit>,
    /// max/min ratio over all successful rows with a positive ratio
    pub ratio_spread: f64,
    pub failed_runs: usize,
}

/// Least-squares slope and R² of `(x, y)`.
pub fn fit_line(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}

/// Runs the prescription for every `ε` and tabulates `‖Lip_u‖_p` against
/// `ε^{1/p - 1/η} ‖F‖_p`. Failed runs become rows carrying the error.
pub fn sweep_epsilon(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    eps_list: &[f64],
    p_list: &[f64],
) -> Result<SweepTable> {
    if eps_list.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "a sweep needs at least 3 values of eps, got {}",
            eps_list.len()
        )));
    }
    if let Some(&p) = p_list.iter().find(|&&p| !(p >= 1.0)) {
        return Err(Error::InvalidParam(format!("exponent p = {p} < 1")));
    }
    let eta = tree.constants.eta;
    let rho = 2.0 * space.resolution();
    let runs: Vec<std::result::Result<Vec<f64>, String>> = eps_list
        .par_iter()
        .map(|&eps| {
            let run = prescribe(space, tree, atlas, omega, f, eps, DEFAULT_N_MAX).map_err(|e| e.to_string())?;
            let lip = lip_field(space, &run.u, rho).map_err(|e| e.to_string())?;
            p_list
                .iter()
                .map(|&p| lip_norm(space, &lip, p, None).map_err(|e| e.to_string()))
                .collect()
        })
        .collect();
    let mut rows = Vec::new();
    let mut failed_runs = 0;
    for (&eps, run) in eps_list.iter().zip(&runs) {
        if run.is_err() {
            failed_runs += 1;
        }
        for (k, &p) in p_list.iter().enumerate() {
            let formula = eps.powf(inv_p(p) - 1.0 / eta) * target_norm(space, atlas, omega, f, p);
            rows.push(match run {
                Ok(norms) => SweepRow {
                    eps,
                    p,
                    lip_norm: norms[k],
                    formula,
                    ratio: if formula > 0.0 { norms[k] / formula } else { 0.0 },
                    error: None,
                },
                Err(e) => SweepRow {
                    eps,
                    p,
                    lip_norm: f64::NAN,
                    formula,
                    ratio: f64::NAN,
                    error: Some(e.clone()),
                },
            });
        }
    }
    let fits = p_list
        .iter()
        .map(|&p| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.p == p && r.error.is_none() && r.lip_norm > 0.0)
                .map(|r| (r.eps.ln(), r.lip_norm.ln()))
                .collect();
            let fit = fit_line(&pts);
            let note = match fit {
                None => format!("{} usable points; no fit", pts.len()),
                Some((_, r2)) if pts.len() < 4 || r2 < 0.8 => format!("{} points, R² {r2:.3}: low confidence", pts.len()),
                Some((_, r2)) => format!("{} points, R² {r2:.3}", pts.len()),
            };
            SlopeFit {
                p,
                slope: fit.map(|f| f.0),
                expected: inv_p(p) - 1.0 / eta,
                r2: fit.map(|f| f.1),
                points: pts.len(),
                note,
            }
        })
        .collect();
    let ratios: Vec<f64> = rows
        .iter()
        .filter(|r| r.error.is_none() && r.ratio > 0.0)
        .map(|r| r.ratio)
        .collect();
    let ratio_spread = if ratios.is_empty() {
        1.0
    } else {
        ratios.iter().copied().fold(0.0, f64::max) / ratios.iter().copied().fold(f64::INFINITY, f64::min)
    };
    Ok(SweepTable {
        eta,
        rows,
        fits,
        ratio_spread,
        failed_runs,
    })
}

impl SweepTable {
    /// Slope checks within [`SLOPE_WINDOW`], the ratio-spread check and a
    /// failed-run count; the table rides along for plotting.
    pub fn to_report(&self) -> Report {
        let mut report = Report::default();
        report
            .checks
            .push(Check::new("failed_runs", "plumbing", self.failed_runs as f64, 0.0));
        for fit in &self.fits {
            if let Some(slope) = fit.slope {
                report.checks.push(Check::new(
                    &format!("slope_p{}", p_label(fit.p)),
                    "alberti:lp_scaling",
                    (slope - fit.expected).abs(),
                    SLOPE_WINDOW,
                ));
            }
        }
        report.checks.push(Check::new(
            "ratio_spread",
            "alberti:lp_scaling",
            self.ratio_spread,
            RATIO_SPREAD_LIMIT,
        ));
        report.env.insert("eta".into(), json!(self.eta));
        report.sweep = Some(self.clone());
        report
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,p,lip_norm,formula,ratio,error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.eps,
                p_label(r.p),
                r.lip_norm,
                r.formula,
                r.ratio,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Output

pub fn emit_report(report: &Report, format: &str) -> Result<String> {
    match format {
        "json" => Ok(serde_json::to_string_pretty(report)? + "\n"),
        "csv" => {
            let mut s = String::from("id,ref,measured,bound,pass,witness\n");
            for c in &report.checks {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    c.id,
                    c.reference,
                    c.measured,
                    c.bound,
                    c.pass,
                    c.witness.map(|w| w.to_string()).unwrap_or_default()
                );
            }
            Ok(s)
        }
        "svg" | "svg-plot" => Ok(svg_plot(report.sweep.as_ref())),
        other => Err(Error::UnknownFormat(other.into())),
    }
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#d1495b", "#2a9d4b", "#8e6c8a", "#e09f3e", "#335c67"];

/// Log-log plot of `‖Lip_u‖_p` against `ε`, one series per `p`.
fn svg_plot(table: Option<&SweepTable>) -> String {
    let (w, hgt, left, right, top, bottom) = (640.0, 420.0, 70.0, 190.0, 30.0, 50.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{hgt}" viewBox="0 0 {w} {hgt}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{hgt}" fill="white"/>"#);
    let pts: Vec<&SweepRow> = table
        .map(|t| t.rows.iter().filter(|r| r.error.is_none() && r.lip_norm > 0.0).collect())
        .unwrap_or_default();
    if pts.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, w / 2.0, hgt / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let table = table.unwrap();
    let lx: Vec<f64> = pts.iter().map(|r| r.eps.log10()).collect();
    let ly: Vec<f64> = pts.iter().map(|r| r.lip_norm.log10()).collect();
    let span = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            (lo - 0.5, hi + 0.5)
        } else {
            let pad = 0.05 * (hi - lo);
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = span(&lx);
    let (y0, y1) = span(&ly);
    let px = |v: f64| left + (v - x0) / (x1 - x0) * (w - left - right);
    let py = |v: f64| hgt - bottom - (v - y0) / (y1 - y0) * (hgt - top - bottom);
    let _ = writeln!(
        s,
        r##"<path d="M{:.2} {:.2} H{:.2} M{:.2} {:.2} V{:.2}" stroke="#333" fill="none"/>"##,
        left,
        hgt - bottom,
        w - right,
        left,
        hgt - bottom,
        top
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">log10 eps [{x0:.3}, {x1:.3}]</text>"#,
        (left + w - right) / 2.0,
        hgt - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.2}" transform="rotate(-90 15 {:.2})" text-anchor="middle">log10 |Lip u|_p [{y0:.3}, {y1:.3}]</text>"#,
        (top + hgt - bottom) / 2.0,
        (top + hgt - bottom) / 2.0
    );
    for (k, fit) in table.fits.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let series: Vec<(f64, f64)> = pts
            .iter()
            .filter(|r| r.p == fit.p)
            .map(|r| (px(r.eps.log10()), py(r.lip_norm.log10())))
            .collect();
        if !series.is_empty() {
            let path: Vec<String> = series.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{color}" fill="none" stroke-width="1.5"/>"#,
                path.join(" ")
            );
            for (a, b) in &series {
                let _ = writeln!(s, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3" fill="{color}"/>"#);
            }
        }
        let slope = fit.slope.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">p={} slope {slope} (theory {:.3})</text>"#,
            w - right + 10.0,
            top + 20.0 * (k as f64 + 1.0),
            p_label(fit.p),
            fit.expected
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::build_dyadic_tree;
    use crate::lusin::prescribe_global;
    use crate::space::generate_space;

    fn grid(n: usize) -> Space {
        let mut p = BTreeMap::new();
        p.insert("n".to_string(), n as f64);
        generate_space("grid1d", &p).unwrap()
    }

    fn sign_run(s: &Space, eps: f64) -> (CubeTree, ChartAtlas, PointSet, TargetField, PrescriptionResult) {
        let tree = build_dyadic_tree(s).unwrap();
        let atlas = ChartAtlas::coordinates(s).unwrap();
        let omega = PointSet::all(s);
        let f = TargetField::from_fn(s, &atlas, omega.clone(), |x, _| {
            vec![if s.coords(x)[0] > 0.5 { 1.0 } else { -1.0 }]
        })
        .unwrap();
        let r = prescribe(s, &tree, &atlas, &omega, &f, eps, DEFAULT_N_MAX).unwrap();
        (tree, atlas, omega, f, r)
    }

    #[test]
    fn zero_target_passes_with_zeros() {
        let s = grid(65);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let omega = PointSet::new(&s, 5..60);
        let f = TargetField::zeros(&s, &atlas, omega.clone());
        let r = prescribe(&s, &tree, &atlas, &omega, &f, 0.3, 4).unwrap();
        let rep = verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &Tolerance::default()).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
        assert_eq!(rep.check("budget").unwrap().measured, 0.0);
        assert_eq!(rep.check("derivative").unwrap().measured, 0.0);
    }

    #[test]
    fn sign_run_passes_and_tampering_is_named() {
        let s = grid(257);
        let (tree, atlas, omega, f, r) = sign_run(&s, 0.25);
        let tol = Tolerance::default();
        let rep = verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &tol).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());
        let bound = rep.check("derivative").unwrap().bound;
        let h = s.resolution();
        let x = r.kept.indices()[r.kept.len() / 3];
        let mut bad = r.clone();
        bad.u.values[x] += 10.0 * bound * h;
        let rep = verify_alberti(&s, &tree, &atlas, &omega, &f, &bad, &tol).unwrap();
        let c = rep.check("derivative").unwrap();
        assert!(!c.pass);
        assert_eq!(c.witness, Some(x));
    }

    #[test]
    fn inconsistent_inputs_rejected() {
        let s = grid(65);
        let (tree, atlas, omega, f, mut r) = sign_run(&s, 0.5);
        r.u.values.pop();
        assert!(verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &Tolerance::default()).is_err());
    }

    #[test]
    fn budget_recount_is_independent() {
        let s = grid(129);
        let (tree, atlas, omega, f, mut r) = sign_run(&s, 0.5);
        // claim a point as kept that is not: the recount must disagree
        let x = r.exceptional.indices().first().copied();
        if let Some(x) = x {
            r.exceptional = PointSet::new(&s, r.exceptional.iter().filter(|&y| y != x));
            let rep = verify_alberti(&s, &tree, &atlas, &omega, &f, &r, &Tolerance::default()).unwrap();
            assert!(!rep.check("exceptional_set").unwrap().pass);
        }
    }

    #[test]
    fn lusin_empty_and_support_injection() {
        let s = grid(65);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let empty = PointSet::empty();
        let f = TargetField::zeros(&s, &atlas, empty.clone());
        let r = prescribe_global(&s, &tree, &atlas, &empty, &f, 0.1).unwrap();
        let rep = verify_lusin(&s, &atlas, &empty, &f, &r, &Tolerance::default()).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures());

        let omega = PointSet::new(&s, 10..50);
        let f = TargetField::zeros(&s, &atlas, omega.clone());
        let mut r = prescribe_global(&s, &tree, &atlas, &omega, &f, 0.1).unwrap();
        r.u.values[3] = 0.1;
        let rep = verify_lusin(&s, &atlas, &omega, &f, &r, &Tolerance::default()).unwrap();
        let c = rep.check("support").unwrap();
        assert!(!c.pass);
        assert_eq!(c.witness, Some(3));
        assert!(!rep.check("decay").unwrap().pass);
    }

    #[test]
    fn interference_matches_line_formula() {
        // identity chart on a line: rows ±1, σ_min = 2, ‖Δb‖ = e·h·√10
        let s = grid(33);
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let h = s.resolution();
        let b = interference_bound(&s, &atlas, 16, 2.0 * h, 0.5);
        assert!((b - 0.5 * h * 10f64.sqrt() / 2.0).abs() < 1e-12);
        assert_eq!(interference_bound(&s, &atlas, 16, 2.0 * h, 0.0), 0.0);
    }

    #[test]
    fn sweep_zero_target_all_zero() {
        let s = grid(65);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let omega = PointSet::all(&s);
        let f = TargetField::zeros(&s, &atlas, omega.clone());
        let t = sweep_epsilon(&s, &tree, &atlas, &omega, &f, &[0.5, 0.25, 0.125], &[1.0, 2.0, f64::INFINITY]).unwrap();
        assert_eq!(t.rows.len(), 9);
        assert!(t.rows.iter().all(|r| r.lip_norm == 0.0 && r.ratio == 0.0));
        assert!(t.fits.iter().all(|f| f.slope.is_none()));
        assert!(sweep_epsilon(&s, &tree, &atlas, &omega, &f, &[0.5, 0.25], &[1.0]).is_err());
    }

    #[test]
    fn fit_line_exact() {
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (i as f64, 3.0 - 0.5 * i as f64)).collect();
        let (slope, r2) = fit_line(&pts).unwrap();
        assert!((slope + 0.5).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(fit_line(&pts[..1]).is_none());
    }

    #[test]
    fn emit_formats() {
        let empty = Report::default();
        let j = emit_report(&empty, "json").unwrap();
        let v: Value = serde_json::from_str(&j).unwrap();
        assert_eq!(v["checks"], json!([]));
        assert_eq!(emit_report(&empty, "csv").unwrap(), "id,ref,measured,bound,pass,witness\n");
        assert!(emit_report(&empty, "svg").unwrap().contains("no data"));
        assert!(matches!(emit_report(&empty, "xml"), Err(Error::UnknownFormat(_))));
    }

    #[test]
    fn sweep_svg_has_series_and_is_stable() {
        let table = SweepTable {
            eta: 1.2,
            rows: [1.0, 2.0, f64::INFINITY]
                .iter()
                .flat_map(|&p| {
                    [0.5, 0.25, 0.125].into_iter().map(move |e: f64| SweepRow {
                        eps: e,
                        p,
                        lip_norm: e.powf(-0.5) * (1.0 + inv_p(p)),
                        formula: 1.0,
                        ratio: 1.0,
                        error: None,
                    })
                })
                .collect(),
            fits: [1.0, 2.0, f64::INFINITY]
                .iter()
                .map(|&p| SlopeFit {
                    p,
                    slope: Some(-0.5),
                    expected: inv_p(p) - 1.0 / 1.2,
                    r2: Some(1.0),
                    points: 3,
                    note: String::new(),
                })
                .collect(),
            ratio_spread: 1.0,
            failed_runs: 0,
        };
        let rep = table.to_report();
        let a = emit_report(&rep, "svg").unwrap();
        assert_eq!(a.matches("<polyline").count(), 3);
        assert_eq!(a, emit_report(&rep, "svg").unwrap());
        let j = emit_report(&rep, "json").unwrap();
        assert!(j.contains("\"inf\""));
        assert_eq!(j, emit_report(&rep.clone(), "json").unwrap());
    }
}

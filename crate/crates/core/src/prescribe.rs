//! Prescribing chart derivatives off a small exceptional set.
//!
//! Given targets `f_j` on `U_j ∩ Ω`, builds `u` supported in `Ω` with
//! `d^j u = f_j` (up to a logged tolerance) outside an exceptional set `A`
//! of measure at most `ε μ(Ω)`. The construction is iterative: each step
//! covers the space by cubes on which the current residual target is
//! nearly constant, places one affine-in-chart bump per cube, and passes
//! the new residual on to the next step.
//!
//! Discrete conventions:
//! * a point is kept by a step only if the step's function is exactly
//!   affine in the chart, with the cube's slope, over the point's whole
//!   verification window; the differential there is then exactly that slope;
//! * cube goodness is tested on the current residual (oscillation below
//!   `α/2` over the cube's active chart points) instead of a uniform
//!   continuity scale, and the chart fraction counts only points of `Ω`
//!   against the measure of the whole cube;
//! * cubes are cut down to `T ∩ Ω` and bumps measure distance to the
//!   complement of that piece, so `u` vanishes off `Ω` exactly;
//! * the measure budget is pooled: every stage draws a fixed share of what
//!   is left and unused budget rolls forward; the total is checked exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::charts::ChartAtlas;
use crate::cubes::{complement_distances, Cube, CubeTree};
use crate::error::{Error, Result};
use crate::lipfield::{lip_norm, ScalarField};
use crate::space::{PointSet, Space};

/// Exponents sampled wherever a bound must hold "for all p".
pub const P_SAMPLES: [f64; 9] = [1.0, 1.5, 2.0, 3.0, 4.0, 8.0, 16.0, 64.0, f64::INFINITY];

/// Exponents in the reported norm tables.
pub const P_REPORT: [f64; 3] = [1.0, 2.0, f64::INFINITY];

pub const DEFAULT_N_MAX: usize = 6;

/// Relative slack for "exactly affine" comparisons.
const AFFINE_TOL: f64 = 1e-11;

// ---------------------------------------------------------------------------
// Targets

/// Per-point chart targets: `values[x]` lies in `R^{k_j}` for the chart
/// `j` containing `x`, and is zero off `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetField {
    pub omega: PointSet,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TargetDocument {
    pub omega: Vec<usize>,
    pub fields: Vec<FieldEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldEntry {
    pub j: usize,
    pub values: BTreeMap<String, Vec<f64>>,
}

impl TargetField {
    pub fn new(space: &Space, atlas: &ChartAtlas, omega: PointSet, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != space.len() {
            return Err(Error::InvalidParam(format!(
                "target has {} values for {} points",
                values.len(),
                space.len()
            )));
        }
        let inside = omega.mask(space.len());
        let mut values = values;
        for (x, v) in values.iter_mut().enumerate() {
            let chart = atlas.chart_of(x);
            if v.len() != chart.k {
                return Err(Error::DimensionMismatch {
                    chart: chart.j,
                    expected: chart.k,
                    found: v.len(),
                });
            }
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidParam(format!("target not finite at point {x}")));
            }
            if !inside[x] {
                v.iter_mut().for_each(|c| *c = 0.0);
            }
        }
        Ok(Self { omega, values })
    }

    /// Evaluates `f(x, j)` at every point of `Ω`.
    pub fn from_fn(
        space: &Space,
        atlas: &ChartAtlas,
        omega: PointSet,
        f: impl Fn(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let inside = omega.mask(space.len());
        let values = (0..space.len())
            .map(|x| {
                let j = atlas.chart_index(x);
                if inside[x] {
                    f(x, j)
                } else {
                    vec![0.0; atlas.chart(j).k]
                }
            })
            .collect();
        Self::new(space, atlas, omega, values)
    }

    pub fn zeros(space: &Space, atlas: &ChartAtlas, omega: PointSet) -> Self {
        let values = (0..space.len()).map(|x| vec![0.0; atlas.chart_of(x).k]).collect();
        Self { omega, values }
    }

    pub fn norm_at(&self, x: usize) -> f64 {
        norm(&self.values[x])
    }

    pub fn sup_norm(&self) -> f64 {
        self.omega.iter().fold(0.0f64, |m, x| m.max(self.norm_at(x)))
    }

    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Self {
        Self {
            omega: self.omega.clone(),
            values,
        }
    }

    pub fn to_document(&self, atlas: &ChartAtlas) -> TargetDocument {
        let mut fields: Vec<FieldEntry> = atlas
            .charts()
            .iter()
            .map(|c| FieldEntry {
                j: c.j,
                values: BTreeMap::new(),
            })
            .collect();
        for x in self.omega.iter() {
            fields[atlas.chart_index(x)]
                .values
                .insert(x.to_string(), self.values[x].clone());
        }
        TargetDocument {
            omega: self.omega.indices().to_vec(),
            fields,
        }
    }
}

pub fn load_target(space: &Space, atlas: &ChartAtlas, doc: &str) -> Result<TargetField> {
    let doc: TargetDocument = serde_json::from_str(doc)?;
    target_from_document(space, atlas, doc)
}

/// Values must be given exactly on `U_j ∩ Ω` for every chart.
pub fn target_from_document(space: &Space, atlas: &ChartAtlas, doc: TargetDocument) -> Result<TargetField> {
    for &x in &doc.omega {
        space.check_point(x)?;
    }
    let omega = PointSet::new(space, doc.omega.iter().copied());
    let inside = omega.mask(space.len());
    let mut values: Vec<Option<Vec<f64>>> = vec![None; space.len()];
    for entry in doc.fields {
        if entry.j >= atlas.len() {
            return Err(Error::Malformed(format!("unknown chart {}", entry.j)));
        }
        for (key, v) in entry.values {
            let x: usize = key
                .parse()
                .map_err(|_| Error::Malformed(format!("point key `{key}`")))?;
            space.check_point(x)?;
            if !inside[x] || atlas.chart_index(x) != entry.j {
                return Err(Error::Malformed(format!(
                    "value for point {x} outside U_{} ∩ Ω",
                    entry.j
                )));
            }
            values[x] = Some(v);
        }
    }
    let mut out = Vec::with_capacity(space.len());
    for (x, v) in values.into_iter().enumerate() {
        match v {
            Some(v) => out.push(v),
            None if inside[x] => {
                return Err(Error::Malformed(format!("no target value at point {x} of Ω")))
            }
            None => out.push(vec![0.0; atlas.chart_of(x).k]),
        }
    }
    TargetField::new(space, atlas, omega, out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `F(x) = |f_j(x)|` on `Ω`, zero elsewhere.
pub fn big_f(target: &TargetField) -> ScalarField {
    let inside = target.omega.mask(target.values.len());
    ScalarField::new(
        "F",
        (0..target.values.len())
            .map(|x| if inside[x] { target.norm_at(x) } else { 0.0 })
            .collect(),
    )
}

/// Radial clamp to norm `r`.
pub fn truncate_field(target: &TargetField, r: f64) -> TargetField {
    target.with_values(
        target
            .values
            .iter()
            .map(|v| {
                let n = norm(v);
                if n > r {
                    v.iter().map(|c| r * c / n).collect()
                } else {
                    v.clone()
                }
            })
            .collect(),
    )
}

/// Weighted mean of the target over `set`.
pub fn cube_average(space: &Space, target: &TargetField, set: &PointSet) -> Result<Vec<f64>> {
    let mut it = set.iter();
    let first = it.next().ok_or_else(|| Error::InvalidParam("average over an empty set".into()))?;
    let k = target.values[first].len();
    let mut acc = vec![0.0; k];
    let mut mass = 0.0;
    for x in set.iter() {
        let v = &target.values[x];
        if v.len() != k {
            return Err(Error::DimensionMismatch {
                chart: 0,
                expected: k,
                found: v.len(),
            });
        }
        let w = space.weight(x);
        for (a, c) in acc.iter_mut().zip(v) {
            *a += w * c;
        }
        mass += w;
    }
    Ok(acc.into_iter().map(|a| a / mass).collect())
}

/// `t = (ε / 4 C1)^(1/η)`.
pub fn shrink_fraction(c1: f64, eta: f64, eps: f64) -> Result<f64> {
    if !(c1 > 0.0 && eta > 0.0 && eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParam(format!(
            "shrink fraction needs C1 > 0, eta > 0, 0 < eps < 1 (got {c1}, {eta}, {eps})"
        )));
    }
    Ok((eps / (4.0 * c1)).powf(1.0 / eta))
}

/// Twice the largest `μ(Ω)^{1/p} / ‖F‖_p` over [`P_SAMPLES`].
pub fn compute_m(space: &Space, omega: &PointSet, f: &ScalarField) -> Result<f64> {
    let mu = omega.measure();
    let mut best = 0.0f64;
    for &p in &P_SAMPLES {
        let fp = lip_norm(space, f, p, Some(omega))?;
        if !(fp > 0.0) {
            return Err(Error::InvalidParam("F vanishes on Ω".into()));
        }
        let num = if p.is_infinite() { 1.0 } else { mu.powf(1.0 / p) };
        best = best.max(num / fp);
    }
    Ok(2.0 * best)
}

/// `α_n = 2^{-(n+2)/η} 2^{-n} / (M Z)` with `Z = Σ_{n ≤ n_max} 2^{-n}`.
pub fn alpha_sequence(m: f64, eta: f64, n_max: usize) -> Vec<f64> {
    let z: f64 = (1..=n_max).map(|n| 0.5f64.powi(n as i32)).sum();
    (1..=n_max)
        .map(|n| {
            let n = n as f64;
            2f64.powf(-(n + 2.0) / eta) * 2f64.powf(-n) / (m * z)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lusin-type approximation

#[derive(Clone, Debug)]
pub struct Approximation {
    pub kept: PointSet,
    pub removed: PointSet,
    pub g: TargetField,
}

/// Removes points from `domain` until no two remaining points of the same
/// chart closer than `2h` differ by more than `modulus`; `g = f` on the
/// rest and takes the nearest kept value (clamped to `sup |f|`) elsewhere.
/// Fails when the removed measure reaches `budget`.
pub fn lusin_approximate(
    space: &Space,
    atlas: &ChartAtlas,
    domain: &PointSet,
    f: &TargetField,
    budget: f64,
    modulus: f64,
) -> Result<Approximation> {
    let windows = space.closed_windows(2.0 * space.resolution());
    lusin_with_windows(space, atlas, domain, f, budget, modulus, &windows)
}

fn lusin_with_windows(
    space: &Space,
    atlas: &ChartAtlas,
    domain: &PointSet,
    f: &TargetField,
    budget: f64,
    modulus: f64,
    windows: &[Vec<(usize, f64)>],
) -> Result<Approximation> {
    if !(budget > 0.0) {
        return Err(Error::InvalidParam(format!("approximation budget {budget}")));
    }
    let n = space.len();
    let reach = 2.0 * space.resolution();
    let mut alive = domain.mask(n);
    let close: Vec<Vec<usize>> = (0..n)
        .map(|x| {
            if !alive[x] {
                return Vec::new();
            }
            windows[x]
                .iter()
                .filter(|&&(y, d)| d < reach && alive[y] && atlas.chart_index(y) == atlas.chart_index(x))
                .map(|&(y, _)| y)
                .collect()
        })
        .collect();
    let gap = |x: usize, y: usize| norm(&sub(&f.values[x], &f.values[y]));
    let mut removed = Vec::new();
    let mut lost = 0.0;
    loop {
        // (violations, largest violation, weight, index)
        let mut pick: Option<(usize, f64, f64, usize)> = None;
        for x in domain.iter().filter(|&x| alive[x]) {
            let mut count = 0;
            let mut worst = 0.0f64;
            for &y in &close[x] {
                if alive[y] {
                    let g = gap(x, y);
                    if g > modulus {
                        count += 1;
                        worst = worst.max(g);
                    }
                }
            }
            if count == 0 {
                continue;
            }
            let cand = (count, worst, space.weight(x), x);
            let better = match pick {
                None => true,
                Some(p) => {
                    (cand.0, cand.1) > (p.0, p.1)
                        || (cand.0 == p.0 && cand.1 == p.1 && (cand.2, cand.3) < (p.2, p.3))
                }
            };
            if better {
                pick = Some(cand);
            }
        }
        let Some((_, _, w, x)) = pick else { break };
        alive[x] = false;
        removed.push(x);
        lost += w;
        if lost >= budget {
            return Err(Error::BudgetInfeasible {
                n: 0,
                needed: lost,
                allowed: budget,
            });
        }
    }
    removed.sort_unstable();
    let kept = PointSet::from_mask(space, &alive);
    let removed = PointSet::new(space, removed);
    let cap = domain.iter().fold(0.0f64, |m, x| m.max(f.norm_at(x)));
    let mut values = f.values.clone();
    for x in removed.iter() {
        let chart = atlas.chart_index(x);
        let nearest = kept
            .iter()
            .filter(|&y| atlas.chart_index(y) == chart)
            .map(|y| (space.dist(x, y), y))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        values[x] = match nearest {
            Some((_, y)) => {
                let v = f.values[y].clone();
                let nv = norm(&v);
                if nv > cap {
                    v.iter().map(|c| c * cap / nv).collect()
                } else {
                    v
                }
            }
            None => vec![0.0; f.values[x].len()],
        };
    }
    let mut g = f.with_values(values);
    if !norms_within_double(space, domain, f, &g) {
        for x in removed.iter() {
            g.values[x].iter_mut().for_each(|c| *c = 0.0);
        }
    }
    Ok(Approximation { kept, removed, g })
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `‖g‖_p^p ≤ 2 ‖f‖_p^p` on `domain` for every sampled finite `p`.
fn norms_within_double(space: &Space, domain: &PointSet, f: &TargetField, g: &TargetField) -> bool {
    P_SAMPLES.iter().filter(|p| p.is_finite()).all(|&p| {
        let s = |t: &TargetField| -> f64 {
            domain
                .iter()
                .map(|x| t.norm_at(x).powf(p) * space.weight(x))
                .sum()
        };
        s(g) <= 2.0 * s(f) * (1.0 + 1e-12)
    })
}

// ---------------------------------------------------------------------------
// Cube selection

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Selected {
    pub cube: usize,
    pub chart: usize,
}

/// Scans every ancestor chain from the top level down and keeps the first
/// cube `good` accepts. Returns the selection and the points of
/// `relevant` cubes left without a good cube at the finest level.
fn select_first_good(
    tree: &CubeTree,
    relevant: impl Fn(&Cube) -> bool,
    mut good: impl FnMut(&Cube) -> Option<usize>,
) -> (Vec<Selected>, Vec<usize>) {
    let mut stack: Vec<usize> = tree.level(tree.k_min).map(|q| q.id).collect();
    stack.reverse();
    let mut chosen = Vec::new();
    let mut uncovered = Vec::new();
    while let Some(id) = stack.pop() {
        let cube = tree.cube(id);
        if !relevant(cube) {
            continue;
        }
        if let Some(j) = good(cube) {
            chosen.push(Selected { cube: id, chart: j });
        } else if cube.level == tree.k_max {
            uncovered.extend(cube.members.iter());
        } else {
            stack.extend(cube.children.iter().rev());
        }
    }
    uncovered.sort_unstable();
    (chosen, uncovered)
}

fn diameter_of(space: &Space, set: &PointSet) -> f64 {
    let pts = set.indices();
    let mut d = 0.0f64;
    for (a, &x) in pts.iter().enumerate() {
        for &y in &pts[a + 1..] {
            d = d.max(space.dist(x, y));
        }
    }
    d
}

/// First cubes along every ancestor chain with `μ(U_j ∩ T) ≥ (1-γ) μ(T)`
/// and `diam T < δ_j`; ties go to the smallest chart index.
pub fn select_cubes(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    gamma: f64,
    delta: &[f64],
) -> Result<Vec<Selected>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParam(format!("gamma = {gamma} outside (0, 1)")));
    }
    if delta.len() != atlas.len() || delta.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::InvalidParam("one positive delta per chart".into()));
    }
    let (chosen, uncovered) = select_first_good(
        tree,
        |_| true,
        |cube| {
            let mu = cube.members.measure();
            let diam = diameter_of(space, &cube.members);
            (0..atlas.len()).find(|&j| {
                let in_chart: f64 = cube
                    .members
                    .iter()
                    .filter(|&x| atlas.chart_index(x) == j)
                    .map(|x| space.weight(x))
                    .sum();
                in_chart >= (1.0 - gamma) * mu && diam < delta[j]
            })
        },
    );
    if !uncovered.is_empty() {
        return Err(Error::Uncovered(uncovered));
    }
    Ok(chosen)
}

// ---------------------------------------------------------------------------
// Bumps

fn ramp(dist: f64, width: f64) -> f64 {
    ((dist - width / 2.0) / (width / 2.0)).clamp(0.0, 1.0)
}

/// `ψ(x) = clamp((dist(x, X∖T) − t c^k/2) / (t c^k/2), 0, 1)` on the cube, zero off it.
pub fn bump(space: &Space, tree: &CubeTree, cube: &Cube, t: f64) -> Result<ScalarField> {
    if !(t > 0.0) {
        return Err(Error::InvalidParam(format!("shrink fraction t = {t}")));
    }
    let width = t * tree.scale(cube.level);
    let dists = complement_distances(space, &cube.members);
    let mut psi = vec![0.0; space.len()];
    let mut plateau = false;
    for (x, d) in cube.members.iter().zip(dists) {
        psi[x] = ramp(d, width);
        plateau |= d >= width;
    }
    if !plateau {
        return Err(Error::EmptyInnerRegion(cube.id));
    }
    Ok(ScalarField::new(format!("psi[{}]", cube.id), psi))
}

// ---------------------------------------------------------------------------
// One step

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CubeLog {
    pub cube: usize,
    pub level: i32,
    pub chart: usize,
    pub center: usize,
    pub a: Vec<f64>,
    pub t: f64,
    /// points of `T ∩ Ω`
    pub support: usize,
    /// points with `ψ = 1`
    pub plateau: usize,
    pub kept: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NormRow {
    pub p: f64,
    pub lip_norm: f64,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub u: ScalarField,
    pub kept: PointSet,
    /// slope `d^j u` at every kept point
    pub slopes: BTreeMap<usize, Vec<f64>>,
    pub cubes: Vec<CubeLog>,
    pub t: f64,
    pub gamma: f64,
    pub budget: f64,
    pub lost: f64,
    pub uncovered: Vec<usize>,
    /// per chart: largest scale on which the target oscillates by less than α/2
    pub delta: Vec<f64>,
    pub norms: Vec<NormRow>,
}

/// Shared data for the steps of one run.
pub(crate) struct Workspace<'a> {
    pub space: &'a Space,
    pub tree: &'a CubeTree,
    pub atlas: &'a ChartAtlas,
    /// closed windows of radius `2h`
    pub windows: Vec<Vec<(usize, f64)>>,
}

impl<'a> Workspace<'a> {
    pub fn new(space: &'a Space, tree: &'a CubeTree, atlas: &'a ChartAtlas) -> Self {
        let windows = space.closed_windows(2.0 * space.resolution());
        Self {
            space,
            tree,
            atlas,
            windows,
        }
    }

    fn lip_field(&self, u: &ScalarField) -> ScalarField {
        ScalarField::new(
            "Lip",
            (0..self.space.len())
                .map(|x| {
                    self.windows[x]
                        .iter()
                        .map(|&(y, d)| (u.values[y] - u.values[x]).abs() / d)
                        .fold(0.0, f64::max)
                })
                .collect(),
        )
    }

    pub fn norms(&self, u: &ScalarField) -> Vec<NormRow> {
        let lip = self.lip_field(u);
        P_REPORT
            .iter()
            .map(|&p| NormRow {
                p,
                lip_norm: lip_norm(self.space, &lip, p, None).unwrap_or(f64::NAN),
            })
            .collect()
    }
}

/// Builds one step with tolerance `alpha` and budget `eps μ(Ω)` on the
/// points of `Ω` (public entry: every point of `Ω` active).
pub fn prescribe_step(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    alpha: f64,
    eps: f64,
) -> Result<StepResult> {
    check_normalized(atlas)?;
    if omega.len() == space.len() {
        return Err(Error::Precondition("step needs Ω ≠ X".into()));
    }
    let ws = Workspace::new(space, tree, atlas);
    step(&ws, omega, omega, f, alpha, eps * omega.measure(), eps)
}

pub(crate) fn check_normalized(atlas: &ChartAtlas) -> Result<()> {
    for c in atlas.charts() {
        if c.k > 0 && c.lip_phi > 1.0 + 1e-9 {
            return Err(Error::Precondition(format!(
                "chart {} has LIP(phi) = {} > 1; normalize the atlas first",
                c.j, c.lip_phi
            )));
        }
    }
    Ok(())
}

fn box_diagonal<'b>(vals: impl Iterator<Item = &'b Vec<f64>>) -> f64 {
    let mut lo: Vec<f64> = Vec::new();
    let mut hi: Vec<f64> = Vec::new();
    for v in vals {
        if lo.is_empty() {
            lo = v.clone();
            hi = v.clone();
        } else {
            for i in 0..v.len() {
                lo[i] = lo[i].min(v[i]);
                hi[i] = hi[i].max(v[i]);
            }
        }
    }
    norm(&sub(&hi, &lo))
}

/// Largest realized distance below which `f_j` moves by less than `α/2`
/// from points of `active`, capped by the distance from `active` to `X∖Ω`.
fn continuity_scales(ws: &Workspace, omega: &PointSet, active: &PointSet, f: &TargetField, alpha: f64) -> Vec<f64> {
    let space = ws.space;
    let in_omega = omega.mask(space.len());
    let to_outside = active
        .iter()
        .map(|x| space.distance_to_mask(x, &in_omega.iter().map(|b| !b).collect::<Vec<_>>()))
        .fold(f64::INFINITY, f64::min);
    let mut delta = vec![to_outside; ws.atlas.len()];
    for x in active.iter() {
        let j = ws.atlas.chart_index(x);
        for y in omega.iter() {
            if y != x && ws.atlas.chart_index(y) == j && norm(&sub(&f.values[x], &f.values[y])) >= alpha / 2.0 {
                delta[j] = delta[j].min(space.dist(x, y));
            }
        }
    }
    delta
}

/// `u(y) - u(x) = <a, phi(y) - phi(x)>` on the whole (nonempty) window.
pub(crate) fn affine_at(window: &[(usize, f64)], phi: &[Vec<f64>], u: &[f64], x: usize, a: &[f64]) -> bool {
    !window.is_empty()
        && window.iter().all(|&(y, _)| {
            let lin = dot(a, &sub(&phi[y], &phi[x]));
            let scale = 1.0 + u[x].abs() + u[y].abs() + lin.abs();
            (u[y] - u[x] - lin).abs() <= AFFINE_TOL * scale
        })
}

pub(crate) fn step(
    ws: &Workspace,
    omega: &PointSet,
    active: &PointSet,
    f: &TargetField,
    alpha: f64,
    budget: f64,
    eps: f64,
) -> Result<StepResult> {
    let space = ws.space;
    let tree = ws.tree;
    let atlas = ws.atlas;
    let n = space.len();
    let t = shrink_fraction(tree.constants.c1, tree.constants.eta, eps)?;
    let gamma = eps / 4.0;
    let in_omega = omega.mask(n);
    let is_active = active.mask(n);

    let (chosen, uncovered) = select_first_good(
        tree,
        |cube| cube.members.iter().any(|x| is_active[x]),
        |cube| {
            let piece: Vec<usize> = cube.members.iter().filter(|&x| in_omega[x]).collect();
            // measured against the whole cube: cubes mostly outside Ω are refined
            let mu = cube.members.measure();
            (0..atlas.len()).find(|&j| {
                let in_chart: f64 = piece
                    .iter()
                    .filter(|&&x| atlas.chart_index(x) == j)
                    .map(|&x| space.weight(x))
                    .sum();
                if in_chart < (1.0 - gamma) * mu {
                    return false;
                }
                let mut pts = piece
                    .iter()
                    .filter(|&&x| is_active[x] && atlas.chart_index(x) == j)
                    .peekable();
                pts.peek().is_some() && box_diagonal(pts.map(|&x| &f.values[x])) < alpha / 2.0
            })
        },
    );

    let mut u = vec![0.0; n];
    let mut logs = Vec::new();
    // (cube log index, slope, candidate points) for the keep test
    let mut pending: Vec<(usize, Vec<f64>, Vec<usize>)> = Vec::new();
    for sel in &chosen {
        let cube = tree.cube(sel.cube);
        let chart = atlas.chart(sel.chart);
        let piece = PointSet::new(space, cube.members.iter().filter(|&x| in_omega[x]));
        if piece.is_empty() {
            continue;
        }
        let width = t * tree.scale(cube.level);
        let dists = complement_distances(space, &piece);
        let psi: Vec<f64> = dists.iter().map(|&d| ramp(d, width)).collect();
        let plateau = dists.iter().filter(|&&d| d >= width).count();
        let chart_pts = PointSet::new(
            space,
            piece.iter().filter(|&x| is_active[x] && atlas.chart_index(x) == sel.chart),
        );
        let a = cube_average(space, f, &chart_pts)?;
        let mut log = CubeLog {
            cube: cube.id,
            level: cube.level,
            chart: sel.chart,
            center: cube.center,
            a: a.clone(),
            t,
            support: piece.len(),
            plateau,
            kept: 0,
        };
        if plateau == 0 {
            logs.push(log);
            continue;
        }
        let z = cube.center;
        for (x, &p) in piece.iter().zip(&psi) {
            if p > 0.0 {
                u[x] = p * dot(&a, &sub(&chart.phi[x], &chart.phi[z]));
            }
        }
        let cands: Vec<usize> = chart_pts
            .iter()
            .filter(|&x| norm(&sub(&f.values[x], &a)) <= alpha)
            .collect();
        log.kept = 0;
        logs.push(log);
        pending.push((logs.len() - 1, a, cands));
    }

    let mut kept_mask = vec![false; n];
    let mut slopes = BTreeMap::new();
    for (li, a, cands) in pending {
        let chart = atlas.chart(logs[li].chart);
        for x in cands {
            if affine_at(&ws.windows[x], &chart.phi, &u, x, &a) {
                kept_mask[x] = true;
                slopes.insert(x, a.clone());
                logs[li].kept += 1;
            }
        }
    }
    let kept = PointSet::from_mask(space, &kept_mask);
    let lost: f64 = active.iter().filter(|&x| !kept_mask[x]).map(|x| space.weight(x)).sum();
    if lost > budget {
        return Err(Error::BudgetInfeasible {
            n: 0,
            needed: lost,
            allowed: budget,
        });
    }
    let u = ScalarField::new("u_step", u);
    let norms = ws.norms(&u);
    let delta = continuity_scales(ws, omega, active, f, alpha);
    Ok(StepResult {
        u,
        kept,
        slopes,
        cubes: logs,
        t,
        gamma,
        budget,
        lost,
        uncovered,
        delta,
        norms,
    })
}

// ---------------------------------------------------------------------------
// Full iteration

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BudgetEntry {
    pub stage: String,
    pub points: Vec<usize>,
    pub measure: f64,
    pub allowed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationLog {
    pub n: usize,
    pub alpha: f64,
    /// tolerance `α_n / 2` demanded of the step
    pub tolerance: f64,
    pub eps_step: f64,
    pub t: Option<f64>,
    pub zero_residual: bool,
    pub cubes: Vec<CubeLog>,
    pub kept_measure: f64,
    pub lost: f64,
    pub approximation_removed: f64,
    /// sup of the residual target after the step
    pub residual_sup: f64,
    pub delta: Vec<f64>,
    pub norms: Vec<NormRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConstants {
    #[serde(rename = "C1")]
    pub c1: f64,
    pub eta: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub r: Option<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FinalNorm {
    pub p: f64,
    pub lip_norm: f64,
    /// `ε^{1/p - 1/η} ‖F‖_p`
    pub formula: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug)]
pub struct PrescriptionResult {
    pub u: ScalarField,
    /// `Ω` after removing the dropped point when the input was all of `X`
    pub omega: PointSet,
    pub dropped: Option<usize>,
    pub exceptional: PointSet,
    pub kept: PointSet,
    pub budget: Vec<BudgetEntry>,
    pub iterations: Vec<IterationLog>,
    pub constants: RunConstants,
    pub eps: f64,
    /// `d^j u` as constructed at every kept point
    pub slopes: BTreeMap<usize, Vec<f64>>,
    /// bound on `|f_j - d^j u|` over kept points
    pub defect_bound: f64,
    /// contribution of omitted iterations; the finite sum stops at `n_max`
    pub tail: f64,
    pub norms: Vec<FinalNorm>,
}

impl PrescriptionResult {
    pub fn exceptional_measure(&self) -> f64 {
        self.exceptional.measure()
    }
}

/// Drops the lightest point (lowest index on ties) when `Ω = X`.
pub fn proper_domain(space: &Space, omega: &PointSet) -> (PointSet, Option<usize>) {
    if omega.len() < space.len() || space.is_empty() {
        return (omega.clone(), None);
    }
    let x0 = (0..space.len())
        .min_by(|&a, &b| space.weight(a).total_cmp(&space.weight(b)).then(a.cmp(&b)))
        .unwrap();
    (PointSet::new(space, omega.iter().filter(|&x| x != x0)), Some(x0))
}

pub fn prescribe(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    eps: f64,
    n_max: usize,
) -> Result<PrescriptionResult> {
    let ws = Workspace::new(space, tree, atlas);
    prescribe_in(&ws, omega, f, eps, n_max)
}

pub(crate) fn prescribe_in(
    ws: &Workspace,
    omega_in: &PointSet,
    f_in: &TargetField,
    eps: f64,
    n_max: usize,
) -> Result<PrescriptionResult> {
    let space = ws.space;
    let tree = ws.tree;
    let atlas = ws.atlas;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParam(format!("eps = {eps} outside (0, 1)")));
    }
    if n_max == 0 {
        return Err(Error::InvalidParam("n_max must be at least 1".into()));
    }
    check_normalized(atlas)?;
    let (omega, dropped) = proper_domain(space, omega_in);
    let f = f_in.with_values(
        (0..space.len())
            .map(|x| {
                if omega.contains(x) {
                    f_in.values[x].clone()
                } else {
                    vec![0.0; f_in.values[x].len()]
                }
            })
            .collect(),
    );
    let f = TargetField {
        omega: omega.clone(),
        values: f.values,
    };
    let n = space.len();
    let eta = tree.constants.eta;
    let mu = omega.measure();
    let total = eps * mu;
    let big = big_f(&f);
    let mut result = PrescriptionResult {
        u: ScalarField::zeros("u", n),
        omega: omega.clone(),
        dropped,
        exceptional: PointSet::empty(),
        kept: omega.clone(),
        budget: Vec::new(),
        iterations: Vec::new(),
        constants: RunConstants {
            c1: tree.constants.c1,
            eta,
            m: f64::NAN,
            r: None,
            alphas: Vec::new(),
        },
        eps,
        slopes: omega.iter().map(|x| (x, vec![0.0; f.values[x].len()])).collect(),
        defect_bound: 0.0,
        tail: 0.0,
        norms: Vec::new(),
    };
    if omega.is_empty() || big.sup_norm() == 0.0 {
        result.norms = final_norms(ws, &result.u, &big, &omega, eps, eta);
        return Ok(result);
    }

    // truncation: smallest r of a doubling search from the median of F
    let mut vals: Vec<f64> = omega.iter().map(|x| big.values[x]).collect();
    vals.sort_by(f64::total_cmp);
    let mut r = vals[vals.len() / 2];
    if r == 0.0 {
        r = vals.iter().copied().find(|&v| v > 0.0).unwrap_or(1.0);
    }
    let super_level = |r: f64| -> Vec<usize> { omega.iter().filter(|&x| big.values[x] > r).collect() };
    let cap1 = total / 4.0;
    while space.measure_of(&super_level(r)) >= cap1 {
        r *= 2.0;
    }
    let a1 = super_level(r);
    let a1_measure = space.measure_of(&a1);
    result.constants.r = Some(r);
    result.budget.push(BudgetEntry {
        stage: "truncation".into(),
        points: a1.clone(),
        measure: a1_measure,
        allowed: cap1,
    });
    let mut remaining = total - a1_measure;
    let f = truncate_field(&f, r);
    let big = big_f(&f);
    let m = compute_m(space, &omega, &big)?;
    let alphas = alpha_sequence(m, eta, n_max);
    result.constants.m = m;
    result.constants.alphas = alphas.clone();
    if alphas[0] > big.sup_norm() {
        return Err(Error::Precondition(format!(
            "alpha_1 = {} exceeds sup |f| = {}",
            alphas[0],
            big.sup_norm()
        )));
    }

    let mut active = PointSet::new(space, omega.iter().filter(|x| a1.binary_search(x).is_err()));
    let charge = |result: &mut PrescriptionResult, stage: String, pts: Vec<usize>, allowed: f64, remaining: &mut f64| {
        let measure = space.measure_of(&pts);
        *remaining -= measure;
        result.budget.push(BudgetEntry {
            stage,
            points: pts,
            measure,
            allowed,
        });
    };

    // initial approximation
    let share = remaining / 4.0;
    let approx = lusin_with_windows(space, atlas, &active, &f, share, alphas[0] / 4.0, &ws.windows)
        .map_err(|e| relabel(e, 0))?;
    charge(&mut result, "approximation 0".into(), approx.removed.indices().to_vec(), share, &mut remaining);
    active = approx.kept;
    let mut current = approx.g;

    let mut u = vec![0.0; n];
    let mut slopes: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for step_n in 1..=n_max {
        let alpha = alphas[step_n - 1];
        let tol = alpha / 2.0;
        let zero = active.iter().all(|x| current.norm_at(x) == 0.0);
        let share = remaining / 2.0;
        let eps_step = share / mu;
        let mut log = IterationLog {
            n: step_n,
            alpha,
            tolerance: tol,
            eps_step,
            t: None,
            zero_residual: zero,
            cubes: Vec::new(),
            kept_measure: active.measure(),
            lost: 0.0,
            approximation_removed: 0.0,
            residual_sup: 0.0,
            delta: Vec::new(),
            norms: Vec::new(),
        };
        if zero {
            for x in active.iter() {
                slopes.entry(x).or_insert_with(|| vec![0.0; current.values[x].len()]);
            }
            log.norms = P_REPORT.iter().map(|&p| NormRow { p, lip_norm: 0.0 }).collect();
            result.iterations.push(log);
            continue;
        }
        let st = step(ws, &omega, &active, &current, tol, share, eps_step).map_err(|e| relabel(e, step_n))?;
        let lost_pts: Vec<usize> = active.iter().filter(|&x| !st.kept.contains(x)).collect();
        charge(&mut result, format!("step {step_n}"), lost_pts, share, &mut remaining);
        for (x, v) in u.iter_mut().zip(&st.u.values) {
            *x += v;
        }
        // residual target on the kept set, zero elsewhere
        let mut next = TargetField::zeros(space, atlas, omega.clone());
        for x in st.kept.iter() {
            let a = &st.slopes[&x];
            next.values[x] = sub(&current.values[x], a);
            let acc = slopes.entry(x).or_insert_with(|| vec![0.0; a.len()]);
            for (s, ai) in acc.iter_mut().zip(a) {
                *s += ai;
            }
        }
        active = st.kept.clone();
        let consumer = alphas[step_n.min(n_max - 1)];
        let share = remaining / 4.0;
        let approx = lusin_with_windows(space, atlas, &active, &next, share, consumer / 4.0, &ws.windows)
            .map_err(|e| relabel(e, step_n))?;
        log.approximation_removed = approx.removed.measure();
        charge(
            &mut result,
            format!("approximation {step_n}"),
            approx.removed.indices().to_vec(),
            share,
            &mut remaining,
        );
        active = approx.kept;
        current = approx.g;
        log.t = Some(st.t);
        log.cubes = st.cubes;
        log.kept_measure = active.measure();
        log.lost = st.lost;
        log.residual_sup = active.iter().fold(0.0f64, |m, x| m.max(current.norm_at(x)));
        log.delta = st.delta;
        log.norms = st.norms;
        result.iterations.push(log);
    }

    let kept = active;
    let exceptional = omega.difference(space, &kept);
    if exceptional.measure() > total {
        return Err(Error::BudgetInfeasible {
            n: n_max,
            needed: exceptional.measure(),
            allowed: total,
        });
    }
    let u = ScalarField::new("u", u);
    result.norms = final_norms(ws, &u, &big_f(f_in), &omega, eps, eta);
    result.u = u;
    result.kept = kept.clone();
    result.exceptional = exceptional;
    result.slopes = slopes.into_iter().filter(|(x, _)| kept.contains(*x)).collect();
    result.defect_bound = kept.iter().fold(0.0f64, |m, x| m.max(current.norm_at(x)));
    result.tail = 0.0;
    Ok(result)
}

fn relabel(e: Error, n: usize) -> Error {
    match e {
        Error::BudgetInfeasible { needed, allowed, .. } => Error::BudgetInfeasible { n, needed, allowed },
        other => other,
    }
}

fn final_norms(ws: &Workspace, u: &ScalarField, big: &ScalarField, omega: &PointSet, eps: f64, eta: f64) -> Vec<FinalNorm> {
    let own = ws.norms(u);
    own.into_iter()
        .map(|row| {
            let p = row.p;
            let fp = lip_norm(ws.space, big, p, Some(omega)).unwrap_or(0.0);
            let inv_p = if p.is_infinite() { 0.0 } else { 1.0 / p };
            let formula = eps.powf(inv_p - 1.0 / eta) * fp;
            FinalNorm {
                p,
                lip_norm: row.lip_norm,
                formula,
                ratio: if formula > 0.0 { row.lip_norm / formula } else { 0.0 },
            }
        })
        .collect()
}

//! Prescription with quadratic decay at the boundary of `Ω`.
//!
//! [`prescribe_compact`] runs the prescription on small cubes of `Ω` and
//! keeps a cube only when its function satisfies
//! `|u(x)| ≤ ε min{1, dist²(x, X∖Ω)}` at every point. [`prescribe_global`]
//! exhausts `Ω` by growing balls around a basepoint, each stage prescribing
//! the residual target with half the previous sup budget. The decay makes
//! `u` flat to second order outside `Ω`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::charts::{differential, ChartAtlas};
use crate::cubes::CubeTree;
use crate::error::{Error, Result};
use crate::lipfield::ScalarField;
use crate::prescribe::{affine_at, prescribe_in, TargetField, Workspace, DEFAULT_N_MAX};
use crate::space::{PointSet, Space};

/// Largest per-cube budget parameter tried.
pub const EPS_CUBE_MAX: f64 = 0.5;

/// Stages without a new capture before the exhaustion gives up.
pub const STUCK_STAGES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompactCube {
    pub cube: usize,
    pub level: i32,
    /// points of the cube inside `Ω'`
    pub support: usize,
    pub kept: usize,
    /// largest `|u_Q(x)| / (ε min{1, dist²(x, X∖Ω)})` over the cube
    pub decay_ratio: f64,
    /// `α_{n_max}` plus tail of the inner run
    pub tolerance: f64,
    /// budget parameter the inner run succeeded with
    pub eps: f64,
    pub exceptional: f64,
}

#[derive(Clone, Debug)]
pub struct CompactResult {
    pub omega: PointSet,
    pub omega_prime: PointSet,
    pub kept: PointSet,
    pub u: ScalarField,
    /// slope of `u` at every kept point
    pub slopes: BTreeMap<usize, Vec<f64>>,
    pub eps: f64,
    /// `ε / 8 μ(Ω')`, capped below 1, passed to every cube
    pub eps_inner: f64,
    /// `min{1, dist²(Ω', X∖Ω)}`
    pub delta: f64,
    /// the diameter cap `ε^{1+1/η} Δ / (1 + (8 μ(Ω'))^{1/η} C M)`; logged only
    pub d_cap: f64,
    pub cubes: Vec<CompactCube>,
    /// points of finest-level cubes that no accepted run covered
    pub uncaptured: PointSet,
    /// `μ(Ω ∖ K)`
    pub missed: f64,
    /// `μ(Ω ∖ K) < ε`
    pub budget_ok: bool,
    /// largest `α_{n_max} + tail` over accepted cubes
    pub tolerance: f64,
    pub defect_bound: f64,
}

/// `min{1, dist²(x, X∖Ω)}` at every point (zero off `Ω`).
pub fn decay_profile(space: &Space, omega: &PointSet) -> Vec<f64> {
    let outside: Vec<bool> = omega.mask(space.len()).iter().map(|b| !b).collect();
    (0..space.len())
        .map(|x| {
            if outside[x] {
                0.0
            } else {
                let d = space.distance_to_mask(x, &outside);
                if d.is_finite() {
                    (d * d).min(1.0)
                } else {
                    1.0
                }
            }
        })
        .collect()
}

pub fn prescribe_compact(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    eps: f64,
) -> Result<CompactResult> {
    let ws = Workspace::new(space, tree, atlas);
    compact_in(&ws, omega, f, eps)
}

fn rejects(e: &Error) -> bool {
    matches!(
        e,
        Error::BudgetInfeasible { .. } | Error::Precondition(_) | Error::Uncovered(_) | Error::EmptyInnerRegion(_)
    )
}

pub(crate) fn compact_in(ws: &Workspace, omega: &PointSet, f: &TargetField, eps: f64) -> Result<CompactResult> {
    let space = ws.space;
    let tree = ws.tree;
    let n = space.len();
    if !(eps > 0.0) {
        return Err(Error::InvalidParam(format!("eps = {eps} must be positive")));
    }
    // every point of a finite Ω sits at distance ≥ h from X∖Ω
    let omega_prime = omega.clone();
    let profile = decay_profile(space, omega);
    let mut out = CompactResult {
        omega: omega.clone(),
        omega_prime: omega_prime.clone(),
        kept: PointSet::empty(),
        u: ScalarField::zeros("u", n),
        slopes: BTreeMap::new(),
        eps,
        eps_inner: 0.0,
        delta: omega_prime.iter().map(|x| profile[x]).fold(1.0, f64::min),
        d_cap: 0.0,
        cubes: Vec::new(),
        uncaptured: PointSet::empty(),
        missed: omega.measure(),
        budget_ok: omega.measure() < eps,
        tolerance: 0.0,
        defect_bound: 0.0,
    };
    if omega_prime.is_empty() {
        return Ok(out);
    }
    let mu = omega_prime.measure();
    let eta = tree.constants.eta;
    let m = omega_prime.iter().map(|x| f.norm_at(x)).fold(0.0f64, f64::max);
    out.d_cap = eps.powf(1.0 + 1.0 / eta) * out.delta / (1.0 + (8.0 * mu).powf(1.0 / eta) * tree.constants.c1 * m);
    out.eps_inner = (eps / (8.0 * mu)).min(0.5);

    let in_prime = omega_prime.mask(n);
    let mut u = vec![0.0; n];
    let mut kept_by_cube: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut uncaptured = Vec::new();
    let mut stack: Vec<usize> = tree.level(tree.k_min).map(|q| q.id).collect();
    stack.reverse();
    while let Some(id) = stack.pop() {
        let cube = tree.cube(id);
        let piece = PointSet::new(space, cube.members.iter().filter(|&x| in_prime[x]));
        if piece.is_empty() {
            continue;
        }
        let target = TargetField {
            omega: piece.clone(),
            values: (0..n)
                .map(|x| {
                    if in_prime[x] && cube.members.contains(x) {
                        f.values[x].clone()
                    } else {
                        vec![0.0; f.values[x].len()]
                    }
                })
                .collect(),
        };
        // budget ladder: ε', 2ε', ... up to 1/2 while the run is budget-bound
        let mut eps_q = out.eps_inner;
        let run = loop {
            match prescribe_in(ws, &piece, &target, eps_q, DEFAULT_N_MAX) {
                Ok(run) => break Some((run, eps_q)),
                Err(Error::BudgetInfeasible { .. }) if eps_q < EPS_CUBE_MAX => {
                    eps_q = (2.0 * eps_q).min(EPS_CUBE_MAX);
                }
                Err(e) if rejects(&e) => break None,
                Err(e) => return Err(e),
            }
        };
        let fits = run.as_ref().and_then(|(run, _)| {
            let mut worst = 0.0f64;
            for x in piece.iter() {
                let v = run.u.values[x].abs();
                if v == 0.0 {
                    continue;
                }
                let allowed = eps * profile[x];
                if v > allowed {
                    return None;
                }
                worst = worst.max(v / allowed);
            }
            Some(worst)
        });
        match (run, fits) {
            (Some((run, eps_q)), Some(ratio)) => {
                for x in piece.iter() {
                    u[x] += run.u.values[x];
                }
                let tol = run.constants.alphas.last().copied().unwrap_or(0.0) + run.tail;
                out.tolerance = out.tolerance.max(tol);
                out.defect_bound = out.defect_bound.max(run.defect_bound);
                out.cubes.push(CompactCube {
                    cube: id,
                    level: cube.level,
                    support: piece.len(),
                    kept: run.kept.len(),
                    decay_ratio: ratio,
                    tolerance: tol,
                    eps: eps_q,
                    exceptional: run.exceptional_measure(),
                });
                kept_by_cube.extend(run.slopes);
            }
            _ if cube.level < tree.k_max => stack.extend(cube.children.iter().rev()),
            _ => uncaptured.extend(piece.iter()),
        }
    }

    // neighbouring cubes may reach into a kept point's window
    let mut slopes = BTreeMap::new();
    for (x, a) in kept_by_cube {
        let chart = ws.atlas.chart_of(x);
        if affine_at(&ws.windows[x], &chart.phi, &u, x, &a) {
            slopes.insert(x, a);
        }
    }
    uncaptured.sort_unstable();
    out.kept = PointSet::new(space, slopes.keys().copied());
    out.slopes = slopes;
    out.uncaptured = PointSet::new(space, uncaptured);
    out.missed = omega.difference(space, &out.kept).measure();
    out.budget_ok = out.missed < eps;
    out.u = ScalarField::new("u", u);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Exhaustion

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub i: usize,
    pub radius: f64,
    pub eps: f64,
    /// `Ω_i = Ω ∩ B_i ∖ ∪_{k<i} K_k`
    pub omega: Vec<usize>,
    pub captured: Vec<usize>,
    pub sup: f64,
    /// `α_{n_max} + tail` of the accepted cube runs
    pub tolerance: f64,
    pub cubes: usize,
    pub d_cap: f64,
}

#[derive(Clone, Debug)]
pub struct LusinResult {
    pub u: ScalarField,
    pub omega: PointSet,
    pub eps: f64,
    pub basepoint: usize,
    pub step: f64,
    pub stages: Vec<Stage>,
    /// `∪ K_i`
    pub captured: PointSet,
    pub uncaptured: PointSet,
    /// stage index of every captured point
    pub stage_of: BTreeMap<usize, usize>,
    /// per exterior point: `max_y |u(y) - u(x)| / d(x, y)²`
    pub decay: Vec<(usize, f64)>,
}

impl LusinResult {
    /// `Σ_{k > i} ε_k`: sup budget of stages after `i`.
    pub fn eps_after(&self, i: usize) -> f64 {
        self.stages.iter().filter(|s| s.i > i).map(|s| s.eps).sum()
    }

    /// A compact run as a single stage with the full budget `ε`.
    pub fn from_compact(space: &Space, r: &CompactResult) -> Self {
        let stage = Stage {
            i: 1,
            radius: space.diameter(),
            eps: r.eps,
            omega: r.omega.indices().to_vec(),
            captured: r.kept.indices().to_vec(),
            sup: r.u.sup_norm(),
            tolerance: r.tolerance,
            cubes: r.cubes.len(),
            d_cap: r.d_cap,
        };
        LusinResult {
            u: r.u.clone(),
            omega: r.omega.clone(),
            eps: r.eps,
            basepoint: 0,
            step: space.diameter(),
            stages: vec![stage],
            captured: r.kept.clone(),
            uncaptured: r.omega.difference(space, &r.kept),
            stage_of: r.kept.iter().map(|x| (x, 1)).collect(),
            decay: decay_certificate(space, &r.omega, &r.u),
        }
    }

    pub fn decay_csv(&self) -> String {
        let mut s = String::from("point,ratio\n");
        for (x, r) in &self.decay {
            s.push_str(&format!("{x},{r:e}\n"));
        }
        s
    }
}

/// `max_y |u(y) - u(x)| / d(x, y)²` for every `x ∉ Ω`.
pub fn decay_certificate(space: &Space, omega: &PointSet, u: &ScalarField) -> Vec<(usize, f64)> {
    let inside = omega.mask(space.len());
    (0..space.len())
        .filter(|&x| !inside[x])
        .map(|x| {
            let r = (0..space.len())
                .filter(|&y| y != x)
                .map(|y| {
                    let d = space.dist(x, y);
                    (u.values[y] - u.values[x]).abs() / (d * d)
                })
                .fold(0.0, f64::max);
            (x, r)
        })
        .collect()
}

pub fn prescribe_global(
    space: &Space,
    tree: &CubeTree,
    atlas: &ChartAtlas,
    omega: &PointSet,
    f: &TargetField,
    eps: f64,
) -> Result<LusinResult> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParam(format!("eps = {eps} outside (0, 1)")));
    }
    let ws = Workspace::new(space, tree, atlas);
    let n = space.len();
    let rho = 2.0 * space.resolution();
    let basepoint = 0;
    let step = if n > 1 { space.diameter() / 8.0 } else { 1.0 };
    let mut result = LusinResult {
        u: ScalarField::zeros("u", n),
        omega: omega.clone(),
        eps,
        basepoint,
        step,
        stages: Vec::new(),
        captured: PointSet::empty(),
        uncaptured: PointSet::empty(),
        stage_of: BTreeMap::new(),
        decay: Vec::new(),
    };
    if omega.is_empty() || n == 0 {
        result.decay = decay_certificate(space, omega, &result.u);
        return Ok(result);
    }
    let mut u = ScalarField::zeros("u", n);
    let mut captured = vec![false; n];
    let mut seen = vec![false; n];
    let mut idle = 0;
    let mut i = 0;
    loop {
        i += 1;
        let radius = i as f64 * step;
        let ball = space.ball(basepoint, radius)?;
        let region = PointSet::new(
            space,
            omega.iter().filter(|&x| ball.contains(x) && !captured[x]),
        );
        let eps_i = eps * 0.5f64.powi(i as i32);
        let mut stage = Stage {
            i,
            radius,
            eps: eps_i,
            omega: region.indices().to_vec(),
            captured: Vec::new(),
            sup: 0.0,
            tolerance: 0.0,
            cubes: 0,
            d_cap: 0.0,
        };
        if !region.is_empty() {
            // residual target f - d u_{<i}
            let mut values = f.values.clone();
            if u.values.iter().any(|&v| v != 0.0) {
                for x in region.iter() {
                    let g = differential(space, atlas, &u, x, rho)?.g;
                    values[x] = values[x].iter().zip(&g).map(|(a, b)| a - b).collect();
                }
            }
            let target = TargetField::new(space, atlas, region.clone(), values)?;
            let part = compact_in(&ws, &region, &target, eps_i)?;
            for x in 0..n {
                u.values[x] += part.u.values[x];
            }
            for x in part.kept.iter() {
                captured[x] = true;
                result.stage_of.insert(x, i);
            }
            stage.captured = part.kept.indices().to_vec();
            stage.sup = part.u.sup_norm();
            stage.tolerance = part.tolerance;
            stage.cubes = part.cubes.len();
            stage.d_cap = part.d_cap;
            // only stages that reach new ground count towards being stuck
            let fresh = region.iter().any(|x| !seen[x]);
            if !part.kept.is_empty() {
                idle = 0;
            } else if fresh {
                idle += 1;
            }
            for x in region.iter() {
                seen[x] = true;
            }
        }
        let covers = ball.len() == n;
        result.stages.push(stage);
        let left: Vec<usize> = omega.iter().filter(|&x| !captured[x]).collect();
        if idle >= STUCK_STAGES && !left.is_empty() {
            return Err(Error::Stuck { stage: i, points: left });
        }
        if covers {
            break;
        }
    }
    result.captured = PointSet::from_mask(space, &captured);
    result.uncaptured = omega.difference(space, &result.captured);
    result.decay = decay_certificate(space, omega, &u);
    result.u = u;
    Ok(result)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::cubes::build_dyadic_tree;
    use crate::space::generate_space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize) -> Space {
        let mut p = BTreeMap::new();
        p.insert("n".to_string(), n as f64);
        generate_space("grid1d", &p).unwrap()
    }

    fn decay_holds(s: &Space, omega: &PointSet, u: &ScalarField, eps: f64) -> bool {
        let prof = decay_profile(s, omega);
        (0..s.len()).all(|x| u.values[x].abs() <= eps * prof[x])
    }

    #[test]
    fn compact_zero_target() {
        let s = grid(129);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let omega = PointSet::new(&s, 20..100);
        let z = TargetField::zeros(&s, &atlas, omega.clone());
        let r = prescribe_compact(&s, &tree, &atlas, &omega, &z, 0.2).unwrap();
        assert!(r.u.values.iter().all(|&v| v == 0.0));
        assert!(r.kept.is_subset(&omega));
        assert!(r.missed < 0.2);
    }

    #[test]
    fn compact_constant_target_decays() {
        let s = grid(513);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let omega = PointSet::new(&s, 1..512);
        let one = TargetField::from_fn(&s, &atlas, omega.clone(), |_, _| vec![1.0]).unwrap();
        let r = prescribe_compact(&s, &tree, &atlas, &omega, &one, 0.3).unwrap();
        assert!(!r.kept.is_empty());
        assert!(r.kept.is_subset(&omega));
        assert!(decay_holds(&s, &omega, &r.u, 0.3));
        assert!(r.u.sup_norm() < 0.3);
        assert!(r.u.values[0] == 0.0 && r.u.values[512] == 0.0);
        for x in r.kept.iter() {
            let d = differential(&s, &atlas, &r.u, x, 2.0 * s.resolution()).unwrap();
            assert!((d.g[0] - 1.0).abs() <= r.tolerance + 1e-9, "x={x} g={:?}", d.g);
        }
        assert!(r.d_cap < s.resolution());
    }

    #[test]
    fn compact_random_targets() {
        let s = grid(257);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let lo = rng.gen_range(1..80);
            let hi = rng.gen_range(170..256);
            let omega = PointSet::new(&s, lo..hi);
            let (a, b, c) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(0.0..6.0));
            let f = TargetField::from_fn(&s, &atlas, omega.clone(), |x, _| {
                let t = s.coords(x)[0];
                vec![a + b * (c * t).sin()]
            })
            .unwrap();
            let eps = rng.gen_range(0.05..0.5);
            let r = prescribe_compact(&s, &tree, &atlas, &omega, &f, eps).unwrap();
            assert!(decay_holds(&s, &omega, &r.u, eps));
            assert!(r.u.sup_norm() < eps);
            assert!(r.u.values.iter().enumerate().all(|(x, &v)| omega.contains(x) || v == 0.0));
        }
    }

    #[test]
    fn global_trivial_cases() {
        let s = grid(65);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let empty = PointSet::empty();
        let f = TargetField::zeros(&s, &atlas, empty.clone());
        let r = prescribe_global(&s, &tree, &atlas, &empty, &f, 0.1).unwrap();
        assert!(r.u.values.iter().all(|&v| v == 0.0));
        assert!(r.decay.iter().all(|&(_, q)| q == 0.0));
        assert_eq!(r.decay.len(), 65);

        let omega = PointSet::new(&s, 10..50);
        let z = TargetField::zeros(&s, &atlas, omega.clone());
        let r = prescribe_global(&s, &tree, &atlas, &omega, &z, 0.1).unwrap();
        assert!(r.u.values.iter().all(|&v| v == 0.0));
        assert_eq!(r.captured, omega);
        assert!(r.uncaptured.is_empty());
        assert!(prescribe_global(&s, &tree, &atlas, &omega, &z, 1.5).is_err());
    }

    #[test]
    fn global_small_target_certificates() {
        let s = grid(513);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let xs = |i: usize| s.coords(i)[0];
        let omega = PointSet::new(&s, (0..513).filter(|&i| xs(i) > 0.2 && xs(i) < 0.8));
        let f = TargetField::from_fn(&s, &atlas, omega.clone(), |i, _| {
            vec![if xs(i) > 0.5 { 0.001 } else { -0.001 }]
        })
        .unwrap();
        let eps = 0.1;
        let r = prescribe_global(&s, &tree, &atlas, &omega, &f, eps).unwrap();
        assert!(!r.captured.is_empty());
        assert!(r.u.sup_norm() <= eps);
        assert!(r.u.values.iter().enumerate().all(|(x, &v)| omega.contains(x) || v == 0.0));
        // exhaustive quadratic flatness outside Ω
        for x in (0..513).filter(|&x| !omega.contains(x)) {
            for y in 0..513 {
                let d = s.dist(x, y);
                assert!((r.u.values[y] - r.u.values[x]).abs() <= eps * d * d);
            }
        }
        assert!(r.decay.iter().all(|&(_, q)| q <= eps));
        let rho = 2.0 * s.resolution();
        for (&x, &i) in &r.stage_of {
            let stage = &r.stages[i - 1];
            let bound = stage.tolerance + rho * r.eps_after(i) + 1e-9;
            let g = differential(&s, &atlas, &r.u, x, rho).unwrap().g;
            assert!((g[0] - f.values[x][0]).abs() <= bound, "x={x} stage {i}");
        }
        // stages capture disjoint sets
        let total: usize = r.stages.iter().map(|s| s.captured.len()).sum();
        assert_eq!(total, r.captured.len());
    }

    #[test]
    fn global_large_target_is_stuck() {
        let s = grid(513);
        let tree = build_dyadic_tree(&s).unwrap();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let xs = |i: usize| s.coords(i)[0];
        let omega = PointSet::new(&s, (0..513).filter(|&i| xs(i) > 0.2 && xs(i) < 0.8));
        let f = TargetField::from_fn(&s, &atlas, omega.clone(), |i, _| {
            vec![xs(i) * if xs(i) > 0.5 { 1.0 } else { -1.0 }]
        })
        .unwrap();
        match prescribe_global(&s, &tree, &atlas, &omega, &f, 0.1) {
            Err(Error::Stuck { stage, points }) => {
                assert_eq!(stage, 4);
                assert!(!points.is_empty());
            }
            other => panic!("expected a stuck exhaustion, got {:?}", other.map(|r| r.captured.len())),
        }
    }
}

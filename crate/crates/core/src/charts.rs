//! Chart atlases and the windowed chart differential.
//!
//! A chart is a set `U_j` with coordinates `phi_j : X -> R^k_j`. The
//! differential of `u` at `x in U_j` is the weighted least-squares slope of
//! `u(y) - u(x)` against `phi_j(y) - phi_j(x)` over the window
//! `0 < d(x, y) <= rho`, weights `1 / d(x, y)^2`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lipfield::{lip_at, ScalarField};
use crate::space::{PointSet, Space};

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub j: usize,
    pub domain: PointSet,
    pub k: usize,
    /// `phi[x]` in `R^k` for every point of the space
    pub phi: Vec<Vec<f64>>,
    pub lip_phi: f64,
    pub c_j: Option<f64>,
}

impl Chart {
    pub fn phi_diff(&self, y: usize, x: usize) -> Vec<f64> {
        self.phi[y].iter().zip(&self.phi[x]).map(|(a, b)| a - b).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChartAtlas {
    charts: Vec<Chart>,
    /// index into `charts` for every point
    chart_of: Vec<usize>,
}

/// Slope of `u` in chart coordinates at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Differential {
    pub chart: usize,
    pub g: Vec<f64>,
    pub residual: f64,
    /// ratio of extreme singular values of the weighted design; `inf` when rank deficient
    pub condition: f64,
    pub window: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub chart: usize,
    /// aligned with the chart domain's indices
    pub points: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AtlasDocument {
    pub charts: Vec<ChartEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChartEntry {
    pub j: usize,
    #[serde(rename = "U")]
    pub domain: Vec<usize>,
    pub k: usize,
    pub phi: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_j: Option<f64>,
}

pub fn measure_lip_phi(space: &Space, phi: &[Vec<f64>]) -> f64 {
    let n = space.len();
    let mut best = 0.0f64;
    for x in 0..n {
        for y in x + 1..n {
            let diff: f64 = phi[x]
                .iter()
                .zip(&phi[y])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if diff > 0.0 {
                best = best.max(diff / space.dist(x, y));
            }
        }
    }
    best
}

impl ChartAtlas {
    /// Validates disjointness, coverage and coordinate dimensions.
    pub fn new(space: &Space, parts: Vec<(PointSet, Vec<Vec<f64>>, Option<f64>)>) -> Result<Self> {
        let n = space.len();
        let mut chart_of = vec![usize::MAX; n];
        let mut overlap = Vec::new();
        let mut charts = Vec::with_capacity(parts.len());
        for (j, (domain, phi, c_j)) in parts.into_iter().enumerate() {
            if phi.len() != n {
                return Err(Error::DimensionMismatch {
                    chart: j,
                    expected: n,
                    found: phi.len(),
                });
            }
            let k = phi.first().map_or(0, |v| v.len());
            if let Some(bad) = phi.iter().find(|v| v.len() != k) {
                return Err(Error::DimensionMismatch {
                    chart: j,
                    expected: k,
                    found: bad.len(),
                });
            }
            if phi.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Malformed(format!("chart {j} has non-finite coordinates")));
            }
            for x in domain.iter() {
                if chart_of[x] != usize::MAX {
                    overlap.push(x);
                }
                chart_of[x] = j;
            }
            let lip_phi = measure_lip_phi(space, &phi);
            charts.push(Chart {
                j,
                domain,
                k,
                phi,
                lip_phi,
                c_j,
            });
        }
        if !overlap.is_empty() {
            overlap.sort_unstable();
            overlap.dedup();
            return Err(Error::ChartOverlap(overlap));
        }
        let gap: Vec<usize> = (0..n).filter(|&x| chart_of[x] == usize::MAX).collect();
        if !gap.is_empty() {
            return Err(Error::ChartGap(gap));
        }
        Ok(Self { charts, chart_of })
    }

    /// One chart covering everything.
    pub fn single(space: &Space, phi: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(space, vec![(PointSet::all(space), phi, None)])
    }

    /// The identity chart `phi(x) = coordinates of x`.
    pub fn coordinates(space: &Space) -> Result<Self> {
        Self::single(space, (0..space.len()).map(|x| space.coords(x).to_vec()).collect())
    }

    /// Two identity charts on a 1-D space: `x < cut` and `x ≥ cut`.
    pub fn split_line(space: &Space, cut: f64) -> Result<Self> {
        if space.coords(0).len() != 1 {
            return Err(Error::InvalidParam("split_line needs a 1-D space".into()));
        }
        let phi: Vec<Vec<f64>> = (0..space.len()).map(|x| space.coords(x).to_vec()).collect();
        let left = PointSet::new(space, (0..space.len()).filter(|&x| space.coords(x)[0] < cut));
        let right = left.complement(space);
        Self::new(space, vec![(left, phi.clone(), None), (right, phi, None)])
    }

    pub fn charts(&self) -> &[Chart] {
        &self.charts
    }

    pub fn chart(&self, j: usize) -> &Chart {
        &self.charts[j]
    }

    pub fn chart_index(&self, x: usize) -> usize {
        self.chart_of[x]
    }

    pub fn chart_of(&self, x: usize) -> &Chart {
        &self.charts[self.chart_of[x]]
    }

    pub fn len(&self) -> usize {
        self.charts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charts.is_empty()
    }

    pub fn max_dimension(&self) -> usize {
        self.charts.iter().map(|c| c.k).max().unwrap_or(0)
    }

    pub fn to_document(&self) -> AtlasDocument {
        AtlasDocument {
            charts: self
                .charts
                .iter()
                .map(|c| ChartEntry {
                    j: c.j,
                    domain: c.domain.indices().to_vec(),
                    k: c.k,
                    phi: c.phi.clone(),
                    c_j: c.c_j,
                })
                .collect(),
        }
    }
}

pub fn load_charts(space: &Space, doc: &str) -> Result<ChartAtlas> {
    let doc: AtlasDocument = serde_json::from_str(doc)?;
    atlas_from_document(space, doc)
}

pub fn atlas_from_document(space: &Space, doc: AtlasDocument) -> Result<ChartAtlas> {
    let mut entries = doc.charts;
    entries.sort_by_key(|e| e.j);
    let mut parts = Vec::with_capacity(entries.len());
    for (pos, e) in entries.into_iter().enumerate() {
        if e.j != pos {
            return Err(Error::Malformed(format!("chart ids must be 0..J, found {}", e.j)));
        }
        for &x in &e.domain {
            space.check_point(x)?;
        }
        if let Some(bad) = e.phi.iter().find(|v| v.len() != e.k) {
            return Err(Error::DimensionMismatch {
                chart: e.j,
                expected: e.k,
                found: bad.len(),
            });
        }
        parts.push((PointSet::new(space, e.domain), e.phi, e.c_j));
    }
    ChartAtlas::new(space, parts)
}

/// Divides every `phi_j` by its Lipschitz constant; `c_j` scales up by the same factor.
pub fn normalize_atlas(space: &Space, atlas: &ChartAtlas) -> Result<ChartAtlas> {
    let mut out = atlas.clone();
    for chart in &mut out.charts {
        if chart.k == 0 {
            continue;
        }
        let l = chart.lip_phi;
        if !(l > 0.0) {
            return Err(Error::DegenerateChart(chart.j));
        }
        if l == 1.0 {
            continue;
        }
        for v in chart.phi.iter_mut().flatten() {
            *v /= l;
        }
        chart.c_j = chart.c_j.map(|c| c * l);
        chart.lip_phi = measure_lip_phi(space, &chart.phi);
    }
    Ok(out)
}

fn window(space: &Space, x: usize, rho: f64) -> Vec<(usize, f64)> {
    (0..space.len())
        .filter(|&y| y != x)
        .map(|y| (y, space.dist(x, y)))
        .filter(|&(_, d)| d <= rho)
        .collect()
}

fn defect(chart: &Chart, u: &ScalarField, g: &[f64], x: usize, win: &[(usize, f64)]) -> f64 {
    win.iter()
        .map(|&(y, d)| {
            let lin: f64 = g
                .iter()
                .zip(chart.phi[y].iter().zip(&chart.phi[x]))
                .map(|(gi, (a, b))| gi * (a - b))
                .sum();
            (u.values[y] - u.values[x] - lin).abs() / d
        })
        .fold(0.0, f64::max)
}

pub fn differential(
    space: &Space,
    atlas: &ChartAtlas,
    u: &ScalarField,
    x: usize,
    rho: f64,
) -> Result<Differential> {
    space.check_point(x)?;
    let chart = atlas.chart_of(x);
    let win = window(space, x, rho);
    if win.is_empty() {
        return Err(Error::EmptyWindow(x));
    }
    let k = chart.k;
    let (g, condition) = if k == 0 {
        (Vec::new(), 1.0)
    } else {
        let m = win.len();
        let mut a = DMatrix::<f64>::zeros(m, k);
        let mut b = DVector::<f64>::zeros(m);
        let mut flat = true;
        for (row, &(y, d)) in win.iter().enumerate() {
            let w = 1.0 / d;
            for i in 0..k {
                let v = chart.phi[y][i] - chart.phi[x][i];
                flat &= v == 0.0;
                a[(row, i)] = w * v;
            }
            b[row] = w * (u.values[y] - u.values[x]);
        }
        if flat {
            if let Some(&(y, _)) = win
                .iter()
                .filter(|&&(y, _)| u.values[y] != u.values[x])
                .max_by(|p, q| {
                    let dp = (u.values[p.0] - u.values[x]).abs();
                    let dq = (u.values[q.0] - u.values[x]).abs();
                    dp.total_cmp(&dq)
                })
            {
                return Err(Error::NotDifferentiable { point: x, witness: y });
            }
            (vec![0.0; k], f64::INFINITY)
        } else {
            let svd = a.svd(true, true);
            let smax = svd.singular_values.max();
            let eps = smax * 1e-12 * (m.max(k) as f64);
            let smin = svd.singular_values.min();
            let condition = if smin > eps && k <= m { smax / smin } else { f64::INFINITY };
            let sol = svd
                .solve(&b, eps)
                .map_err(|e| Error::InvalidParam(format!("least squares: {e}")))?;
            (sol.iter().copied().collect(), condition)
        }
    };
    let residual = defect(chart, u, &g, x, &win);
    Ok(Differential {
        chart: chart.j,
        g,
        residual,
        condition,
        window: win.len(),
    })
}

/// Largest `|u(y) - u(x) - <g, phi(y) - phi(x)>| / d(x, y)` over the window.
pub fn residual(
    space: &Space,
    atlas: &ChartAtlas,
    u: &ScalarField,
    g: &[f64],
    x: usize,
    rho: f64,
) -> Result<f64> {
    space.check_point(x)?;
    let chart = atlas.chart_of(x);
    if g.len() != chart.k {
        return Err(Error::DimensionMismatch {
            chart: chart.j,
            expected: chart.k,
            found: g.len(),
        });
    }
    let win = window(space, x, rho);
    if win.is_empty() {
        return Err(Error::EmptyWindow(x));
    }
    Ok(defect(chart, u, g, x, &win))
}

/// The differential at every point of chart `j`.
pub fn gradient_field(
    space: &Space,
    atlas: &ChartAtlas,
    u: &ScalarField,
    j: usize,
    rho: f64,
) -> Result<GradientField> {
    let chart = atlas.chart(j);
    let mut values = Vec::with_capacity(chart.domain.len());
    for x in chart.domain.iter() {
        values.push(differential(space, atlas, u, x, rho)?.g);
    }
    Ok(GradientField {
        chart: j,
        points: chart.domain.indices().to_vec(),
        values,
    })
}

/// Default `c_j`: the largest `|d^j u(x)| / Lip_u(x)` over a probe family
/// (the chart coordinates and distance functions to seeded anchors),
/// sampled at up to `samples` points of `U_j`.
pub fn measure_c_j(
    space: &Space,
    atlas: &ChartAtlas,
    j: usize,
    rho: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let chart = atlas.chart(j);
    if chart.k == 0 {
        return Ok(1.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes: Vec<ScalarField> = (0..chart.k)
        .map(|i| ScalarField::from_fn(space, format!("phi{i}"), |x| chart.phi[x][i]))
        .collect();
    let mut anchors: Vec<usize> = (0..space.len()).collect();
    anchors.shuffle(&mut rng);
    for &a in anchors.iter().take(8) {
        probes.push(ScalarField::from_fn(space, format!("d{a}"), |x| space.dist(x, a)));
    }
    let mut pts = chart.domain.indices().to_vec();
    pts.shuffle(&mut rng);
    pts.truncate(samples);
    let mut best = 0.0f64;
    for u in &probes {
        for &x in &pts {
            let d = match differential(space, atlas, u, x, rho) {
                Ok(d) => d,
                Err(Error::EmptyWindow(_)) | Err(Error::NotDifferentiable { .. }) => continue,
                Err(e) => return Err(e),
            };
            let lip = lip_at(space, u, x, rho)?.value;
            let norm = d.g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if lip > 0.0 {
                best = best.max(norm / lip);
            }
        }
    }
    Ok(if best > 0.0 { best } else { 1.0 })
}

/// Fills every missing `c_j` with [`measure_c_j`].
pub fn with_default_constants(space: &Space, atlas: &ChartAtlas, rho: f64, seed: u64) -> Result<ChartAtlas> {
    let mut out = atlas.clone();
    for j in 0..out.charts.len() {
        if out.charts[j].c_j.is_none() {
            out.charts[j].c_j = Some(measure_c_j(space, atlas, j, rho, 64, seed)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::generate_space;
    use rand::Rng;
    use std::collections::BTreeMap;

    fn gen(kind: &str, key: &str, v: f64) -> Space {
        let mut p = BTreeMap::new();
        p.insert(key.to_string(), v);
        generate_space(kind, &p).unwrap()
    }

    fn scaled(s: &Space, a: f64) -> ChartAtlas {
        ChartAtlas::single(s, (0..s.len()).map(|x| vec![a * s.coords(x)[0]]).collect()).unwrap()
    }

    #[test]
    fn lip_phi_measured() {
        let s = gen("grid1d", "n", 33.0);
        assert!((scaled(&s, 1.0).chart(0).lip_phi - 1.0).abs() < 1e-12);
        assert!((scaled(&s, 2.0).chart(0).lip_phi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn heisenberg_horizontal_chart() {
        let s = gen("heisenberg_lattice", "R", 3.0);
        let phi = (0..s.len()).map(|x| s.coords(x)[..2].to_vec()).collect();
        let atlas = ChartAtlas::single(&s, phi).unwrap();
        // |(da, db)| <= |da| + |db| <= word length
        assert!(atlas.chart(0).lip_phi <= 1.0 + 1e-12, "{}", atlas.chart(0).lip_phi);
    }

    #[test]
    fn document_errors() {
        let s = gen("grid1d", "n", 5.0);
        let phi: Vec<Vec<f64>> = (0..5).map(|x| vec![x as f64]).collect();
        let doc = |u0: &str, u1: &str, k1: usize| {
            format!(
                r#"{{"charts":[{{"j":0,"U":{u0},"k":1,"phi":{p}}},{{"j":1,"U":{u1},"k":{k1},"phi":{p}}}]}}"#,
                p = serde_json::to_string(&phi).unwrap()
            )
        };
        assert!(load_charts(&s, &doc("[0,1,2]", "[3,4]", 1)).is_ok());
        match load_charts(&s, &doc("[0,1,2]", "[2,3,4]", 1)) {
            Err(Error::ChartOverlap(v)) => assert_eq!(v, vec![2]),
            other => panic!("{other:?}"),
        }
        match load_charts(&s, &doc("[0,1]", "[3,4]", 1)) {
            Err(Error::ChartGap(v)) => assert_eq!(v, vec![2]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            load_charts(&s, &doc("[0,1,2]", "[3,4]", 2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn normalization() {
        let s = gen("grid1d", "n", 33.0);
        let h = s.resolution();
        let a2 = scaled(&s, 2.0);
        let u = ScalarField::from_fn(&s, "x", |x| s.coords(x)[0]);
        assert!((differential(&s, &a2, &u, 10, 2.0 * h).unwrap().g[0] - 0.5).abs() < 1e-12);
        let n2 = normalize_atlas(&s, &a2).unwrap();
        assert!((n2.chart(0).lip_phi - 1.0).abs() < 1e-12);
        assert!((differential(&s, &n2, &u, 10, 2.0 * h).unwrap().g[0] - 1.0).abs() < 1e-12);
        let a1 = scaled(&s, 1.0);
        assert_eq!(normalize_atlas(&s, &a1).unwrap(), a1);
        // mixed atlas: lip 1 and 3
        let phi_mixed: Vec<Vec<f64>> = (0..s.len()).map(|x| vec![s.coords(x)[0]]).collect();
        let phi3: Vec<Vec<f64>> = phi_mixed.iter().map(|v| vec![3.0 * v[0]]).collect();
        let mixed = ChartAtlas::new(
            &s,
            vec![
                (PointSet::new(&s, 0..16), phi_mixed, Some(2.0)),
                (PointSet::new(&s, 16..33), phi3, Some(2.0)),
            ],
        )
        .unwrap();
        let nm = normalize_atlas(&s, &mixed).unwrap();
        for c in nm.charts() {
            assert!((c.lip_phi - 1.0).abs() < 1e-12);
        }
        assert_eq!(nm.chart(1).c_j, Some(6.0));
        let flat = ChartAtlas::single(&s, vec![vec![1.0]; s.len()]).unwrap();
        assert!(matches!(normalize_atlas(&s, &flat), Err(Error::DegenerateChart(0))));
    }

    #[test]
    fn exact_fits() {
        let s = gen("grid1d", "n", 65.0);
        let h = s.resolution();
        let a = scaled(&s, 1.0);
        let c = ScalarField::from_fn(&s, "c", |_| 2.5);
        let lin = ScalarField::from_fn(&s, "3x", |x| 3.0 * s.coords(x)[0]);
        for x in [0, 20, 64] {
            let d = differential(&s, &a, &c, x, 4.0 * h).unwrap();
            assert_eq!(d.g, vec![0.0]);
            assert_eq!(d.residual, 0.0);
            for rho in [h, 3.0 * h] {
                let d = differential(&s, &a, &lin, x, rho).unwrap();
                assert!((d.g[0] - 3.0).abs() < 1e-12);
                assert!(d.residual < 1e-12);
            }
        }
    }

    #[test]
    fn square_at_half() {
        let s = gen("grid1d", "n", 257.0);
        let h = s.resolution();
        let a = scaled(&s, 1.0);
        let u = ScalarField::from_fn(&s, "sq", |x| s.coords(x)[0].powi(2));
        let g = differential(&s, &a, &u, 128, 4.0 * h).unwrap().g[0];
        // oracle: central difference (u(x+h) - u(x-h)) / 2h
        let fd = (u.values[129] - u.values[127]) / (2.0 * h);
        assert!((g - fd).abs() <= 4.0 * h && (g - 1.0).abs() <= 4.0 * h, "{g}");
    }

    #[test]
    fn kink_residual() {
        let s = gen("grid1d", "n", 65.0);
        let h = s.resolution();
        let a = scaled(&s, 1.0);
        let u = ScalarField::from_fn(&s, "abs", |x| (s.coords(x)[0] - 0.5).abs());
        let r0 = residual(&s, &a, &u, &[0.0], 32, 2.0 * h).unwrap();
        assert!((r0 - 1.0).abs() < 1e-12);
        for g in [-0.7, 0.3, 0.9] {
            let r = residual(&s, &a, &u, &[g], 32, 2.0 * h).unwrap();
            // y = 0.5 +- h gives quotients |1 - g| and |1 + g|
            assert!(r >= 1.0 - f64::abs(g) - 1e-12);
            assert!((r - (1.0 + f64::abs(g))).abs() < 1e-12);
        }
    }

    #[test]
    fn least_squares_usually_beats_random_slopes() {
        let s = gen("grid2d", "n", 10.0);
        let h = s.resolution();
        let atlas = ChartAtlas::coordinates(&s).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut wins = 0;
        let trials = 200;
        for _ in 0..trials {
            let (p, q, r) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0));
            let u = ScalarField::from_fn(&s, "u", |x| {
                let c = s.coords(x);
                p * c[0] + q * c[1] + r * (c[0] * c[1] * 9.0).sin()
            });
            let x = rng.gen_range(0..s.len());
            let d = differential(&s, &atlas, &u, x, 2.0 * h).unwrap();
            let other = [d.g[0] + rng.gen_range(-1.0..1.0), d.g[1] + rng.gen_range(-1.0..1.0)];
            if d.residual <= residual(&s, &atlas, &u, &other, x, 2.0 * h).unwrap() + 1e-12 {
                wins += 1;
            }
        }
        assert!(wins * 10 >= trials * 9, "{wins}/{trials}");
    }

    #[test]
    fn normalization_invariance_of_residual() {
        let s = gen("grid2d", "n", 8.0);
        let h = s.resolution();
        let phi: Vec<Vec<f64>> = (0..s.len())
            .map(|x| vec![2.0 * s.coords(x)[0] + s.coords(x)[1], 3.0 * s.coords(x)[1]])
            .collect();
        let atlas = ChartAtlas::single(&s, phi).unwrap();
        let norm = normalize_atlas(&s, &atlas).unwrap();
        let l = atlas.chart(0).lip_phi;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = ScalarField::from_fn(&s, "u", |_| rng.gen_range(-1.0..1.0));
        for x in [0, 9, 30, 63] {
            let g = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let r1 = residual(&s, &atlas, &u, &g, x, 2.0 * h).unwrap();
            let r2 = residual(&s, &norm, &u, &[g[0] * l, g[1] * l], x, 2.0 * h).unwrap();
            assert!((r1 - r2).abs() <= 1e-12 * r1.max(1.0));
        }
        // full-rank windows: unique minimizer, finite condition number
        let d = differential(&s, &atlas, &u, 27, 2.0 * h).unwrap();
        assert!(d.condition.is_finite());
    }

    #[test]
    fn degenerate_windows() {
        let s = gen("grid1d", "n", 9.0);
        let flat = ChartAtlas::single(&s, vec![vec![0.0]; 9]).unwrap();
        let u = ScalarField::from_fn(&s, "x", |x| x as f64);
        assert!(matches!(
            differential(&s, &flat, &u, 4, 2.0 * s.resolution()),
            Err(Error::NotDifferentiable { point: 4, .. })
        ));
        let zero_dim = ChartAtlas::single(&s, vec![vec![]; 9]).unwrap();
        let d = differential(&s, &zero_dim, &u, 4, s.resolution()).unwrap();
        assert!(d.g.is_empty());
        assert!(matches!(
            differential(&s, &zero_dim, &u, 4, 0.5 * s.resolution()),
            Err(Error::EmptyWindow(4))
        ));
    }

    #[test]
    fn default_constant_for_coordinates() {
        let s = gen("grid1d", "n", 65.0);
        let atlas = with_default_constants(&s, &scaled(&s, 1.0), 2.0 * s.resolution(), 1).unwrap();
        let c = atlas.chart(0).c_j.unwrap();
        assert!((1.0 - 1e-9..2.0).contains(&c), "{c}");
    }
}

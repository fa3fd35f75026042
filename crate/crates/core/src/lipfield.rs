//! Pointwise and global Lipschitz constants of scalar fields.
//!
//! The pointwise constant is windowed: `lip_at(u, x, rho)` is the largest
//! difference quotient `|u(y) - u(x)| / d(x, y)` over `0 < d(x, y) <= rho`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::space::{estimate_quasiconvexity, PointSet, Space};

/// Absolute slack on the gluing bound.
pub const GLUE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub name: String,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    pub fn zeros(name: impl Into<String>, n: usize) -> Self {
        Self::new(name, vec![0.0; n])
    }

    pub fn from_fn(space: &Space, name: impl Into<String>, f: impl FnMut(usize) -> f64) -> Self {
        Self::new(name, (0..space.len()).map(f).collect())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, x: usize) -> f64 {
        self.values[x]
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check(&self, space: &Space) -> Result<()> {
        if self.values.len() != space.len() {
            return Err(Error::InvalidParam(format!(
                "field `{}` has {} values for {} points",
                self.name,
                self.values.len(),
                space.len()
            )));
        }
        if let Some(x) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!(
                "field `{}` is not finite at point {x}",
                self.name
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &ScalarField) -> ScalarField {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        self.zip(other, |a, b| a - b)
    }

    pub fn zip(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        ScalarField::new(
            self.name.clone(),
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField::new(self.name.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// `point,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point,value\n");
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LipAt {
    pub value: f64,
    /// no other point within the window
    pub isolated: bool,
}

fn check_window(space: &Space, rho: f64) -> Result<()> {
    let h = space.resolution();
    if space.len() > 1 && !(rho >= h * (1.0 - 1e-12)) {
        return Err(Error::InvalidParam(format!("window {rho} below resolution {h}")));
    }
    Ok(())
}

pub fn lip_at(space: &Space, u: &ScalarField, x: usize, rho: f64) -> Result<LipAt> {
    space.check_point(x)?;
    check_window(space, rho)?;
    Ok(lip_at_unchecked(space, &u.values, x, rho))
}

fn lip_at_unchecked(space: &Space, u: &[f64], x: usize, rho: f64) -> LipAt {
    let mut value = 0.0f64;
    let mut isolated = true;
    for y in 0..space.len() {
        if y == x {
            continue;
        }
        let d = space.dist(x, y);
        if d <= rho {
            isolated = false;
            value = value.max((u[y] - u[x]).abs() / d);
        }
    }
    LipAt { value, isolated }
}

/// `lip_at` at every point; isolated points get 0.
pub fn lip_field(space: &Space, u: &ScalarField, rho: f64) -> Result<ScalarField> {
    check_window(space, rho)?;
    Ok(ScalarField::new(
        format!("Lip[{}]", u.name),
        (0..space.len())
            .map(|x| lip_at_unchecked(space, &u.values, x, rho).value)
            .collect(),
    ))
}

/// Largest difference quotient over all pairs.
pub fn global_lip(space: &Space, u: &ScalarField) -> f64 {
    global_lip_on(space, &u.values, None)
}

/// Same, restricted to pairs inside `set`.
pub fn global_lip_within(space: &Space, u: &ScalarField, set: &PointSet) -> f64 {
    global_lip_on(space, &u.values, Some(set.indices()))
}

fn global_lip_on(space: &Space, u: &[f64], set: Option<&[usize]>) -> f64 {
    let all: Vec<usize>;
    let pts = match set {
        Some(s) => s,
        None => {
            all = (0..space.len()).collect();
            &all
        }
    };
    let mut best = 0.0f64;
    for (a, &x) in pts.iter().enumerate() {
        for &y in &pts[a + 1..] {
            let du = (u[x] - u[y]).abs();
            if du > 0.0 {
                best = best.max(du / space.dist(x, y));
            }
        }
    }
    best
}

/// Weighted `L^p` norm of `field` over `on` (default all points); `p = inf` is the max.
pub fn lip_norm(space: &Space, field: &ScalarField, p: f64, on: Option<&PointSet>) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParam(format!("exponent p = {p} < 1")));
    }
    let all;
    let set = match on {
        Some(s) => s,
        None => {
            all = PointSet::all(space);
            &all
        }
    };
    if p == f64::INFINITY {
        return Ok(set.iter().fold(0.0, |m, x| m.max(field.values[x].abs())));
    }
    let sum: f64 = set
        .iter()
        .map(|x| field.values[x].abs().powf(p) * space.weight(x))
        .sum();
    Ok(sum.powf(1.0 / p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlueReport {
    pub quasiconvexity: f64,
    pub region_lip: Vec<f64>,
    pub global_lip: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Checks that a field vanishing off disjoint regions, each `L`-Lipschitz,
/// is `2 C_q L`-Lipschitz on the whole space.
pub fn glue_bound_check(
    space: &Space,
    u: &ScalarField,
    regions: &[PointSet],
    l: f64,
) -> Result<GlueReport> {
    u.check(space)?;
    let mut owner = vec![usize::MAX; space.len()];
    for (r, region) in regions.iter().enumerate() {
        for x in region.iter() {
            if owner[x] != usize::MAX {
                return Err(Error::RegionOverlap(x));
            }
            owner[x] = r;
        }
    }
    if let Some(x) = (0..space.len()).find(|&x| owner[x] == usize::MAX && u.values[x] != 0.0) {
        return Err(Error::Precondition(format!(
            "field is nonzero at point {x} outside every region"
        )));
    }
    let mut region_lip = Vec::with_capacity(regions.len());
    for (r, region) in regions.iter().enumerate() {
        let lr = global_lip_within(space, u, region);
        if lr > l + GLUE_TOLERANCE {
            return Err(Error::Precondition(format!(
                "region {r} has Lipschitz constant {lr} > {l}"
            )));
        }
        region_lip.push(lr);
    }
    let c_q = estimate_quasiconvexity(space)?;
    let g = global_lip(space, u);
    let bound = 2.0 * c_q * l;
    Ok(GlueReport {
        quasiconvexity: c_q,
        region_lip,
        global_lip: g,
        bound,
        pass: g <= bound + GLUE_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::generate_space;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn gen(kind: &str, n: f64) -> Space {
        let mut p = BTreeMap::new();
        p.insert("n".to_string(), n);
        generate_space(kind, &p).unwrap()
    }

    fn x_of(s: &Space) -> ScalarField {
        ScalarField::from_fn(s, "x", |i| s.coords(i)[0])
    }

    #[test]
    fn linear_and_constant() {
        let s = gen("grid1d", 65.0);
        let h = s.resolution();
        let lx = lip_field(&s, &x_of(&s), 2.0 * h).unwrap();
        assert!(lx.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let c = ScalarField::from_fn(&s, "c", |_| 4.0);
        assert_eq!(lip_field(&s, &c, 2.0 * h).unwrap().sup_norm(), 0.0);
        assert!((global_lip(&s, &x_of(&s)) - 1.0).abs() < 1e-12);
        assert!(lip_at(&s, &c, 3, 0.5 * h).is_err());
    }

    #[test]
    fn square_at_three_quarters() {
        let s = gen("grid1d", 257.0);
        let h = s.resolution();
        let u = ScalarField::from_fn(&s, "sq", |i| s.coords(i)[0].powi(2));
        let x = 192;
        let v = lip_at(&s, &u, x, 2.0 * h).unwrap().value;
        // oracle: right-hand quotients ((x+jh)^2 - x^2)/(jh) = 2x + jh, largest at j = 2
        let want = 2.0 * 0.75 + 2.0 * h;
        assert!((v - want).abs() < 1e-12, "{v} vs {want}");
    }

    #[test]
    fn indicator_and_distance_fields() {
        let s = gen("grid1d", 33.0);
        let h = s.resolution();
        let ind = ScalarField::from_fn(&s, "ind", |i| (i == 10) as u8 as f64);
        assert!((global_lip(&s, &ind) - 1.0 / h).abs() < 1e-9);
        let s2 = gen("grid2d", 9.0);
        let dz = ScalarField::from_fn(&s2, "d", |i| s2.dist(i, 40));
        let f = lip_field(&s2, &dz, 3.0 * s2.resolution()).unwrap();
        assert!(f.sup_norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn isolated_flag() {
        let s = crate::space::load_space(
            r#"{"points":[0,1,10],"dist":{"metric":{"kind":"euclidean"}},"weights":[1,1,1]}"#,
        )
        .unwrap();
        let u = ScalarField::new("u", vec![0.0, 1.0, 5.0]);
        let a = lip_at(&s, &u, 2, 1.0).unwrap();
        assert!(a.isolated && a.value == 0.0);
        assert!(!lip_at(&s, &u, 0, 1.0).unwrap().isolated);
    }

    #[test]
    fn global_dominates_pointwise_random() {
        let s = gen("grid2d", 7.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let u = ScalarField::from_fn(&s, "r", |_| rng.gen_range(-1.0..1.0));
            let g = global_lip(&s, &u);
            let f = lip_field(&s, &u, 2.0 * s.resolution()).unwrap();
            assert!(f.sup_norm() <= g + 1e-12);
        }
    }

    #[test]
    fn norms() {
        let s = gen("grid1d", 101.0);
        let h = s.resolution();
        let z = ScalarField::zeros("z", s.len());
        for p in [1.0, 2.0, f64::INFINITY] {
            assert_eq!(lip_norm(&s, &z, p, None).unwrap(), 0.0);
        }
        let one = ScalarField::from_fn(&s, "1", |_| 1.0);
        let omega = PointSet::new(&s, 10..40);
        let n2 = lip_norm(&s, &one, 2.0, Some(&omega)).unwrap();
        assert!((n2 - omega.measure().sqrt()).abs() < 1e-12);
        assert_eq!(lip_norm(&s, &one, f64::INFINITY, Some(&omega)).unwrap(), 1.0);
        let n1 = lip_norm(&s, &x_of(&s), 1.0, None).unwrap();
        assert!((n1 - 0.5).abs() <= h);
        assert!(lip_norm(&s, &z, 0.5, None).is_err());
    }

    #[test]
    fn subadditive_and_product_rule() {
        let s = gen("grid2d", 8.0);
        let rho = 2.0 * s.resolution();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let f = ScalarField::from_fn(&s, "f", |_| rng.gen_range(-2.0..2.0));
            let g = ScalarField::from_fn(&s, "g", |_| rng.gen_range(-2.0..2.0));
            let lf = lip_field(&s, &f, rho).unwrap();
            let lg = lip_field(&s, &g, rho).unwrap();
            let ls = lip_field(&s, &f.add(&g), rho).unwrap();
            let lp = lip_field(&s, &f.zip(&g, |a, b| a * b), rho).unwrap();
            for x in 0..s.len() {
                assert!(ls.values[x] <= lf.values[x] + lg.values[x] + 1e-12);
                let bound = f.values[x].abs() * lg.values[x]
                    + g.values[x].abs() * lf.values[x]
                    + rho * lf.values[x] * lg.values[x];
                assert!(lp.values[x] <= bound + 1e-9);
            }
        }
    }

    #[test]
    fn gluing() {
        let s = gen("grid1d", 101.0);
        let h = s.resolution();
        let zero = ScalarField::zeros("0", s.len());
        let r = glue_bound_check(&s, &zero, &[], 1.0).unwrap();
        assert!(r.pass && r.global_lip == 0.0);
        // two tents of slope 3 on [10, 30] and [50, 90]
        let l = 3.0;
        let tent = |i: usize, a: usize, b: usize| {
            if i < a || i > b {
                0.0
            } else {
                l * h * (i - a).min(b - i) as f64
            }
        };
        let u = ScalarField::from_fn(&s, "tents", |i| tent(i, 10, 30) + tent(i, 50, 90));
        let regions = [PointSet::new(&s, 10..=30), PointSet::new(&s, 50..=90)];
        let r = glue_bound_check(&s, &u, &regions, l).unwrap();
        assert!(r.pass && r.global_lip <= 2.0 * l + 1e-9);
        assert!(matches!(
            glue_bound_check(&s, &u, &regions, 1.0),
            Err(Error::Precondition(_))
        ));
        let overlap = [PointSet::new(&s, 10..=30), PointSet::new(&s, 30..=90)];
        assert!(matches!(glue_bound_check(&s, &u, &overlap, l), Err(Error::RegionOverlap(30))));
    }

    #[test]
    fn gluing_random_grid2d() {
        let s = gen("grid2d", 8.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let mut regions = Vec::new();
            let mut owner = vec![false; s.len()];
            for _ in 0..3 {
                let c = rng.gen_range(0..s.len());
                let r = rng.gen_range(0.1..0.4);
                let pts: Vec<usize> = (0..s.len())
                    .filter(|&y| !owner[y] && s.dist(c, y) < r)
                    .collect();
                for &y in &pts {
                    owner[y] = true;
                }
                regions.push(PointSet::new(&s, pts));
            }
            // on each region: L * min(dist to the region's complement, |random 1-Lipschitz|)
            let l = rng.gen_range(0.5..4.0);
            let mut vals = vec![0.0; s.len()];
            for region in &regions {
                let outside = region.complement(&s);
                let anchor = rng.gen_range(0..s.len());
                let offset = rng.gen_range(-0.3..0.3);
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                for x in region.iter() {
                    let g = (s.dist(x, anchor) + offset).abs();
                    vals[x] = sign * l * s.distance_to_set(x, &outside).min(g);
                }
            }
            let u = ScalarField::new("u", vals);
            let rep = glue_bound_check(&s, &u, &regions, l).unwrap();
            assert!(rep.pass, "{rep:?}");
            // exhaustive oracle over all pairs
            for x in 0..s.len() {
                for y in 0..x {
                    let q = (u.values[x] - u.values[y]).abs() / s.dist(x, y);
                    assert!(q <= 2.0 * rep.quasiconvexity * l + 1e-9);
                }
            }
        }
    }
}

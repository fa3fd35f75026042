//! Nested dyadic-type cube decompositions.
//!
//! Level `k` cubes have scale `c^k`. Construction: the centers at each
//! level form a maximal `c^k`-separated net that contains the previous
//! level's centers (greedy, in a seeded shuffle order); each point goes to
//! the nearest center lying in its own parent cube, ties to the center
//! listed first. Restricting candidates to the parent makes the levels
//! nested by construction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{PointSet, Space};

#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub id: usize,
    pub level: i32,
    pub center: usize,
    pub members: PointSet,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeConstants {
    pub a0: f64,
    pub a1: f64,
    #[serde(rename = "C1")]
    pub c1: f64,
    pub eta: f64,
    /// Fit quality; absent when the boundary fit had too little data.
    pub r2: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct CubeTree {
    pub c: f64,
    pub k_min: i32,
    pub k_max: i32,
    pub seed: u64,
    cubes: Vec<Cube>,
    /// cube ids per level, `levels[k - k_min]`
    levels: Vec<Vec<usize>>,
    /// `membership[k - k_min][x]` = id of the level-k cube containing x
    membership: Vec<Vec<usize>>,
    pub constants: CubeConstants,
}

/// Default `t` grid for the boundary-layer fit.
pub const T_GRID: [f64; 6] = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625];

/// Largest `k_min` with `c^k_min >= diam` and largest `k_max` with `c^k_max >= h/2`.
pub fn default_levels(space: &Space, c: f64) -> (i32, i32) {
    let diam = space.diameter();
    if space.len() < 2 || diam == 0.0 {
        return (0, 0);
    }
    let k_min = (diam.ln() / c.ln()).floor() as i32;
    let mut k_max = ((space.resolution() / 2.0).ln() / c.ln()).floor() as i32;
    while c.powi(k_max) < space.resolution() / 2.0 {
        k_max -= 1;
    }
    (k_min, k_max.max(k_min))
}

fn check_levels(space: &Space, c: f64, k_min: i32, k_max: i32) -> Result<()> {
    if !(c > 0.0 && c < 1.0) {
        return Err(Error::InvalidParam(format!("scale base c = {c} outside (0, 1)")));
    }
    if k_min > k_max {
        return Err(Error::InvalidParam(format!("k_min {k_min} > k_max {k_max}")));
    }
    if space.len() > 1 {
        if c.powi(k_max) < space.resolution() / 2.0 {
            return Err(Error::InvalidParam(format!(
                "level {k_max} is below the resolution"
            )));
        }
        if c.powi(k_min) < space.diameter() {
            return Err(Error::InvalidParam(format!(
                "top level {k_min} does not span the diameter"
            )));
        }
    }
    Ok(())
}

/// Builds a seeded cube tree on levels `k_min..=k_max`.
pub fn build_cubes(space: &Space, c: f64, k_min: i32, k_max: i32, seed: u64) -> Result<CubeTree> {
    check_levels(space, c, k_min, k_max)?;
    let mut order: Vec<usize> = (0..space.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut centers: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    for k in k_min..=k_max {
        let sep = c.powi(k);
        for &x in &order {
            if current.iter().all(|&z| space.dist(x, z) >= sep) {
                current.push(x);
            }
        }
        centers.push(current.clone());
    }
    assemble(space, c, k_min, k_max, seed, &centers)
}

/// Builds a tree from caller-chosen centers, one list per level. Every
/// parent cube must contain at least one center of the next level; ties go
/// to the center listed first.
pub fn build_cubes_with_centers(
    space: &Space,
    c: f64,
    k_min: i32,
    centers: &[Vec<usize>],
) -> Result<CubeTree> {
    if centers.is_empty() {
        return Err(Error::InvalidParam("no levels given".into()));
    }
    let k_max = k_min + centers.len() as i32 - 1;
    check_levels(space, c, k_min, k_max)?;
    for list in centers {
        for &z in list {
            space.check_point(z)?;
        }
    }
    assemble(space, c, k_min, k_max, 0, centers)
}

/// Dyadic midpoints of `n_intervals` equal index intervals, level 0 to
/// `levels`, each level listed right to left so ties fall to the right
/// neighbour and cubes come out half-open.
pub fn dyadic_centers(n_intervals: usize, levels: i32) -> Vec<Vec<usize>> {
    (0..=levels)
        .map(|k| {
            let len = n_intervals >> k;
            (0..(1usize << k)).rev().map(|i| i * len + len / 2).collect()
        })
        .collect()
}

/// Dyadic-interval tree on a 1-D grid whose points are listed in coordinate
/// order, with `c = 1/2` and as many levels as the point count allows.
pub fn build_dyadic_tree(space: &Space) -> Result<CubeTree> {
    let n = space.len();
    if n < 3 || space.coords(0).len() != 1 {
        return Err(Error::InvalidParam("dyadic tree needs a 1-D space with at least 3 points".into()));
    }
    if (1..n).any(|x| space.coords(x)[0] <= space.coords(x - 1)[0]) {
        return Err(Error::InvalidParam("dyadic tree needs points in increasing coordinate order".into()));
    }
    let m = n - 1;
    let (_, k_max) = default_levels(space, 0.5);
    // a midpoint needs intervals of at least two index steps
    let deepest = (m.trailing_zeros() as i32 - 1).max(0);
    let levels = deepest.min(k_max.max(0));
    build_cubes_with_centers(space, 0.5, 0, &dyadic_centers(m, levels))
}

fn assemble(
    space: &Space,
    c: f64,
    k_min: i32,
    k_max: i32,
    seed: u64,
    centers: &[Vec<usize>],
) -> Result<CubeTree> {
    let n = space.len();
    let mut cubes: Vec<Cube> = Vec::new();
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut membership: Vec<Vec<usize>> = Vec::new();
    for (li, level_centers) in centers.iter().enumerate() {
        let k = k_min + li as i32;
        let parent_of: Option<&Vec<usize>> = membership.last();
        // which candidate centers live in each parent cube
        let mut assign = vec![usize::MAX; n];
        for x in 0..n {
            let mut best: Option<(f64, usize)> = None;
            for (ci, &z) in level_centers.iter().enumerate() {
                if let Some(par) = parent_of {
                    if par[z] != par[x] {
                        continue;
                    }
                }
                let d = space.dist(x, z);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, ci));
                }
            }
            match best {
                Some((_, ci)) => assign[x] = ci,
                None => {
                    return Err(Error::InvalidParam(format!(
                        "level {k}: parent cube of point {x} holds no center"
                    )))
                }
            }
        }
        let first_id = cubes.len();
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); level_centers.len()];
        for x in 0..n {
            members[assign[x]].push(x);
        }
        let mut id_of_center = vec![usize::MAX; level_centers.len()];
        let mut ids = Vec::new();
        for (ci, list) in members.into_iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let z = level_centers[ci];
            if assign[z] != ci {
                return Err(Error::InvalidParam(format!(
                    "level {k}: center {z} falls outside its own cube"
                )));
            }
            let id = first_id + ids.len();
            id_of_center[ci] = id;
            let parent = parent_of.map(|par| par[z]);
            cubes.push(Cube {
                id,
                level: k,
                center: z,
                members: PointSet::new(space, list),
                parent,
                children: Vec::new(),
            });
            if let Some(p) = parent {
                cubes[p].children.push(id);
            }
            ids.push(id);
        }
        membership.push(assign.iter().map(|&ci| id_of_center[ci]).collect());
        levels.push(ids);
    }
    let mut tree = CubeTree {
        c,
        k_min,
        k_max,
        seed,
        cubes,
        levels,
        membership,
        constants: CubeConstants {
            a0: 0.0,
            a1: 0.0,
            c1: 1.0,
            eta: 1.0,
            r2: None,
        },
    };
    let (a0, a1) = ball_constants(space, &tree);
    tree.constants.a0 = a0;
    tree.constants.a1 = a1;
    match estimate_boundary_exponent(space, &tree) {
        Ok(fit) => {
            tree.constants.c1 = fit.c1;
            tree.constants.eta = fit.eta;
            tree.constants.r2 = Some(fit.r2);
        }
        // no fit: keep eta = 1 and still certify C1 on every sample
        Err(_) => tree.constants.c1 = certified_c1(space, &tree, &T_GRID, 1.0).max(1.0),
    }
    Ok(tree)
}

impl CubeTree {
    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn cube(&self, id: usize) -> &Cube {
        &self.cubes[id]
    }

    pub fn level(&self, k: i32) -> impl Iterator<Item = &Cube> {
        self.levels[(k - self.k_min) as usize]
            .iter()
            .map(move |&id| &self.cubes[id])
    }

    pub fn scale(&self, k: i32) -> f64 {
        self.c.powi(k)
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// The unique level-`k` cube containing `x`.
    pub fn cube_of(&self, x: usize, k: i32) -> &Cube {
        assert!(k >= self.k_min && k <= self.k_max, "level {k} outside tree");
        &self.cubes[self.membership[(k - self.k_min) as usize][x]]
    }

    /// Distances from each member of `cube` to the complement of the cube,
    /// aligned with `cube.members`; `+inf` when the cube is everything.
    pub fn complement_distances(&self, space: &Space, cube: &Cube) -> Vec<f64> {
        complement_distances(space, &cube.members)
    }
}

/// Distance from each member of `set` to `X \ set`.
pub fn complement_distances(space: &Space, set: &PointSet) -> Vec<f64> {
    let inside = set.mask(space.len());
    let outside: Vec<usize> = (0..space.len()).filter(|&y| !inside[y]).collect();
    set.iter()
        .map(|x| {
            outside
                .iter()
                .map(|&y| space.dist(x, y))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn ball_constants(space: &Space, tree: &CubeTree) -> (f64, f64) {
    let mut a0 = f64::INFINITY;
    let mut a1 = 0.0f64;
    for cube in tree.cubes() {
        let scale = tree.scale(cube.level);
        let z = cube.center;
        let reach = cube
            .members
            .iter()
            .map(|y| space.dist(z, y))
            .fold(0.0, f64::max);
        a1 = a1.max(reach / scale);
        let inside = cube.members.mask(space.len());
        let gap = (0..space.len())
            .filter(|&y| !inside[y])
            .map(|y| space.dist(z, y))
            .fold(f64::INFINITY, f64::min);
        if gap.is_finite() {
            a0 = a0.min(gap / scale);
        }
    }
    if !a0.is_finite() {
        // every cube is the whole space
        a0 = a1.max(1.0);
    }
    (a0, a1)
}

/// `{x in Q : dist(x, X \ Q) >= t c^k}`.
pub fn inner_region(space: &Space, tree: &CubeTree, cube: &Cube, t: f64) -> Result<PointSet> {
    if !(t > 0.0) {
        return Err(Error::InvalidParam(format!("shrink fraction t = {t}")));
    }
    let depth = t * tree.scale(cube.level);
    let dists = tree.complement_distances(space, cube);
    Ok(PointSet::new(
        space,
        cube.members
            .iter()
            .zip(&dists)
            .filter(|(_, &d)| d >= depth)
            .map(|(x, _)| x),
    ))
}

/// `mu({x in Q : dist(x, X \ Q) < t c^k})`, the exact complement of the inner region.
pub fn boundary_layer_measure(space: &Space, tree: &CubeTree, cube: &Cube, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidParam(format!("shrink fraction t = {t}")));
    }
    let depth = t * tree.scale(cube.level);
    let dists = tree.complement_distances(space, cube);
    Ok(cube
        .members
        .iter()
        .zip(&dists)
        .filter(|(_, &d)| d < depth)
        .map(|(x, _)| space.weight(x))
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundaryFit {
    pub c1: f64,
    pub eta: f64,
    pub r2: f64,
    /// samples used by the regression
    pub fitted_samples: usize,
    /// all (cube, t) pairs the certificate covers
    pub certified_samples: usize,
}

/// Fits `layer fraction ~ C1 t^eta` over all cubes and [`T_GRID`].
pub fn estimate_boundary_exponent(space: &Space, tree: &CubeTree) -> Result<BoundaryFit> {
    estimate_boundary_exponent_with(space, tree, &T_GRID)
}

/// Log-log least squares for `eta`; `C1` is then raised until
/// `layer <= C1 t^eta mu(Q)` holds at every sampled `(Q, t)`.
pub fn estimate_boundary_exponent_with(
    space: &Space,
    tree: &CubeTree,
    t_grid: &[f64],
) -> Result<BoundaryFit> {
    estimate_boundary_exponent_floor(space, tree, t_grid, FIT_FLOOR)
}

/// Layers thinner than this many resolutions are certified but not fitted.
pub const FIT_FLOOR: f64 = 1.0;

pub fn estimate_boundary_exponent_floor(
    space: &Space,
    tree: &CubeTree,
    t_grid: &[f64],
    floor: f64,
) -> Result<BoundaryFit> {
    let h = space.resolution();
    let mut samples: Vec<(f64, f64)> = Vec::new();
    // per (level, t index): pooled layer measure and pooled cube measure
    let mut pooled: BTreeMap<(i32, usize), (f64, f64)> = BTreeMap::new();
    for cube in tree.cubes() {
        if cube.members.len() == space.len() {
            continue;
        }
        let scale = tree.scale(cube.level);
        let dists = tree.complement_distances(space, cube);
        let mu = cube.members.measure();
        for (ti, &t) in t_grid.iter().enumerate() {
            let depth = t * scale;
            let layer: f64 = cube
                .members
                .iter()
                .zip(&dists)
                .filter(|(_, &d)| d < depth)
                .map(|(x, _)| space.weight(x))
                .sum();
            // layers thinner than the resolution are empty by construction
            if depth >= h || layer > 0.0 {
                samples.push((t, layer / mu));
            }
            if depth >= floor * h {
                let e = pooled.entry((cube.level, ti)).or_insert((0.0, 0.0));
                e.0 += layer;
                e.1 += mu;
            }
        }
    }
    let usable: Vec<(f64, f64)> = pooled
        .iter()
        .map(|(&(_, ti), &(layer, mu))| (t_grid[ti], layer / mu))
        .filter(|&(_, f)| f > 0.0 && f < 1.0)
        .map(|(t, f)| (t.ln(), f.ln()))
        .collect();
    if usable.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} usable boundary samples",
            usable.len()
        )));
    }
    let m = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / m;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = usable.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("a single t value".into()));
    }
    let slope = sxy / sxx;
    if !(slope > 0.0) {
        return Err(Error::InsufficientData(format!("nonpositive slope {slope}")));
    }
    let intercept = my - slope * mx;
    let ss_res: f64 = usable
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    let c1 = max_ratio(&samples, slope).max(intercept.exp());
    Ok(BoundaryFit {
        c1,
        eta: slope,
        r2,
        fitted_samples: usable.len(),
        certified_samples: samples.len(),
    })
}

/// Smallest `C1` with `layer <= C1 t^eta mu(Q)` on every sampled `(Q, t)`.
pub fn certified_c1(space: &Space, tree: &CubeTree, t_grid: &[f64], eta: f64) -> f64 {
    let h = space.resolution();
    let mut samples = Vec::new();
    for cube in tree.cubes() {
        if cube.members.len() == space.len() {
            continue;
        }
        let dists = tree.complement_distances(space, cube);
        let mu = cube.members.measure();
        for &t in t_grid {
            let depth = t * tree.scale(cube.level);
            let layer: f64 = cube
                .members
                .iter()
                .zip(&dists)
                .filter(|(_, &d)| d < depth)
                .map(|(x, _)| space.weight(x))
                .sum();
            if depth >= h || layer > 0.0 {
                samples.push((t, layer / mu));
            }
        }
    }
    max_ratio(&samples, eta)
}

fn max_ratio(samples: &[(f64, f64)], eta: f64) -> f64 {
    samples.iter().map(|&(t, f)| f / t.powf(eta)).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Documents

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TreeDocument {
    pub c: f64,
    #[serde(default)]
    pub seed: u64,
    pub levels: Vec<LevelDocument>,
    pub constants: CubeConstants,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LevelDocument {
    pub k: i32,
    pub cubes: Vec<CubeDocument>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CubeDocument {
    pub id: usize,
    pub center: usize,
    pub members: Vec<usize>,
    pub parent: Option<usize>,
}

impl CubeTree {
    pub fn to_document(&self) -> TreeDocument {
        TreeDocument {
            c: self.c,
            seed: self.seed,
            levels: (self.k_min..=self.k_max)
                .map(|k| LevelDocument {
                    k,
                    cubes: self
                        .level(k)
                        .map(|q| CubeDocument {
                            id: q.id,
                            center: q.center,
                            members: q.members.indices().to_vec(),
                            parent: q.parent,
                        })
                        .collect(),
                })
                .collect(),
            constants: self.constants.clone(),
        }
    }

    /// Rebuilds a tree from its document, re-checking partition and nesting.
    pub fn from_document(space: &Space, doc: &TreeDocument) -> Result<CubeTree> {
        let n = space.len();
        if doc.levels.is_empty() {
            return Err(Error::Malformed("tree without levels".into()));
        }
        let k_min = doc.levels[0].k;
        let mut cubes: Vec<Cube> = Vec::new();
        let mut levels = Vec::new();
        let mut membership: Vec<Vec<usize>> = Vec::new();
        for (li, level) in doc.levels.iter().enumerate() {
            if level.k != k_min + li as i32 {
                return Err(Error::Malformed("levels must be consecutive".into()));
            }
            let mut owner = vec![usize::MAX; n];
            let mut ids = Vec::new();
            for cd in &level.cubes {
                if cd.id != cubes.len() {
                    return Err(Error::Malformed("cube ids must be sequential".into()));
                }
                for &x in &cd.members {
                    if x >= n || owner[x] != usize::MAX {
                        return Err(Error::Malformed(format!("level {}: point {x} repeated or invalid", level.k)));
                    }
                    owner[x] = cd.id;
                }
                if !cd.members.contains(&cd.center) {
                    return Err(Error::Malformed(format!("cube {} misses its center", cd.id)));
                }
                if let Some(p) = cd.parent {
                    let prev = membership.last().ok_or_else(|| Error::Malformed("parent on top level".into()))?;
                    if cd.members.iter().any(|&x| prev[x] != p) {
                        return Err(Error::Malformed(format!("cube {} not nested in {p}", cd.id)));
                    }
                    cubes[p].children.push(cd.id);
                } else if li > 0 {
                    return Err(Error::Malformed(format!("cube {} lacks a parent", cd.id)));
                }
                cubes.push(Cube {
                    id: cd.id,
                    level: level.k,
                    center: cd.center,
                    members: PointSet::new(space, cd.members.iter().copied()),
                    parent: cd.parent,
                    children: Vec::new(),
                });
                ids.push(cd.id);
            }
            if let Some(x) = owner.iter().position(|&o| o == usize::MAX) {
                return Err(Error::Malformed(format!("level {}: point {x} uncovered", level.k)));
            }
            membership.push(owner);
            levels.push(ids);
        }
        Ok(CubeTree {
            c: doc.c,
            k_min,
            k_max: k_min + doc.levels.len() as i32 - 1,
            seed: doc.seed,
            cubes,
            levels,
            membership,
            constants: doc.constants.clone(),
        })
    }
}

//! Finite metric measure spaces.
//!
//! A [`Space`] is a finite point set with a metric, a strictly positive
//! weight per point, and a neighbor graph used for path-length
//! computations. Generated spaces carry an exact metric oracle; loaded
//! spaces may instead carry a full distance table.

use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};
use std::cmp::Reverse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Largest point count for which a full distance table is accepted.
pub const MAX_TABLE_POINTS: usize = 5000;
/// Triangle inequality is audited exhaustively up to this size.
pub const EXHAUSTIVE_AUDIT_POINTS: usize = 2000;

const METRIC_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Metric {
    /// Row-major `n x n` distance table.
    Table(Vec<f64>),
    /// Euclidean distance between the stored coordinates.
    Euclidean,
    /// Scaled Euclidean distance between integer lattice coordinates. Equal
    /// lattice offsets give bit-identical distances, so ball boundaries on
    /// grids do not depend on rounding.
    Grid { scale: f64, lattice: Vec<Vec<i64>> },
    /// Word metric of the discrete Heisenberg group, tabulated.
    Word(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poincare_q: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct Space {
    coords: Vec<Vec<f64>>,
    metric: Metric,
    weights: Vec<f64>,
    resolution: f64,
    neighbors: Vec<Vec<usize>>,
    pub metadata: Metadata,
}

/// Sorted set of point indices with its cached measure.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    indices: Vec<usize>,
    measure: f64,
}

impl PointSet {
    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            measure: 0.0,
        }
    }

    pub fn new(space: &Space, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        debug_assert!(indices.iter().all(|&i| i < space.len()));
        let measure = space.measure_of(&indices);
        Self { indices, measure }
    }

    pub fn all(space: &Space) -> Self {
        Self::new(space, 0..space.len())
    }

    pub fn from_mask(space: &Space, mask: &[bool]) -> Self {
        Self::new(
            space,
            mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i),
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.indices.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn measure(&self) -> f64 {
        self.measure
    }

    pub fn contains(&self, x: usize) -> bool {
        self.indices.binary_search(&x).is_ok()
    }

    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn union(&self, space: &Space, other: &PointSet) -> PointSet {
        PointSet::new(space, self.iter().chain(other.iter()))
    }

    pub fn intersection(&self, space: &Space, other: &PointSet) -> PointSet {
        PointSet::new(space, self.iter().filter(|&i| other.contains(i)))
    }

    pub fn difference(&self, space: &Space, other: &PointSet) -> PointSet {
        PointSet::new(space, self.iter().filter(|&i| !other.contains(i)))
    }

    pub fn complement(&self, space: &Space) -> PointSet {
        let mask = self.mask(space.len());
        PointSet::new(space, (0..space.len()).filter(|&i| !mask[i]))
    }

    pub fn is_subset(&self, other: &PointSet) -> bool {
        self.iter().all(|i| other.contains(i))
    }
}

impl Space {
    /// Builds a space from raw parts and validates the metric axioms.
    pub fn from_parts(
        coords: Vec<Vec<f64>>,
        metric: Metric,
        weights: Vec<f64>,
        neighbors: Option<Vec<Vec<usize>>>,
        metadata: Metadata,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::Malformed("space needs at least one point".into()));
        }
        if coords.len() != n {
            return Err(Error::Malformed(format!(
                "{} points but {} weights",
                coords.len(),
                n
            )));
        }
        if let Metric::Table(t) | Metric::Word(t) = &metric {
            if n > MAX_TABLE_POINTS {
                return Err(Error::InvalidParam(format!(
                    "distance tables are limited to {MAX_TABLE_POINTS} points"
                )));
            }
            if t.len() != n * n {
                return Err(Error::Malformed("distance table is not n x n".into()));
            }
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::NonpositiveWeight(i));
            }
        }
        let mut space = Space {
            coords,
            metric,
            weights,
            resolution: f64::INFINITY,
            neighbors: Vec::new(),
            metadata,
        };
        space.audit_pairs()?;
        space.audit_triangles()?;
        space.neighbors = match neighbors {
            Some(nb) => {
                for (i, list) in nb.iter().enumerate() {
                    if let Some(&bad) = list.iter().find(|&&j| j >= n || j == i) {
                        return Err(Error::Malformed(format!("bad edge ({i}, {bad})")));
                    }
                }
                symmetrize(nb)
            }
            None => space.default_neighbors(),
        };
        Ok(space)
    }

    fn audit_pairs(&mut self) -> Result<()> {
        let n = self.len();
        let mut h = f64::INFINITY;
        for i in 0..n {
            if self.dist(i, i) != 0.0 {
                return Err(Error::NegativeDistance(i, i));
            }
            for j in (i + 1)..n {
                let d = self.dist(i, j);
                if !(d >= 0.0 && d.is_finite()) {
                    return Err(Error::NegativeDistance(i, j));
                }
                if d != self.dist(j, i) {
                    return Err(Error::Asymmetric(i, j));
                }
                if d == 0.0 {
                    return Err(Error::ZeroDistance(i, j));
                }
                h = h.min(d);
            }
        }
        self.resolution = h;
        Ok(())
    }

    fn audit_triangles(&self) -> Result<()> {
        let n = self.len();
        let check = |a: usize, b: usize, c: usize| -> Result<()> {
            let (ab, bc, ac) = (self.dist(a, b), self.dist(b, c), self.dist(a, c));
            if ac > (ab + bc) * (1.0 + METRIC_SLACK) + METRIC_SLACK {
                return Err(Error::Triangle(a, b, c));
            }
            Ok(())
        };
        if matches!(self.metric, Metric::Euclidean | Metric::Grid { .. }) {
            // exact by construction; spot-check a few triples for NaN-free input
            if n > 2 {
                check(0, n / 2, n - 1)?;
            }
            return Ok(());
        }
        if n <= EXHAUSTIVE_AUDIT_POINTS {
            for a in 0..n {
                for c in (a + 1)..n {
                    for b in 0..n {
                        if b != a && b != c {
                            check(a, b, c)?;
                        }
                    }
                }
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(0x7a1a);
            for _ in 0..1_000_000 {
                check(rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n))?;
            }
        }
        Ok(())
    }

    /// Pairs within 1.5 h are adjacent.
    fn default_neighbors(&self) -> Vec<Vec<usize>> {
        let n = self.len();
        let cut = 1.5 * self.resolution;
        (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.dist(i, j) <= cut).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    #[inline]
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        match &self.metric {
            Metric::Table(t) | Metric::Word(t) => t[i * self.len() + j],
            Metric::Grid { scale, lattice } => {
                let s: i64 = lattice[i]
                    .iter()
                    .zip(&lattice[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                scale * (s as f64).sqrt()
            }
            Metric::Euclidean => {
                let (a, b) = (&self.coords[i], &self.coords[j]);
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    pub fn metric(&self) -> &Metric {
        &self.metric
    }

    pub fn coords(&self, i: usize) -> &[f64] {
        &self.coords[i]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn total_measure(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Measure of a list of indices, summed in ascending index order.
    pub fn measure_of(&self, sorted: &[usize]) -> f64 {
        sorted.iter().map(|&i| self.weights[i]).sum()
    }

    pub fn check_point(&self, x: usize) -> Result<()> {
        if x < self.len() {
            Ok(())
        } else {
            Err(Error::InvalidPoint(x))
        }
    }

    pub fn diameter(&self) -> f64 {
        let n = self.len();
        let mut d = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                d = d.max(self.dist(i, j));
            }
        }
        d
    }

    /// Open ball `{y : d(x, y) < r}`.
    pub fn ball(&self, x: usize, r: f64) -> Result<PointSet> {
        self.check_point(x)?;
        if r.is_nan() || r < 0.0 {
            return Err(Error::InvalidParam(format!("radius {r}")));
        }
        Ok(PointSet::new(
            self,
            (0..self.len()).filter(|&y| self.dist(x, y) < r),
        ))
    }

    /// For every `x`, the points `y != x` with `d(x, y) <= r` and their distances.
    pub fn closed_windows(&self, r: f64) -> Vec<Vec<(usize, f64)>> {
        let n = self.len();
        let mut out: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for x in 0..n {
            for y in (x + 1)..n {
                let d = self.dist(x, y);
                if d <= r {
                    out[x].push((y, d));
                    out[y].push((x, d));
                }
            }
        }
        for w in &mut out {
            w.sort_by_key(|p| p.0);
        }
        out
    }

    /// `min_{s in S} d(x, s)`; `+inf` for empty `S`.
    pub fn distance_to_set(&self, x: usize, set: &PointSet) -> f64 {
        set.iter()
            .map(|s| self.dist(x, s))
            .fold(f64::INFINITY, f64::min)
    }

    /// Same as [`Space::distance_to_set`] with the set given as a mask.
    pub fn distance_to_mask(&self, x: usize, mask: &[bool]) -> f64 {
        let mut best = f64::INFINITY;
        for (s, &m) in mask.iter().enumerate() {
            if m {
                best = best.min(self.dist(x, s));
            }
        }
        best
    }

    /// Pairwise distance table as CSV (`i,j,dist`, upper triangle).
    pub fn distances_csv(&self) -> String {
        let mut out = String::from("i,j,dist\n");
        for i in 0..self.len() {
            for j in (i + 1)..self.len() {
                out.push_str(&format!("{i},{j},{}\n", self.dist(i, j)));
            }
        }
        out
    }
}

fn symmetrize(mut nb: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let n = nb.len();
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| nb[i].iter().map(move |&j| (i, j)).collect::<Vec<_>>())
        .collect();
    for (i, j) in pairs {
        nb[j].push(i);
    }
    for list in &mut nb {
        list.sort_unstable();
        list.dedup();
    }
    nb
}

/// Result of [`estimate_doubling`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoublingEstimate {
    pub constant: f64,
    pub center: usize,
    pub radius: f64,
    /// Set when the measured constant exceeds 16.
    pub large: bool,
}

/// Max over points `x` and realized radii `r` of `mu(B(x,2r)) / mu(B(x,r))`.
pub fn estimate_doubling(space: &Space) -> DoublingEstimate {
    let n = space.len();
    let mut best = DoublingEstimate {
        constant: 1.0,
        center: 0,
        radius: 0.0,
        large: false,
    };
    let mut row: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut prefix: Vec<f64> = Vec::with_capacity(n + 1);
    for x in 0..n {
        row.clear();
        row.extend((0..n).map(|y| (space.dist(x, y), space.weight(y))));
        row.sort_by(|a, b| a.0.total_cmp(&b.0));
        prefix.clear();
        prefix.push(0.0);
        for &(_, w) in &row {
            let last = *prefix.last().unwrap();
            prefix.push(last + w);
        }
        // measure of the open ball of radius r = prefix[#{d < r}]
        let open = |r: f64| prefix[row.partition_point(|&(d, _)| d < r)];
        let mut k = 1;
        while k < n {
            let r = row[k].0;
            let ratio = open(2.0 * r) / open(r);
            if ratio > best.constant {
                best.constant = ratio;
                best.center = x;
                best.radius = r;
            }
            while k < n && row[k].0 == r {
                k += 1;
            }
        }
    }
    best.large = best.constant > 16.0;
    best
}

/// Max over pairs of neighbor-graph path length divided by distance.
pub fn estimate_quasiconvexity(space: &Space) -> Result<f64> {
    let n = space.len();
    let components = count_components(space);
    if components > 1 {
        return Err(Error::Disconnected(components));
    }
    let mut worst = 1.0f64;
    let mut dist = vec![f64::INFINITY; n];
    for s in 0..n {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        dist[s] = 0.0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((OrdF64(0.0), s)));
        while let Some(Reverse((OrdF64(d), u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &v in space.neighbors(u) {
                let nd = d + space.dist(u, v);
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((OrdF64(nd), v)));
                }
            }
        }
        for (t, &d) in dist.iter().enumerate().skip(s + 1) {
            worst = worst.max(d / space.dist(s, t));
        }
    }
    Ok(worst)
}

fn count_components(space: &Space) -> usize {
    let n = space.len();
    let mut seen = vec![false; n];
    let mut count = 0;
    for s in 0..n {
        if seen[s] {
            continue;
        }
        count += 1;
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in space.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

// ---------------------------------------------------------------------------
// Generators

/// Generator names accepted by [`generate_space`].
pub const GENERATORS: [&str; 4] = ["grid1d", "grid2d", "weighted_grid1d", "heisenberg_lattice"];

fn param(params: &BTreeMap<String, f64>, key: &str) -> Result<f64> {
    params
        .get(key)
        .copied()
        .ok_or_else(|| Error::InvalidParam(format!("missing parameter `{key}`")))
}

fn count_param(params: &BTreeMap<String, f64>, key: &str, min: usize) -> Result<usize> {
    let v = param(params, key)?;
    if v.fract() != 0.0 || v < min as f64 {
        return Err(Error::InvalidParam(format!("`{key}` must be an integer >= {min}")));
    }
    Ok(v as usize)
}

/// Deterministic space generators: `grid1d`, `grid2d`, `weighted_grid1d`,
/// `heisenberg_lattice`.
pub fn generate_space(kind: &str, params: &BTreeMap<String, f64>) -> Result<Space> {
    let mut metadata = Metadata {
        params: params.clone(),
        notes: vec![format!("generated:{kind}")],
        ..Default::default()
    };
    match kind {
        "grid1d" => {
            let n = count_param(params, "n", 2)?;
            let h = 1.0 / (n - 1) as f64;
            metadata.poincare_q = Some(1.0);
            let (coords, metric) = line_lattice(n, h);
            Space::from_parts(coords, metric, vec![h; n], Some(line_graph(n)), metadata)
        }
        "grid2d" => {
            let m = count_param(params, "n", 2)?;
            let h = 1.0 / (m - 1) as f64;
            let mut coords = Vec::with_capacity(m * m);
            let mut lattice = Vec::with_capacity(m * m);
            let mut nb = vec![Vec::new(); m * m];
            for r in 0..m {
                for c in 0..m {
                    let i = r * m + c;
                    coords.push(vec![c as f64 * h, r as f64 * h]);
                    lattice.push(vec![c as i64, r as i64]);
                    if c + 1 < m {
                        nb[i].push(i + 1);
                    }
                    if r + 1 < m {
                        nb[i].push(i + m);
                    }
                }
            }
            metadata.poincare_q = Some(1.0);
            let metric = Metric::Grid { scale: h, lattice };
            Space::from_parts(coords, metric, vec![h * h; m * m], Some(nb), metadata)
        }
        "weighted_grid1d" => {
            let n = count_param(params, "n", 2)?;
            let a = param(params, "a")?;
            if !(a > -1.0) {
                return Err(Error::InvalidParam("exponent a must exceed -1".into()));
            }
            let h = 1.0 / (n - 1) as f64;
            // weight = integral of s^a over the grid cell clipped to [0, 1]
            let antideriv = |s: f64| s.powf(a + 1.0) / (a + 1.0);
            let weights = (0..n)
                .map(|i| {
                    let x = i as f64 * h;
                    let lo = (x - h / 2.0).max(0.0);
                    let hi = (x + h / 2.0).min(1.0);
                    antideriv(hi) - antideriv(lo)
                })
                .collect();
            let (coords, metric) = line_lattice(n, h);
            Space::from_parts(coords, metric, weights, Some(line_graph(n)), metadata)
        }
        "heisenberg_lattice" => {
            let radius = count_param(params, "R", 0)?;
            heisenberg_ball(radius as u32, metadata)
        }
        other => Err(Error::InvalidParam(format!("unknown generator `{other}`"))),
    }
}

fn line_lattice(n: usize, h: f64) -> (Vec<Vec<f64>>, Metric) {
    let coords = (0..n).map(|i| vec![i as f64 * h]).collect();
    let lattice = (0..n).map(|i| vec![i as i64]).collect();
    (coords, Metric::Grid { scale: h, lattice })
}

fn line_graph(n: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|i| if i + 1 < n { vec![i + 1] } else { Vec::new() })
        .collect()
}

/// Element `(a, b, c)` of the integer Heisenberg group with product
/// `(a,b,c)(a',b',c') = (a+a', b+b', c+c'+ab')`.
pub type HeisenbergElement = [i64; 3];

pub fn heisenberg_mul(g: HeisenbergElement, h: HeisenbergElement) -> HeisenbergElement {
    [g[0] + h[0], g[1] + h[1], g[2] + h[2] + g[0] * h[1]]
}

pub fn heisenberg_inv(g: HeisenbergElement) -> HeisenbergElement {
    [-g[0], -g[1], -g[2] + g[0] * g[1]]
}

const HEISENBERG_GENERATORS: [HeisenbergElement; 4] = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]];

/// Word lengths of every element of the ball of radius `r` about the identity.
pub fn heisenberg_word_lengths(r: u32) -> HashMap<HeisenbergElement, u32> {
    let mut lengths = HashMap::new();
    lengths.insert([0, 0, 0], 0u32);
    let mut frontier = vec![[0i64, 0, 0]];
    for step in 1..=r {
        let mut next = Vec::new();
        for g in frontier {
            for s in HEISENBERG_GENERATORS {
                let gs = heisenberg_mul(g, s);
                if let std::collections::hash_map::Entry::Vacant(e) = lengths.entry(gs) {
                    e.insert(step);
                    next.push(gs);
                }
            }
        }
        frontier = next;
    }
    lengths
}

fn heisenberg_ball(radius: u32, metadata: Metadata) -> Result<Space> {
    let lengths = heisenberg_word_lengths(2 * radius);
    let mut elements: Vec<HeisenbergElement> = lengths
        .iter()
        .filter(|(_, &l)| l <= radius)
        .map(|(&g, _)| g)
        .collect();
    elements.sort_unstable();
    word_metric_space(&elements, &lengths, metadata)
}

fn word_metric_space(
    elements: &[HeisenbergElement],
    lengths: &HashMap<HeisenbergElement, u32>,
    metadata: Metadata,
) -> Result<Space> {
    let n = elements.len();
    let mut table = vec![0.0; n * n];
    for (i, &g) in elements.iter().enumerate() {
        let gi = heisenberg_inv(g);
        for (j, &h) in elements.iter().enumerate() {
            let w = heisenberg_mul(gi, h);
            let l = lengths.get(&w).ok_or_else(|| {
                Error::InvalidParam("word length table too small for these points".into())
            })?;
            table[i * n + j] = *l as f64;
        }
    }
    let nb = (0..n)
        .map(|i| (0..n).filter(|&j| table[i * n + j] == 1.0).collect())
        .collect();
    let coords = elements
        .iter()
        .map(|g| g.iter().map(|&c| c as f64).collect())
        .collect();
    Space::from_parts(coords, Metric::Word(table), vec![1.0; n], Some(nb), metadata)
}

// ---------------------------------------------------------------------------
// Documents

/// JSON space document.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpaceDocument {
    pub points: Vec<Value>,
    pub dist: DistSpec,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistSpec {
    Table(Vec<Vec<f64>>),
    Metric(MetricSpec),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// Parses and validates a space document.
pub fn load_space(doc: &str) -> Result<Space> {
    let doc: SpaceDocument =
        serde_json::from_str(doc).map_err(|e| Error::Malformed(e.to_string()))?;
    space_from_document(doc)
}

pub fn space_from_document(doc: SpaceDocument) -> Result<Space> {
    let n = doc.points.len();
    if n == 0 {
        return Err(Error::Malformed("no points".into()));
    }
    if doc.weights.len() != n {
        return Err(Error::Malformed(format!(
            "{n} points but {} weights",
            doc.weights.len()
        )));
    }
    let coords: Vec<Vec<f64>> = doc
        .points
        .iter()
        .map(|p| match p {
            Value::Number(x) => x
                .as_f64()
                .map(|v| vec![v])
                .ok_or_else(|| Error::Malformed("bad point".into())),
            Value::Array(xs) => xs
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| Error::Malformed("bad coordinate".into())))
                .collect(),
            _ => Err(Error::Malformed("points must be numbers or arrays".into())),
        })
        .collect::<Result<_>>()?;
    let neighbors = doc.edges.map(|edges| {
        let mut nb = vec![Vec::new(); n];
        for [a, b] in edges {
            if a < n {
                nb[a].push(b);
            }
        }
        nb
    });
    match doc.dist {
        DistSpec::Table(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(Error::Malformed("distance table is not n x n".into()));
            }
            let table = rows.into_iter().flatten().collect();
            Space::from_parts(coords, Metric::Table(table), doc.weights, neighbors, doc.metadata)
        }
        DistSpec::Metric(spec) => match spec.kind.as_str() {
            "grid" => {
                let scale = spec
                    .scale
                    .filter(|s| *s > 0.0)
                    .ok_or_else(|| Error::Malformed("grid metric needs a positive scale".into()))?;
                let lattice = coords
                    .iter()
                    .map(|c| c.iter().map(|v| (v / scale).round() as i64).collect())
                    .collect();
                let metric = Metric::Grid { scale, lattice };
                Space::from_parts(coords, metric, doc.weights, neighbors, doc.metadata)
            }
            "euclidean" => {
                let dim = coords[0].len();
                if coords.iter().any(|c| c.len() != dim) {
                    return Err(Error::Malformed("mixed coordinate dimensions".into()));
                }
                Space::from_parts(coords, Metric::Euclidean, doc.weights, neighbors, doc.metadata)
            }
            "word" => {
                let elements: Vec<HeisenbergElement> = coords
                    .iter()
                    .map(|c| {
                        if c.len() != 3 || c.iter().any(|v| v.fract() != 0.0) {
                            Err(Error::Malformed("word metric needs integer triples".into()))
                        } else {
                            Ok([c[0] as i64, c[1] as i64, c[2] as i64])
                        }
                    })
                    .collect::<Result<_>>()?;
                let reach = elements
                    .iter()
                    .map(|g| (g[0].abs() + g[1].abs() + 2 * (g[2].abs() as f64).sqrt().ceil() as i64 + 2) as u32)
                    .max()
                    .unwrap_or(0);
                let lengths = heisenberg_word_lengths(4 * reach);
                let mut space = word_metric_space(&elements, &lengths, doc.metadata)?;
                space.weights = doc.weights;
                if let Some(nb) = neighbors {
                    space.neighbors = symmetrize(nb);
                }
                Ok(space)
            }
            other => Err(Error::Malformed(format!("unknown metric kind `{other}`"))),
        },
    }
}

impl Space {
    /// Serializes to the JSON document format accepted by [`load_space`].
    pub fn to_document(&self) -> SpaceDocument {
        let points = self
            .coords
            .iter()
            .map(|c| {
                if c.len() == 1 {
                    serde_json::json!(c[0])
                } else {
                    serde_json::json!(c)
                }
            })
            .collect();
        let n = self.len();
        let dist = match &self.metric {
            Metric::Euclidean => DistSpec::Metric(MetricSpec {
                kind: "euclidean".into(),
                scale: None,
            }),
            Metric::Grid { scale, .. } => DistSpec::Metric(MetricSpec {
                kind: "grid".into(),
                scale: Some(*scale),
            }),
            Metric::Word(_) => DistSpec::Metric(MetricSpec {
                kind: "word".into(),
                scale: None,
            }),
            Metric::Table(t) => DistSpec::Table(t.chunks(n).map(|r| r.to_vec()).collect()),
        };
        let edges = (0..n)
            .flat_map(|i| {
                self.neighbors[i]
                    .iter()
                    .filter(move |&&j| j > i)
                    .map(move |&j| [i, j])
            })
            .collect();
        SpaceDocument {
            points,
            dist,
            weights: self.weights.clone(),
            metadata: self.metadata.clone(),
            edges: Some(edges),
        }
    }
}

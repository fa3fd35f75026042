//! Command-line driver.
//!
//! Subcommands: `gen-space`, `build-cubes`, `load-atlas`, `prescribe`,
//! `lusin`, `verify`, `sweep`. Exit codes: 0 success, 1 error, 2 failed
//! checks, 64 usage. Every run writes a manifest
//! `{"cmd","args","hashes","seed","version"}` with the effective arguments
//! and SHA-256 hashes of every input read and output written.
//!
//! `--config FILE` supplies flag values as a JSON object keyed by flag
//! name; flags given on the command line win.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::charts::{atlas_from_document, normalize_atlas, with_default_constants, AtlasDocument, ChartAtlas};
use crate::cubes::{build_cubes, build_dyadic_tree, default_levels, CubeTree, TreeDocument};
use crate::error::Error;
use crate::lipfield::ScalarField;
use crate::lusin::{prescribe_compact, prescribe_global, LusinResult, Stage};
use crate::prescribe::{load_target, prescribe, PrescriptionResult, RunConstants, TargetField};
use crate::space::{generate_space, load_space, PointSet, Space};
use crate::verify::{emit_report, sweep_epsilon, verify_alberti, verify_lusin, Report, Tolerance};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Parser, Debug)]
#[command(
    name = "cheeger-lusin",
    version,
    about = "Derivative prescription on finite metric measure spaces",
    args_override_self = true
)]
struct Cli {
    /// JSON object of flag values; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// worker threads, 0 for all cores; results do not depend on it
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a space document
    GenSpace(GenSpaceArgs),
    /// Build a cube decomposition of a space
    BuildCubes(BuildCubesArgs),
    /// Validate (and optionally normalize) a chart atlas
    LoadAtlas(LoadAtlasArgs),
    /// Run the prescription and write a result bundle
    Prescribe(PrescribeArgs),
    /// Run the decaying prescription and write a result bundle
    Lusin(LusinArgs),
    /// Check a result bundle; exit 2 if a check fails
    Verify(VerifyArgs),
    /// Sweep epsilon and fit Lp scaling exponents; exit 2 if a check fails
    Sweep(SweepArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSpace(_) => "gen-space",
            Command::BuildCubes(_) => "build-cubes",
            Command::LoadAtlas(_) => "load-atlas",
            Command::Prescribe(_) => "prescribe",
            Command::Lusin(_) => "lusin",
            Command::Verify(_) => "verify",
            Command::Sweep(_) => "sweep",
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenSpaceArgs {
    #[arg(long, value_parser = ["grid1d", "grid2d", "weighted_grid1d", "heisenberg_lattice"])]
    kind: String,
    /// points per side (grids)
    #[arg(long)]
    n: Option<usize>,
    /// weight exponent (weighted_grid1d)
    #[arg(long)]
    a: Option<f64>,
    /// word-length radius (heisenberg_lattice)
    #[arg(long)]
    radius: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct BuildCubesArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    c: f64,
    #[arg(long, allow_hyphen_values = true)]
    k_min: Option<i32>,
    #[arg(long, allow_hyphen_values = true)]
    k_max: Option<i32>,
    /// dyadic midpoint centers (1-D spaces with 2^m + 1 points)
    #[arg(long)]
    dyadic: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct LoadAtlasArgs {
    #[arg(long)]
    space: PathBuf,
    /// chart document; without it a built-in atlas is used
    #[arg(long)]
    atlas: Option<PathBuf>,
    #[arg(long, default_value = "coordinates", value_parser = ["coordinates", "split-line"])]
    kind: String,
    /// split point of `split-line`
    #[arg(long, default_value_t = 0.5)]
    cut: f64,
    /// rescale every chart to LIP(phi) = 1
    #[arg(long)]
    normalize: bool,
    /// measure missing c_j constants with this window (in units of h)
    #[arg(long)]
    fill_constants: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InputArgs {
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    cubes: PathBuf,
    #[arg(long)]
    atlas: PathBuf,
    /// target document; overrides --target-kind
    #[arg(long)]
    target: Option<PathBuf>,
    /// built-in target in the first coordinate x
    #[arg(long, default_value = "sign", value_parser = ["sign", "xsign", "constant", "sin", "zero"])]
    target_kind: String,
    /// amplitude of the built-in target
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    /// Ω as an open interval "a,b" of the first coordinate (default: all points)
    #[arg(long)]
    omega: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct PrescribeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: InputArgs,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value_t = 6)]
    n_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct LusinArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: InputArgs,
    #[arg(long)]
    eps: f64,
    #[arg(long, default_value = "global", value_parser = ["global", "compact"])]
    mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct VerifyArgs {
    /// run directory written by `prescribe` or `lusin`
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "json", value_parser = ["json", "csv", "svg"])]
    format: String,
    /// derivative slack in units of h
    #[arg(long, default_value_t = 2.0)]
    h_slack: f64,
    /// differential window in units of h
    #[arg(long, default_value_t = 2.0)]
    window: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    inputs: InputArgs,
    #[arg(long, default_value = "0.5,0.25,0.125,0.0625")]
    eps_list: String,
    #[arg(long, default_value = "1,2,inf")]
    p_list: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Run(Error::Json(e))
    }
}

type Outcome = std::result::Result<i32, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Serialize)]
struct Manifest {
    cmd: String,
    args: Value,
    hashes: BTreeMap<String, String>,
    seed: u64,
    version: String,
}

/// Tracks hashes of files read and written by one run.
struct Ctx {
    cmd: &'static str,
    args: Value,
    seed: u64,
    hashes: BTreeMap<String, String>,
    manifest: PathBuf,
}

fn sha256(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Ctx {
    fn new(cmd: &'static str, args: &impl Serialize, seed: u64, manifest: PathBuf) -> Self {
        Self {
            cmd,
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            seed,
            hashes: BTreeMap::new(),
            manifest,
        }
    }

    fn read(&mut self, key: &str, path: &Path) -> std::result::Result<Vec<u8>, Failure> {
        let bytes = fs::read(path).map_err(|e| {
            Failure::Run(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
        })?;
        self.hashes.insert(format!("in:{key}"), sha256(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> std::result::Result<(), Failure> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, bytes)?;
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.hashes.insert(format!("out:{name}"), sha256(bytes));
        Ok(())
    }

    fn finish(&self) -> std::io::Result<()> {
        let m = Manifest {
            cmd: self.cmd.into(),
            args: self.args.clone(),
            hashes: self.hashes.clone(),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION").into(),
        };
        if let Some(dir) = self.manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)? + "\n";
        fs::write(&self.manifest, text)
    }
}

fn file_manifest(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn dir_manifest(dir: &Path, cmd: &str) -> PathBuf {
    dir.join(format!("manifest.{cmd}.json"))
}

fn to_json(v: &impl Serialize) -> std::result::Result<Vec<u8>, Failure> {
    Ok((serde_json::to_string_pretty(v)? + "\n").into_bytes())
}

fn text(bytes: &[u8]) -> std::result::Result<&str, Failure> {
    std::str::from_utf8(bytes).map_err(|e| Failure::Run(Error::Malformed(format!("not UTF-8: {e}"))))
}

// ---------------------------------------------------------------------------
// Parsing

fn clap_failure(e: clap::Error) -> i32 {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            EXIT_OK
        }
        _ => {
            let _ = e.print();
            EXIT_USAGE
        }
    }
}

/// Flag tokens for the entries of a config object.
fn config_tokens(obj: &serde_json::Map<String, Value>) -> std::result::Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (k, v) in obj {
        let flag = format!("--{}", k.replace('_', "-"));
        if flag == "--config" {
            continue;
        }
        let items: Vec<&Value> = match v {
            Value::Array(a) => a.iter().collect(),
            other => vec![other],
        };
        for item in items {
            match item {
                Value::Bool(true) => out.push(flag.clone()),
                Value::Bool(false) | Value::Null => {}
                Value::Number(n) => out.extend([flag.clone(), n.to_string()]),
                Value::String(s) => out.extend([flag.clone(), s.clone()]),
                _ => return Err(format!("config key `{k}` has a nested value")),
            }
        }
    }
    Ok(out)
}

const SUBCOMMANDS: [&str; 7] = ["gen-space", "build-cubes", "load-atlas", "prescribe", "lusin", "verify", "sweep"];

/// The value of `--config` and the position of the subcommand, found
/// before clap sees flags the config may be supplying.
fn prescan(argv: &[String]) -> (Option<PathBuf>, Option<usize>) {
    let mut config = None;
    let mut sub = None;
    let mut i = 1;
    while i < argv.len() {
        let a = &argv[i];
        if a == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
            i += 1;
        } else if let Some(v) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(v));
        } else if sub.is_none() && SUBCOMMANDS.contains(&a.as_str()) {
            sub = Some(i);
        }
        i += 1;
    }
    (config, sub)
}

fn parse(argv: &[String]) -> std::result::Result<Cli, i32> {
    let (config, sub) = prescan(argv);
    let (Some(path), Some(pos)) = (config, sub) else {
        return Cli::try_parse_from(argv).map_err(clap_failure);
    };
    let tokens = fs::read_to_string(&path)
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str::<Value>(&s).map_err(|e| e.to_string()))
        .and_then(|v| match v {
            Value::Object(m) => Ok(m),
            _ => Err("config must be a JSON object".to_string()),
        })
        .and_then(|m| config_tokens(&m));
    let tokens = match tokens {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: config {}: {e}", path.display());
            return Err(EXIT_USAGE);
        }
    };
    let mut merged: Vec<String> = argv[..=pos].to_vec();
    merged.extend(tokens);
    merged.extend(argv[pos + 1..].iter().cloned());
    Cli::try_parse_from(merged).map_err(clap_failure)
}

/// Runs the command line `argv` (program name first) and returns the exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return EXIT_ERROR;
        }
    };
    let name = cli.cmd.name();
    let outcome = pool.install(|| match cli.cmd {
        Command::GenSpace(a) => gen_space(a),
        Command::BuildCubes(a) => build_cubes_cmd(a),
        Command::LoadAtlas(a) => load_atlas(a),
        Command::Prescribe(a) => prescribe_cmd(a),
        Command::Lusin(a) => lusin_cmd(a),
        Command::Verify(a) => verify_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
    });
    match outcome {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nUsage: cheeger-lusin {name} [OPTIONS]; see `cheeger-lusin {name} --help`");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Runs `body`, then writes the manifest whatever the outcome.
fn with_manifest(mut ctx: Ctx, body: impl FnOnce(&mut Ctx) -> Outcome) -> Outcome {
    let outcome = body(&mut ctx);
    if let Err(e) = ctx.finish() {
        eprintln!("error: writing manifest {}: {e}", ctx.manifest.display());
        return Err(Failure::Run(Error::Io(e)));
    }
    outcome
}

// ---------------------------------------------------------------------------
// Loading

struct Inputs {
    space: Space,
    tree: CubeTree,
    atlas: ChartAtlas,
    omega: PointSet,
    target: TargetField,
    /// raw documents for the run bundle
    docs: Vec<(&'static str, Vec<u8>)>,
}

fn check_eps(eps: f64) -> std::result::Result<(), Failure> {
    if eps > 0.0 && eps < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--eps {eps} must lie in (0, 1)")))
    }
}

fn parse_omega(space: &Space, spec: Option<&str>) -> std::result::Result<PointSet, Failure> {
    let Some(spec) = spec else {
        return Ok(PointSet::all(space));
    };
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let bounds: Vec<f64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    if parts.len() != 2 || bounds.len() != 2 || !(bounds[0] < bounds[1]) {
        return Err(usage(format!("--omega `{spec}` is not an interval a,b with a < b")));
    }
    Ok(PointSet::new(
        space,
        (0..space.len()).filter(|&x| {
            let t = space.coords(x)[0];
            bounds[0] < t && t < bounds[1]
        }),
    ))
}

fn builtin_target(
    space: &Space,
    atlas: &ChartAtlas,
    omega: PointSet,
    kind: &str,
    amp: f64,
) -> crate::Result<TargetField> {
    TargetField::from_fn(space, atlas, omega, |x, j| {
        let t = space.coords(x)[0];
        let s = if t > 0.5 { 1.0 } else { -1.0 };
        let v = match kind {
            "sign" => s,
            "xsign" => t * s,
            "constant" => 1.0,
            "sin" => (2.0 * std::f64::consts::PI * t).sin(),
            _ => 0.0,
        };
        let mut out = vec![0.0; atlas.chart(j).k];
        if let Some(first) = out.first_mut() {
            *first = amp * v;
        }
        out
    })
}

fn load_inputs(ctx: &mut Ctx, a: &InputArgs) -> std::result::Result<Inputs, Failure> {
    let space_doc = ctx.read("space", &a.space)?;
    let space = load_space(text(&space_doc)?)?;
    let cubes_doc = ctx.read("cubes", &a.cubes)?;
    let tree_doc: TreeDocument = serde_json::from_slice(&cubes_doc)?;
    let tree = CubeTree::from_document(&space, &tree_doc)?;
    let atlas_doc = ctx.read("atlas", &a.atlas)?;
    let atlas_parsed: AtlasDocument = serde_json::from_slice(&atlas_doc)?;
    let atlas = atlas_from_document(&space, atlas_parsed)?;
    let (target, target_doc) = match &a.target {
        Some(path) => {
            let bytes = ctx.read("target", path)?;
            (load_target(&space, &atlas, text(&bytes)?)?, bytes)
        }
        None => {
            let omega = parse_omega(&space, a.omega.as_deref())?;
            let t = builtin_target(&space, &atlas, omega, &a.target_kind, a.amplitude)?;
            let doc = to_json(&t.to_document(&atlas))?;
            (t, doc)
        }
    };
    Ok(Inputs {
        omega: target.omega.clone(),
        space,
        tree,
        atlas,
        target,
        docs: vec![
            ("space.json", space_doc),
            ("cubes.json", cubes_doc),
            ("atlas.json", atlas_doc),
            ("target.json", target_doc),
        ],
    })
}

fn write_docs(ctx: &mut Ctx, dir: &Path, inputs: &Inputs) -> std::result::Result<(), Failure> {
    for (name, bytes) in &inputs.docs {
        ctx.write(&dir.join(name), bytes)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bundles

#[derive(Serialize, Deserialize)]
struct AlbertiBundle {
    kind: String,
    eps: f64,
    n_max: usize,
    u: Vec<f64>,
    omega: Vec<usize>,
    dropped: Option<usize>,
    kept: Vec<usize>,
    exceptional: Vec<usize>,
    exceptional_measure: f64,
    slopes: BTreeMap<usize, Vec<f64>>,
    #[serde(rename = "C1")]
    c1: f64,
    eta: f64,
    #[serde(rename = "M")]
    m: Option<f64>,
    r: Option<f64>,
    alphas: Vec<f64>,
    defect_bound: f64,
    tail: f64,
    budget: Value,
    iterations: Value,
    norms: Value,
}

impl AlbertiBundle {
    fn new(r: &PrescriptionResult, n_max: usize) -> std::result::Result<Self, Failure> {
        Ok(Self {
            kind: "prescribe".into(),
            eps: r.eps,
            n_max,
            u: r.u.values.clone(),
            omega: r.omega.indices().to_vec(),
            dropped: r.dropped,
            kept: r.kept.indices().to_vec(),
            exceptional: r.exceptional.indices().to_vec(),
            exceptional_measure: r.exceptional_measure(),
            slopes: r.slopes.clone(),
            c1: r.constants.c1,
            eta: r.constants.eta,
            m: Some(r.constants.m).filter(|m| m.is_finite()),
            r: r.constants.r,
            alphas: r.constants.alphas.clone(),
            defect_bound: r.defect_bound,
            tail: r.tail,
            budget: serde_json::to_value(&r.budget)?,
            iterations: serde_json::to_value(&r.iterations)?,
            norms: serde_json::to_value(&r.norms)?,
        })
    }

    fn result(self, space: &Space) -> PrescriptionResult {
        PrescriptionResult {
            u: ScalarField::new("u", self.u),
            omega: PointSet::new(space, self.omega),
            dropped: self.dropped,
            exceptional: PointSet::new(space, self.exceptional),
            kept: PointSet::new(space, self.kept),
            budget: Vec::new(),
            iterations: Vec::new(),
            constants: RunConstants {
                c1: self.c1,
                eta: self.eta,
                m: self.m.unwrap_or(f64::NAN),
                r: self.r,
                alphas: self.alphas,
            },
            eps: self.eps,
            slopes: self.slopes,
            defect_bound: self.defect_bound,
            tail: self.tail,
            norms: Vec::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LusinBundle {
    kind: String,
    mode: String,
    eps: f64,
    u: Vec<f64>,
    omega: Vec<usize>,
    basepoint: usize,
    step: f64,
    stages: Vec<Stage>,
    captured: Vec<usize>,
    uncaptured: Vec<usize>,
    stage_of: BTreeMap<usize, usize>,
    decay: Vec<(usize, f64)>,
}

impl LusinBundle {
    fn new(r: &LusinResult, mode: &str) -> Self {
        Self {
            kind: "lusin".into(),
            mode: mode.into(),
            eps: r.eps,
            u: r.u.values.clone(),
            omega: r.omega.indices().to_vec(),
            basepoint: r.basepoint,
            step: r.step,
            stages: r.stages.clone(),
            captured: r.captured.indices().to_vec(),
            uncaptured: r.uncaptured.indices().to_vec(),
            stage_of: r.stage_of.clone(),
            decay: r.decay.clone(),
        }
    }

    fn result(self, space: &Space) -> LusinResult {
        LusinResult {
            u: ScalarField::new("u", self.u),
            omega: PointSet::new(space, self.omega),
            eps: self.eps,
            basepoint: self.basepoint,
            step: self.step,
            stages: self.stages,
            captured: PointSet::new(space, self.captured),
            uncaptured: PointSet::new(space, self.uncaptured),
            stage_of: self.stage_of,
            decay: self.decay,
        }
    }
}

fn check_points(space: &Space, pts: &[usize]) -> std::result::Result<(), Failure> {
    match pts.iter().find(|&&x| x >= space.len()) {
        Some(&x) => Err(Failure::Run(Error::InvalidPoint(x))),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Commands

fn gen_space(a: GenSpaceArgs) -> Outcome {
    let ctx = Ctx::new("gen-space", &a, a.seed, file_manifest(&a.out));
    with_manifest(ctx, |ctx| {
        let mut params = BTreeMap::new();
        if let Some(n) = a.n {
            params.insert("n".to_string(), n as f64);
        }
        if let Some(v) = a.a {
            params.insert("a".to_string(), v);
        }
        if let Some(r) = a.radius {
            params.insert("R".to_string(), r as f64);
        }
        let space = generate_space(&a.kind, &params).map_err(|e| match e {
            Error::InvalidParam(m) => usage(m),
            other => Failure::Run(other),
        })?;
        ctx.write(&a.out, &to_json(&space.to_document())?)?;
        println!("{}: {} points, h = {}", a.kind, space.len(), space.resolution());
        Ok(EXIT_OK)
    })
}

fn build_cubes_cmd(a: BuildCubesArgs) -> Outcome {
    if !(a.c > 0.0 && a.c < 1.0) {
        return Err(usage(format!("--c {} must lie in (0, 1)", a.c)));
    }
    let ctx = Ctx::new("build-cubes", &a, a.seed, file_manifest(&a.out));
    with_manifest(ctx, |ctx| {
        let bytes = ctx.read("space", &a.space)?;
        let space = load_space(text(&bytes)?)?;
        let tree = if a.dyadic {
            build_dyadic_tree(&space)?
        } else {
            let (lo, hi) = default_levels(&space, a.c);
            let (k_min, k_max) = (a.k_min.unwrap_or(lo), a.k_max.unwrap_or(hi));
            if k_min > k_max {
                return Err(usage(format!("--k-min {k_min} exceeds --k-max {k_max}")));
            }
            build_cubes(&space, a.c, k_min, k_max, a.seed)?
        };
        ctx.write(&a.out, &to_json(&tree.to_document())?)?;
        let k = &tree.constants;
        println!(
            "levels {}..={}, {} cubes; a0 = {}, a1 = {}, C1 = {}, eta = {}, R2 = {:?}",
            tree.k_min,
            tree.k_max,
            tree.cubes().len(),
            k.a0,
            k.a1,
            k.c1,
            k.eta,
            k.r2
        );
        Ok(EXIT_OK)
    })
}

fn load_atlas(a: LoadAtlasArgs) -> Outcome {
    let ctx = Ctx::new("load-atlas", &a, a.seed, file_manifest(&a.out));
    with_manifest(ctx, |ctx| {
        let bytes = ctx.read("space", &a.space)?;
        let space = load_space(text(&bytes)?)?;
        let mut atlas = match &a.atlas {
            Some(path) => {
                let doc = ctx.read("atlas", path)?;
                atlas_from_document(&space, serde_json::from_slice(&doc)?)?
            }
            None if a.kind == "split-line" => ChartAtlas::split_line(&space, a.cut)?,
            None => ChartAtlas::coordinates(&space)?,
        };
        if a.normalize {
            atlas = normalize_atlas(&space, &atlas)?;
        }
        if let Some(w) = a.fill_constants {
            if !(w > 0.0) {
                return Err(usage("--fill-constants window must be positive"));
            }
            atlas = with_default_constants(&space, &atlas, w * space.resolution(), a.seed)?;
        }
        ctx.write(&a.out, &to_json(&atlas.to_document())?)?;
        for c in atlas.charts() {
            println!(
                "chart {}: {} points, k = {}, LIP(phi) = {}, c_j = {:?}",
                c.j,
                c.domain.len(),
                c.k,
                c.lip_phi,
                c.c_j
            );
        }
        Ok(EXIT_OK)
    })
}

fn prescribe_cmd(a: PrescribeArgs) -> Outcome {
    check_eps(a.eps)?;
    if a.n_max == 0 {
        return Err(usage("--n-max must be at least 1"));
    }
    let ctx = Ctx::new("prescribe", &a, a.seed, dir_manifest(&a.out, "prescribe"));
    with_manifest(ctx, |ctx| {
        let inp = load_inputs(ctx, &a.inputs)?;
        write_docs(ctx, &a.out, &inp)?;
        let r = prescribe(&inp.space, &inp.tree, &inp.atlas, &inp.omega, &inp.target, a.eps, a.n_max)?;
        ctx.write(&a.out.join("result.json"), &to_json(&AlbertiBundle::new(&r, a.n_max)?)?)?;
        ctx.write(&a.out.join("u.csv"), r.u.to_csv().as_bytes())?;
        println!(
            "kept {} of {} points; mu(A) = {} <= {}; defect bound {}",
            r.kept.len(),
            r.omega.len(),
            r.exceptional_measure(),
            a.eps * r.omega.measure(),
            r.defect_bound
        );
        Ok(EXIT_OK)
    })
}

fn lusin_cmd(a: LusinArgs) -> Outcome {
    check_eps(a.eps)?;
    let ctx = Ctx::new("lusin", &a, a.seed, dir_manifest(&a.out, "lusin"));
    with_manifest(ctx, |ctx| {
        let inp = load_inputs(ctx, &a.inputs)?;
        write_docs(ctx, &a.out, &inp)?;
        let r = if a.mode == "compact" {
            let c = prescribe_compact(&inp.space, &inp.tree, &inp.atlas, &inp.omega, &inp.target, a.eps)?;
            LusinResult::from_compact(&inp.space, &c)
        } else {
            prescribe_global(&inp.space, &inp.tree, &inp.atlas, &inp.omega, &inp.target, a.eps)?
        };
        ctx.write(&a.out.join("result.json"), &to_json(&LusinBundle::new(&r, &a.mode))?)?;
        ctx.write(&a.out.join("u.csv"), r.u.to_csv().as_bytes())?;
        ctx.write(&a.out.join("decay.csv"), r.decay_csv().as_bytes())?;
        println!(
            "captured {} of {} points over {} stages; sup |u| = {}",
            r.captured.len(),
            r.omega.len(),
            r.stages.len(),
            r.u.sup_norm()
        );
        Ok(EXIT_OK)
    })
}

fn print_checks(report: &Report) {
    for c in &report.checks {
        let at = c.witness.map(|w| format!(" at point {w}")).unwrap_or_default();
        let status = if c.pass { "PASS" } else { "FAIL" };
        println!("{status} {} [{}]: measured {} bound {}{at}", c.id, c.reference, c.measured, c.bound);
        if !c.pass {
            eprintln!("check failed: {}{at}", c.id);
        }
    }
}

fn verify_cmd(a: VerifyArgs) -> Outcome {
    if !(a.window > 0.0 && a.h_slack >= 0.0) {
        return Err(usage("--window must be positive and --h-slack nonnegative"));
    }
    let ctx = Ctx::new("verify", &a, a.seed, dir_manifest(&a.run, "verify"));
    with_manifest(ctx, |ctx| {
        let space_doc = ctx.read("space", &a.run.join("space.json"))?;
        let space = load_space(text(&space_doc)?)?;
        let atlas_doc = ctx.read("atlas", &a.run.join("atlas.json"))?;
        let atlas = atlas_from_document(&space, serde_json::from_slice(&atlas_doc)?)?;
        let target_doc = ctx.read("target", &a.run.join("target.json"))?;
        let target = load_target(&space, &atlas, text(&target_doc)?)?;
        let bundle = ctx.read("result", &a.run.join("result.json"))?;
        let kind: Value = serde_json::from_slice(&bundle)?;
        let tol = Tolerance {
            h_slack: a.h_slack,
            window: a.window,
            ..Tolerance::default()
        };
        let report = match kind.get("kind").and_then(Value::as_str) {
            Some("prescribe") => {
                let cubes_doc = ctx.read("cubes", &a.run.join("cubes.json"))?;
                let tree = CubeTree::from_document(&space, &serde_json::from_slice(&cubes_doc)?)?;
                let b: AlbertiBundle = serde_json::from_value(kind)?;
                check_points(&space, &b.kept)?;
                check_points(&space, &b.omega)?;
                check_points(&space, &b.exceptional)?;
                let r = b.result(&space);
                verify_alberti(&space, &tree, &atlas, &target.omega, &target, &r, &tol)?
            }
            Some("lusin") => {
                let b: LusinBundle = serde_json::from_value(kind)?;
                check_points(&space, &b.captured)?;
                check_points(&space, &b.omega)?;
                let r = b.result(&space);
                verify_lusin(&space, &atlas, &target.omega, &target, &r, &tol)?
            }
            other => {
                return Err(Failure::Run(Error::Malformed(format!("unknown result kind {other:?}"))));
            }
        };
        let doc = emit_report(&report, &a.format)?;
        ctx.write(&a.run.join(format!("report.{}", a.format)), doc.as_bytes())?;
        print_checks(&report);
        Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK })
    })
}

fn parse_list(flag: &str, s: &str) -> std::result::Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|t| match t.trim() {
            "inf" | "infinity" => Ok(f64::INFINITY),
            v => v.parse::<f64>().map_err(|_| usage(format!("--{flag}: `{v}` is not a number"))),
        })
        .collect()
}

fn sweep_cmd(a: SweepArgs) -> Outcome {
    let eps = parse_list("eps-list", &a.eps_list)?;
    let ps = parse_list("p-list", &a.p_list)?;
    if eps.len() < 3 {
        return Err(usage("--eps-list needs at least 3 values"));
    }
    for &e in &eps {
        check_eps(e)?;
    }
    if ps.is_empty() || ps.iter().any(|&p| !(p >= 1.0)) {
        return Err(usage("--p-list values must be >= 1"));
    }
    let ctx = Ctx::new("sweep", &a, a.seed, dir_manifest(&a.out, "sweep"));
    with_manifest(ctx, |ctx| {
        let inp = load_inputs(ctx, &a.inputs)?;
        let table = sweep_epsilon(&inp.space, &inp.tree, &inp.atlas, &inp.omega, &inp.target, &eps, &ps)?;
        let report = table.to_report();
        ctx.write(&a.out.join("sweep.json"), emit_report(&report, "json")?.as_bytes())?;
        ctx.write(&a.out.join("sweep.csv"), table.to_csv().as_bytes())?;
        ctx.write(&a.out.join("sweep.svg"), emit_report(&report, "svg")?.as_bytes())?;
        for fit in &table.fits {
            println!(
                "p = {}: slope {:?}, theory {} ({})",
                fit.p, fit.slope, fit.expected, fit.note
            );
        }
        print_checks(&report);
        Ok(if report.passed() { EXIT_OK } else { EXIT_CHECK })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(run(&argv("cheeger-lusin")), EXIT_USAGE);
        assert_eq!(run(&argv("cheeger-lusin frobnicate")), EXIT_USAGE);
        assert_eq!(run(&argv("cheeger-lusin gen-space --kind grid1d")), EXIT_USAGE);
        assert_eq!(run(&argv("cheeger-lusin gen-space --kind torus --out x")), EXIT_USAGE);
        assert_eq!(run(&argv("cheeger-lusin --help")), EXIT_OK);
    }

    #[test]
    fn config_tokens_and_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("cfg.json");
        fs::write(&cfg, r#"{"kind": "grid1d", "n": 9, "out": "ignored.json"}"#).unwrap();
        let out = dir.path().join("s.json");
        let args = vec![
            "cheeger-lusin".to_string(),
            "gen-space".into(),
            "--config".into(),
            cfg.display().to_string(),
            "--n".into(),
            "17".into(),
            "--out".into(),
            out.display().to_string(),
        ];
        assert_eq!(run(&args), EXIT_OK);
        let space = load_space(&fs::read_to_string(&out).unwrap()).unwrap();
        assert_eq!(space.len(), 17);
        assert!(!dir.path().join("ignored.json").exists());
        let manifest: Value =
            serde_json::from_str(&fs::read_to_string(file_manifest(&out)).unwrap()).unwrap();
        assert_eq!(manifest["cmd"], "gen-space");
        assert_eq!(manifest["args"]["n"], 17);
        assert_eq!(manifest["hashes"]["out:s.json"].as_str().unwrap().len(), 64);
        for key in ["cmd", "args", "hashes", "seed", "version"] {
            assert!(manifest.get(key).is_some());
        }

        let mut m = serde_json::Map::new();
        m.insert("dyadic".into(), Value::Bool(true));
        m.insert("k_min".into(), Value::from(-1));
        m.insert("skip".into(), Value::Bool(false));
        assert_eq!(config_tokens(&m).unwrap(), vec!["--dyadic", "--k-min", "-1"]);
    }

    #[test]
    fn missing_input_is_error_with_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("c.json");
        let args = vec![
            "cheeger-lusin".to_string(),
            "build-cubes".into(),
            "--space".into(),
            dir.path().join("nope.json").display().to_string(),
            "--out".into(),
            out.display().to_string(),
        ];
        assert_eq!(run(&args), EXIT_ERROR);
        assert!(file_manifest(&out).exists());
    }

    #[test]
    fn omega_parsing() {
        let mut p = BTreeMap::new();
        p.insert("n".to_string(), 11.0);
        let s = generate_space("grid1d", &p).unwrap();
        assert_eq!(parse_omega(&s, Some("0.2,0.8")).ok().unwrap().len(), 5);
        assert_eq!(parse_omega(&s, None).ok().unwrap().len(), 11);
        assert!(parse_omega(&s, Some("0.8,0.2")).is_err());
        assert!(parse_omega(&s, Some("x")).is_err());
    }
}

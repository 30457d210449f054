//! Command-line driver: reads JSON inputs, runs a construction or topology
//! operation, and writes a JSON report plus optional certificate and CSV.
//!
//! Exit codes: 0 when every condition passes, 2 on a construction error,
//! 3 on a verification failure, 64 on a usage or input error.

use crate::construct::{
    bump_subsolution, defining_function, global_subsolution, urysohn_subsolution, verify_with, Certificate, CondKind,
    ConstructError, FloorSpec, Region, Settings, UrysohnTarget,
};
use crate::geometry::{mask_from_spec, CellSet, Cuboid, DomainSpec, GridDomain, Shape};
use crate::hermitian::{
    chart_transition_check, positive_metric_divisor, positive_metric_noncompact, Atlas, DivisorPoint, HermitianError,
};
use crate::operator::EllipticOperator;
use crate::smoothfn::SmoothFn;
use crate::topology::{check_chain, find_chain, hull, TopologyError};
use anyhow::{anyhow, bail, Context};
use clap::{Parser, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONSTRUCT: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

/// Largest accepted chart transition discrepancy.
const TRANSITION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    /// Exhaustion subsolution on the whole domain.
    Exhaust,
    /// Subsolution vanishing on K (`--mode neighborhood|closed-set`).
    Urysohn,
    /// Defining function for the open set `--omega`.
    Defining,
    /// Single bump subsolution for boxes `--V`, `--D`, `--W`.
    Bump,
    /// Box chain from `--from` to the ends.
    Chain,
    /// Hull of `--K`.
    Hull,
    /// Re-check a serialized certificate.
    Verify,
    /// Positive-curvature weights (`--mode noncompact|divisor`).
    Curvature,
}

/// Parsed command line.
#[derive(Debug, Clone, Parser)]
#[command(name = "subsol", version, about = "Smooth strict subsolutions with sampled certificates")]
pub struct RunConfig {
    pub command: Command,
    /// Certificate JSON for `verify`; atlas spec JSON for `curvature`.
    pub input: Option<PathBuf>,
    /// Domain spec JSON.
    #[arg(long)]
    pub domain: Option<PathBuf>,
    /// `laplace` or an operator JSON file.
    #[arg(long, default_value = "laplace")]
    pub operator: String,
    /// `const:<r>`, `end-proxy`, or `expr:<SmoothFn JSON file>`.
    #[arg(long, default_value = "const:1")]
    pub rho: String,
    #[arg(long = "K")]
    pub k: Option<PathBuf>,
    #[arg(long = "W")]
    pub w: Option<PathBuf>,
    #[arg(long = "D")]
    pub d: Option<PathBuf>,
    #[arg(long = "V")]
    pub v: Option<PathBuf>,
    /// Extra sets on which `Aφ` must stay positive (repeatable).
    #[arg(long = "E")]
    pub e: Vec<PathBuf>,
    #[arg(long)]
    pub omega: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    /// Samples per cell per axis.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Verification density multiplier.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub refine: u64,
    /// Relative tolerance applied to every condition.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub emit_cert: Option<PathBuf>,
    /// CSV of `x,y[,z],phi,Aphi,rho` at mask samples.
    #[arg(long)]
    pub dump_field: Option<PathBuf>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Jitter seed for verification samples; 0 keeps the lattice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Chain start point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub from: Vec<f64>,
    /// Chain box side in cells.
    #[arg(long)]
    pub box_side: Option<f64>,
    /// Conformal metric weight JSON (curvature).
    #[arg(long)]
    pub metric: Option<PathBuf>,
    /// Reference weight `u_k` JSON (curvature, noncompact).
    #[arg(long)]
    pub uk: Option<PathBuf>,
    /// Wiggle `η` JSON (curvature, divisor).
    #[arg(long)]
    pub eta: Option<PathBuf>,
    /// Divisor points `re,im[,mult]` separated by `;`.
    #[arg(long, allow_hyphen_values = true)]
    pub roots: Option<String>,
    /// Chart disk radius for the sphere.
    #[arg(long, default_value_t = 1.25)]
    pub radius: f64,
    /// Cell size for the sphere charts.
    #[arg(long, default_value_t = 0.0625)]
    pub h: f64,
}

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Construct { kind: String, message: String },
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Usage(e)
    }
}

impl From<ConstructError> for CliError {
    fn from(e: ConstructError) -> Self {
        CliError::Construct { kind: e.kind(), message: e.to_string() }
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        ConstructError::Topology(e).into()
    }
}

impl From<HermitianError> for CliError {
    fn from(e: HermitianError) -> Self {
        let kind = match &e {
            HermitianError::Construct(c) => c.kind(),
            other => format!("{other:?}").split(['(', ' ']).next().unwrap_or("Hermitian").to_string(),
        };
        CliError::Construct { kind, message: e.to_string() }
    }
}

/// Result of a successful run.
pub struct Outcome {
    pub report: Value,
    pub pass: bool,
    pub certificate: Option<Certificate>,
}

/// A set given either as flat cell indices or as a shape tested at cell centers.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum SetSpec {
    Cells(Vec<usize>),
    Shape(Shape),
}

fn read_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("{flag} is required"))
}

fn load_domain(cfg: &RunConfig) -> anyhow::Result<GridDomain> {
    let spec: DomainSpec = read_json(need(&cfg.domain, "--domain")?)?;
    mask_from_spec(&spec).map_err(|e| anyhow!("invalid domain: {e}"))
}

fn load_operator(cfg: &RunConfig, domain: &GridDomain) -> anyhow::Result<EllipticOperator> {
    if cfg.operator == "laplace" {
        return Ok(EllipticOperator::laplace(domain.dim));
    }
    let op: EllipticOperator = read_json(Path::new(&cfg.operator))?;
    if op.dim != domain.dim {
        bail!("operator dimension {} does not match domain dimension {}", op.dim, domain.dim);
    }
    Ok(op)
}

/// Parses `const:<r>`, `end-proxy`, or `expr:<file>`.
pub fn parse_floor(s: &str) -> anyhow::Result<FloorSpec> {
    if s == "end-proxy" {
        return Ok(FloorSpec::EndProxy);
    }
    if let Some(v) = s.strip_prefix("const:") {
        let value: f64 = v.parse().with_context(|| format!("bad constant in --rho {s}"))?;
        if !(value > 0.0) {
            bail!("--rho must be positive");
        }
        return Ok(FloorSpec::constant(value));
    }
    if let Some(path) = s.strip_prefix("expr:") {
        return Ok(FloorSpec::Expr { f: read_json(Path::new(path))? });
    }
    bail!("--rho must be const:<r>, end-proxy, or expr:<file>")
}

fn load_set(path: &Path, domain: &GridDomain) -> anyhow::Result<CellSet> {
    let set = match read_json::<SetSpec>(path)? {
        SetSpec::Cells(cells) => {
            if let Some(c) = cells.iter().find(|&&c| c >= domain.total_cells() || !domain.mask[c]) {
                bail!("{}: cell {c} is not a mask cell", path.display());
            }
            CellSet::new(cells)
        }
        SetSpec::Shape(shape) => CellSet::new(
            (0..domain.total_cells()).filter(|&c| domain.mask[c] && shape.contains(&domain.cell_center(c))).collect(),
        ),
    };
    Ok(set)
}

fn load_box(path: &Path) -> anyhow::Result<Cuboid> {
    match read_json::<Shape>(path).or_else(|_| read_json::<Cuboid>(path).map(|c| Shape::Box { lo: c.lo, hi: c.hi }))? {
        Shape::Box { lo, hi } => Cuboid::new(lo, hi).map_err(|e| anyhow!("{}: {e}", path.display())),
        _ => bail!("{}: expected a box", path.display()),
    }
}

fn parse_roots(s: &str) -> anyhow::Result<Vec<DivisorPoint>> {
    s.split(';')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            let parts: Vec<&str> = t.split(',').map(str::trim).collect();
            if parts.len() < 2 || parts.len() > 3 {
                bail!("root `{t}` must be re,im[,mult]");
            }
            let re = parts[0].parse().with_context(|| format!("root `{t}`"))?;
            let im = parts[1].parse().with_context(|| format!("root `{t}`"))?;
            let mult = match parts.get(2) {
                Some(m) => m.parse().with_context(|| format!("root `{t}`"))?,
                None => 1,
            };
            Ok(DivisorPoint { re, im, mult })
        })
        .collect()
}

fn settings(cfg: &RunConfig) -> Settings {
    let mut s = Settings { density: cfg.samples as usize, ..Settings::default() };
    if let Some(b) = cfg.box_side {
        s.box_cells = b;
    }
    s
}

fn check(cfg: &RunConfig, mut cert: Certificate, extra: Option<Value>) -> Result<Outcome, CliError> {
    if let Some(t) = cfg.tol {
        for c in &mut cert.conditions {
            c.tol = Some(t);
        }
    }
    let report = verify_with(&cert, cfg.refine as usize, cfg.seed)?;
    let mut pass = report.pass;
    let mut value = serde_json::to_value(&report).map_err(|e| anyhow!(e))?;
    if let Some(Value::Object(m)) = extra {
        for (k, v) in m {
            if k == "pass" {
                pass &= v.as_bool().unwrap_or(false);
                continue;
            }
            value[k] = v;
        }
        value["pass"] = json!(pass);
    }
    Ok(Outcome { report: value, pass, certificate: Some(cert) })
}

fn run_construct(cfg: &RunConfig) -> Result<Outcome, CliError> {
    match cfg.command {
        Command::Verify => {
            let cert: Certificate = read_json(need(&cfg.input, "certificate path")?)?;
            check(cfg, cert, None)
        }
        Command::Hull => {
            let domain = load_domain(cfg)?;
            let k = load_set(need(&cfg.k, "--K")?, &domain)?;
            let h = hull(&k, &domain, None)?;
            Ok(Outcome {
                report: json!({ "cells": h.cells, "count": h.len(), "pass": true }),
                pass: true,
                certificate: None,
            })
        }
        Command::Chain => {
            let domain = load_domain(cfg)?;
            if cfg.from.len() != domain.dim {
                return Err(anyhow!("--from needs {} coordinates", domain.dim).into());
            }
            let mask = domain.mask_set();
            let side = cfg.box_side.unwrap_or(Settings::default().box_cells) * domain.h;
            let chain = find_chain(&cfg.from, &mask, &domain, side)?;
            let valid = check_chain(&chain, &mask, &domain);
            let pass = valid.is_ok();
            let report = json!({
                "length": chain.len(),
                "chain": chain,
                "valid": pass,
                "violation": valid.err(),
                "pass": pass,
            });
            Ok(Outcome { report, pass, certificate: None })
        }
        Command::Exhaust => {
            let domain = load_domain(cfg)?;
            let op = load_operator(cfg, &domain)?;
            let rho = parse_floor(&cfg.rho)?;
            let (_, cert) = global_subsolution(&domain, &op, &rho, &settings(cfg))?;
            check(cfg, cert, None)
        }
        Command::Urysohn => {
            let domain = load_domain(cfg)?;
            let op = load_operator(cfg, &domain)?;
            let rho = parse_floor(&cfg.rho)?;
            let k = load_set(need(&cfg.k, "--K")?, &domain)?;
            let target = match cfg.mode.as_deref().unwrap_or("neighborhood") {
                "neighborhood" => UrysohnTarget::Neighborhood { w: load_set(need(&cfg.w, "--W")?, &domain)? },
                "closed-set" => UrysohnTarget::Closed { d: load_set(need(&cfg.d, "--D")?, &domain)? },
                m => return Err(anyhow!("--mode must be neighborhood or closed-set, got {m}").into()),
            };
            let e_sets = cfg.e.iter().map(|p| load_set(p, &domain)).collect::<anyhow::Result<Vec<_>>>()?;
            let (_, cert) = urysohn_subsolution(&domain, &op, &k, &target, &rho, &e_sets, &settings(cfg))?;
            check(cfg, cert, None)
        }
        Command::Defining => {
            let domain = load_domain(cfg)?;
            let op = load_operator(cfg, &domain)?;
            let rho = parse_floor(&cfg.rho)?;
            let omega = load_set(need(&cfg.omega, "--omega")?, &domain)?;
            let w = load_set(need(&cfg.w, "--W")?, &domain)?;
            let (_, cert) = defining_function(&domain, &op, &omega, &w, &rho, &settings(cfg))?;
            check(cfg, cert, None)
        }
        Command::Bump => {
            let domain = load_domain(cfg)?;
            let op = load_operator(cfg, &domain)?;
            let v = load_box(need(&cfg.v, "--V")?)?;
            let d = load_box(need(&cfg.d, "--D")?)?;
            let w = load_box(need(&cfg.w, "--W")?)?;
            let (_, cert) = bump_subsolution(&v, &Region::cuboid(d), &w, &op, &domain, cfg.samples as usize)?;
            check(cfg, cert, None)
        }
        Command::Curvature => run_curvature(cfg),
    }
}

/// Atlas description for `curvature`.
#[derive(Debug, Clone, Deserialize)]
struct AtlasSpec {
    model: String,
    /// Bundle degree; must equal the total root multiplicity when given.
    #[serde(default)]
    d: Option<u32>,
    #[serde(default)]
    roots: Vec<DivisorPoint>,
    #[serde(default)]
    eta: Option<SmoothFn>,
    /// Conformal metric weight.
    #[serde(default)]
    g: Option<SmoothFn>,
    /// Reference weight for the annulus model.
    #[serde(default)]
    uk: Option<SmoothFn>,
    #[serde(default)]
    domain: Option<DomainSpec>,
    #[serde(default)]
    radius: Option<f64>,
    #[serde(default)]
    h: Option<f64>,
}

/// `1 < |z| < 2` with both rings as ends.
fn default_annulus() -> DomainSpec {
    DomainSpec {
        dim: 2,
        window: Cuboid::new(vec![-2.0, -2.0], vec![2.0, 2.0]).expect("valid window"),
        h: 0.125,
        shape: Shape::Diff {
            a: Box::new(Shape::Ball { center: vec![0.0, 0.0], radius: 2.0 }),
            b: Box::new(Shape::Ball { center: vec![0.0, 0.0], radius: 1.0 }),
        },
        faces: Default::default(),
        margin: 8,
        ends: Some(Shape::All),
    }
}

fn atlas_spec(cfg: &RunConfig) -> anyhow::Result<AtlasSpec> {
    if let Some(p) = &cfg.input {
        return read_json(p);
    }
    let load = |p: &Option<PathBuf>| -> anyhow::Result<Option<SmoothFn>> { p.as_deref().map(read_json).transpose() };
    let model = match cfg.mode.as_deref().unwrap_or("noncompact") {
        "noncompact" | "annulus" => "annulus",
        "divisor" | "sphere" => "sphere",
        m => bail!("--mode must be noncompact or divisor, got {m}"),
    };
    Ok(AtlasSpec {
        model: model.into(),
        d: None,
        roots: cfg.roots.as_deref().map(parse_roots).transpose()?.unwrap_or_default(),
        eta: load(&cfg.eta)?,
        g: load(&cfg.metric)?,
        uk: load(&cfg.uk)?,
        domain: cfg.domain.as_deref().map(read_json).transpose()?,
        radius: Some(cfg.radius),
        h: Some(cfg.h),
    })
}

fn run_curvature(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let spec = atlas_spec(cfg)?;
    match spec.model.as_str() {
        "annulus" => {
            let domain = mask_from_spec(&spec.domain.unwrap_or_else(default_annulus))
                .map_err(|e| anyhow!("invalid domain: {e}"))?;
            if domain.dim != 2 {
                return Err(anyhow!("curvature charts are planar").into());
            }
            let u_k = spec.uk.unwrap_or_else(|| SmoothFn::constant(2, 0.0));
            let atlas = Atlas::plane("chart", domain, spec.g.unwrap_or_else(|| SmoothFn::constant(2, 1.0)));
            let (_, cert) = positive_metric_noncompact(&atlas, &u_k, &settings(cfg))?;
            check(cfg, cert, None)
        }
        "sphere" => {
            if spec.roots.is_empty() {
                return Err(anyhow!("the sphere model needs at least one root").into());
            }
            let total: u32 = spec.roots.iter().map(|r| r.mult).sum();
            if let Some(d) = spec.d {
                if d != total {
                    return Err(anyhow!("degree {d} differs from the total root multiplicity {total}").into());
                }
            }
            let eta = spec.eta.unwrap_or_else(|| SmoothFn::constant(2, 0.0));
            let atlas = Atlas::sphere(spec.radius.unwrap_or(1.25), spec.h.unwrap_or(0.0625), spec.g)?;
            let (weight, cert) = positive_metric_divisor(&atlas, &spec.roots, &eta, &settings(cfg))?;
            let tr = chart_transition_check(&atlas, &weight, cfg.samples as usize * cfg.refine as usize)?;
            let tr_pass = tr.max_rel_err <= TRANSITION_TOL;
            check(cfg, cert, Some(json!({ "transition": tr, "pass": tr_pass })))
        }
        m => Err(anyhow!("atlas model must be annulus or sphere, got {m}").into()),
    }
}

/// `(function, operator, floor)` for the CSV of domain `d`: the first `Af > floor`
/// condition on that domain, else function 0 with operator 0 and floor 0.
fn field_for(cert: &Certificate, d: usize) -> (usize, usize, FloorSpec) {
    cert.conditions
        .iter()
        .find(|c| c.domain == d && matches!(c.kind, CondKind::AfGt))
        .map(|c| (c.func, c.op.unwrap_or(0), c.floor.clone()))
        .unwrap_or((0, 0, FloorSpec::constant(0.0)))
}

/// Writes `x,y[,z],phi,Aphi,rho` at mask samples, one file per certificate
/// domain; domain `k > 0` goes to `<stem>.chart<k>.<ext>`. Samples where the
/// field cannot be evaluated (poles) are skipped.
pub fn dump_field(path: &Path, cert: &Certificate, density: usize) -> anyhow::Result<()> {
    for (k, domain) in cert.domains.iter().enumerate() {
        let target = if k == 0 {
            path.to_path_buf()
        } else {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("field");
            let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
            path.with_file_name(format!("{stem}.chart{k}.{ext}"))
        };
        let (fi, oi, floor) = field_for(cert, k);
        let f = &cert.functions[fi];
        let op = &cert.operators[oi];
        let mut w = csv::Writer::from_path(&target).with_context(|| format!("creating {}", target.display()))?;
        let axes = ["x", "y", "z"];
        let mut header: Vec<&str> = axes[..domain.dim].to_vec();
        header.extend(["phi", "Aphi", "rho"]);
        w.write_record(&header)?;
        for x in Region::mask().samples(domain, density, &cert.functions)? {
            let (Ok(phi), Ok(aphi), Ok(rho)) = (f.value(&x), op.apply(f, &x), floor.eval(&x, domain)) else {
                continue;
            };
            let mut rec: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            rec.extend([phi, aphi, rho].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(())
}

fn write_text(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn finish(cfg: &RunConfig, outcome: Outcome) -> anyhow::Result<i32> {
    if let (Some(p), Some(cert)) = (&cfg.emit_cert, &outcome.certificate) {
        write_text(Some(p), &(serde_json::to_string_pretty(cert)? + "\n"))?;
    }
    if let Some(p) = &cfg.dump_field {
        let cert = outcome.certificate.as_ref().ok_or_else(|| anyhow!("--dump-field needs a certificate"))?;
        dump_field(p, cert, cert.density * cfg.refine as usize)?;
    }
    write_text(cfg.out.as_deref(), &(serde_json::to_string_pretty(&outcome.report)? + "\n"))?;
    Ok(if outcome.pass { EXIT_OK } else { EXIT_VERIFY })
}

/// Runs a parsed configuration and returns the exit code.
pub fn run(cfg: &RunConfig) -> i32 {
    let result = run_construct(cfg).and_then(|o| finish(cfg, o).map_err(CliError::Usage));
    match result {
        Ok(code) => code,
        Err(CliError::Usage(e)) => {
            eprintln!("error: {e:#}");
            EXIT_USAGE
        }
        Err(CliError::Construct { kind, message }) => {
            eprintln!("error: {message}");
            let body = json!({ "error": kind, "message": message, "pass": false });
            if let Err(e) = write_text(cfg.out.as_deref(), &(body.to_string() + "\n")) {
                eprintln!("error: {e:#}");
            }
            EXIT_CONSTRUCT
        }
    }
}

/// Parses `argv` (including the program name) and runs it.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match RunConfig::try_parse_from(argv) {
        Ok(cfg) => {
            if let Some(t) = cfg.tol {
                if !(t > 0.0) {
                    eprintln!("error: --tol must be positive");
                    return EXIT_USAGE;
                }
            }
            run(&cfg)
        }
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_parsing() {
        assert_eq!(parse_floor("const:2.5").unwrap(), FloorSpec::constant(2.5));
        assert_eq!(parse_floor("end-proxy").unwrap(), FloorSpec::EndProxy);
        assert!(parse_floor("const:-1").is_err());
        assert!(parse_floor("wat").is_err());
    }

    #[test]
    fn root_parsing() {
        let r = parse_roots("0,0,2; -0.3,0.1").unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].mult, 2);
        assert_eq!(r[1].mult, 1);
        assert_eq!(r[1].re, -0.3);
        assert!(parse_roots("1").is_err());
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(main_with(["subsol", "frobnicate"]), EXIT_USAGE);
        assert_eq!(main_with(["subsol", "exhaust", "--samples", "0"]), EXIT_USAGE);
    }

    #[test]
    fn missing_domain_is_usage_error() {
        assert_eq!(main_with(["subsol", "exhaust"]), EXIT_USAGE);
    }
}

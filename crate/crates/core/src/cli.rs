//! Command-line front end: model specs, run configurations, dispatch and
//! report rendering.

use std::fs;
use std::path::Path;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::covering::{closed_geodesic_from_clifford, is_clifford_translation};
use crate::error::{Error, Result};
use crate::geodesic::{exp_map, integrate_geodesic};
use crate::hillclimb::{hill_climb, is_closed_geodesic, ClimbParams, Direction, Verdict};
use crate::jacobi::{conjugate_points_of, determinant_profile, is_self_conjugate, JacobiPropagator};
use crate::loopspace::{
    class_length_bounds, continuation_path, find_any_loop, find_loop, BasePath, LoopCandidate, Sampler, SolveOptions,
};
use crate::manifold::{DeckElement, SpacetimeModel, TangentVec, WarpProfile};

/// Random points used to validate a loaded model.
pub const VALIDATION_SAMPLES: usize = 8;

// ---------------------------------------------------------------------------
// model specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(rename = "type")]
    pub kind: String,
    pub name: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimParams {
    #[serde(default = "two")]
    dim: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CylinderParams {
    #[serde(default = "one")]
    period: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WarpedParams {
    #[serde(default = "cosh_name")]
    omega: String,
    #[serde(default)]
    eps: Option<f64>,
    #[serde(default = "one")]
    period: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmptyParams {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorSpec {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default)]
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuotientParams {
    generators: Vec<GeneratorSpec>,
    #[serde(default)]
    metric: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    time_orientation: Option<Vec<f64>>,
    #[serde(default = "two")]
    word_bound: usize,
}

fn two() -> usize {
    2
}
fn one() -> f64 {
    1.0
}
fn cosh_name() -> String {
    "cosh".into()
}

const BUILTINS: [&str; 5] = ["minkowski2", "cylinder", "warped_cylinder", "ads2", "flat_quotient"];

fn params<T: for<'de> Deserialize<'de>>(spec: &ModelSpec) -> Result<T> {
    let v = if spec.params.is_null() { json!({}) } else { spec.params.clone() };
    serde_json::from_value(v).map_err(|e| Error::config(format!("model {} params: {e}", spec.name)))
}

/// Builds and validates the model described by `spec`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<SpacetimeModel> {
    if spec.kind != "builtin" {
        return Err(Error::config(format!("model type {:?} is not supported (expected \"builtin\")", spec.kind)));
    }
    let model = match spec.name.as_str() {
        "minkowski2" | "minkowski" => {
            let p: DimParams = params(spec)?;
            if p.dim < 2 {
                return Err(Error::config("minkowski dim must be at least 2"));
            }
            SpacetimeModel::minkowski(p.dim)
        }
        "cylinder" => {
            let p: CylinderParams = params(spec)?;
            check_period(p.period)?;
            SpacetimeModel::cylinder(p.period)
        }
        "warped_cylinder" => {
            let p: WarpedParams = params(spec)?;
            check_period(p.period)?;
            let profile = match p.omega.as_str() {
                "cosh" => WarpProfile::Cosh,
                "one_plus_eps_x2" => WarpProfile::OnePlusEpsX2 { eps: p.eps.unwrap_or(0.1) },
                other => return Err(Error::config(format!("unknown warp profile {other:?}"))),
            };
            SpacetimeModel::warped_cylinder(profile, p.period)
        }
        "ads2" => {
            let _: EmptyParams = params(spec)?;
            SpacetimeModel::ads2()
        }
        "flat_quotient" => {
            let p: QuotientParams = params(spec)?;
            if p.generators.is_empty() {
                return Err(Error::config("flat_quotient needs at least one generator"));
            }
            let n = p.generators[0].b.len();
            let metric = match p.metric {
                Some(rows) => {
                    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                        return Err(Error::config(format!("flat_quotient metric must be {n}x{n}")));
                    }
                    DMatrix::from_fn(n, n, |i, j| rows[i][j])
                }
                None => DMatrix::from_fn(n, n, |i, j| if i != j { 0.0 } else if i == 0 { -1.0 } else { 1.0 }),
            };
            let orientation = p.time_orientation.unwrap_or_else(|| {
                let mut o = vec![0.0; n];
                o[0] = 1.0;
                o
            });
            let generators = p
                .generators
                .into_iter()
                .enumerate()
                .map(|(i, g)| DeckElement {
                    label: g.name.unwrap_or_else(|| format!("g{i}")),
                    a: g.a,
                    b: g.b,
                })
                .collect();
            SpacetimeModel::flat_quotient(metric, orientation, generators, p.word_bound)?
        }
        other => {
            return Err(Error::config(format!(
                "unknown builtin model {other:?}; expected one of {}",
                BUILTINS.join(", ")
            )))
        }
    };
    model.validate(VALIDATION_SAMPLES, seed)?;
    Ok(model)
}

fn check_period(p: f64) -> Result<()> {
    if p > 0.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("period must be positive, got {p}")))
    }
}

/// A builtin name, a path to a JSON model spec, or an inline spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Name(String),
    Spec(ModelSpec),
}

impl ModelRef {
    /// Resolves to a concrete spec, reading files as needed.
    pub fn resolve(&self) -> Result<ModelSpec> {
        match self {
            ModelRef::Spec(s) => Ok(s.clone()),
            ModelRef::Name(name) if BUILTINS.contains(&name.as_str()) => Ok(ModelSpec {
                kind: "builtin".into(),
                name: name.clone(),
                params: Value::Null,
            }),
            ModelRef::Name(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::config(format!("model {path:?} is neither a builtin nor a readable file: {e}")))?;
                serde_json::from_str(&text).map_err(|e| Error::config(format!("{path}: {e}")))
            }
        }
    }
}

/// Loads a builtin by name or a JSON spec file, validated at random points.
pub fn load_model_spec(name_or_path: &str) -> Result<SpacetimeModel> {
    build_model(&ModelRef::Name(name_or_path.into()).resolve()?, 0)
}

// ---------------------------------------------------------------------------
// run configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_integ")]
    pub integrator: f64,
    #[serde(default = "default_solve")]
    pub solver: f64,
    #[serde(default = "default_closure")]
    pub closure: f64,
    #[serde(default = "default_selfconj")]
    pub self_conjugate: f64,
}

fn default_integ() -> f64 {
    1e-10
}
fn default_solve() -> f64 {
    1e-10
}
fn default_closure() -> f64 {
    1e-8
}
fn default_selfconj() -> f64 {
    1e-6
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            integrator: default_integ(),
            solver: default_solve(),
            closure: default_closure(),
            self_conjugate: default_selfconj(),
        }
    }
}

impl Tolerances {
    pub fn check(&self) -> Result<()> {
        let within = |name: &str, x: f64, lo: f64, hi: f64| {
            if x >= lo && x <= hi {
                Ok(())
            } else {
                Err(Error::config(format!("tolerance {name}={x:e} outside [{lo:e}, {hi:e}]")))
            }
        };
        within("integrator", self.integrator, 1e-14, 1e-3)?;
        within("solver", self.solver, 1e-12, 1e-3)?;
        within("closure", self.closure, 1e-14, 1.0)?;
        within("self_conjugate", self.self_conjugate, 1e-14, 1.0)
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol_integ: self.integrator,
            tol_solve: self.solver,
            ..SolveOptions::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub format: Format,
    /// CSV plot data destination.
    #[serde(default)]
    pub dump: Option<String>,
}

/// A deck element given by a word over the model's generators or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeckRef {
    Word(String),
    Inline(DeckElement),
}

impl DeckRef {
    fn resolve(&self, model: &SpacetimeModel) -> Result<DeckElement> {
        match self {
            DeckRef::Word(w) => model.deck_element(w),
            DeckRef::Inline(d) => {
                model.check_isometry(d, VALIDATION_SAMPLES, 0)?;
                Ok(d.clone())
            }
        }
    }
}

fn default_t_end() -> f64 {
    1.0
}
fn default_samples() -> usize {
    101
}
fn default_steps() -> usize {
    16
}
fn default_max_iter() -> usize {
    50
}
fn default_n_samples() -> usize {
    16
}
fn default_radius() -> f64 {
    0.5
}
fn default_max_steps() -> usize {
    5000
}
fn default_clifford_samples() -> usize {
    100
}
fn default_auto() -> Direction {
    Direction::Auto
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CommandSpec {
    Classify {
        base: Vec<f64>,
        vector: Vec<f64>,
    },
    Geodesic {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default = "default_t_end")]
        t_end: f64,
        #[serde(default = "default_samples")]
        samples: usize,
    },
    Expmap {
        base: Vec<f64>,
        vector: Vec<f64>,
    },
    Conjugate {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default = "default_t_end")]
        t_end: f64,
    },
    FindLoop {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default)]
        deck: Option<DeckRef>,
        #[serde(default)]
        free_base: bool,
        #[serde(default = "default_max_iter")]
        max_iter: usize,
    },
    Path {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default)]
        deck: Option<DeckRef>,
        target: Vec<f64>,
        #[serde(default = "default_steps")]
        steps: usize,
    },
    Bounds {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default)]
        deck: Option<DeckRef>,
        #[serde(default = "default_n_samples")]
        samples: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_steps")]
        steps: usize,
    },
    HillClimb {
        base: Vec<f64>,
        vector: Vec<f64>,
        #[serde(default)]
        deck: Option<DeckRef>,
        #[serde(default = "default_auto")]
        direction: Direction,
        #[serde(default)]
        delta0: Option<f64>,
        #[serde(default)]
        delta_min: Option<f64>,
        #[serde(default = "default_max_steps")]
        max_steps: usize,
    },
    Clifford {
        deck: DeckRef,
        #[serde(default = "default_clifford_samples")]
        samples: usize,
    },
    ClosedFromClifford {
        deck: DeckRef,
        base: Vec<f64>,
        #[serde(default = "default_clifford_samples")]
        samples: usize,
    },
}

impl CommandSpec {
    pub fn name(&self) -> &'static str {
        match self {
            CommandSpec::Classify { .. } => "classify",
            CommandSpec::Geodesic { .. } => "geodesic",
            CommandSpec::Expmap { .. } => "expmap",
            CommandSpec::Conjugate { .. } => "conjugate",
            CommandSpec::FindLoop { .. } => "find-loop",
            CommandSpec::Path { .. } => "path",
            CommandSpec::Bounds { .. } => "bounds",
            CommandSpec::HillClimb { .. } => "hill-climb",
            CommandSpec::Clifford { .. } => "clifford",
            CommandSpec::ClosedFromClifford { .. } => "closed-from-clifford",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelRef,
    pub command: CommandSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: OutputSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))
    }
}

// ---------------------------------------------------------------------------
// dispatch

/// Rendered result of a run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub report: Value,
    pub rendered: String,
    /// CSV plot data, when the command has any.
    pub plot_csv: Option<String>,
}

struct Produced {
    result: Value,
    provenance: &'static str,
    exit_code: i32,
    /// JSONL records preceding the summary line.
    records: Vec<Value>,
    table: Option<Table>,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| Error::config(format!("csv output failed: {e}"));
        w.write_record(&self.header).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|x| format!("{x:e}"))).map_err(err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn simple(result: Value, provenance: &'static str) -> Produced {
    Produced {
        result,
        provenance,
        exit_code: 0,
        records: Vec::new(),
        table: None,
    }
}

fn error_value(e: &Error) -> Value {
    let kind = match e {
        Error::Domain { .. } => "domain",
        Error::Config(_) => "config",
        Error::Integration { .. } => "integration",
        Error::NoConvergence { .. } => "no_convergence",
        Error::SingularJacobian { .. } => "singular_jacobian",
        Error::InversionFailure(_) => "inversion_failure",
        Error::DegenerateStep { .. } => "degenerate_step",
        Error::Precondition(_) => "precondition",
    };
    let mut v = json!({ "kind": kind, "message": e.to_string() });
    match e {
        Error::NoConvergence {
            best_base, best_comp, ..
        } => {
            v["best_base"] = json!(best_base);
            v["best_comp"] = json!(best_comp);
        }
        Error::Domain { point, .. } => v["point"] = json!(point),
        Error::SingularJacobian { base, cond } => {
            v["base"] = json!(base);
            v["cond"] = json!(cond);
        }
        Error::Integration { last_t, .. } => v["last_t"] = json!(last_t),
        _ => {}
    }
    v
}

/// JSON report for a loop: base, velocity, class, closing diagnostics.
pub fn loop_report(model: &SpacetimeModel, lp: &LoopCandidate, tol: &Tolerances) -> Value {
    let det = is_self_conjugate(model, lp, tol.self_conjugate, tol.integrator)
        .map(|(_, d)| json!(d))
        .unwrap_or(Value::Null);
    json!({
        "base": lp.v.base,
        "v": lp.v.comp,
        "deck": lp.deck.label,
        "residual_norm": lp.residual_norm,
        "length": lp.length,
        "closure_defect": lp.closure_defect,
        "self_conjugate_det": det,
    })
}

fn tangent(model: &SpacetimeModel, base: &[f64], vector: &[f64]) -> Result<TangentVec> {
    let v = TangentVec::new(base.to_vec(), vector.to_vec());
    model.check_tangent(&v)?;
    Ok(v)
}

fn start_loop(
    model: &SpacetimeModel,
    seed: &TangentVec,
    deck: &Option<DeckRef>,
    opts: &SolveOptions,
) -> Result<LoopCandidate> {
    match deck {
        Some(d) => find_loop(model, seed, &d.resolve(model)?, opts),
        None => find_any_loop(model, seed, opts),
    }
}

fn run_command(model: &SpacetimeModel, cfg: &RunConfig) -> Result<Produced> {
    let tol = &cfg.tolerances;
    let opts = tol.solve_options();
    Ok(match &cfg.command {
        CommandSpec::Classify { base, vector } => {
            let v = tangent(model, base, vector)?;
            let c = model.classify(&v)?;
            simple(
                json!({ "character": c.character, "orientation": c.orientation, "norm": model.norm(&v) }),
                "computed",
            )
        }
        CommandSpec::Geodesic {
            base,
            vector,
            t_end,
            samples,
        } => {
            let v = tangent(model, base, vector)?;
            let seg = integrate_geodesic(model, &v, *t_end, tol.integrator)?;
            let n = model.dim();
            let mut header = vec!["t".to_string()];
            header.extend((0..n).map(|i| format!("x{i}")));
            header.extend((0..n).map(|i| format!("v{i}")));
            let rows = seg
                .uniform_samples(*samples)
                .into_iter()
                .map(|(t, x, vel)| std::iter::once(t).chain(x).chain(vel).collect())
                .collect();
            Produced {
                result: json!({
                    "character": seg.character,
                    "t_end": seg.t_end,
                    "length": seg.length,
                    "endpoint": seg.endpoint(),
                    "end_velocity": seg.end_velocity(),
                    "energy_drift": seg.energy_drift(model),
                    "steps": seg.nodes().len().saturating_sub(1),
                }),
                provenance: "computed",
                exit_code: 0,
                records: Vec::new(),
                table: Some(Table { header, rows }),
            }
        }
        CommandSpec::Expmap { base, vector } => {
            let v = tangent(model, base, vector)?;
            simple(json!({ "point": exp_map(model, &v, tol.integrator)? }), "computed")
        }
        CommandSpec::Conjugate { base, vector, t_end } => {
            let v = tangent(model, base, vector)?;
            let seg = integrate_geodesic(model, &v, *t_end, tol.integrator)?;
            if !seg.character.is_causal() {
                return Err(Error::Precondition("conjugate points are searched along causal geodesics".into()));
            }
            let prop = JacobiPropagator::new(model, &seg)?;
            let pts = conjugate_points_of(&prop, 1e-10);
            let profile = determinant_profile(&prop, 400);
            Produced {
                result: json!({ "t_end": t_end, "conjugate_points": pts }),
                provenance: "computed",
                exit_code: 0,
                records: Vec::new(),
                table: Some(Table {
                    header: vec!["t".into(), "det".into()],
                    rows: profile.into_iter().map(|(t, d)| vec![t, d]).collect(),
                }),
            }
        }
        CommandSpec::FindLoop {
            base,
            vector,
            deck,
            free_base,
            max_iter,
        } => {
            let v = tangent(model, base, vector)?;
            let o = SolveOptions {
                free_base: *free_base,
                max_iter: *max_iter,
                ..opts
            };
            let lp = start_loop(model, &v, deck, &o)?;
            let mut r = loop_report(model, &lp, tol);
            r["iterations"] = json!(lp.iterations);
            simple(r, "certified-by-residual")
        }
        CommandSpec::Path {
            base,
            vector,
            deck,
            target,
            steps,
        } => {
            let v = tangent(model, base, vector)?;
            let start = start_loop(model, &v, deck, &opts)?;
            let path = continuation_path(model, &start, &BasePath::Segment(target.clone()), *steps, &opts)?;
            let nodes: Vec<Value> = path.nodes.iter().map(|n| loop_report(model, n, tol)).collect();
            let n = model.dim();
            let mut header = vec!["node".to_string()];
            header.extend((0..n).map(|i| format!("base{i}")));
            header.extend((0..n).map(|i| format!("v{i}")));
            header.extend(["length".into(), "closure_defect".into()]);
            let rows = path
                .nodes
                .iter()
                .enumerate()
                .map(|(i, nd)| {
                    std::iter::once(i as f64)
                        .chain(nd.v.base.iter().copied())
                        .chain(nd.v.comp.iter().copied())
                        .chain([nd.length, nd.closure_defect])
                        .collect()
                })
                .collect();
            Produced {
                exit_code: path.abort.as_ref().map_or(0, |a| a.exit_code),
                result: json!({
                    "nodes": nodes,
                    "base_curve": path.base_curve,
                    "continuous": path.continuous,
                    "max_jump": path.max_jump,
                    "abort": path.abort,
                }),
                provenance: "certified-by-residual",
                records: nodes,
                table: Some(Table { header, rows }),
            }
        }
        CommandSpec::Bounds {
            base,
            vector,
            deck,
            samples,
            radius,
            steps,
        } => {
            let v = tangent(model, base, vector)?;
            let start = start_loop(model, &v, deck, &opts)?;
            let sampler = Sampler {
                n_samples: *samples,
                radius: *radius,
                steps: *steps,
            };
            let b = class_length_bounds(model, &start, &sampler, cfg.seed, &opts)?;
            simple(
                json!({
                    "l_est": b.l_est,
                    "L_est": b.big_l_est,
                    "argmin": loop_report(model, &b.argmin, tol),
                    "argmax": loop_report(model, &b.argmax, tol),
                    "visited": b.visited,
                    "failures": b.failures,
                    "estimated": true,
                }),
                "estimated",
            )
        }
        CommandSpec::HillClimb {
            base,
            vector,
            deck,
            direction,
            delta0,
            delta_min,
            max_steps,
        } => {
            let v = tangent(model, base, vector)?;
            let start = start_loop(model, &v, deck, &opts)?;
            let params = ClimbParams {
                delta0: *delta0,
                delta_min: *delta_min,
                closure_tol: tol.closure,
                max_steps: *max_steps,
                self_conjugate_tol: tol.self_conjugate,
            };
            let tr = hill_climb(model, &start, *direction, &params, &opts)?;
            let steps: Vec<Value> = tr.steps.iter().map(|s| serde_json::to_value(s).expect("serializable")).collect();
            let n = model.dim();
            let mut header = vec!["step".to_string()];
            header.extend((0..n).map(|i| format!("base{i}")));
            header.extend(["length".into(), "delta".into(), "eta".into(), "closure_defect".into()]);
            let rows = tr
                .steps
                .iter()
                .map(|s| {
                    std::iter::once(s.step_index as f64)
                        .chain(s.base.iter().copied())
                        .chain([s.length, s.delta, s.eta, s.closure_defect])
                        .collect()
                })
                .collect();
            let exit_code = match tr.verdict {
                Verdict::ClosedGeodesic => 0,
                Verdict::ChartBoundaryAbort => 1,
                Verdict::SelfConjugateAbort | Verdict::BudgetExhausted => 2,
            };
            Produced {
                result: json!({
                    "start": loop_report(model, &start, tol),
                    "direction": tr.direction,
                    "verdict": tr.verdict,
                    "steps": steps,
                    "final": loop_report(model, &tr.final_loop, tol),
                    "closed": is_closed_geodesic(model, &tr.final_loop, tol.closure),
                    "polished": tr.polished,
                    "note": tr.note,
                }),
                provenance: "certified-by-residual",
                exit_code,
                records: steps,
                table: Some(Table { header, rows }),
            }
        }
        CommandSpec::Clifford { deck, samples } => {
            let d = deck.resolve(model)?;
            let rep = is_clifford_translation(model, &d, *samples, 1e-12, cfg.seed)?;
            simple(serde_json::to_value(&rep).expect("serializable"), "sampled")
        }
        CommandSpec::ClosedFromClifford { deck, base, samples } => {
            let d = deck.resolve(model)?;
            let lp = closed_geodesic_from_clifford(model, &d, base, *samples, 1e-12, cfg.seed)?;
            let mut r = loop_report(model, &lp, tol);
            r["closed"] = json!(is_closed_geodesic(model, &lp, tol.closure));
            simple(r, "certified-by-residual")
        }
    })
}

/// Runs a configuration and renders the report; never panics on user input.
pub fn execute(cfg: &RunConfig) -> Outcome {
    let resolved = cfg.model.resolve();
    let mut config = serde_json::to_value(cfg).expect("serializable");
    if let Ok(spec) = &resolved {
        config["model"] = serde_json::to_value(spec).expect("serializable");
    }
    let produced = cfg
        .tolerances
        .check()
        .and(resolved)
        .and_then(|spec| build_model(&spec, cfg.seed))
        .and_then(|model| run_command(&model, cfg));
    let mut report = json!({
        "command": cfg.command.name(),
        "config": config,
    });
    let (records, table, exit_code) = match produced {
        Ok(p) => {
            report["provenance"] = json!(p.provenance);
            report["result"] = p.result;
            (p.records, p.table, p.exit_code)
        }
        Err(e) => {
            report["error"] = error_value(&e);
            (Vec::new(), None, e.exit_code())
        }
    };
    report["exit_code"] = json!(exit_code);

    let plot_csv = table.as_ref().and_then(|t| t.to_csv().ok());
    let rendered = match cfg.output.format {
        Format::Json => serde_json::to_string_pretty(&report).expect("serializable") + "\n",
        Format::Jsonl => {
            let mut s = String::new();
            for r in &records {
                s += &serde_json::to_string(r).expect("serializable");
                s.push('\n');
            }
            s += &serde_json::to_string(&report).expect("serializable");
            s.push('\n');
            s
        }
        Format::Csv => match &plot_csv {
            Some(c) => c.clone(),
            None if exit_code != 0 => serde_json::to_string_pretty(&report).expect("serializable") + "\n",
            None => {
                let e = Error::config(format!("{} has no tabular output; use json or jsonl", cfg.command.name()));
                report["error"] = error_value(&e);
                report["exit_code"] = json!(1);
                return Outcome {
                    exit_code: 1,
                    rendered: serde_json::to_string_pretty(&report).expect("serializable") + "\n",
                    report,
                    plot_csv,
                };
            }
        },
    };
    Outcome {
        exit_code,
        report,
        rendered,
        plot_csv,
    }
}

// ---------------------------------------------------------------------------
// argument parsing

#[derive(Debug, Parser)]
#[command(name = "tgloop", version, about = "Closed timelike geodesic search on chart-defined Lorentzian manifolds")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Builtin model name or path to a JSON model spec.
    #[arg(long, global = true, default_value = "cylinder")]
    pub model: String,
    #[arg(long, global = true, default_value_t = 1e-10)]
    pub tol_integ: f64,
    #[arg(long, global = true, default_value_t = 1e-10)]
    pub tol_solve: f64,
    #[arg(long, global = true, default_value_t = 1e-8)]
    pub tol_closure: f64,
    #[arg(long, global = true, default_value_t = 1e-6)]
    pub tol_selfconj: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Report file; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<String>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write CSV plot data to this path.
    #[arg(long, global = true)]
    pub dump: Option<String>,
}

#[derive(Debug, Args)]
pub struct TangentArgs {
    /// Base point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub base: Vec<f64>,
    /// Vector components, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    pub vector: Vec<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Causal character and norm of a tangent vector.
    Classify(TangentArgs),
    /// Integrate a geodesic.
    Geodesic {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        #[arg(long, default_value_t = 101)]
        samples: usize,
    },
    /// Exponential map.
    Expmap(TangentArgs),
    /// Conjugate points along a causal geodesic.
    Conjugate {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
    },
    /// Solve for a timelike geodesic loop.
    FindLoop {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long)]
        deck: Option<String>,
        #[arg(long)]
        free_base: bool,
        #[arg(long, default_value_t = 50)]
        max_iter: usize,
    },
    /// Continue a loop along a straight base-point path.
    Path {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long)]
        deck: Option<String>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        target: Vec<f64>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Sampled length bounds over a loop class.
    Bounds {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long)]
        deck: Option<String>,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 0.5)]
        radius: f64,
        #[arg(long, default_value_t = 16)]
        steps: usize,
    },
    /// Stretch or shorten a loop until it closes up.
    HillClimb {
        #[command(flatten)]
        tv: TangentArgs,
        #[arg(long)]
        deck: Option<String>,
        #[arg(long, value_enum, default_value = "auto")]
        direction: DirectionArg,
        #[arg(long)]
        delta0: Option<f64>,
        #[arg(long)]
        delta_min: Option<f64>,
        #[arg(long, default_value_t = 5000)]
        max_steps: usize,
    },
    /// Clifford translation test for a deck element.
    Clifford {
        #[arg(long, default_value = "T")]
        deck: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Closed timelike geodesic from a Clifford translation.
    ClosedFromClifford {
        #[arg(long, default_value = "T")]
        deck: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        base: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Run a JSON configuration file.
    Run { config: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DirectionArg {
    Stretch,
    Shorten,
    Auto,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Stretch => Direction::Stretch,
            DirectionArg::Shorten => Direction::Shorten,
            DirectionArg::Auto => Direction::Auto,
        }
    }
}

/// Deck words may also be inline JSON elements.
fn deck_arg(s: &str) -> Result<DeckRef> {
    if s.trim_start().starts_with('{') {
        serde_json::from_str(s)
            .map(DeckRef::Inline)
            .map_err(|e| Error::config(format!("--deck: {e}")))
    } else {
        Ok(DeckRef::Word(s.to_string()))
    }
}

fn opt_deck(s: &Option<String>) -> Result<Option<DeckRef>> {
    s.as_deref().map(deck_arg).transpose()
}

impl Cli {
    /// The run configuration this command line denotes.
    pub fn to_config(&self) -> Result<RunConfig> {
        let g = &self.global;
        let command = match &self.command {
            Cmd::Run { config } => {
                let text = fs::read_to_string(config).map_err(|e| Error::config(format!("{config}: {e}")))?;
                return RunConfig::from_json(&text);
            }
            Cmd::Classify(tv) => CommandSpec::Classify {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
            },
            Cmd::Geodesic { tv, t_end, samples } => CommandSpec::Geodesic {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                t_end: *t_end,
                samples: *samples,
            },
            Cmd::Expmap(tv) => CommandSpec::Expmap {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
            },
            Cmd::Conjugate { tv, t_end } => CommandSpec::Conjugate {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                t_end: *t_end,
            },
            Cmd::FindLoop {
                tv,
                deck,
                free_base,
                max_iter,
            } => CommandSpec::FindLoop {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                deck: opt_deck(deck)?,
                free_base: *free_base,
                max_iter: *max_iter,
            },
            Cmd::Path { tv, deck, target, steps } => CommandSpec::Path {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                deck: opt_deck(deck)?,
                target: target.clone(),
                steps: *steps,
            },
            Cmd::Bounds {
                tv,
                deck,
                samples,
                radius,
                steps,
            } => CommandSpec::Bounds {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                deck: opt_deck(deck)?,
                samples: *samples,
                radius: *radius,
                steps: *steps,
            },
            Cmd::HillClimb {
                tv,
                deck,
                direction,
                delta0,
                delta_min,
                max_steps,
            } => CommandSpec::HillClimb {
                base: tv.base.clone(),
                vector: tv.vector.clone(),
                deck: opt_deck(deck)?,
                direction: (*direction).into(),
                delta0: *delta0,
                delta_min: *delta_min,
                max_steps: *max_steps,
            },
            Cmd::Clifford { deck, samples } => CommandSpec::Clifford {
                deck: deck_arg(deck)?,
                samples: *samples,
            },
            Cmd::ClosedFromClifford { deck, base, samples } => CommandSpec::ClosedFromClifford {
                deck: deck_arg(deck)?,
                base: base.clone(),
                samples: *samples,
            },
        };
        Ok(RunConfig {
            model: ModelRef::Name(g.model.clone()),
            command,
            tolerances: Tolerances {
                integrator: g.tol_integ,
                solver: g.tol_solve,
                closure: g.tol_closure,
                self_conjugate: g.tol_selfconj,
            },
            seed: g.seed,
            output: OutputSpec {
                path: g.out.clone(),
                format: g.format,
                dump: g.dump.clone(),
            },
        })
    }
}

fn write_file(path: &str, text: &str) -> Result<()> {
    if let Some(dir) = Path::new(path).parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::config(format!("{path}: {e}")))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::config(format!("{path}: {e}")))
}

/// Executes a configuration, writing the report and plot dump; returns the exit status.
pub fn run_config(cfg: &RunConfig) -> i32 {
    let out = execute(cfg);
    let mut code = out.exit_code;
    if let Some(dump) = &cfg.output.dump {
        match &out.plot_csv {
            Some(csv) => {
                if let Err(e) = write_file(dump, csv) {
                    eprintln!("tgloop: {e}");
                    code = code.max(1);
                }
            }
            None => log::warn!("{} produces no plot data; --dump ignored", cfg.command.name()),
        }
    }
    match &cfg.output.path {
        Some(p) => {
            if let Err(e) = write_file(p, &out.rendered) {
                eprintln!("tgloop: {e}");
                code = code.max(1);
            }
        }
        None => print!("{}", out.rendered),
    }
    if let Some(err) = out.report.get("error") {
        eprintln!("tgloop: {}", err["message"].as_str().unwrap_or("error"));
    }
    code
}

/// Entry point shared by the binary and tests.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match cli.to_config() {
        Ok(cfg) => run_config(&cfg),
        Err(e) => {
            eprintln!("tgloop: {e}");
            e.exit_code()
        }
    }
}

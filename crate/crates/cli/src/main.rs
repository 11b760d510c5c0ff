//! Command-line front end for latent-class IRT estimation.
//!
//! Subcommands: `aggregate` (CSV to response-matrix JSON), `fit` (estimate
//! one model), `test-dim` (likelihood-ratio test of a coarser dimension
//! partition), `cluster` (hierarchical item clustering), `grid` (fit a grid
//! of specifications and tabulate information criteria), and `simulate`
//! (draw data from known parameters).
//!
//! Conventions shared by every subcommand:
//! - item indices are 1-based in all input flags and all output;
//! - every number printed in a text summary is formatted exactly as it
//!   appears in the JSON artifact (shortest round-trip representation), so
//!   the two never disagree;
//! - JSON artifacts carry a `generated_at_unix_ms` field and are otherwise
//!   byte-identical across reruns of the same command;
//! - exit code 0 is success, 2 a validation or I/O error (the message names
//!   the offending flag or field), 3 an estimate that stopped at the
//!   iteration cap (artifacts are still written).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

use lcirt::{
    aggregate, aggregate_with_cats, class_item, fit, information_table, simulate, suggest_cut,
    test_dim, ClusterTrace, Difficulties, DiflConstraint, DiscConstraint, FitOptions, FitResult,
    ItemParams, LinkKind, ModelSpec, ParameterSet, RawResponses, ResponseMatrix, SimulationPlan,
    StartPolicy,
};

#[derive(Parser, Debug)]
#[command(name = "lcirt", version, about = "Latent-class IRT estimation and model selection")]
struct Cli {
    /// Worker threads for parallel sections (0 = all cores). Defaults to
    /// the LCIRT_THREADS environment variable, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Aggregate a response CSV into a response-matrix JSON file.
    Aggregate(AggregateArgs),
    /// Fit one model and report the estimate.
    Fit(FitArgs),
    /// Likelihood-ratio test of a coarser dimension partition.
    #[command(name = "test-dim")]
    TestDim(TestDimArgs),
    /// Hierarchical clustering of items by repeated dimension merges.
    Cluster(ClusterArgs),
    /// Fit a grid of specifications and tabulate information criteria.
    Grid(GridArgs),
    /// Draw responses from known parameters.
    Simulate(SimulateArgs),
}

/// Flags shared by every subcommand that reads response data.
#[derive(Args, Debug, Clone)]
struct InputArgs {
    /// Response data: a CSV of integer codes (one row per unit, one column
    /// per item), or a response-matrix JSON file (extension .json).
    #[arg(long)]
    input: PathBuf,
    /// Integer code that marks a missing response in CSV input.
    #[arg(long, default_value_t = 999)]
    missing_code: i64,
    /// Category count per item, e.g. "4,4,4" (default: inferred from the
    /// data as 1 + the largest observed code).
    #[arg(long, value_parser = parse_cats)]
    cats: Option<Cats>,
}

/// Model-shape flags shared by fit-like subcommands.
#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Number of latent classes.
    #[arg(long)]
    k: usize,
    /// Link function: none|global|local, or 0|1|2.
    #[arg(long, default_value = "global", value_parser = parse_link)]
    link: LinkKind,
    /// Discrimination constraint: constrained|free, or 0|1.
    #[arg(long, default_value = "constrained", value_parser = parse_disc)]
    disc: DiscConstraint,
    /// Difficulty constraint: free|rating-scale, or 0|1.
    #[arg(long, default_value = "free", value_parser = parse_difl)]
    difl: DiflConstraint,
}

/// Estimation-control flags.
#[derive(Args, Debug, Clone)]
struct EstimationArgs {
    /// Start policy: deterministic|random (codes 0|1), or the path to a
    /// JSON file to start from — a bare parameter set or any object with
    /// a "params" field, such as a fit artifact or a truth file.
    #[arg(long, default_value = "deterministic", value_parser = parse_start)]
    start: StartSpec,
    /// Random starts added after the deterministic one (with --start random).
    #[arg(long, default_value_t = 10)]
    n_starts: usize,
    /// Base seed for random starts.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Convergence tolerance on the relative log-likelihood change.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Iteration cap per start.
    #[arg(long, default_value_t = 5000)]
    max_iter: usize,
    /// Fisher-scoring sweeps per M-step.
    #[arg(long, default_value_t = 1)]
    fisher_sweeps: usize,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Destination for the response-matrix JSON (default: stdout, without
    /// the timestamp field).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Dimension partition as 1-based item groups, e.g. "1,3-5|2,6"
    /// (default: one dimension holding every item).
    #[arg(long, value_parser = parse_multi)]
    multi: Option<Multi>,
    #[command(flatten)]
    est: EstimationArgs,
    /// Destination for the full-estimate JSON artifact.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact format: json (full estimate) or text (this summary).
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct TestDimArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Dimension partition of the restricted model (the coarser one).
    #[arg(long, value_parser = parse_multi)]
    multi0: Multi,
    /// Dimension partition of the general model; every group of the
    /// restricted partition must be a union of groups of this one.
    #[arg(long, value_parser = parse_multi)]
    multi1: Multi,
    #[command(flatten)]
    est: EstimationArgs,
    /// Destination for the test-result JSON artifact.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact format: json or text.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    est: EstimationArgs,
    /// Significance level for the suggested dimension count.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Destination for the clustering artifact.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact format: json (full trace), dot (Graphviz dendrogram), or
    /// text (the printed merge table).
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Class counts to try, e.g. "1,2,3,4".
    #[arg(long, default_value = "1,2,3", value_parser = parse_usize_list)]
    k: UsizeList,
    /// Links to try, comma-separated: none|global|local or 0|1|2.
    #[arg(long, default_value = "global", value_parser = parse_link_list)]
    link: LinkList,
    /// Discrimination constraints to try, comma-separated.
    #[arg(long, default_value = "constrained", value_parser = parse_disc_list)]
    disc: DiscList,
    /// Difficulty constraints to try, comma-separated.
    #[arg(long, default_value = "free", value_parser = parse_difl_list)]
    difl: DiflList,
    /// Dimension partition applied to every linked specification
    /// (default: one dimension holding every item).
    #[arg(long, value_parser = parse_multi)]
    multi: Option<Multi>,
    #[command(flatten)]
    est: EstimationArgs,
    /// Destination for the table JSON artifact.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Artifact format: json or text.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Parameter JSON: either a bare parameter set (then --k, --cats and
    /// the other model flags are required) or any JSON object with "spec"
    /// and "params" fields, such as a fit artifact or a truth file.
    #[arg(long)]
    params: PathBuf,
    /// Number of latent classes (with a bare parameter file).
    #[arg(long)]
    k: Option<usize>,
    /// Link function: none|global|local, or 0|1|2.
    #[arg(long, default_value = "global", value_parser = parse_link)]
    link: LinkKind,
    /// Discrimination constraint: constrained|free, or 0|1.
    #[arg(long, default_value = "constrained", value_parser = parse_disc)]
    disc: DiscConstraint,
    /// Difficulty constraint: free|rating-scale, or 0|1.
    #[arg(long, default_value = "free", value_parser = parse_difl)]
    difl: DiflConstraint,
    /// Dimension partition as 1-based item groups (default: one dimension).
    #[arg(long, value_parser = parse_multi)]
    multi: Option<Multi>,
    /// Category count per item, e.g. "4,4,4" (with a bare parameter file).
    #[arg(long, value_parser = parse_cats)]
    cats: Option<Cats>,
    /// Units to draw.
    #[arg(long)]
    n: u64,
    /// Seed; every draw is a pure function of (seed, unit index).
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Per-cell probability of masking a response, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    missing_rate: f64,
    /// Integer code written for masked responses.
    #[arg(long, default_value_t = 999)]
    missing_code: i64,
    /// Destination CSV for the drawn responses.
    #[arg(long)]
    output: PathBuf,
    /// Optional destination for the truth JSON (spec, parameters, seed, and
    /// the 1-based true class of every unit).
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Json,
    Text,
    Dot,
}

// ---------------------------------------------------------------------------
// flag parsing

// Newtypes keep clap's value parsers unambiguous for list-valued flags.
#[derive(Clone, Debug)]
struct Multi(Vec<Vec<usize>>);
#[derive(Clone, Debug)]
struct Cats(Vec<u32>);
#[derive(Clone, Debug)]
struct UsizeList(Vec<usize>);
#[derive(Clone, Debug)]
struct LinkList(Vec<LinkKind>);
#[derive(Clone, Debug)]
struct DiscList(Vec<DiscConstraint>);
#[derive(Clone, Debug)]
struct DiflList(Vec<DiflConstraint>);

#[derive(Clone, Debug)]
enum StartSpec {
    Deterministic,
    Random,
    File(PathBuf),
}

fn parse_link(s: &str) -> std::result::Result<LinkKind, String> {
    s.parse()
}

fn parse_disc(s: &str) -> std::result::Result<DiscConstraint, String> {
    s.parse()
}

fn parse_difl(s: &str) -> std::result::Result<DiflConstraint, String> {
    s.parse()
}

fn parse_start(s: &str) -> std::result::Result<StartSpec, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "deterministic" | "0" => Ok(StartSpec::Deterministic),
        "random" | "1" => Ok(StartSpec::Random),
        "2" | "supplied" => Err(
            "a supplied start needs the path to a parameter JSON file: --start <file.json>".into(),
        ),
        _ => Ok(StartSpec::File(PathBuf::from(s))),
    }
}

/// "1,3-5|2,6" -> 0-based groups [[0,2,3,4],[1,5]].
fn parse_multi(s: &str) -> std::result::Result<Multi, String> {
    let mut groups = Vec::new();
    for group in s.split('|') {
        let mut g = Vec::new();
        for part in group.split(',') {
            let part = part.trim();
            let bad = |p: &str| format!("bad item number {p:?} in --multi (items are 1-based)");
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if a == 0 || b < a {
                    return Err(bad(part));
                }
                g.extend((a..=b).map(|v| v - 1));
            } else {
                let v: usize = part.parse().map_err(|_| bad(part))?;
                if v == 0 {
                    return Err(bad(part));
                }
                g.push(v - 1);
            }
        }
        groups.push(g);
    }
    Ok(Multi(groups))
}

fn parse_cats(s: &str) -> std::result::Result<Cats, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| format!("bad category count {:?} in --cats", p.trim()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(Cats)
}

fn parse_usize_list(s: &str) -> std::result::Result<UsizeList, String> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad class count {:?} in --k", p.trim()))
        })
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(UsizeList)
}

fn parse_link_list(s: &str) -> std::result::Result<LinkList, String> {
    s.split(',').map(|p| p.parse()).collect::<std::result::Result<Vec<_>, _>>().map(LinkList)
}

fn parse_disc_list(s: &str) -> std::result::Result<DiscList, String> {
    s.split(',').map(|p| p.parse()).collect::<std::result::Result<Vec<_>, _>>().map(DiscList)
}

fn parse_difl_list(s: &str) -> std::result::Result<DiflList, String> {
    s.split(',').map(|p| p.parse()).collect::<std::result::Result<Vec<_>, _>>().map(DiflList)
}

// ---------------------------------------------------------------------------
// shared plumbing

/// Shortest round-trip decimal form of `v` — the exact string serde_json
/// writes, so text summaries and JSON artifacts always agree.
fn fnum(v: f64) -> String {
    serde_json::Number::from_f64(v).map(|n| n.to_string()).unwrap_or_else(|| v.to_string())
}

fn join_nums(vals: &[f64]) -> String {
    vals.iter().map(|&v| fnum(v)).collect::<Vec<_>>().join(", ")
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Serializes an artifact with the `generated_at_unix_ms` field added.
/// Objects get the field directly; arrays are wrapped as `{.., "rows": []}`.
fn artifact_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).context("serializing the output artifact")?;
    let wrapped = match v {
        Value::Object(mut map) => {
            map.insert("generated_at_unix_ms".into(), now_ms().into());
            Value::Object(map)
        }
        other => serde_json::json!({ "generated_at_unix_ms": now_ms(), "rows": other }),
    };
    let mut text = serde_json::to_string_pretty(&wrapped)?;
    text.push('\n');
    Ok(text)
}

fn write_output(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing --output {}", path.display()))
}

fn load_matrix(input: &InputArgs) -> Result<ResponseMatrix> {
    let is_json = input.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(&input.input)
            .with_context(|| format!("reading --input {}", input.input.display()))?;
        let m = ResponseMatrix::from_json(&text)
            .with_context(|| format!("parsing --input {} as a response matrix", input.input.display()))?;
        if let Some(Cats(cats)) = &input.cats {
            if &m.cats != cats {
                bail!(
                    "--cats {:?} disagrees with the category counts {:?} stored in --input",
                    cats,
                    m.cats
                );
            }
        }
        Ok(m)
    } else {
        let raw = RawResponses::read_csv_path(&input.input, input.missing_code)
            .with_context(|| format!("reading --input {}", input.input.display()))?;
        let m = match &input.cats {
            Some(Cats(cats)) => aggregate_with_cats(&raw, cats),
            None => aggregate(&raw),
        }?;
        Ok(m)
    }
}

/// A spec from the shared model flags. `link = none` canonicalizes to the
/// plain latent-class model: the partition and both constraints are
/// meaningless there and are ignored.
fn build_spec(model: &ModelArgs, multi: Option<&Multi>, cats: Vec<u32>) -> Result<ModelSpec> {
    let spec = if model.link == LinkKind::None {
        ModelSpec::latent_class(model.k, cats)?
    } else {
        let groups = match multi {
            Some(Multi(g)) => g.clone(),
            None => vec![(0..cats.len()).collect()],
        };
        ModelSpec::new(model.k, model.link, model.disc, model.difl, groups, cats)?
    };
    Ok(spec)
}

fn build_options(est: &EstimationArgs) -> Result<FitOptions> {
    let start = match &est.start {
        StartSpec::Deterministic => StartPolicy::deterministic(),
        StartSpec::Random => StartPolicy::multi_start(est.n_starts, est.seed),
        StartSpec::File(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading --start parameter file {}", path.display()))?;
            let value: Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing --start {}", path.display()))?;
            // accept a fit artifact or truth file as well as bare parameters
            let inner = match value.get("params") {
                Some(p) => p.clone(),
                None => value,
            };
            let params: ParameterSet = serde_json::from_value(inner)
                .with_context(|| format!("parsing --start {} as a parameter set", path.display()))?;
            StartPolicy::from_params(params)
        }
    };
    Ok(FitOptions {
        start,
        tol: est.tol,
        max_iter: est.max_iter,
        fisher_sweeps: est.fisher_sweeps,
    })
}

// ---------------------------------------------------------------------------
// text renderings

fn fit_summary(f: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", f.spec.summary());
    let _ = writeln!(
        out,
        "data: {} units, {} items, {} distinct patterns",
        f.n,
        f.spec.n_items(),
        f.posteriors.len()
    );
    let _ = writeln!(out, "log-likelihood = {}", fnum(f.lk));
    let _ = writeln!(out, "free parameters = {}", f.np);
    let _ = writeln!(out, "AIC = {}", fnum(f.aic));
    let _ = writeln!(out, "BIC = {}", fnum(f.bic));
    let status = if f.converged { "converged" } else { "hit the iteration cap" };
    let _ = writeln!(
        out,
        "{status} after {} iterations, start {} of {} ({})",
        f.iterations,
        f.start_used + 1,
        f.start_table.len(),
        f.start_table[f.start_used].start
    );
    let _ = writeln!(out, "class weights: {}", join_nums(&f.params.pi));
    match &f.params.items {
        ItemParams::Irt { support, difficulties, discrimination } => {
            let _ = writeln!(out, "support points (one row per class):");
            for (c, row) in support.iter().enumerate() {
                let _ = writeln!(out, "  class {}: {}", c + 1, join_nums(row));
            }
            let _ = writeln!(out, "discriminations: {}", join_nums(discrimination));
            match difficulties {
                Difficulties::Free { beta } => {
                    let _ = writeln!(out, "difficulties (one row per item):");
                    for (j, row) in beta.iter().enumerate() {
                        let _ = writeln!(out, "  item {}: {}", j + 1, join_nums(row));
                    }
                }
                Difficulties::RatingScale { item, step } => {
                    let _ = writeln!(out, "item locations: {}", join_nums(item));
                    let _ = writeln!(out, "step thresholds: {}", join_nums(step));
                }
            }
        }
        ItemParams::Probs { .. } => {
            let _ = writeln!(
                out,
                "conditional response probabilities: see the JSON artifact (cond_probs)"
            );
        }
    }
    for w in &f.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    out
}

fn test_dim_summary(
    test: &lcirt::LrTestResult,
    fit0: &FitResult,
    fit1: &FitResult,
) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "restricted:  {}  log-likelihood = {} ({} parameters)",
        fit0.spec.summary(),
        fnum(test.lk0),
        test.np0
    );
    let _ = writeln!(
        out,
        "general:     {}  log-likelihood = {} ({} parameters)",
        fit1.spec.summary(),
        fnum(test.lk1),
        test.np1
    );
    let _ = writeln!(out, "deviance = {}", fnum(test.deviance));
    let _ = writeln!(out, "degrees of freedom = {}", test.df);
    let _ = writeln!(out, "p-value = {}", fnum(test.p_value));
    out
}

/// The merge table. Negative entries in the merge columns are original
/// items (1-based), positive entries the cluster formed at that step.
fn cluster_text(trace: &ClusterTrace, alpha: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "item clustering: {} items, baseline log-likelihood = {} ({} parameters)",
        trace.n_items,
        fnum(trace.initial_lk),
        trace.initial_np
    );
    let _ = writeln!(
        out,
        "merge entries: negative = original item, positive = cluster from that step"
    );
    let _ = writeln!(out, "step  merged         height  df  p-value");
    for (idx, step) in trace.steps.iter().enumerate() {
        let _ = writeln!(
            out,
            "{:>4}  {:>5} {:>5}  {}  {}  {}",
            idx + 1,
            step.merge.0,
            step.merge.1,
            fnum(step.height),
            step.df,
            fnum(step.p_value)
        );
    }
    let order = trace.order.iter().map(|&j| (j + 1).to_string()).collect::<Vec<_>>().join(" ");
    let _ = writeln!(out, "leaf order: {order}");
    let _ = writeln!(
        out,
        "suggested dimensions at alpha = {}: {}",
        fnum(alpha),
        suggest_cut(trace, alpha)
    );
    out
}

/// Graphviz rendering of the dendrogram: leaves `i<item>`, internal nodes
/// `s<step>` labelled with the merge height.
fn cluster_dot(trace: &ClusterTrace) -> String {
    let mut out = String::from("graph dendrogram {\n  node [shape=box];\n");
    for &j in &trace.order {
        let _ = writeln!(out, "  i{0} [label=\"item {0}\"];", j + 1);
    }
    for (idx, step) in trace.steps.iter().enumerate() {
        let _ = writeln!(
            out,
            "  s{} [label=\"height {}\\ndf {}, p {}\"];",
            idx + 1,
            fnum(step.height),
            step.df,
            fnum(step.p_value)
        );
        for code in [step.merge.0, step.merge.1] {
            let child = if code < 0 { format!("i{}", -code) } else { format!("s{code}") };
            let _ = writeln!(out, "  s{} -- {child};", idx + 1);
        }
    }
    out.push_str("}\n");
    out
}

fn grid_text(rows: &[lcirt::InfoRow]) -> String {
    let label_w = rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    let _ = writeln!(out, "{:<label_w$}  {:>4}  log-likelihood / AIC / BIC", "model", "np");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<label_w$}  {:>4}  {} / {} / {}",
            r.label,
            r.np,
            fnum(r.lk),
            fnum(r.aic),
            fnum(r.bic)
        );
    }
    out
}

// ---------------------------------------------------------------------------
// subcommands

fn run_aggregate(args: &AggregateArgs) -> Result<i32> {
    let matrix = load_matrix(&args.input)?;
    match &args.output {
        Some(path) => {
            write_output(path, &artifact_json(&matrix)?)?;
            println!(
                "aggregated {} units x {} items into {} distinct patterns -> {}",
                matrix.n_units(),
                matrix.cats.len(),
                matrix.n_patterns(),
                path.display()
            );
        }
        None => println!("{}", matrix.to_json()?),
    }
    Ok(0)
}

fn run_fit(args: &FitArgs) -> Result<i32> {
    if args.format == Format::Dot {
        bail!("--format dot is only available for the cluster subcommand");
    }
    let matrix = load_matrix(&args.input)?;
    let spec = build_spec(&args.model, args.multi.as_ref(), matrix.cats.clone())?;
    let opts = build_options(&args.est)?;
    let result = fit(&spec, &matrix, &opts)?;
    let summary = fit_summary(&result);
    if let Some(path) = &args.output {
        let text = match args.format {
            Format::Json => artifact_json(&result)?,
            _ => summary.clone(),
        };
        write_output(path, &text)?;
    }
    print!("{summary}");
    if result.converged {
        Ok(0)
    } else {
        eprintln!("warning: stopped before convergence; exit code 3");
        Ok(3)
    }
}

fn run_test_dim(args: &TestDimArgs) -> Result<i32> {
    if args.format == Format::Dot {
        bail!("--format dot is only available for the cluster subcommand");
    }
    let matrix = load_matrix(&args.input)?;
    let spec0 = build_spec(&args.model, Some(&args.multi0), matrix.cats.clone())?;
    let spec1 = build_spec(&args.model, Some(&args.multi1), matrix.cats.clone())?;
    let opts = build_options(&args.est)?;
    let (test, fit0, fit1) = test_dim(&spec0, &spec1, &matrix, &opts)?;
    let summary = test_dim_summary(&test, &fit0, &fit1);
    if let Some(path) = &args.output {
        let text = match args.format {
            Format::Json => artifact_json(&test)?,
            _ => summary.clone(),
        };
        write_output(path, &text)?;
    }
    print!("{summary}");
    if fit0.converged && fit1.converged {
        Ok(0)
    } else {
        eprintln!("warning: a fit stopped before convergence; exit code 3");
        Ok(3)
    }
}

fn run_cluster(args: &ClusterArgs) -> Result<i32> {
    let matrix = load_matrix(&args.input)?;
    let singles = (0..matrix.cats.len()).map(|j| vec![j]).collect();
    let spec = ModelSpec::new(
        args.model.k,
        args.model.link,
        args.model.disc,
        args.model.difl,
        singles,
        matrix.cats.clone(),
    )?;
    let opts = build_options(&args.est)?;
    let trace = class_item(&spec, &matrix, &opts, args.est.seed)?;
    let summary = cluster_text(&trace, args.alpha);
    if let Some(path) = &args.output {
        let text = match args.format {
            Format::Json => artifact_json(&trace)?,
            Format::Dot => cluster_dot(&trace),
            Format::Text => summary.clone(),
        };
        write_output(path, &text)?;
    }
    print!("{summary}");
    Ok(0)
}

fn run_grid(args: &GridArgs) -> Result<i32> {
    if args.format == Format::Dot {
        bail!("--format dot is only available for the cluster subcommand");
    }
    let matrix = load_matrix(&args.input)?;
    let mut specs: Vec<ModelSpec> = Vec::new();
    for &k in &args.k.0 {
        for &link in &args.link.0 {
            if link == LinkKind::None {
                let spec = ModelSpec::latent_class(k, matrix.cats.clone())?;
                if !specs.contains(&spec) {
                    specs.push(spec);
                }
                continue;
            }
            for &disc in &args.disc.0 {
                for &difl in &args.difl.0 {
                    let model = ModelArgs { k, link, disc, difl };
                    let spec = build_spec(&model, args.multi.as_ref(), matrix.cats.clone())?;
                    if !specs.contains(&spec) {
                        specs.push(spec);
                    }
                }
            }
        }
    }
    let opts = build_options(&args.est)?;
    // Independent fits; the collect preserves grid order regardless of
    // the thread count.
    use rayon::prelude::*;
    let fits: Vec<FitResult> = specs
        .par_iter()
        .map(|spec| fit(spec, &matrix, &opts))
        .collect::<lcirt::Result<Vec<_>>>()?;
    let rows = information_table(&fits.iter().collect::<Vec<_>>())?;
    let summary = grid_text(&rows);
    if let Some(path) = &args.output {
        let text = match args.format {
            Format::Json => artifact_json(&rows)?,
            _ => summary.clone(),
        };
        write_output(path, &text)?;
    }
    print!("{summary}");
    let laggards: Vec<String> =
        fits.iter().filter(|f| !f.converged).map(|f| f.spec.summary()).collect();
    if laggards.is_empty() {
        Ok(0)
    } else {
        eprintln!("warning: stopped before convergence: {}; exit code 3", laggards.join("; "));
        Ok(3)
    }
}

fn run_simulate(args: &SimulateArgs) -> Result<i32> {
    let text = std::fs::read_to_string(&args.params)
        .with_context(|| format!("reading --params {}", args.params.display()))?;
    let value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing --params {}", args.params.display()))?;
    let (spec, params) = match (value.get("spec"), value.get("params")) {
        (Some(s), Some(p)) => {
            let spec: ModelSpec = serde_json::from_value(s.clone())
                .context("parsing the \"spec\" field of --params")?;
            let params: ParameterSet = serde_json::from_value(p.clone())
                .context("parsing the \"params\" field of --params")?;
            (spec, params)
        }
        _ => {
            let params: ParameterSet = serde_json::from_value(value)
                .with_context(|| format!("parsing --params {} as a parameter set", args.params.display()))?;
            let k = args.k.context("--k is required when --params is a bare parameter set")?;
            let Cats(cats) = args.cats.clone().context(
                "--cats is required when --params is a bare parameter set",
            )?;
            let model = ModelArgs { k, link: args.link, disc: args.disc, difl: args.difl };
            (build_spec(&model, args.multi.as_ref(), cats)?, params)
        }
    };
    let plan = SimulationPlan {
        spec,
        params,
        n: args.n,
        seed: args.seed,
        missing_rate: args.missing_rate,
    };
    let drawn = simulate(&plan)?;
    let file = std::fs::File::create(&args.output)
        .with_context(|| format!("creating --output {}", args.output.display()))?;
    drawn.responses.write_csv(file, args.missing_code)?;
    if let Some(path) = &args.truth {
        let classes: Vec<usize> = drawn.classes.iter().map(|&c| c + 1).collect();
        let truth = serde_json::json!({
            "spec": &plan.spec,
            "params": &plan.params,
            "n": plan.n,
            "seed": plan.seed,
            "missing_rate": plan.missing_rate,
            "classes": classes,
        });
        write_output(path, &artifact_json(&truth)?)?;
    }
    println!(
        "simulated {} units x {} items (seed {}) -> {}",
        plan.n,
        plan.spec.n_items(),
        plan.seed,
        args.output.display()
    );
    Ok(0)
}

fn run(cli: Cli) -> Result<i32> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("LCIRT_THREADS") {
            Ok(v) => Some(
                v.parse::<usize>()
                    .map_err(|_| anyhow::anyhow!("LCIRT_THREADS must be an integer, got {v:?}"))?,
            ),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring --threads")?;
    }
    match &cli.command {
        Command::Aggregate(a) => run_aggregate(a),
        Command::Fit(a) => run_fit(a),
        Command::TestDim(a) => run_test_dim(a),
        Command::Cluster(a) => run_cluster(a),
        Command::Grid(a) => run_grid(a),
        Command::Simulate(a) => run_simulate(a),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(2);
        }
    }
}

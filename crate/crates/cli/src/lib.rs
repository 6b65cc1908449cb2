//! Command-line frontend: parse a DSL file or a named corpus variant, run
//! the fusion pipeline, execute fused and baseline plans, and emit plan /
//! verification / traffic reports in human or JSON form.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use tensorfuse::algebra::{check_algebra, run_online, run_stable, softmax_algebra, AlgebraReport};
use tensorfuse::eval::{eval_naive, Bindings};
use tensorfuse::exec::{execute, execute_unfused, ExecOptions, ExecutionTrace, TrafficReport};
use tensorfuse::grid::TileConfig;
use tensorfuse::ir::{OpKind, TensorGraph};
use tensorfuse::schedule::{schedule, KernelSchedule, SchedulerOptions};
use tensorfuse::tensor::{compare, DType, TensorData};
use tensorfuse::variants::{self, AttentionSpec};
use tensorfuse::{dsl, Error};

#[derive(Parser, Debug)]
#[command(name = "tensorfuse", version, about = "Fusion compiler for reduction-centric tensor programs")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Show the fused-kernel plan for a graph
    Compile(Common),
    /// Execute the fused plan and report outputs and traffic
    Run(Common),
    /// Execute fused vs the naive oracle across seeds and compare
    Verify(Common),
    /// Traffic comparison between fused and unfused execution
    Stats(StatsCmd),
    /// List the built-in variant corpus
    Corpus {
        #[arg(long, value_enum, default_value_t = Format::Human)]
        format: Format,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Human,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for DType {
    fn from(d: DtypeArg) -> DType {
        match d {
            DtypeArg::F32 => DType::F32,
            DtypeArg::F64 => DType::F64,
        }
    }
}

#[derive(Args, Debug)]
pub struct Common {
    /// Built-in variant name (e.g. vanilla, gqa, evoformer-n256)
    #[arg(long, conflicts_with = "input")]
    pub variant: Option<String>,
    /// DSL program file
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Tile-size hint, repeatable: --tile dim=size
    #[arg(long = "tile", value_name = "DIM=SIZE")]
    pub tile: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of seeds for verify
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    pub dtype: DtypeArg,
    /// Disable the algebraic online-reduction rewrite
    #[arg(long)]
    pub no_semantic: bool,
    /// Disable structural fusion with dimension demotion
    #[arg(long)]
    pub no_structural: bool,
    /// Disable tiling-aware dimension elimination
    #[arg(long)]
    pub no_tiled: bool,
    /// Include the full kernel plan in run/verify output
    #[arg(long)]
    pub emit_plan: bool,
    /// Record a per-block execution trace
    #[arg(long)]
    pub trace: bool,
    #[arg(long, value_enum, default_value_t = Format::Human)]
    pub format: Format,
    /// Test hook: drop the online rescale factor (verification must fail)
    #[arg(long, hide = true)]
    pub inject_rescale_bug: bool,
}

#[derive(Args, Debug)]
pub struct StatsCmd {
    #[command(flatten)]
    pub common: Common,
    /// Sweep sequence lengths for a variant: --sweep n=256,512,1024
    #[arg(long)]
    pub sweep: Option<String>,
}

// ---------------------------------------------------------------------------
// reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub name: String,
    pub members: Vec<String>,
    pub p_dims: Vec<(String, usize)>,
    pub r_dims: Vec<(String, usize)>,
    pub streamed: Vec<String>,
    pub grid_axes: Vec<(String, usize)>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionReport {
    pub kind: String,
    pub demoted: Vec<String>,
    pub eliminated: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub graph: String,
    pub semantic: bool,
    pub structural: bool,
    pub tiled: bool,
    pub kernel_count: usize,
    pub semantic_rewrites: usize,
    pub materialized_intermediates: Vec<String>,
    pub kernels: Vec<KernelReport>,
    pub fusions: Vec<FusionReport>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSummary {
    pub name: String,
    pub extents: Vec<usize>,
    pub sum: f64,
    pub first: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub graph: String,
    pub seed: u64,
    pub outputs: Vec<OutputSummary>,
    pub traffic: TrafficReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<ExecutionTrace>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSuite {
    pub vectors: usize,
    pub max_rel: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub graph: String,
    pub dtype: String,
    pub tolerance: f64,
    pub results: Vec<SeedResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub algebra: Option<AlgebraReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub online: Option<OnlineSuite>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub n: Option<usize>,
    pub fused: TrafficReport,
    pub unfused: TrafficReport,
    pub read_ratio: f64,
    pub intermediate_elements_elided: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub graph: String,
    pub rows: Vec<StatsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntryReport {
    pub name: String,
    pub heads: usize,
    pub kv_heads: usize,
    pub seq: usize,
    pub head_dim: usize,
}

// ---------------------------------------------------------------------------
// driver

struct Loaded {
    name: String,
    graph: TensorGraph,
    spec: Option<AttentionSpec>,
    tile_cfg: TileConfig,
}

fn usage_err(msg: impl Into<String>) -> Error {
    Error::Parse { line: 0, msg: msg.into() }
}

fn parse_variant_name(name: &str) -> (String, usize) {
    if let Some((base, n)) = name.rsplit_once("-n") {
        if let Ok(n) = n.parse::<usize>() {
            return (base.to_string(), n);
        }
    }
    (name.to_string(), 512)
}

fn load(c: &Common) -> Result<Loaded, Error> {
    let mut loaded = match (&c.variant, &c.input) {
        (Some(v), None) => {
            let (base, n) = parse_variant_name(v);
            let spec = variants::spec_for(&base, n, c.dtype.into())?;
            let graph = variants::build_variant(&spec)?;
            let tile_cfg = variants::tile_hints(&spec);
            Loaded { name: spec.name.clone(), graph, spec: Some(spec), tile_cfg }
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| usage_err(format!("cannot read {}: {e}", path.display())))?;
            let graph = dsl::parse(&text)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "graph".into());
            Loaded { name, graph, spec: None, tile_cfg: TileConfig::empty() }
        }
        _ => return Err(usage_err("exactly one of --variant or --input is required")),
    };
    for t in &c.tile {
        let (dim, size) = t
            .split_once('=')
            .ok_or_else(|| usage_err(format!("--tile expects dim=size, got {t:?}")))?;
        let size: usize = size
            .parse()
            .map_err(|_| usage_err(format!("--tile expects dim=size, got {t:?}")))?;
        loaded.tile_cfg.set(dim, size)?;
    }
    Ok(loaded)
}

fn scheduler_options(c: &Common, tile_cfg: &TileConfig) -> SchedulerOptions {
    SchedulerOptions {
        semantic: !c.no_semantic,
        structural: !c.no_structural,
        tiled: !c.no_tiled,
        tile_cfg: tile_cfg.clone(),
    }
}

fn exec_options(c: &Common, tile_cfg: &TileConfig) -> ExecOptions {
    let mut o = ExecOptions {
        tile_cfg: tile_cfg.clone(),
        trace: c.trace,
        inject_rescale_bug: c.inject_rescale_bug,
        ..ExecOptions::default()
    };
    if DType::from(c.dtype) == DType::F64 {
        // F64 tiles double the on-chip footprint; the default cap targets F32
        o.scratchpad_bytes *= 2;
    }
    o
}

fn make_bindings(loaded: &Loaded, seed: u64) -> Bindings {
    if let Some(spec) = &loaded.spec {
        return variants::bindings(&loaded.graph, spec, seed);
    }
    // DSL inputs: seeded uniform [−1, 1] per input node, in node order
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut b = Bindings::new();
    for node in &loaded.graph.nodes {
        if !matches!(node.kind, OpKind::Input) {
            continue;
        }
        let extents = loaded.graph.extents_of(&node.dims);
        let len: usize = extents.iter().product();
        let data: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        b.insert(node.name.clone(), TensorData::new(node.dims.clone(), extents, data));
    }
    b
}

fn plan_report(loaded: &Loaded, c: &Common, sched: &KernelSchedule) -> PlanReport {
    let g = &sched.graph;
    let kernels = sched
        .kernels
        .iter()
        .map(|k| {
            let grid_axes = k
                .sketch
                .p_dims
                .iter()
                .filter_map(|(d, e)| {
                    let trips = loaded.tile_cfg.trip_count(d, *e);
                    (trips > 1).then(|| (d.clone(), trips))
                })
                .collect();
            KernelReport {
                name: k.name.clone(),
                members: k.members.iter().map(|&m| g.nodes[m].name.clone()).collect(),
                p_dims: k.sketch.p_dims.clone(),
                r_dims: k.sketch.r_dims.clone(),
                streamed: k.body.streamed.clone(),
                grid_axes,
                outputs: k.outputs.iter().map(|&m| g.nodes[m].name.clone()).collect(),
            }
        })
        .collect();
    PlanReport {
        graph: loaded.name.clone(),
        semantic: !c.no_semantic,
        structural: !c.no_structural,
        tiled: !c.no_tiled,
        kernel_count: sched.kernel_count(),
        semantic_rewrites: semantic_rewrite_count(sched),
        materialized_intermediates: sched
            .materialized_intermediates()
            .iter()
            .map(|&m| g.nodes[m].name.clone())
            .collect(),
        kernels,
        fusions: sched
            .plans
            .iter()
            .map(|p| FusionReport {
                kind: format!("{:?}", p.kind),
                demoted: p.demoted.clone(),
                eliminated: p.eliminated.clone(),
            })
            .collect(),
        diagnostics: sched.diagnostics.clone(),
    }
}

fn semantic_rewrite_count(sched: &KernelSchedule) -> usize {
    use tensorfuse::ir::OnlineRole;
    sched
        .graph
        .nodes
        .iter()
        .filter(|n| matches!(n.kind, OpKind::Online { role: OnlineRole::Stat, .. }))
        .count()
}

fn tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F64 => 1e-10,
    }
}

fn print_plan_human(r: &PlanReport) {
    println!("graph {} — {} kernel(s)", r.graph, r.kernel_count);
    println!(
        "rewrites: semantic={} structural={} tiled={} (online rewrites applied: {})",
        r.semantic, r.structural, r.tiled, r.semantic_rewrites
    );
    for k in &r.kernels {
        let fmt = |dims: &[(String, usize)]| {
            dims.iter().map(|(d, e)| format!("{d}={e}")).collect::<Vec<_>>().join(", ")
        };
        println!("  {}: sketch [({}), ({})]", k.name, fmt(&k.p_dims), fmt(&k.r_dims));
        println!("    members: {}", k.members.join(", "));
        if !k.streamed.is_empty() {
            println!("    streamed: {}", k.streamed.join(", "));
        }
        if !k.grid_axes.is_empty() {
            let g: Vec<String> =
                k.grid_axes.iter().map(|(d, t)| format!("{d}×{t}")).collect();
            println!("    grid: {}", g.join(" · "));
        }
        println!("    writes: {}", k.outputs.join(", "));
    }
    for f in &r.fusions {
        let mut extra = String::new();
        if !f.demoted.is_empty() {
            extra += &format!(" demoted=[{}]", f.demoted.join(", "));
        }
        if !f.eliminated.is_empty() {
            extra += &format!(" eliminated=[{}]", f.eliminated.join(", "));
        }
        println!("  fusion: {}{extra}", f.kind);
    }
    if !r.materialized_intermediates.is_empty() {
        println!("  materialized intermediates: {}", r.materialized_intermediates.join(", "));
    }
    for d in &r.diagnostics {
        println!("  note: {d}");
    }
}

fn emit<T: Serialize>(format: Format, report: &T, human: impl FnOnce(&T)) {
    match format {
        Format::Json => {
            println!("{}", serde_json::to_string_pretty(report).expect("serializable report"))
        }
        Format::Human => human(report),
    }
}

fn cmd_compile(c: &Common) -> Result<ExitCode, Error> {
    let loaded = load(c)?;
    let sched = schedule(&loaded.graph, &softmax_algebra(), &scheduler_options(c, &loaded.tile_cfg))?;
    let report = plan_report(&loaded, c, &sched);
    emit(c.format, &report, print_plan_human);
    Ok(ExitCode::SUCCESS)
}

fn cmd_run(c: &Common) -> Result<ExitCode, Error> {
    let loaded = load(c)?;
    let sched = schedule(&loaded.graph, &softmax_algebra(), &scheduler_options(c, &loaded.tile_cfg))?;
    let bindings = make_bindings(&loaded, c.seed);
    let (outputs, traffic, trace) = execute(&sched, &bindings, &exec_options(c, &loaded.tile_cfg))?;
    let report = RunReport {
        graph: loaded.name.clone(),
        seed: c.seed,
        outputs: outputs
            .iter()
            .map(|(name, t)| OutputSummary {
                name: name.clone(),
                extents: t.extents.clone(),
                sum: t.data.iter().sum(),
                first: t.data.iter().take(4).copied().collect(),
            })
            .collect(),
        traffic,
        plan: c.emit_plan.then(|| plan_report(&loaded, c, &sched)),
        trace,
    };
    emit(c.format, &report, |r| {
        println!("graph {} seed {}", r.graph, r.seed);
        for o in &r.outputs {
            println!("  {} {:?} sum={:.6} first={:?}", o.name, o.extents, o.sum, o.first);
        }
        print_traffic_human(&r.traffic, "fused");
        if let Some(p) = &r.plan {
            print_plan_human(p);
        }
        if let Some(t) = &r.trace {
            println!("  trace: {} block(s)", t.blocks.len());
        }
    });
    Ok(ExitCode::SUCCESS)
}

fn online_suite(seed: u64) -> OnlineSuite {
    let alg = softmax_algebra();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let vectors = 500;
    for _ in 0..vectors {
        let n = rng.gen_range(1..=512);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (ms, ds) = run_stable(&x, &alg).expect("nonempty");
        let (mo, d_o) = run_online(&x, &alg).expect("nonempty");
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1.0);
        max_rel = max_rel.max(rel(ms, mo)).max(rel(ds, d_o));
    }
    OnlineSuite { vectors, max_rel, pass: max_rel <= 1e-12 }
}

fn cmd_verify(c: &Common) -> Result<ExitCode, Error> {
    let loaded = load(c)?;
    let sched = schedule(&loaded.graph, &softmax_algebra(), &scheduler_options(c, &loaded.tile_cfg))?;
    let dtype: DType = c.dtype.into();
    let tol = tolerance(dtype);
    let eopts = exec_options(c, &loaded.tile_cfg);
    let mut results = Vec::new();
    let mut pass = true;
    for s in 0..c.seeds as u64 {
        let seed = c.seed + s;
        let bindings = make_bindings(&loaded, seed);
        let (fused, _, _) = execute(&sched, &bindings, &eopts)?;
        let naive = eval_naive(&loaded.graph, &bindings)?;
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        for (name, t) in &fused {
            let m = compare(t, &naive[name])?;
            max_abs = max_abs.max(m.max_abs);
            max_rel = max_rel.max(m.max_rel);
        }
        let ok = max_rel <= tol;
        pass &= ok;
        results.push(SeedResult { seed, max_abs, max_rel, pass: ok });
    }
    let semantic_fired = semantic_rewrite_count(&sched) > 0;
    let (algebra, online) = if semantic_fired {
        let samples = [-4.0, -1.0, -0.25, 0.0, 0.5, 1.0, 3.0];
        let report = check_algebra(&softmax_algebra(), &samples, 1e-9)?;
        pass &= report.passed;
        let suite = online_suite(c.seed);
        pass &= suite.pass;
        (Some(report), Some(suite))
    } else {
        (None, None)
    };
    let report = VerifyReport {
        graph: loaded.name.clone(),
        dtype: format!("{dtype:?}").to_lowercase(),
        tolerance: tol,
        results,
        algebra,
        online,
        pass,
    };
    emit(c.format, &report, |r| {
        println!("graph {} dtype {} tolerance {:e}", r.graph, r.dtype, r.tolerance);
        for s in &r.results {
            println!(
                "  seed {}: max_abs={:.3e} max_rel={:.3e} {}",
                s.seed,
                s.max_abs,
                s.max_rel,
                if s.pass { "ok" } else { "FAIL" }
            );
        }
        if let Some(a) = &r.algebra {
            println!("  algebra {}: {}", a.algebra, if a.passed { "ok" } else { "FAIL" });
        }
        if let Some(o) = &r.online {
            println!(
                "  online vs stable over {} vectors: max_rel={:.3e} {}",
                o.vectors,
                o.max_rel,
                if o.pass { "ok" } else { "FAIL" }
            );
        }
        println!("{}", if r.pass { "PASS" } else { "FAIL" });
    });
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn print_traffic_human(t: &TrafficReport, label: &str) {
    println!(
        "  {label}: {} kernel(s), reads={} writes={} intermediates={} ({} bytes)",
        t.kernel_count,
        t.global_reads,
        t.global_writes,
        t.intermediate_elements,
        t.intermediate_bytes_materialized
    );
}

fn stats_row(loaded: &Loaded, c: &Common, n: Option<usize>) -> Result<StatsRow, Error> {
    let sched = schedule(&loaded.graph, &softmax_algebra(), &scheduler_options(c, &loaded.tile_cfg))?;
    let bindings = make_bindings(loaded, c.seed);
    let (_, fused, _) = execute(&sched, &bindings, &exec_options(c, &loaded.tile_cfg))?;
    let (_, unfused) = execute_unfused(&loaded.graph, &bindings)?;
    let read_ratio = if fused.global_reads > 0 {
        unfused.global_reads as f64 / fused.global_reads as f64
    } else {
        0.0
    };
    Ok(StatsRow {
        n,
        intermediate_elements_elided: unfused.intermediate_elements - fused.intermediate_elements
            .min(unfused.intermediate_elements),
        read_ratio,
        fused,
        unfused,
    })
}

fn cmd_stats(s: &StatsCmd) -> Result<ExitCode, Error> {
    let c = &s.common;
    let mut rows = Vec::new();
    let name;
    if let Some(sweep) = &s.sweep {
        let variant = c
            .variant
            .as_ref()
            .ok_or_else(|| usage_err("--sweep requires --variant"))?;
        let (base, _) = parse_variant_name(variant);
        let ns = sweep
            .strip_prefix("n=")
            .ok_or_else(|| usage_err("--sweep expects n=a,b,c"))?;
        name = base.clone();
        for n in ns.split(',') {
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| usage_err(format!("--sweep expects integers, got {n:?}")))?;
            let spec = variants::spec_for(&base, n, c.dtype.into())?;
            let graph = variants::build_variant(&spec)?;
            let mut loaded = Loaded {
                name: spec.name.clone(),
                graph,
                spec: Some(spec),
                tile_cfg: variants::tile_hints(
                    &variants::spec_for(&base, n, c.dtype.into())?,
                ),
            };
            for t in &c.tile {
                if let Some((dim, size)) = t.split_once('=') {
                    loaded.tile_cfg.set(dim, size.parse().map_err(|_| {
                        usage_err(format!("--tile expects dim=size, got {t:?}"))
                    })?)?;
                }
            }
            rows.push(stats_row(&loaded, c, Some(n))?);
        }
    } else {
        let loaded = load(c)?;
        name = loaded.name.clone();
        rows.push(stats_row(&loaded, c, None)?);
    }
    let report = StatsReport { graph: name, rows };
    emit(c.format, &report, |r| {
        println!("graph {}", r.graph);
        for row in &r.rows {
            if let Some(n) = row.n {
                println!("n = {n}:");
            }
            print_traffic_human(&row.fused, "fused");
            print_traffic_human(&row.unfused, "unfused");
            println!(
                "  read ratio (unfused/fused) = {:.3}, intermediates elided = {}",
                row.read_ratio, row.intermediate_elements_elided
            );
        }
    });
    Ok(ExitCode::SUCCESS)
}

fn cmd_corpus(format: Format) -> ExitCode {
    let entries: Vec<CorpusEntryReport> = variants::corpus(DType::F32)
        .iter()
        .map(|s| CorpusEntryReport {
            name: s.name.clone(),
            heads: s.heads,
            kv_heads: s.kv_heads,
            seq: s.seq,
            head_dim: s.head_dim,
        })
        .collect();
    emit(format, &entries, |es| {
        for e in es {
            println!(
                "{}: heads={} kv_heads={} n={} d={}",
                e.name, e.heads, e.kv_heads, e.seq, e.head_dim
            );
        }
    });
    ExitCode::SUCCESS
}

/// Exit codes: 0 ok, 1 verification/execution failure, 2 usage/parse error.
pub fn main_impl() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Compile(c) => cmd_compile(c),
        Cmd::Run(c) => cmd_run(c),
        Cmd::Verify(c) => cmd_verify(c),
        Cmd::Stats(s) => cmd_stats(s),
        Cmd::Corpus { format } => return cmd_corpus(*format),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Parse { .. } | Error::UnknownVariant(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

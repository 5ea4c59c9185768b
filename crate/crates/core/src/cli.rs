//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 configuration or environment error, 2 quality gate
//! failure, 3 wall-clock budget exhausted, 4 replay divergence.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::cache::SemanticCache;
use crate::eval::EvalError;
use crate::expand::{expand, ExpandServices};
use crate::gateway::{FmRole, GatewayError};
use crate::job::{JobConfig, Overrides, RunSpec};
use crate::model::{content_key, ProblemInstance};
use crate::optimizer::engine::{resume_point, RunStats};
use crate::optimizer::rng::stream;
use crate::optimizer::{compile, CompilationResult, LiveOracle, OptError, Oracle, RunOptions, RunOutcome};
use crate::trace::checkpoint::cache_snapshot_path;
use crate::trace::{replay, Report, ReportFormat, TraceError, TraceWriter};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_GATE_FAILED: i32 = 2;
pub const EXIT_BUDGET: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "intentc", version, about = "Compile an intent into an optimized prompt template and component parameters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the optimizer on a job configuration.
    Compile {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        generations: Option<u32>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long, value_enum)]
        cache: Option<Switch>,
        #[arg(long)]
        cache_threshold: Option<f64>,
        #[arg(long)]
        holdout_ratio: Option<f64>,
        #[arg(long)]
        gate_threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this generation's checkpoint.
        #[arg(long, hide = true)]
        halt_after: Option<u32>,
    },
    /// Re-execute a recorded run from its trace and check it reproduces.
    Replay {
        trace: PathBuf,
        /// Also save the regenerated trace here.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Summarize one or more traces.
    Report {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Generate additional problem instances for a job's scenario.
    Expand {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name) and executes the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match cli.command {
        Command::Compile {
            config,
            seed,
            generations,
            population,
            cache,
            cache_threshold,
            holdout_ratio,
            gate_threshold,
            out,
            resume,
            halt_after,
        } => {
            let overrides = Overrides {
                seed,
                generations,
                population,
                cache: cache.map(|s| matches!(s, Switch::On)),
                cache_threshold,
                holdout_ratio,
                gate_threshold,
                out,
            };
            cmd_compile(&config, &overrides, resume, halt_after)
        }
        Command::Replay { trace, write } => cmd_replay(&trace, write.as_deref()),
        Command::Report { traces, format } => {
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::Json => ReportFormat::Json,
            };
            cmd_report(&traces, format)
        }
        Command::Expand { config, seed, out } => cmd_expand(&config, seed, out.as_deref()),
    }
}

fn fail(message: impl std::fmt::Display) -> i32 {
    eprintln!("error: {message}");
    EXIT_ERROR
}

fn load_job(config: &Path, overrides: &Overrides) -> Result<(JobConfig, RunSpec), String> {
    let (mut job, base) = JobConfig::load(config).map_err(|e| e.to_string())?;
    job.apply(overrides);
    let scenario = job.load_scenario(&base).map_err(|e| e.to_string())?;
    let spec = job.run_spec(scenario).map_err(|e| e.to_string())?;
    Ok((job, spec))
}

/// Paths of a compile run's artifacts.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub dir: PathBuf,
    pub trace: PathBuf,
    pub checkpoints: PathBuf,
    pub best_template: PathBuf,
    pub pareto: PathBuf,
    pub report: PathBuf,
}

impl RunLayout {
    pub fn new(out: &Path, run_id: &str) -> Self {
        let dir = out.join(run_id);
        RunLayout {
            trace: dir.join("trace.jsonl"),
            checkpoints: dir.join("checkpoints"),
            best_template: dir.join("best_template.txt"),
            pareto: dir.join("pareto.json"),
            report: dir.join("report.txt"),
            dir,
        }
    }
}

fn open_cache(path: &Path, spec: &RunSpec, warnings: &mut Vec<String>) -> SemanticCache {
    let (threshold, capacity) = (spec.cache.threshold, spec.cache.capacity);
    if !path.exists() {
        return SemanticCache::new(threshold, capacity);
    }
    match SemanticCache::load(path, threshold, capacity) {
        Ok(c) => c,
        Err(e) => {
            warnings.push(format!("ignoring unreadable cache file {}: {e}", path.display()));
            SemanticCache::new(threshold, capacity)
        }
    }
}

fn cmd_compile(config: &Path, overrides: &Overrides, resume: bool, halt_after: Option<u32>) -> i32 {
    let (job, spec) = match load_job(config, overrides) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let layout = RunLayout::new(&job.output_dir, &spec.run_id());
    if let Err(e) = fs::create_dir_all(&layout.checkpoints) {
        return fail(format!("cannot create {}: {e}", layout.checkpoints.display()));
    }
    let cache_path = job.cache.path.clone().unwrap_or_else(|| job.output_dir.join("cache.bin"));
    let mut warnings = Vec::new();

    let resumed = if resume {
        match resume_point(&layout.checkpoints, &spec) {
            Ok(p) => p,
            Err(e) => return fail(e),
        }
    } else {
        None
    };
    let (cache, mut trace, state) = match resumed {
        Some((g, body)) => {
            let cache = if spec.cache.enabled {
                let snap = cache_snapshot_path(&layout.checkpoints, g);
                match SemanticCache::load(&snap, spec.cache.threshold, spec.cache.capacity) {
                    Ok(c) => {
                        if let Some(s) = body.cache_stats.clone() {
                            c.set_stats(s);
                        }
                        Some(c)
                    }
                    Err(e) => return fail(format!("checkpoint cache snapshot {}: {e}", snap.display())),
                }
            } else {
                None
            };
            let trace = match TraceWriter::resume(&layout.trace, body.trace_len, &body.chain, body.elapsed_ms) {
                Ok(t) => t,
                Err(e) => return fail(e),
            };
            eprintln!("resuming {} after generation {g}", spec.run_id());
            (cache, trace, Some(body.state))
        }
        None => {
            let cache = spec.cache.enabled.then(|| open_cache(&cache_path, &spec, &mut warnings));
            let trace = match TraceWriter::create(&layout.trace) {
                Ok(t) => t,
                Err(e) => return fail(e),
            };
            (cache, trace, None)
        }
    };
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let oracle = match LiveOracle::new(&spec) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let opts = RunOptions { checkpoint_dir: Some(layout.checkpoints.clone()), halt_after, warnings, resume: state };
    let outcome = compile(&spec, &oracle, cache.as_ref(), &mut trace, opts);
    let _ = trace.finish();
    match outcome {
        Ok(RunOutcome::Halted { generation }) => {
            eprintln!("halted after generation {generation}; continue with --resume");
            EXIT_OK
        }
        Ok(RunOutcome::Completed(result, stats)) => {
            if let Some(c) = &cache {
                if let Err(e) = c.persist(&cache_path) {
                    eprintln!("warning: could not save cache to {}: {e}", cache_path.display());
                }
            }
            if let Err(e) = write_artifacts(&layout, &result) {
                return fail(e);
            }
            print_summary(&layout, &result, &stats, &oracle);
            exit_code(&result)
        }
        Err(e) => fail(e),
    }
}

/// Gate failure takes precedence over budget exhaustion.
pub fn exit_code(result: &CompilationResult) -> i32 {
    if !result.gate.pass {
        EXIT_GATE_FAILED
    } else if result.budget_exhausted {
        EXIT_BUDGET
    } else {
        EXIT_OK
    }
}

fn write_artifacts(layout: &RunLayout, result: &CompilationResult) -> Result<(), String> {
    let io = |p: &Path, e: std::io::Error| format!("cannot write {}: {e}", p.display());
    fs::write(&layout.best_template, result.best.template.to_text()).map_err(|e| io(&layout.best_template, e))?;
    let front = serde_json::to_vec_pretty(&result.pareto_front).expect("front serializes");
    fs::write(&layout.pareto, front).map_err(|e| io(&layout.pareto, e))?;
    let report = Report::from_paths(&[&layout.trace]).map_err(|e| e.to_string())?;
    fs::write(&layout.report, report.render(ReportFormat::Text)).map_err(|e| io(&layout.report, e))
}

fn print_summary(layout: &RunLayout, result: &CompilationResult, stats: &RunStats, oracle: &LiveOracle) {
    let best = result.best.objectives.as_ref().map(|o| o.0.clone()).unwrap_or_default();
    let named: Vec<String> = result.objectives.iter().zip(&best).map(|(s, v)| format!("{}={v}", s.name)).collect();
    println!("run directory: {}", layout.dir.display());
    println!("best {}: {}", result.best.id, named.join(" "));
    println!(
        "generations: {}  evaluations: {}  fm completions: {}",
        result.generations_run,
        stats.counters.evaluations,
        oracle.completions()
    );
    println!(
        "quality gate: {} (lower bound {:.4}, threshold {})",
        if result.gate.pass { "pass" } else { "FAIL" },
        result.gate.lower_bound,
        result.gate.threshold
    );
    if result.budget_exhausted {
        println!("wall-clock budget exhausted; result is best so far");
    }
}

fn cmd_replay(trace: &Path, write: Option<&Path>) -> i32 {
    match replay(trace, write) {
        Ok(out) => {
            println!("replay reproduced {} events; best {}", out.events, out.result.best.id);
            EXIT_OK
        }
        Err(OptError::Trace(TraceError::Divergence { seq, reason })) => {
            println!("divergence at seq {seq}: {reason}");
            EXIT_DIVERGENCE
        }
        Err(e) => fail(e),
    }
}

fn cmd_report(traces: &[PathBuf], format: ReportFormat) -> i32 {
    match Report::from_paths(traces) {
        Ok(r) => {
            print!("{}", r.render(format));
            EXIT_OK
        }
        Err(e) => fail(e),
    }
}

struct CliExpand<'a> {
    oracle: &'a LiveOracle,
}

impl ExpandServices for CliExpand<'_> {
    fn complete(&mut self, prompt: &str) -> Result<String, GatewayError> {
        self.oracle.complete(FmRole::Evaluator, prompt).map(|c| c.text)
    }

    fn validate(&mut self, instance: &ProblemInstance) -> Result<bool, EvalError> {
        let key = content_key(&serde_json::to_vec(instance).expect("instance serializes"));
        self.oracle.validate(&key, instance)
    }

    fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
    }
}

fn cmd_expand(config: &Path, seed: Option<u64>, out: Option<&Path>) -> i32 {
    let overrides = Overrides { seed, ..Overrides::default() };
    let (_, spec) = match load_job(config, &overrides) {
        Ok(v) => v,
        Err(e) => return fail(e),
    };
    let Some(cfg) = spec.expansion.clone() else {
        return fail("the job configuration has no `expansion` section");
    };
    let oracle = match LiveOracle::new(&spec) {
        Ok(o) => o,
        Err(e) => return fail(e),
    };
    let mut rng = stream(spec.optimizer.master_seed, "expansion", 0);
    let mut services = CliExpand { oracle: &oracle };
    let added = match expand(&spec.scenario.intent, &spec.scenario.instances, &cfg, &mut rng, &mut services) {
        Ok(a) => a,
        Err(e) => return fail(e),
    };
    let json = serde_json::to_string_pretty(&added).expect("instances serialize") + "\n";
    match out {
        Some(p) => {
            if let Err(e) = fs::write(p, json) {
                return fail(format!("cannot write {}: {e}", p.display()));
            }
            eprintln!("wrote {} instances to {}", added.len(), p.display());
        }
        None => print!("{json}"),
    }
    EXIT_OK
}

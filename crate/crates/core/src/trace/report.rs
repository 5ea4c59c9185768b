//! Human and machine readable summaries of one or more traces.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EventKind, TraceError, TraceLog};
use crate::cache::{CacheStats, OpKind, OpStats};
use crate::eval::QualityGateResult;
use crate::model::Direction;
use crate::optimizer::engine::{EvalBlob, RunStartBlob};
use crate::optimizer::{CompilationResult, GenerationSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}` (expected text or json)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub direction: Direction,
    pub initial: f64,
    pub optimized: f64,
    /// Relative gain in the objective's own direction, in percent.
    pub improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontEntry {
    pub id: String,
    pub objectives: Vec<f64>,
    pub template: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub complete: bool,
    pub metrics: Vec<MetricRow>,
    pub pareto_front: Vec<FrontEntry>,
    pub history: Vec<GenerationSummary>,
    pub cache: BTreeMap<String, OpStats>,
    pub fm_calls: u64,
    pub tokens: u64,
    pub wall_time_ms: u64,
    pub generations_run: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<QualityGateResult>,
    pub budget_exhausted: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub runs: Vec<RunReport>,
}

fn improvement(direction: Direction, initial: f64, optimized: f64) -> Option<f64> {
    if initial == 0.0 || !initial.is_finite() || !optimized.is_finite() {
        return None;
    }
    let gain = match direction {
        Direction::Maximize => optimized - initial,
        Direction::Minimize => initial - optimized,
    };
    Some(gain / initial.abs() * 100.0)
}

fn partial_cache(log: &TraceLog) -> CacheStats {
    let mut stats = CacheStats::default();
    for ev in &log.events {
        let hit = match ev.kind {
            EventKind::CacheHit => true,
            EventKind::CacheMiss => false,
            _ => continue,
        };
        let Some(op) = ev.data.get("op").and_then(|v| serde_json::from_value::<OpKind>(v.clone()).ok()) else { continue };
        let s = stats.by_op.entry(op).or_default();
        if hit {
            s.hits += 1;
            if ev.data.get("match").and_then(Value::as_str) == Some("semantic") {
                s.semantic_hits += 1;
            }
        } else {
            s.misses += 1;
        }
    }
    stats
}

impl RunReport {
    pub fn from_log(log: &TraceLog) -> Result<Self, TraceError> {
        let start = log.first(EventKind::RunStart).ok_or(TraceError::Incomplete)?;
        let start_blob: RunStartBlob = log.blob_json(start.inputs.as_deref().ok_or(TraceError::Incomplete)?)?;
        let specs = start_blob.spec.scenario.objectives.clone();
        let end = log.first(EventKind::RunEnd);
        let result: Option<CompilationResult> = match end.and_then(|e| e.outputs.as_deref()) {
            Some(hex) => Some(log.blob_json(hex)?),
            None => None,
        };

        let evals: Vec<EvalBlob> = log
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Eval && !e.label.starts_with("validate:"))
            .filter_map(|e| e.outputs.as_deref())
            .map(|hex| log.blob_json(hex))
            .collect::<Result<_, _>>()?;

        let (initial, optimized, front, history, generations_run, gate, budget) = match &result {
            Some(r) => (
                r.initial.objectives.as_ref().map(|o| o.0.clone()),
                r.best.objectives.as_ref().map(|o| o.0.clone()),
                r.pareto_front
                    .iter()
                    .map(|c| FrontEntry {
                        id: c.id.clone(),
                        objectives: c.objectives.as_ref().map(|o| o.0.clone()).unwrap_or_default(),
                        template: c.template.to_text(),
                    })
                    .collect(),
                r.history.clone(),
                r.generations_run,
                Some(r.gate.clone()),
                r.budget_exhausted,
            ),
            None => {
                let gi = start_blob.spec.gate_index().unwrap_or(0);
                let dir = specs.get(gi).map(|s| s.direction).unwrap_or(Direction::Maximize);
                let best = evals.iter().fold(None::<&EvalBlob>, |acc, e| match acc {
                    Some(b) if !dir.better(e.objectives[gi], b.objectives[gi]) => Some(b),
                    _ => Some(e),
                });
                let generations = log.count(EventKind::Checkpoint) as u32;
                (
                    evals.first().map(|e| e.objectives.clone()),
                    best.map(|e| e.objectives.clone()),
                    Vec::new(),
                    Vec::new(),
                    generations,
                    None,
                    false,
                )
            }
        };
        let metrics = match (initial, optimized) {
            (Some(i), Some(o)) => specs
                .iter()
                .enumerate()
                .map(|(k, s)| MetricRow {
                    metric: s.name.clone(),
                    direction: s.direction,
                    initial: i[k],
                    optimized: o[k],
                    improvement_pct: improvement(s.direction, i[k], o[k]),
                })
                .collect(),
            _ => Vec::new(),
        };

        let cache = match end.and_then(|e| e.data.get("cache")).filter(|v| !v.is_null()) {
            Some(v) => serde_json::from_value::<CacheStats>(v.clone()).map_err(|e| TraceError::Format(e.to_string()))?,
            None => partial_cache(log),
        };
        let fm_calls = log.events.iter().filter(|e| e.kind == EventKind::FmCall && e.label != "embed").count() as u64;
        let tokens = log.events.iter().filter(|e| e.kind == EventKind::FmCall).filter_map(|e| e.tokens).sum();
        let wall_time_ms = log.events.last().map(|e| e.wall_time_ms).unwrap_or(0);
        let warnings =
            log.events.iter().filter(|e| e.kind == EventKind::Warning).filter_map(|e| e.data_str("message").map(str::to_string)).collect();
        Ok(RunReport {
            run_id: start.label.clone(),
            complete: log.is_complete(),
            metrics,
            pareto_front: front,
            history,
            cache: cache.by_op.into_iter().map(|(op, s)| (op.name().to_string(), s)).collect(),
            fm_calls,
            tokens,
            wall_time_ms,
            generations_run,
            gate,
            budget_exhausted: budget,
            warnings,
        })
    }

    fn accuracy(&self) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == "accuracy").map(|m| m.optimized)
    }
}

fn num(v: f64) -> String {
    if v.is_finite() && v == v.trunc() && v.abs() < 1e12 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

fn duration(ms: u64) -> String {
    let s = ms / 1000;
    format!("{}m:{:02}s", s / 60, s % 60)
}

impl Report {
    /// Reads every trace; an empty or unreadable one fails the whole report.
    pub fn from_paths<P: AsRef<Path>>(paths: &[P]) -> Result<Self, TraceError> {
        let runs = paths
            .iter()
            .map(|p| {
                let log = TraceLog::read(p.as_ref())?;
                RunReport::from_log(&log)
            })
            .collect::<Result<_, _>>()?;
        Ok(Report { runs })
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            ReportFormat::Text => self.text(),
        }
    }

    fn text(&self) -> String {
        let mut out = String::new();
        for run in &self.runs {
            render_run(&mut out, run);
        }
        if self.runs.len() > 1 {
            let _ = writeln!(out, "Comparison");
            let _ = writeln!(out, "  {:<20} {:>10} {:>10} {:>9} {:>10} {:>9}", "run", "time", "accuracy", "fm calls", "tokens", "hit rate");
            for run in &self.runs {
                let total = run.cache.values().fold(OpStats::default(), |mut a, s| {
                    a.hits += s.hits;
                    a.misses += s.misses;
                    a
                });
                let rate =
                    if total.lookups() == 0 { "-".to_string() } else { format!("{:.2}", total.hits as f64 / total.lookups() as f64) };
                let acc = run.accuracy().map(num).unwrap_or_else(|| "-".into());
                let _ = writeln!(
                    out,
                    "  {:<20} {:>10} {:>10} {:>9} {:>10} {:>9}",
                    run.run_id,
                    duration(run.wall_time_ms),
                    acc,
                    run.fm_calls,
                    run.tokens,
                    rate
                );
            }
        }
        out
    }
}

fn render_run(out: &mut String, run: &RunReport) {
    if !run.complete {
        let _ = writeln!(out, "*** INCOMPLETE TRACE: run did not finish, figures are partial ***");
    }
    let _ = writeln!(out, "Run {}", run.run_id);
    let _ = writeln!(
        out,
        "  generations: {}  wall time: {}  fm calls: {}  tokens: {}",
        run.generations_run,
        duration(run.wall_time_ms),
        run.fm_calls,
        run.tokens
    );
    if run.budget_exhausted {
        let _ = writeln!(out, "  stopped early: wall-clock budget exhausted");
    }
    let _ = writeln!(out);
    if !run.metrics.is_empty() {
        let _ = writeln!(out, "  {:<16} {:>12} {:>12} {:>16}", "metric", "initial", "optimized", "improvement (%)");
        for m in &run.metrics {
            let imp = m.improvement_pct.map(|p| format!("{p:.1}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "  {:<16} {:>12} {:>12} {:>16}", m.metric, num(m.initial), num(m.optimized), imp);
        }
        let _ = writeln!(out);
    }
    if let Some(g) = &run.gate {
        let verdict = if g.pass { "PASS" } else { "FAIL" };
        let _ = writeln!(
            out,
            "  quality gate: {verdict} (pass rate {:.4}, lower bound {:.4} at {:.0}% confidence, threshold {}, n = {})",
            g.point_estimate,
            g.lower_bound,
            g.confidence * 100.0,
            g.threshold,
            g.n
        );
        let _ = writeln!(out);
    }
    if !run.pareto_front.is_empty() {
        let _ = writeln!(out, "  Pareto front");
        for c in &run.pareto_front {
            let objs: Vec<String> = c.objectives.iter().map(|v| num(*v)).collect();
            let first = c.template.lines().next().unwrap_or("");
            let _ = writeln!(out, "    {} [{}] {}", c.id, objs.join(", "), first);
        }
        let _ = writeln!(out);
    }
    if !run.history.is_empty() {
        let _ = writeln!(out, "  Best per generation");
        for h in &run.history {
            let vals: Vec<String> = h.best.iter().map(|v| num(*v)).collect();
            let _ = writeln!(out, "    g{:<3} [{}] front size {}", h.generation, vals.join(", "), h.front_size);
        }
        let _ = writeln!(out);
    }
    if !run.cache.is_empty() {
        let _ = writeln!(out, "  {:<12} {:>8} {:>8} {:>10} {:>10}", "cache op", "hits", "misses", "semantic", "evictions");
        for (op, s) in &run.cache {
            let _ = writeln!(out, "  {:<12} {:>8} {:>8} {:>10} {:>10}", op, s.hits, s.misses, s.semantic_hits, s.evictions);
        }
        let _ = writeln!(out);
    }
    for w in &run.warnings {
        let _ = writeln!(out, "  warning: {w}");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_follows_direction() {
        assert_eq!(improvement(Direction::Maximize, 0.5, 1.0), Some(100.0));
        assert_eq!(improvement(Direction::Minimize, 200.0, 150.0), Some(25.0));
        assert_eq!(improvement(Direction::Maximize, 0.0, 1.0), None);
    }

    #[test]
    fn format_flag_parses() {
        assert_eq!("json".parse::<ReportFormat>().unwrap(), ReportFormat::Json);
        assert!("yaml".parse::<ReportFormat>().is_err());
    }

    #[test]
    fn empty_trace_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(Report::from_paths(&[&p]), Err(TraceError::Incomplete)));
    }
}

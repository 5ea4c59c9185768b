#![allow(dead_code)]

use intentc::cache::SemanticCache;
use intentc::eval::BenchSpec;
use intentc::job::RunSpec;
use intentc::model::{Expected, GoldLabel, Intent, ProblemInstance, ScenarioSpec};
use intentc::optimizer::engine::RunStats;
use intentc::optimizer::{compile, CompilationResult, LiveOracle, RunOptions, RunOutcome};
use intentc::trace::{TraceLog, TraceWriter};

pub const TARGET: &str = "write correct concise python code and handle edge cases";

pub fn instance(id: &str) -> ProblemInstance {
    ProblemInstance {
        id: id.into(),
        bindings: [("question".to_string(), format!("task {id}"))].into(),
        gold: GoldLabel { expected: Expected::ReferenceText("ok".into()), reference_solution: None },
        origin: None,
    }
}

pub fn similarity_scenario(n: usize) -> ScenarioSpec {
    ScenarioSpec {
        intent: Intent { id: "codegen".into(), text: "write python code".into() },
        instances: (0..n).map(|i| instance(&format!("t{i:02}"))).collect(),
        objectives: vec![],
        data_description: "small programming tasks".into(),
    }
}

/// Seeded mock run on the edit-distance objective.
pub fn similarity_spec(seed: u64, generations: u32, population: usize) -> RunSpec {
    let mut spec = RunSpec::mock(similarity_scenario(6), BenchSpec::TargetSimilarity { target: TARGET.into() });
    spec.optimizer.master_seed = seed;
    spec.optimizer.generations = generations;
    spec.optimizer.population_size = population;
    spec
}

pub struct Run {
    pub result: CompilationResult,
    pub log: TraceLog,
    pub completions: u64,
    pub stats: RunStats,
}

pub fn run(spec: &RunSpec, cache: Option<&SemanticCache>) -> Run {
    let oracle = LiveOracle::new(spec).unwrap();
    let mut trace = TraceWriter::memory();
    let out = compile(spec, &oracle, cache, &mut trace, RunOptions::default()).unwrap();
    let log = trace.finish().unwrap().unwrap();
    match out {
        RunOutcome::Completed(result, stats) => Run { result: *result, log, completions: oracle.completions(), stats },
        RunOutcome::Halted { .. } => panic!("unexpected halt"),
    }
}

pub fn cache_for(spec: &RunSpec) -> Option<SemanticCache> {
    spec.cache.enabled.then(|| SemanticCache::new(spec.cache.threshold, spec.cache.capacity))
}

/// Minimal chat-completions server on loopback. Dropping it closes the port.
pub struct StubServer {
    pub endpoint: String,
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
    pub requests: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

fn stub_reply(prompt: &str) -> String {
    if prompt.contains("{#instruction}") || prompt.contains("template") {
        "{#instruction}write correct python code and handle edge cases{/instruction}\n\n{question}".to_string()
    } else {
        let words: Vec<&str> = prompt.split_whitespace().collect();
        format!("def solve():\n    return {}\n", words.len())
    }
}

fn handle_conn(mut stream: std::net::TcpStream, requests: &std::sync::atomic::AtomicUsize) {
    use std::io::{Read, Write};
    stream.set_nonblocking(false).ok();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = match stream.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => n,
        };
        buf.extend_from_slice(&chunk[..n]);
        if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break p + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let len = head
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once(':')?;
            k.eq_ignore_ascii_case("content-length").then(|| v.trim().parse::<usize>().ok()).flatten()
        })
        .unwrap_or(0);
    while buf.len() < header_end + len {
        match stream.read(&mut chunk) {
            Ok(0) | Err(_) => return,
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
        }
    }
    requests.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
    let body: serde_json::Value = serde_json::from_slice(&buf[header_end..header_end + len]).unwrap_or_default();
    let reply = if head.contains("/embeddings") {
        let text = body["input"].as_str().unwrap_or("");
        let v: Vec<f64> = (0..8).map(|i| ((text.len() + i) % 7) as f64 + 1.0).collect();
        serde_json::json!({"data": [{"embedding": v}]})
    } else {
        let prompt = body["messages"][0]["content"].as_str().unwrap_or("");
        let text = stub_reply(prompt);
        serde_json::json!({
            "model": "stub-model",
            "choices": [{"message": {"role": "assistant", "content": text}}],
            "usage": {"prompt_tokens": prompt.split_whitespace().count(), "completion_tokens": text.split_whitespace().count()}
        })
    };
    let payload = reply.to_string();
    let resp = format!(
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
        payload.len(),
        payload
    );
    let _ = stream.write_all(resp.as_bytes());
}

impl StubServer {
    pub fn start() -> Self {
        use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
        use std::sync::Arc;
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let endpoint = format!("http://{}/v1", listener.local_addr().unwrap());
        let stop = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(AtomicUsize::new(0));
        let (s, r) = (stop.clone(), requests.clone());
        let handle = std::thread::spawn(move || {
            while !s.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let r = r.clone();
                        std::thread::spawn(move || handle_conn(stream, &r));
                    }
                    Err(_) => std::thread::sleep(std::time::Duration::from_millis(2)),
                }
            }
        });
        StubServer { endpoint, stop, handle: Some(handle), requests }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, std::sync::atomic::Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Writes `scenario.json` and `job.json` into `dir` for the CLI.
pub fn write_job(dir: &std::path::Path, scenario: &ScenarioSpec, job: serde_json::Value) -> std::path::PathBuf {
    std::fs::write(dir.join("scenario.json"), serde_json::to_vec_pretty(scenario).unwrap()).unwrap();
    let path = dir.join("job.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&job).unwrap()).unwrap();
    path
}

pub fn mock_job(out: &std::path::Path, seed: u64, generations: u32, population: usize) -> serde_json::Value {
    serde_json::json!({
        "scenario": "scenario.json",
        "fms": {
            "release": {"role": "release", "backend": "mock", "model_id": "mock-release"},
            "evaluator": {"role": "evaluator", "backend": "mock", "model_id": "mock-evaluator"},
            "embedding": {"role": "embedding", "backend": "mock", "model_id": "mock-embedding"}
        },
        "bench": {"kind": "target_similarity", "target": TARGET},
        "optimizer": {"master_seed": seed, "generations": generations, "population_size": population},
        "output_dir": out
    })
}

pub fn http_job(
    out: &std::path::Path,
    endpoint: &str,
    model: &str,
    key_env: Option<&str>,
    generations: u32,
    population: usize,
) -> serde_json::Value {
    let fm = |role: &str| {
        let mut v = serde_json::json!({"role": role, "backend": "http", "endpoint": endpoint, "model_id": model});
        if let Some(k) = key_env {
            v["api_key_env"] = k.into();
        }
        v
    };
    serde_json::json!({
        "scenario": "scenario.json",
        "fms": {"release": fm("release"), "evaluator": fm("evaluator"), "embedding": fm("embedding")},
        "bench": {"kind": "target_similarity", "target": TARGET},
        "optimizer": {"master_seed": 7, "generations": generations, "population_size": population},
        "output_dir": out
    })
}

/// Runs the built binary, returning (exit code, stdout, stderr).
pub fn intentc(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_intentc")).args(args).output().unwrap();
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).to_string(), String::from_utf8_lossy(&out.stderr).to_string())
}

/// The single run directory under `out`.
pub fn run_dir(out: &std::path::Path) -> std::path::PathBuf {
    std::fs::read_dir(out).unwrap().filter_map(|e| e.ok()).map(|e| e.path()).find(|p| p.is_dir()).expect("run directory")
}

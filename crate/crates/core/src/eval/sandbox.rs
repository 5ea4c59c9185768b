//! Out-of-process test execution.
//!
//! Each test case runs in a fresh child process inside its own temporary
//! directory, with a cleared environment and a wall-clock deadline enforced
//! from this side. The default runner is a bundled Python script; a suite may
//! name any other command, with `{code}`, `{test}`, `{test_id}`,
//! `{timeout_ms}`, `{memory_mb}` and `{runner}` substituted per test.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tempfile::TempDir;
use wait_timeout::ChildExt;

use super::{EvalError, InstanceScore, ACCURACY, EXEC_LATENCY};
use crate::model::{TestCase, UnitTestSuite};

const RUNNER: &str = include_str!("../../assets/runner.py");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Pass,
    Fail,
    Error,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_id: String,
    pub outcome: Outcome,
    pub millis: f64,
}

fn default_interpreter() -> Vec<String> {
    vec!["python3".into()]
}
fn default_timeout() -> u64 {
    5_000
}
fn default_memory() -> u64 {
    512
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SandboxConfig {
    #[serde(default = "default_interpreter")]
    pub interpreter: Vec<String>,
    /// Per-test wall-clock limit.
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    #[serde(default = "default_memory")]
    pub memory_mb: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig { interpreter: default_interpreter(), timeout_ms: default_timeout(), memory_mb: default_memory() }
    }
}

#[derive(Deserialize)]
struct Verdict {
    test_id: String,
    outcome: Outcome,
    millis: f64,
}

pub struct Sandbox {
    config: SandboxConfig,
    runner: PathBuf,
    _dir: TempDir,
}

impl std::fmt::Debug for Sandbox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sandbox").field("config", &self.config).finish()
    }
}

impl Sandbox {
    /// Installs the runner script and checks that the interpreter starts.
    pub fn new(config: SandboxConfig) -> Result<Self, EvalError> {
        if config.interpreter.is_empty() {
            return Err(EvalError::SandboxUnavailable("empty interpreter command".into()));
        }
        let dir = tempfile::Builder::new().prefix("intentc-sandbox").tempdir().map_err(|e| EvalError::SandboxUnavailable(e.to_string()))?;
        let runner = dir.path().join("runner.py");
        fs::write(&runner, RUNNER).map_err(|e| EvalError::SandboxUnavailable(e.to_string()))?;
        let status = Command::new(&config.interpreter[0])
            .args(&config.interpreter[1..])
            .arg("-c")
            .arg("pass")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| EvalError::SandboxUnavailable(format!("{}: {e}", config.interpreter[0])))?;
        if !status.success() {
            return Err(EvalError::SandboxUnavailable(format!("{} exited with {status}", config.interpreter[0])));
        }
        Ok(Sandbox { config, runner, _dir: dir })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.timeout_ms)
    }

    pub fn run_test(&self, code: &str, test: &TestCase, command: Option<&[String]>) -> Result<TestResult, EvalError> {
        let unavailable = |e: std::io::Error| EvalError::SandboxUnavailable(e.to_string());
        let work = tempfile::Builder::new().prefix("intentc-test").tempdir().map_err(unavailable)?;
        let code_path = work.path().join("solution.py");
        let test_path = work.path().join("test.py");
        let out_path = work.path().join("verdict.jsonl");
        fs::write(&code_path, code).map_err(unavailable)?;
        fs::write(&test_path, &test.source).map_err(unavailable)?;

        let vars: BTreeMap<&str, String> = [
            ("code", code_path.display().to_string()),
            ("test", test_path.display().to_string()),
            ("test_id", test.id.clone()),
            ("timeout_ms", self.config.timeout_ms.to_string()),
            ("memory_mb", self.config.memory_mb.to_string()),
            ("runner", self.runner.display().to_string()),
        ]
        .into_iter()
        .collect();
        let argv: Vec<String> = match command {
            Some(template) => template.iter().map(|arg| substitute(arg, &vars)).collect(),
            None => {
                let mut v = self.config.interpreter.clone();
                for k in ["runner", "code", "test", "test_id", "timeout_ms", "memory_mb"] {
                    v.push(vars[k].clone());
                }
                v
            }
        };
        if argv.is_empty() {
            return Err(EvalError::SandboxUnavailable("empty test command".into()));
        }

        let out = File::create(&out_path).map_err(unavailable)?;
        let start = Instant::now();
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(work.path())
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| EvalError::SandboxUnavailable(format!("{}: {e}", argv[0])))?;
        let status = child.wait_timeout(self.timeout()).map_err(unavailable)?;
        let wall = start.elapsed().as_secs_f64() * 1000.0;
        let Some(status) = status else {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(TestResult { test_id: test.id.clone(), outcome: Outcome::Timeout, millis: self.config.timeout_ms as f64 });
        };

        let stdout = fs::read_to_string(&out_path).unwrap_or_default();
        let verdict = stdout.lines().rev().filter_map(|l| serde_json::from_str::<Verdict>(l.trim()).ok()).find(|v| v.test_id == test.id);
        Ok(match verdict {
            Some(v) => TestResult { test_id: test.id.clone(), outcome: v.outcome, millis: v.millis.max(0.0) },
            None => {
                let outcome = match status.code() {
                    Some(0) => Outcome::Pass,
                    Some(1) => Outcome::Fail,
                    _ => Outcome::Error,
                };
                TestResult { test_id: test.id.clone(), outcome, millis: wall }
            }
        })
    }

    /// Runs every test of the suite; accuracy is the pass fraction and
    /// `exec_latency` the summed execution time in seconds.
    pub fn evaluate_codegen(&self, instance_id: &str, code: &str, suite: &UnitTestSuite) -> Result<InstanceScore, EvalError> {
        if suite.tests.is_empty() {
            return Err(EvalError::EmptySuite(instance_id.into()));
        }
        let mut detail = Vec::with_capacity(suite.tests.len());
        for test in &suite.tests {
            detail.push(self.run_test(code, test, suite.command.as_deref())?);
        }
        let passes = detail.iter().filter(|r| r.outcome == Outcome::Pass).count();
        let millis: f64 = detail.iter().map(|r| r.millis).sum();
        let mut score = InstanceScore::new(instance_id);
        score.metrics.insert(ACCURACY.into(), passes as f64 / detail.len() as f64);
        score.metrics.insert(EXEC_LATENCY.into(), millis / 1000.0);
        score.failure_detail = detail;
        Ok(score)
    }
}

fn substitute(arg: &str, vars: &BTreeMap<&str, String>) -> String {
    let mut out = arg.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tc(id: &str, src: &str) -> TestCase {
        TestCase { id: id.into(), source: src.into() }
    }

    fn sandbox(timeout_ms: u64) -> Sandbox {
        Sandbox::new(SandboxConfig { timeout_ms, ..Default::default() }).unwrap()
    }

    #[test]
    fn outcomes_are_classified() {
        let sb = sandbox(5_000);
        let code = "def add(a, b):\n    return a + b\n";
        assert_eq!(sb.run_test(code, &tc("p", "assert add(1, 2) == 3"), None).unwrap().outcome, Outcome::Pass);
        assert_eq!(sb.run_test(code, &tc("f", "assert add(1, 2) == 4"), None).unwrap().outcome, Outcome::Fail);
        assert_eq!(sb.run_test(code, &tc("e", "add(1)"), None).unwrap().outcome, Outcome::Error);
        assert_eq!(sb.run_test("def add(:", &tc("s", "assert True"), None).unwrap().outcome, Outcome::Error);
    }

    #[test]
    fn network_is_refused() {
        let sb = sandbox(5_000);
        let test = "import socket\ntry:\n    socket.socket()\n    ok = False\nexcept OSError:\n    ok = True\nassert ok";
        assert_eq!(sb.run_test("", &tc("n", test), None).unwrap().outcome, Outcome::Pass);
    }

    #[test]
    fn infinite_loop_times_out() {
        let sb = sandbox(1_000);
        let start = Instant::now();
        let r = sb.run_test("while True:\n    pass\n", &tc("t", "assert True"), None).unwrap();
        assert_eq!(r.outcome, Outcome::Timeout);
        assert!(start.elapsed() < Duration::from_secs(3));
    }

    #[test]
    fn custom_command_uses_exit_status() {
        let sb = sandbox(5_000);
        let cmd = vec!["sh".to_string(), "-c".to_string(), "grep -q ok {code}".to_string()];
        assert_eq!(sb.run_test("ok", &tc("a", ""), Some(&cmd)).unwrap().outcome, Outcome::Pass);
        assert_eq!(sb.run_test("no", &tc("b", ""), Some(&cmd)).unwrap().outcome, Outcome::Fail);
    }

    #[test]
    fn missing_interpreter_is_unavailable() {
        let cfg = SandboxConfig { interpreter: vec!["/nonexistent/python".into()], ..Default::default() };
        assert!(matches!(Sandbox::new(cfg), Err(EvalError::SandboxUnavailable(_))));
    }
}

//! Clients backed by external commands speaking JSON over stdin/stdout.

use super::templates;
use super::{ClientError, ComplexityFilter, JudgeClient, SamplingParams, ScorerClient};
use crate::grpo::{RewardError, RewardFn};
use crate::model::{EditContext, Principle, PrincipleSet, PrincipleVerdict, Quadruple, ReasoningTrace, SampleRef};
use crate::trace::{extract_score, parse_verdicts, RawTraceText};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::io::{Read, Write};
use std::process::{Command, Stdio};
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Stub,
    Cmd,
}

/// `[name=]kind[:target][@timeout_secs]`, e.g. `judge=cmd:python3 judge.py@30`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct AdapterSpec {
    pub name: String,
    pub kind: AdapterKind,
    pub target: Option<String>,
    pub timeout_secs: u64,
}

impl FromStr for AdapterSpec {
    type Err = ClientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| ClientError::Malformed(format!("adapter `{s}`: {m}"));
        let (name, rest) = match s.split_once('=') {
            Some((n, r)) if !n.contains(':') => (Some(n.trim().to_string()), r),
            _ => (None, s),
        };
        let (rest, timeout_secs) = match rest.rsplit_once('@') {
            Some((r, t)) if t.trim().parse::<u64>().is_ok() => (r, t.trim().parse().unwrap_or(DEFAULT_TIMEOUT_SECS)),
            _ => (rest, DEFAULT_TIMEOUT_SECS),
        };
        let (kind, target) = match rest.split_once(':') {
            Some((k, t)) => (k.trim(), Some(t.trim().to_string()).filter(|t| !t.is_empty())),
            None => (rest.trim(), None),
        };
        let kind = match kind {
            "stub" => AdapterKind::Stub,
            "cmd" => AdapterKind::Cmd,
            other => return Err(bad(&format!("unknown kind `{other}` (expected stub or cmd)"))),
        };
        if kind == AdapterKind::Cmd && target.is_none() {
            return Err(bad("cmd adapters need a command"));
        }
        if timeout_secs == 0 {
            return Err(bad("timeout must be positive"));
        }
        let name = name
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| match (&kind, &target) {
                (AdapterKind::Stub, Some(t)) => format!("stub-{t}"),
                (AdapterKind::Stub, None) => "stub".to_string(),
                (AdapterKind::Cmd, t) => t.clone().unwrap_or_default(),
            });
        Ok(Self {
            name,
            kind,
            target,
            timeout_secs,
        })
    }
}

/// Runs `command` (whitespace-split, no shell) with `input` on stdin and
/// returns its stdout.
pub fn run_command(command: &str, input: &str, timeout: Duration) -> Result<String, ClientError> {
    let mut parts = command.split_whitespace();
    let program = parts.next().ok_or_else(|| ClientError::Malformed("empty command".into()))?;
    let mut child = Command::new(program)
        .args(parts)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| ClientError::Unavailable(format!("{program}: {e}")))?;

    let mut stdin = child.stdin.take().expect("piped stdin");
    let payload = input.as_bytes().to_vec();
    let writer = thread::spawn(move || {
        let _ = stdin.write_all(&payload);
    });
    let mut stdout = child.stdout.take().expect("piped stdout");
    let reader = thread::spawn(move || {
        let mut buf = String::new();
        stdout.read_to_string(&mut buf).map(|_| buf)
    });

    let start = Instant::now();
    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break status,
            Ok(None) if start.elapsed() >= timeout => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(ClientError::Timeout(timeout.as_secs()));
            }
            Ok(None) => thread::sleep(Duration::from_millis(5)),
            Err(e) => return Err(ClientError::Unavailable(e.to_string())),
        }
    };
    let _ = writer.join();
    let out = reader
        .join()
        .map_err(|_| ClientError::Unavailable("stdout reader panicked".into()))?
        .map_err(|e| ClientError::Malformed(format!("stdout is not UTF-8: {e}")))?;
    if !status.success() {
        return Err(ClientError::Unavailable(format!("{program} exited with {status}")));
    }
    Ok(out)
}

/// Judge backed by a command. Decomposition expects a JSON principle list
/// (or a full principle set); verification expects a verdict array in the
/// trace wire format.
#[derive(Clone, Debug)]
pub struct CommandJudge {
    pub spec: AdapterSpec,
}

impl CommandJudge {
    fn call(&self, request: serde_json::Value) -> Result<String, ClientError> {
        run_command(
            self.spec.target.as_deref().unwrap_or_default(),
            &request.to_string(),
            Duration::from_secs(self.spec.timeout_secs),
        )
    }
}

impl JudgeClient for CommandJudge {
    fn name(&self) -> &str {
        &self.spec.name
    }

    fn decompose(&self, ctx: &EditContext) -> Result<PrincipleSet, ClientError> {
        let mut vars = std::collections::BTreeMap::new();
        vars.insert("EDIT_INSTRUCTION", ctx.instruction.clone());
        let out = self.call(json!({
            "op": "decompose",
            "context": ctx,
            "prompt": templates::render(templates::DECOMPOSE, &vars),
        }))?;
        if let Ok(set) = serde_json::from_str::<PrincipleSet>(&out) {
            return Ok(set);
        }
        let principles: Vec<Principle> =
            serde_json::from_str(&out).map_err(|e| ClientError::Malformed(format!("decompose response: {e}")))?;
        Ok(PrincipleSet {
            principles,
            context_id: ctx.id(),
        })
    }

    fn verify(&self, quad: &Quadruple, candidates: &[ReasoningTrace]) -> Result<Vec<PrincipleVerdict>, ClientError> {
        let cot = candidates.first().map(|c| c.think_text.as_str());
        let out = self.call(json!({
            "op": "verify",
            "quadruple": quad,
            "prompt": templates::render(templates::VERIFY, &templates::quad_vars(quad, cot)),
        }))?;
        parse_verdicts(&RawTraceText::new(out), &quad.principles).map_err(|e| ClientError::Malformed(e.to_string()))
    }
}

/// Scorer backed by a command that prints one raw Think+Score output.
#[derive(Clone, Debug)]
pub struct CommandScorer {
    pub spec: AdapterSpec,
}

impl ScorerClient for CommandScorer {
    fn id(&self) -> &str {
        &self.spec.name
    }

    fn score(&self, quad: &Quadruple, params: &SamplingParams) -> Result<RawTraceText, ClientError> {
        let request = json!({
            "op": "score",
            "quadruple": quad,
            "sampling_params": params,
            "prompt": templates::render(templates::SCORE, &templates::quad_vars(quad, None)),
        });
        run_command(
            self.spec.target.as_deref().unwrap_or_default(),
            &request.to_string(),
            Duration::from_secs(self.spec.timeout_secs),
        )
        .map(RawTraceText::new)
    }
}

/// Complexity filter backed by a command that prints `true` or `false`.
#[derive(Clone, Debug)]
pub struct CommandFilter {
    pub spec: AdapterSpec,
}

impl ComplexityFilter for CommandFilter {
    fn is_complex(&self, ctx: &EditContext) -> Result<bool, ClientError> {
        let request = json!({ "op": "is_complex", "context": ctx });
        let out = run_command(
            self.spec.target.as_deref().unwrap_or_default(),
            &request.to_string(),
            Duration::from_secs(self.spec.timeout_secs),
        )?;
        serde_json::from_str(out.trim()).map_err(|e| ClientError::Malformed(format!("filter response: {e}")))
    }
}

/// Generation reward from an external reward model command. The command
/// receives the sample and context as JSON and prints a Think+Score output.
#[derive(Clone, Debug)]
pub struct ExternalCmdReward {
    pub command: String,
    pub timeout: Duration,
}

impl RewardFn for ExternalCmdReward {
    fn reward(&self, sample: &SampleRef, ctx: &EditContext, principles: &PrincipleSet) -> Result<f64, RewardError> {
        let request = json!({
            "op": "reward",
            "sample": sample,
            "context": ctx,
            "principles": principles,
        });
        let out = run_command(&self.command, &request.to_string(), self.timeout)
            .map_err(|e| RewardError::Backend(e.to_string()))?;
        Ok(extract_score(&RawTraceText::new(out))?.value)
    }
}

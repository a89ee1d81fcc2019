//! External evaluator speaking one JSON line in, one JSON line out.
//!
//! Request: `{"x":[...]}` with physical coordinates. Response:
//! `{"metrics":{"name":value,...}}`. One child process per evaluation.

use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_timeout() -> f64 {
    60.0
}

/// Request and response lines of one exchange.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transcript {
    pub request: String,
    pub response: String,
}

impl std::fmt::Display for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "sent {:?}, received {:?}", self.request.trim_end(), self.response.trim_end())
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluator timed out after {seconds} s ({transcript})")]
    Timeout { seconds: f64, transcript: Transcript },

    #[error("malformed evaluator output: {reason} ({transcript})")]
    Malformed { reason: String, transcript: Transcript },

    #[error("evaluator output lacks metric {metric:?} ({transcript})")]
    MissingMetric { metric: String, transcript: Transcript },

    #[error("could not run evaluator: {0}")]
    Io(String),

    #[error("point outside the design box at coordinate {index}: {value}")]
    OutOfBounds { index: usize, value: f64 },
}

#[derive(Serialize)]
struct Request<'a> {
    x: &'a [f64],
}

/// Runs the evaluator once and returns the metrics in `metric_names` order.
pub fn subprocess_evaluate(spec: &SubprocessSpec, metric_names: &[String], x: &[f64]) -> Result<Vec<f64>, EvalError> {
    let mut request = serde_json::to_string(&Request { x }).map_err(|e| EvalError::Io(e.to_string()))?;
    request.push('\n');
    let mut transcript = Transcript {
        request: request.clone(),
        response: String::new(),
    };
    let mut child = Command::new(&spec.command)
        .args(&spec.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| EvalError::Io(format!("{}: {e}", spec.command)))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    let reader = std::thread::spawn(move || {
        let mut line = String::new();
        let r = BufReader::new(stdout).read_line(&mut line).map(|_| line);
        let _ = tx.send(r);
    });
    if let Some(mut stdin) = child.stdin.take() {
        // A child that exits without reading shows up as a missing response.
        let _ = stdin.write_all(request.as_bytes());
    }
    let received = rx.recv_timeout(Duration::from_secs_f64(spec.timeout_secs.max(0.0)));
    let _ = child.kill();
    let _ = child.wait();
    let line = match received {
        Ok(Ok(line)) => line,
        Ok(Err(e)) => return Err(EvalError::Io(e.to_string())),
        Err(_) => {
            return Err(EvalError::Timeout {
                seconds: spec.timeout_secs,
                transcript,
            })
        }
    };
    let _ = reader.join();
    transcript.response = line.clone();
    parse_response(&line, metric_names, transcript)
}

fn parse_response(line: &str, metric_names: &[String], transcript: Transcript) -> Result<Vec<f64>, EvalError> {
    let malformed = |reason: String, transcript: Transcript| EvalError::Malformed { reason, transcript };
    if line.trim().is_empty() {
        return Err(malformed("no response line".into(), transcript));
    }
    let value: serde_json::Value = match serde_json::from_str(line.trim()) {
        Ok(v) => v,
        Err(e) => return Err(malformed(e.to_string(), transcript)),
    };
    let Some(metrics) = value.get("metrics").and_then(|m| m.as_object()) else {
        return Err(malformed("missing \"metrics\" object".into(), transcript));
    };
    let mut out = Vec::with_capacity(metric_names.len());
    for name in metric_names {
        let Some(v) = metrics.get(name) else {
            return Err(EvalError::MissingMetric {
                metric: name.clone(),
                transcript,
            });
        };
        match v.as_f64() {
            Some(f) if f.is_finite() => out.push(f),
            _ => return Err(malformed(format!("metric {name:?} is not a finite number: {v}"), transcript)),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_metrics_in_declared_order() {
        let r = parse_response(r#"{"metrics":{"b":2.5,"a":-1}}"#, &names(&["a", "b"]), Transcript::default());
        assert_eq!(r.unwrap(), vec![-1.0, 2.5]);
    }

    #[test]
    fn nan_is_malformed() {
        let r = parse_response(r#"{"metrics":{"a":NaN}}"#, &names(&["a"]), Transcript::default());
        assert!(matches!(r, Err(EvalError::Malformed { .. })));
        let r = parse_response(r#"{"metrics":{"a":"NaN"}}"#, &names(&["a"]), Transcript::default());
        assert!(matches!(r, Err(EvalError::Malformed { .. })));
    }

    #[test]
    fn missing_metric_is_reported() {
        let r = parse_response(r#"{"metrics":{"a":1}}"#, &names(&["a", "b"]), Transcript::default());
        assert!(matches!(r, Err(EvalError::MissingMetric { metric, .. }) if metric == "b"));
    }
}

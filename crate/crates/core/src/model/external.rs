//! Line-delimited JSON protocol for external evaluators.
//!
//! ```text
//! engine → child   {"hello":{"m":3,"n":2}}
//! child  → engine  {"ready":true}
//! engine → child   {"id":7,"x":[0.1,0.2,0.3]}
//! child  → engine  {"id":7,"y":[1.5,-2.0]}
//! ```
//!
//! A pool of children shares each call; each child receives a contiguous
//! slice of the requests, written from a separate thread so a child can
//! answer while still being fed. Responses are matched by id and may come
//! back in any order. Any fault kills the pool; the next call respawns it.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::model::Evaluator;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalEvaluatorSpec {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub m: usize,
    pub n: usize,
    #[serde(default = "default_handshake_ms")]
    pub handshake_timeout_ms: u64,
    #[serde(default = "default_eval_ms")]
    pub eval_timeout_ms: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_handshake_ms() -> u64 {
    5_000
}

fn default_eval_ms() -> u64 {
    60_000
}

fn default_workers() -> usize {
    1
}

impl ExternalEvaluatorSpec {
    pub fn new(command: Vec<String>, m: usize, n: usize) -> Self {
        Self {
            command,
            m,
            n,
            handshake_timeout_ms: default_handshake_ms(),
            eval_timeout_ms: default_eval_ms(),
            workers: default_workers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.command.is_empty() {
            return Err(SensaError::Config("external evaluator command is empty".into()));
        }
        if self.handshake_timeout_ms == 0 || self.eval_timeout_ms == 0 {
            return Err(SensaError::Config("evaluator timeouts must be positive".into()));
        }
        if self.workers == 0 || self.m == 0 || self.n == 0 {
            return Err(SensaError::Config(
                "evaluator needs m, n and workers of at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Hello {
    hello: Dims,
}

#[derive(Serialize, Deserialize)]
struct Dims {
    m: usize,
    n: usize,
}

#[derive(Deserialize)]
struct Ready {
    ready: bool,
}

#[derive(Serialize)]
struct RequestLine<'a> {
    id: u64,
    x: &'a [f64],
}

#[derive(Deserialize)]
struct ResponseLine {
    id: u64,
    y: Vec<f64>,
}

struct Worker {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<String>,
}

impl Worker {
    fn spawn(spec: &ExternalEvaluatorSpec) -> Result<Self> {
        let mut child = Command::new(&spec.command[0])
            .args(&spec.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| {
                SensaError::Config(format!("cannot start evaluator {:?}: {e}", spec.command[0]))
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, lines) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut worker = Worker { child, stdin, lines };
        if let Err(e) = worker.handshake(spec) {
            worker.kill();
            return Err(SensaError::Config(format!("evaluator handshake failed: {e}")));
        }
        Ok(worker)
    }

    fn handshake(&mut self, spec: &ExternalEvaluatorSpec) -> Result<()> {
        let hello = serde_json::to_string(&Hello {
            hello: Dims { m: spec.m, n: spec.n },
        })
        .expect("serializable");
        writeln!(self.stdin, "{hello}")?;
        self.stdin.flush()?;
        let line = match self
            .lines
            .recv_timeout(Duration::from_millis(spec.handshake_timeout_ms))
        {
            Ok(line) => line,
            Err(RecvTimeoutError::Timeout) => {
                return Err(SensaError::EvaluationTimeout { id: 0 });
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(SensaError::EvaluatorCrashed(
                    "exited before the handshake".into(),
                ));
            }
        };
        match serde_json::from_str::<Ready>(&line) {
            Ok(Ready { ready: true }) => Ok(()),
            _ => Err(SensaError::Protocol {
                reason: "expected {\"ready\":true}".into(),
                line,
            }),
        }
    }

    /// Sends `requests` and collects their outputs keyed by id.
    fn exchange(
        &mut self,
        requests: &[(u64, &[f64])],
        n: usize,
        timeout: Duration,
    ) -> Result<HashMap<u64, Vec<f64>>> {
        let Worker { child, stdin, lines } = self;
        thread::scope(|scope| {
            let writer = scope.spawn(move || -> std::io::Result<()> {
                let mut buf = std::io::BufWriter::new(&mut *stdin);
                for &(id, x) in requests {
                    serde_json::to_writer(&mut buf, &RequestLine { id, x })?;
                    buf.write_all(b"\n")?;
                }
                buf.flush()
            });
            let result = collect_responses(lines, requests, n, timeout);
            if result.is_err() {
                // Unblocks the writer if the child stopped reading.
                let _ = child.kill();
            }
            let _ = writer.join();
            result
        })
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn collect_responses(
    lines: &Receiver<String>,
    requests: &[(u64, &[f64])],
    n: usize,
    timeout: Duration,
) -> Result<HashMap<u64, Vec<f64>>> {
    let mut pending: std::collections::BTreeSet<u64> = requests.iter().map(|r| r.0).collect();
    let mut out = HashMap::with_capacity(requests.len());
    while let Some(&oldest) = pending.first() {
        let line = match lines.recv_timeout(timeout) {
            Ok(line) => line,
            Err(RecvTimeoutError::Timeout) => {
                return Err(SensaError::EvaluationTimeout { id: oldest });
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(SensaError::EvaluatorCrashed(format!(
                    "evaluator exited with {} requests outstanding (first id {oldest})",
                    pending.len()
                )));
            }
        };
        let resp: ResponseLine = serde_json::from_str(&line).map_err(|e| SensaError::Protocol {
            reason: format!("malformed response ({e})"),
            line: line.clone(),
        })?;
        if !pending.remove(&resp.id) {
            return Err(SensaError::Protocol {
                reason: format!("unknown or duplicate id {}", resp.id),
                line,
            });
        }
        if resp.y.len() != n {
            return Err(SensaError::Protocol {
                reason: format!("expected {n} outputs, got {}", resp.y.len()),
                line,
            });
        }
        out.insert(resp.id, resp.y);
    }
    Ok(out)
}

/// Pool of child processes speaking the evaluator protocol.
pub struct ExternalEvaluator {
    spec: ExternalEvaluatorSpec,
    workers: Vec<Worker>,
    next_id: u64,
}

impl std::fmt::Debug for ExternalEvaluator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalEvaluator")
            .field("spec", &self.spec)
            .field("workers", &self.workers.len())
            .field("next_id", &self.next_id)
            .finish()
    }
}

impl ExternalEvaluator {
    /// Spawns the pool and completes the handshake with every child.
    pub fn start(spec: ExternalEvaluatorSpec) -> Result<Self> {
        spec.validate()?;
        let mut ev = Self {
            spec,
            workers: Vec::new(),
            next_id: 1,
        };
        ev.ensure_workers()?;
        Ok(ev)
    }

    /// Starts and immediately shuts down one child.
    pub fn probe(spec: &ExternalEvaluatorSpec) -> Result<()> {
        spec.validate()?;
        Worker::spawn(spec)?.kill();
        Ok(())
    }

    fn ensure_workers(&mut self) -> Result<()> {
        while self.workers.len() < self.spec.workers {
            let w = Worker::spawn(&self.spec)?;
            self.workers.push(w);
        }
        Ok(())
    }

    fn shutdown(&mut self) {
        for mut w in self.workers.drain(..) {
            w.kill();
        }
    }

    /// Evaluates with explicit request ids.
    pub fn evaluate_ids(&mut self, requests: &[(u64, Vec<f64>)]) -> Result<Vec<Vec<f64>>> {
        if let Some((_, x)) = requests.iter().find(|(_, x)| x.len() != self.spec.m) {
            return Err(SensaError::MalformedPoint {
                expected: self.spec.m,
                actual: x.len(),
            });
        }
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        self.ensure_workers()?;
        let timeout = Duration::from_millis(self.spec.eval_timeout_ms);
        let n = self.spec.n;
        let chunk = requests.len().div_ceil(self.workers.len());
        let slices: Vec<Vec<(u64, &[f64])>> = requests
            .chunks(chunk)
            .map(|c| c.iter().map(|(id, x)| (*id, x.as_slice())).collect())
            .collect();
        let results: Vec<Result<HashMap<u64, Vec<f64>>>> = thread::scope(|scope| {
            let handles: Vec<_> = self
                .workers
                .iter_mut()
                .zip(&slices)
                .map(|(w, reqs)| scope.spawn(move || w.exchange(reqs, n, timeout)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluator worker thread panicked"))
                .collect()
        });
        let mut merged = HashMap::with_capacity(requests.len());
        for r in results {
            match r {
                Ok(map) => merged.extend(map),
                Err(e) => {
                    self.shutdown();
                    return Err(e);
                }
            }
        }
        Ok(requests
            .iter()
            .map(|(id, _)| merged.remove(id).expect("every id answered"))
            .collect())
    }
}

impl Evaluator for ExternalEvaluator {
    fn input_dim(&self) -> usize {
        self.spec.m
    }

    fn output_dim(&self) -> usize {
        self.spec.n
    }

    fn evaluate(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let first = self.next_id;
        self.next_id += xs.len() as u64;
        let requests: Vec<(u64, Vec<f64>)> =
            xs.iter().cloned().zip(first..).map(|(x, id)| (id, x)).collect();
        self.evaluate_ids(&requests).map_err(|e| match e {
            SensaError::EvaluationTimeout { id } => SensaError::EvaluationFailed {
                index: (id - first) as usize,
                source: Box::new(e),
            },
            other => other,
        })
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Evaluator side of the protocol: answers requests on `input` with
/// `model` until end of input.
pub fn serve_protocol<R, W, F>(input: R, mut output: W, m: usize, n: usize, model: F) -> Result<()>
where
    R: BufRead,
    W: Write,
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    #[derive(Deserialize)]
    struct HelloIn {
        hello: Dims,
    }
    #[derive(Deserialize)]
    struct RequestIn {
        id: u64,
        x: Vec<f64>,
    }
    #[derive(Serialize)]
    struct ResponseOut {
        id: u64,
        y: Vec<f64>,
    }

    let mut lines = input.lines();
    let Some(first) = lines.next().transpose()? else {
        return Ok(());
    };
    let hello: HelloIn = serde_json::from_str(&first).map_err(|e| SensaError::Protocol {
        reason: format!("expected hello ({e})"),
        line: first.clone(),
    })?;
    if hello.hello.m != m || hello.hello.n != n {
        return Err(SensaError::Protocol {
            reason: format!("engine expects m={}, n={}; model has m={m}, n={n}", hello.hello.m, hello.hello.n),
            line: first,
        });
    }
    writeln!(output, "{{\"ready\":true}}")?;
    output.flush()?;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: RequestIn = serde_json::from_str(&line).map_err(|e| SensaError::Protocol {
            reason: format!("malformed request ({e})"),
            line: line.clone(),
        })?;
        let y = model(&req.x)?;
        serde_json::to_writer(&mut output, &ResponseOut { id: req.id, y })
            .map_err(std::io::Error::from)?;
        output.write_all(b"\n")?;
        output.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str, m: usize, n: usize) -> ExternalEvaluatorSpec {
        let mut spec = ExternalEvaluatorSpec::new(vec!["sh".into(), "-c".into(), script.into()], m, n);
        spec.handshake_timeout_ms = 2_000;
        spec.eval_timeout_ms = 500;
        spec
    }

    // Echoes x as y, answering the handshake first.
    const ECHO: &str = r#"read hello; echo '{"ready":true}'; while read line; do echo "$line" | sed 's/"x"/"y"/'; done"#;

    #[test]
    fn echo_round_trip() {
        let mut ev = ExternalEvaluator::start(sh(ECHO, 2, 2)).unwrap();
        let xs = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
        assert_eq!(ev.evaluate(&xs).unwrap(), xs);
        // Same requests again give the same answers.
        assert_eq!(ev.evaluate(&xs).unwrap(), xs);
    }

    #[test]
    fn pool_preserves_request_order() {
        let mut spec = sh(ECHO, 1, 1);
        spec.workers = 3;
        let mut ev = ExternalEvaluator::start(spec).unwrap();
        let xs: Vec<Vec<f64>> = (0..50).map(|k| vec![k as f64 / 64.0]).collect();
        assert_eq!(ev.evaluate(&xs).unwrap(), xs);
    }

    #[test]
    fn responses_out_of_order_are_matched() {
        // Reads two requests, answers them in reverse order.
        let script = r#"read hello; echo '{"ready":true}'; while read a && read b; do echo "$b" | sed 's/"x"/"y"/'; echo "$a" | sed 's/"x"/"y"/'; done"#;
        let mut ev = ExternalEvaluator::start(sh(script, 1, 1)).unwrap();
        let xs = vec![vec![0.25], vec![0.75], vec![0.5], vec![0.125]];
        assert_eq!(ev.evaluate(&xs).unwrap(), xs);
    }

    #[test]
    fn unknown_id_is_a_protocol_error() {
        let script = r#"read hello; echo '{"ready":true}'; while read line; do echo '{"id":999999,"y":[1]}'; done"#;
        let mut ev = ExternalEvaluator::start(sh(script, 1, 1)).unwrap();
        let err = ev.evaluate(&[vec![0.5]]).unwrap_err();
        assert!(matches!(err, SensaError::Protocol { .. }), "{err}");
    }

    #[test]
    fn malformed_line_is_a_protocol_error_with_raw_line() {
        let script = r#"read hello; echo '{"ready":true}'; while read line; do echo 'not json'; done"#;
        let mut ev = ExternalEvaluator::start(sh(script, 1, 1)).unwrap();
        match ev.evaluate(&[vec![0.5]]).unwrap_err() {
            SensaError::Protocol { line, .. } => assert_eq!(line, "not json"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn silence_times_out_naming_the_request() {
        let script = r#"read hello; echo '{"ready":true}'; sleep 30"#;
        let mut ev = ExternalEvaluator::start(sh(script, 1, 1)).unwrap();
        let err = ev.evaluate_ids(&[(41, vec![0.5])]).unwrap_err();
        assert!(matches!(err, SensaError::EvaluationTimeout { id: 41 }), "{err}");
    }

    #[test]
    fn child_exit_is_a_crash() {
        let script = r#"read hello; echo '{"ready":true}'; read line; exit 3"#;
        let mut ev = ExternalEvaluator::start(sh(script, 1, 1)).unwrap();
        let err = ev.evaluate(&[vec![0.5], vec![0.25]]).unwrap_err();
        assert!(matches!(err, SensaError::EvaluatorCrashed(_)), "{err}");
        // The pool is respawned on the next call; it crashes again here but
        // the handshake succeeds.
        assert!(matches!(
            ev.evaluate(&[vec![0.5]]).unwrap_err(),
            SensaError::EvaluatorCrashed(_)
        ));
    }

    #[test]
    fn missing_command_fails_at_start() {
        let spec = ExternalEvaluatorSpec::new(vec!["/nonexistent/evaluator".into()], 1, 1);
        assert!(matches!(ExternalEvaluator::probe(&spec), Err(SensaError::Config(_))));
    }

    #[test]
    fn bad_handshake_fails_at_start() {
        let err = ExternalEvaluator::start(sh("read hello; echo nope", 1, 1)).unwrap_err();
        assert!(matches!(err, SensaError::Config(_)));
    }

    #[test]
    fn serve_protocol_answers_requests() {
        let input = b"{\"hello\":{\"m\":2,\"n\":1}}\n{\"id\":4,\"x\":[1.5,2.0]}\n{\"id\":5,\"x\":[0.0,0.5]}\n";
        let mut out = Vec::new();
        serve_protocol(&input[..], &mut out, 2, 1, |x| Ok(vec![x[0] + x[1]])).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"ready\":true}\n{\"id\":4,\"y\":[3.5]}\n{\"id\":5,\"y\":[0.5]}\n"
        );
    }
}

//! Evaluation targets: built-in models and the external-process protocol.

pub mod external;
pub mod ishigami;
pub mod synthetic;

use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::SensaError;
use crate::Result;
pub use external::{ExternalEvaluator, ExternalEvaluatorSpec};
pub use synthetic::SyntheticModelParams;

/// Something that maps `m`-vectors to `n`-vectors, in physical units.
pub trait Evaluator: Send {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// One output per input, in order.
    fn evaluate(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinModel {
    /// Reference synthetic ODE model at its final time (m = n = 3).
    Synthetic,
    /// Ishigami function (m = 3, n = 1).
    Ishigami,
    /// `Y = X_1`.
    FirstInput,
    /// `Y = X`, n = m.
    Echo,
}

impl BuiltinModel {
    pub fn dims(&self, m: usize) -> (usize, usize) {
        match self {
            BuiltinModel::Synthetic => (3, 3),
            BuiltinModel::Ishigami => (3, 1),
            BuiltinModel::FirstInput => (m, 1),
            BuiltinModel::Echo => (m, m),
        }
    }

    pub fn eval_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            BuiltinModel::Synthetic => SyntheticModelParams::reference().eval_final(x),
            BuiltinModel::Ishigami => Ok(vec![ishigami::ishigami(x)]),
            BuiltinModel::FirstInput => Ok(vec![x[0]]),
            BuiltinModel::Echo => Ok(x.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvaluatorSpec {
    Builtin { model: BuiltinModel },
    External(ExternalEvaluatorSpec),
}

impl EvaluatorSpec {
    /// `(m, n)` of the target; built-ins with free `m` take the campaign's.
    pub fn dims(&self, m: usize) -> (usize, usize) {
        match self {
            EvaluatorSpec::Builtin { model } => model.dims(m),
            EvaluatorSpec::External(spec) => (spec.m, spec.n),
        }
    }

    pub fn instantiate(&self, m: usize) -> Result<Box<dyn Evaluator>> {
        match self {
            EvaluatorSpec::Builtin { model } => Ok(Box::new(BuiltinEvaluator::new(*model, m))),
            EvaluatorSpec::External(spec) => Ok(Box::new(ExternalEvaluator::start(spec.clone())?)),
        }
    }
}

/// Evaluates a built-in model across threads, preserving order.
pub struct BuiltinEvaluator {
    model: BuiltinModel,
    m: usize,
    n: usize,
    threads: usize,
}

impl BuiltinEvaluator {
    pub fn new(model: BuiltinModel, m: usize) -> Self {
        let (m, n) = model.dims(m);
        let threads = thread::available_parallelism().map_or(1, |p| p.get()).min(8);
        Self { model, m, n, threads }
    }
}

impl Evaluator for BuiltinEvaluator {
    fn input_dim(&self) -> usize {
        self.m
    }

    fn output_dim(&self) -> usize {
        self.n
    }

    fn evaluate(&mut self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if let Some(x) = xs.iter().find(|x| x.len() != self.m) {
            return Err(SensaError::MalformedPoint {
                expected: self.m,
                actual: x.len(),
            });
        }
        let model = self.model;
        let run = |offset: usize, chunk: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
            chunk
                .iter()
                .enumerate()
                .map(|(q, x)| {
                    model.eval_point(x).map_err(|e| SensaError::EvaluationFailed {
                        index: offset + q,
                        source: Box::new(e),
                    })
                })
                .collect()
        };
        if xs.len() < 64 || self.threads == 1 {
            return run(0, xs);
        }
        let chunk = xs.len().div_ceil(self.threads);
        thread::scope(|scope| {
            let handles: Vec<_> = xs
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| scope.spawn(move || run(c * chunk, part)))
                .collect();
            let mut out = Vec::with_capacity(xs.len());
            for h in handles {
                out.extend(h.join().expect("evaluation thread panicked")?);
            }
            Ok(out)
        })
    }
}

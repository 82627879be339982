//! Metrics collection, evaluation and the significance test used to compare
//! two classifiers on one test set.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::booster::{
    iterations_for_budget, train_with, trees_to_reach, Algorithm, BoostState, LossPoint, Model, Round, StopReason,
    TrainConfig, TrainObserver,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{argmax, ClassLabel, ScoreMatrix};

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub trees: usize,
    pub train_loss: f64,
    pub test_errors: Option<usize>,
    pub test_error_rate: Option<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: [&str; 5] = ["trees", "train_loss", "test_errors", "test_error_rate", "wall_ms"];

/// Write rows as CSV with the fixed header; missing test columns are empty.
pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> Result<()> {
    if rows.windows(2).any(|w| w[0].trees >= w[1].trees) {
        return Err(Error::InvalidInput(
            "metrics rows must have increasing tree counts".into(),
        ));
    }
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub z1: u64,
    pub z2: u64,
    pub n: u64,
    pub p_hat1: f64,
    pub p_hat2: f64,
    pub z_stat: f64,
    /// Upper-tail probability of `z_stat` under the standard normal.
    pub p_value: f64,
}

/// Normal approximation test that classifier 1 (`z1` errors) is worse than
/// classifier 2 (`z2` errors), both on the same `n` test examples.
pub fn significance_test(z1: u64, z2: u64, n: u64) -> Result<SignificanceResult> {
    if n == 0 {
        return Err(Error::InvalidInput("test set size must be positive".into()));
    }
    if z1 > n || z2 > n {
        return Err(Error::InvalidInput(format!(
            "error counts {z1}, {z2} exceed test size {n}"
        )));
    }
    let nf = n as f64;
    let (p1, p2) = (z1 as f64 / nf, z2 as f64 / nf);
    let var = p1 * (1.0 - p1) / nf + p2 * (1.0 - p2) / nf;
    let z_stat = if p1 == p2 {
        0.0
    } else if var == 0.0 {
        (p1 - p2).signum() * f64::INFINITY
    } else {
        (p1 - p2) / var.sqrt()
    };
    let p_value = (0.5 * erfc(z_stat / std::f64::consts::SQRT_2)).clamp(0.0, 1.0);
    Ok(SignificanceResult {
        z1,
        z2,
        n,
        p_hat1: p1,
        p_hat2: p2,
        z_stat,
        p_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub errors: usize,
    pub total: usize,
    pub error_rate: f64,
    /// `confusion[true][predicted]` counts, by class index.
    pub confusion: Vec<Vec<usize>>,
}

pub fn evaluate(predicted: &[ClassLabel], truth: &[ClassLabel], num_classes: usize) -> Result<EvalReport> {
    if predicted.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::InvalidInput("nothing to evaluate".into()));
    }
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p.index() >= num_classes || t.index() >= num_classes {
            return Err(Error::InvalidInput(format!("class out of range 1..={num_classes}")));
        }
        confusion[t.index()][p.index()] += 1;
    }
    let errors = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(EvalReport {
        errors,
        total: truth.len(),
        error_rate: errors as f64 / truth.len() as f64,
        confusion,
    })
}

/// Test errors of `scores` against `labels`.
pub fn count_errors(scores: &ScoreMatrix, labels: &[ClassLabel]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, y)| argmax(scores.row(i)) != y.index())
        .count()
}

/// Records a [`MetricsRow`] whenever the trainer records a loss point, and
/// keeps test-set scores current one round at a time.
pub struct MetricsRecorder<'a> {
    test: Option<&'a Dataset>,
    test_scores: Option<ScoreMatrix>,
    start: Instant,
    pub rows: Vec<MetricsRow>,
}

impl<'a> MetricsRecorder<'a> {
    pub fn new(test: Option<&'a Dataset>, num_classes: usize) -> Self {
        Self {
            test,
            test_scores: test.map(|t| ScoreMatrix::zeros(t.num_examples(), num_classes)),
            start: Instant::now(),
            rows: Vec::new(),
        }
    }

    pub fn test_errors(&self) -> Option<usize> {
        Some(count_errors(self.test_scores.as_ref()?, self.test?.labels()))
    }

    fn push(&mut self, trees: usize, train_loss: f64) {
        if self.rows.last().is_some_and(|r| r.trees >= trees) {
            return;
        }
        let errors = self.test_errors();
        let rate = errors.zip(self.test).map(|(e, t)| e as f64 / t.num_examples() as f64);
        self.rows.push(MetricsRow {
            trees,
            train_loss,
            test_errors: errors,
            test_error_rate: rate,
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
    }

    /// Add the final point if the schedule skipped it.
    pub fn finish(&mut self, state: &BoostState) {
        self.push(state.trees_built, state.train_loss);
    }
}

impl TrainObserver for MetricsRecorder<'_> {
    fn probabilities_refreshed(&mut self, state: &BoostState) {
        if state.trees_built == 0 && self.rows.is_empty() {
            self.push(0, state.train_loss);
        }
    }

    fn iteration_committed(&mut self, model: &Model, round: &Round, state: &BoostState) {
        if let (Some(test), Some(scores)) = (self.test, self.test_scores.as_mut()) {
            for i in 0..test.num_examples() {
                let x = test.row(i);
                let f = scores.row_mut(i);
                for tree in &round.trees {
                    tree.add_to(&x, model.shrinkage(), f);
                }
            }
        }
        if state.loss_history.last().is_some_and(|p| p.trees == state.trees_built) {
            self.push(state.trees_built, state.train_loss);
        }
    }
}

/// Outcome of one training run under the harness.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub trees: usize,
    pub final_train_loss: f64,
    pub test_errors: Option<usize>,
    pub test_examples: Option<usize>,
    pub stop_reason: StopReason,
    pub wall_ms: u64,
    pub loss_history: Vec<LossPoint>,
    pub metrics: Vec<MetricsRow>,
}

/// Train with metrics recording; the model comes back alongside its summary.
pub fn run(train: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<(Model, RunSummary)> {
    let mut recorder = MetricsRecorder::new(test, train.num_classes());
    let start = Instant::now();
    let (model, state) = train_with(train, config, &mut recorder)?;
    recorder.finish(&state);
    let summary = RunSummary {
        algorithm: config.algorithm,
        iterations: state.iterations,
        trees: state.trees_built,
        final_train_loss: state.train_loss,
        test_errors: recorder.test_errors(),
        test_examples: test.map(Dataset::num_examples),
        stop_reason: state.stop_reason,
        wall_ms: start.elapsed().as_millis() as u64,
        loss_history: state.loss_history,
        metrics: recorder.rows,
    };
    Ok((model, summary))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub tree_budget: usize,
    pub a: RunSummary,
    pub b: RunSummary,
    /// Trees built by B over trees built by A.
    pub ratio: f64,
    /// Trees B needed to reach A's final training loss, over A's trees;
    /// `None` if B never got there.
    pub loss_matched_ratio: Option<f64>,
    /// Test of "A has more test errors than B".
    pub significance: Option<SignificanceResult>,
}

/// Train A and B on an equal tree budget and compare them.
pub fn compare(
    train: &Dataset,
    test: Option<&Dataset>,
    base: &TrainConfig,
    algo_a: Algorithm,
    algo_b: Algorithm,
    tree_budget: usize,
) -> Result<BenchReport> {
    let k = train.num_classes();
    let config_for = |algorithm| TrainConfig {
        algorithm,
        max_iterations: iterations_for_budget(algorithm, k, tree_budget),
        ..base.clone()
    };
    let (_, a) = run(train, test, &config_for(algo_a))?;
    let (_, b) = run(train, test, &config_for(algo_b))?;
    let ratio = b.trees as f64 / a.trees.max(1) as f64;
    let loss_matched_ratio =
        trees_to_reach(&b.loss_history, a.final_train_loss).map(|t| t as f64 / a.trees.max(1) as f64);
    let significance = match (a.test_errors, b.test_errors, test) {
        (Some(za), Some(zb), Some(t)) => Some(significance_test(za as u64, zb as u64, t.num_examples() as u64)?),
        _ => None,
    };
    Ok(BenchReport {
        tree_budget,
        a,
        b,
        ratio,
        loss_matched_ratio,
        significance,
    })
}

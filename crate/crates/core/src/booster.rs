//! Training loops for AOSO-LogitBoost, ABC-LogitBoost and LogitBoost, plus the
//! fitted [`Model`].

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{presort, Binning, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{argmax, link_into, link_rows_with_loss, total_loss, ClassLabel, ScoreMatrix};
use crate::pair::{ClassPair, PairRule, DEFAULT_EPS};
use crate::tree::{GrownTree, NodeObjective, TreeGrower, TreeParams, VectorTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// One adaptively paired vector tree per iteration.
    Aoso,
    /// `K - 1` fixed-pair trees per iteration against a chosen base class.
    Abc,
    /// `K` single-class trees per iteration with a diagonal Hessian.
    Logitboost,
}

impl Algorithm {
    pub fn trees_per_iteration(self, num_classes: usize) -> usize {
        match self {
            Algorithm::Aoso => 1,
            Algorithm::Abc => num_classes - 1,
            Algorithm::Logitboost => num_classes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Aoso => "aoso",
            Algorithm::Abc => "abc",
            Algorithm::Logitboost => "logitboost",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aoso" => Ok(Algorithm::Aoso),
            "abc" => Ok(Algorithm::Abc),
            "logitboost" => Ok(Algorithm::Logitboost),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// How ABC picks the base class each iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbcBaseRule {
    /// Try every base class and keep the one with the lowest training loss.
    #[default]
    Exhaustive,
    /// Use the class with the largest summed loss before the iteration.
    WorstClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    /// Leaves per tree (`J`).
    pub max_leaves: usize,
    /// Shrinkage `v`.
    pub shrinkage: f64,
    /// Maximum number of boosting iterations (`M`).
    pub max_iterations: usize,
    pub pair_rule: PairRule,
    pub abc_base_rule: AbcBaseRule,
    pub stop_eps: f64,
    pub min_node_size: usize,
    /// Record the training loss every this many trees.
    pub eval_every: usize,
    /// Quantile bins per feature; `None` scans exact values.
    pub bins: Option<usize>,
    /// Only used for optional holdout splitting by callers.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Aoso,
            max_leaves: 20,
            shrinkage: 0.1,
            max_iterations: 10_000,
            pair_rule: PairRule::SecondOrder,
            abc_base_rule: AbcBaseRule::Exhaustive,
            stop_eps: 1e-16,
            min_node_size: 1,
            eval_every: 50,
            bins: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.max_leaves < 2 {
            return bad(format!("leaves per tree must be at least 2, got {}", self.max_leaves));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return bad(format!("shrinkage must be in (0, 1], got {}", self.shrinkage));
        }
        if self.max_iterations < 1 {
            return bad("maximum iterations must be at least 1".into());
        }
        if !(self.stop_eps >= 0.0 && self.stop_eps.is_finite()) {
            return bad(format!(
                "stopping threshold must be finite and non-negative, got {}",
                self.stop_eps
            ));
        }
        if self.min_node_size < 1 {
            return bad("minimum node size must be at least 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be at least 1".into());
        }
        if let Some(b) = self.bins {
            if !(2..=256).contains(&b) {
                return bad(format!("bins must be in 2..=256, got {b}"));
            }
        }
        Ok(())
    }

    /// Tree-growth parameters implied by this config.
    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_leaves: self.max_leaves,
            min_node_size: self.min_node_size,
            eps: DEFAULT_EPS,
        }
    }
}

/// Trees committed in one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    /// ABC base class; `None` for the other algorithms.
    pub base_class: Option<ClassLabel>,
    pub trees: Vec<VectorTree>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    algorithm: Algorithm,
    num_classes: usize,
    num_features: usize,
    shrinkage: f64,
    label_values: Vec<i64>,
    config: TrainConfig,
    rounds: Vec<Round>,
}

impl Model {
    /// Assemble a model from parts, checking that they agree.
    pub fn from_parts(
        config: TrainConfig,
        num_classes: usize,
        num_features: usize,
        label_values: Vec<i64>,
        rounds: Vec<Round>,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if label_values.len() != num_classes {
            return Err(Error::InvalidInput(format!(
                "{} label values for {num_classes} classes",
                label_values.len()
            )));
        }
        if label_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("label values must be strictly increasing".into()));
        }
        let per_round = config.algorithm.trees_per_iteration(num_classes);
        for (m, round) in rounds.iter().enumerate() {
            if round.trees.len() != per_round {
                return Err(Error::InvalidInput(format!(
                    "round {m} has {} trees, expected {per_round}",
                    round.trees.len()
                )));
            }
            match (config.algorithm, round.base_class) {
                (Algorithm::Abc, Some(b)) if b.index() < num_classes => {}
                (Algorithm::Abc, _) => return Err(Error::InvalidInput(format!("round {m}: bad base class"))),
                (_, Some(_)) => return Err(Error::InvalidInput(format!("round {m}: unexpected base class"))),
                _ => {}
            }
        }
        Ok(Self {
            algorithm: config.algorithm,
            num_classes,
            num_features,
            shrinkage: config.shrinkage,
            label_values,
            config,
            rounds,
        })
    }

    fn empty(config: &TrainConfig, dataset: &Dataset) -> Self {
        Self {
            algorithm: config.algorithm,
            num_classes: dataset.num_classes(),
            num_features: dataset.num_features(),
            shrinkage: config.shrinkage,
            label_values: dataset.label_values().to_vec(),
            config: config.clone(),
            rounds: Vec::new(),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn shrinkage(&self) -> f64 {
        self.shrinkage
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Raw label for each class index.
    pub fn label_values(&self) -> &[i64] {
        &self.label_values
    }

    pub fn raw_label(&self, class: ClassLabel) -> i64 {
        self.label_values[class.index()]
    }

    pub fn rounds(&self) -> &[Round] {
        &self.rounds
    }

    pub fn num_trees(&self) -> usize {
        self.rounds.iter().map(|r| r.trees.len()).sum()
    }

    pub fn trees(&self) -> impl Iterator<Item = &VectorTree> {
        self.rounds.iter().flat_map(|r| r.trees.iter())
    }

    /// Keep only the first `rounds` iterations.
    pub fn truncated(&self, rounds: usize) -> Self {
        let mut m = self.clone();
        m.rounds.truncate(rounds);
        m
    }

    fn check_arity(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.num_features {
            return Err(Error::InvalidInput(format!(
                "expected {} features, got {}",
                self.num_features,
                x.len()
            )));
        }
        Ok(())
    }

    /// Scores `F(x)`, accumulated in training order.
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_arity(x)?;
        let mut f = vec![0.0; self.num_classes];
        for tree in self.trees() {
            tree.add_to(x, self.shrinkage, &mut f);
        }
        Ok(f)
    }

    /// Class with the largest score; ties go to the lowest class.
    pub fn predict(&self, x: &[f64]) -> Result<ClassLabel> {
        Ok(ClassLabel::from_index(argmax(&self.scores(x)?)))
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.scores(x)?;
        let mut p = vec![0.0; f.len()];
        link_into(&f, &mut p);
        Ok(p)
    }

    /// Scores for every example of `dataset`.
    pub fn score_dataset(&self, dataset: &Dataset) -> Result<ScoreMatrix> {
        if dataset.num_features() != self.num_features {
            return Err(Error::InvalidInput(format!(
                "model expects {} features, data has {}",
                self.num_features,
                dataset.num_features()
            )));
        }
        let mut scores = ScoreMatrix::zeros(dataset.num_examples(), self.num_classes);
        for i in 0..dataset.num_examples() {
            let x = dataset.row(i);
            let f = scores.row_mut(i);
            for tree in self.trees() {
                tree.add_to(&x, self.shrinkage, f);
            }
        }
        Ok(scores)
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<ClassLabel>> {
        let scores = self.score_dataset(dataset)?;
        Ok((0..scores.rows())
            .map(|i| ClassLabel::from_index(argmax(scores.row(i))))
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub trees: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Training loss reached the stopping threshold.
    Converged,
    MaxIterations,
    /// A committed update had zero total gain.
    NoProgress,
}

/// Mutable training state.
#[derive(Clone, Debug)]
pub struct BoostState {
    pub scores: ScoreMatrix,
    pub probs: ScoreMatrix,
    pub trees_built: usize,
    pub iterations: usize,
    pub train_loss: f64,
    /// Loss at tree 0, every `eval_every` trees, and at the end.
    pub loss_history: Vec<LossPoint>,
    pub iteration_times: Vec<Duration>,
    /// Times the probability matrix was recomputed.
    pub prob_refreshes: usize,
    /// Candidate trees considered, committed or not.
    pub candidate_trees: usize,
    pub stop_reason: StopReason,
}

impl BoostState {
    fn new(dataset: &Dataset) -> Self {
        let (n, k) = (dataset.num_examples(), dataset.num_classes());
        Self {
            scores: ScoreMatrix::zeros(n, k),
            probs: ScoreMatrix::zeros(n, k),
            trees_built: 0,
            iterations: 0,
            train_loss: f64::INFINITY,
            loss_history: Vec::new(),
            iteration_times: Vec::new(),
            prob_refreshes: 0,
            candidate_trees: 0,
            stop_reason: StopReason::MaxIterations,
        }
    }
}

/// Hooks into the training loop.
pub trait TrainObserver {
    /// The probability matrix was recomputed from the scores.
    fn probabilities_refreshed(&mut self, _state: &BoostState) {}

    /// An iteration was committed; `round` is its trees.
    fn iteration_committed(&mut self, _model: &Model, _round: &Round, _state: &BoostState) {}
}

impl TrainObserver for () {}

/// True when training should end before the next iteration.
pub fn should_stop(state: &BoostState, config: &TrainConfig) -> bool {
    state.train_loss <= config.stop_eps || state.iterations >= config.max_iterations
}

/// First recorded tree count at which the loss is at most `target`.
pub fn trees_to_reach(history: &[LossPoint], target: f64) -> Option<usize> {
    history.iter().find(|p| p.loss <= target).map(|p| p.trees)
}

/// Iterations giving `trees` trees for `algorithm` on `num_classes` classes.
///
/// Used to put different algorithms on an equal tree budget.
pub fn iterations_for_budget(algorithm: Algorithm, num_classes: usize, trees: usize) -> usize {
    (trees / algorithm.trees_per_iteration(num_classes)).max(1)
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Model, BoostState)> {
    train_with(dataset, config, &mut ())
}

pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, BoostState)> {
    config.validate()?;
    let k = dataset.num_classes();
    if k < 2 {
        return Err(Error::InvalidInput(format!(
            "training data needs at least 2 classes, got {k}"
        )));
    }
    let index = presort(dataset);
    let binning = config.bins.map(|b| Binning::quantile(dataset, &index, b)).transpose()?;
    let mut grower = TreeGrower::new(dataset, &index, binning.as_ref(), config.tree_params())?;
    let mut model = Model::empty(config, dataset);
    let mut state = BoostState::new(dataset);
    let mut run = Run {
        dataset,
        config,
        observer,
        next_record: config.eval_every,
    };
    run.refresh(&mut state);
    state.loss_history.push(LossPoint {
        trees: 0,
        loss: state.train_loss,
    });
    state.stop_reason = StopReason::MaxIterations;
    while !should_stop(&state, config) {
        let start = Instant::now();
        let step = match config.algorithm {
            Algorithm::Aoso => run.aoso_step(&mut grower, &state)?,
            Algorithm::Abc => run.abc_step(&mut grower, &mut state)?,
            Algorithm::Logitboost => run.logitboost_step(&mut grower, &state)?,
        };
        let Some((round, scores)) = step else {
            state.stop_reason = StopReason::NoProgress;
            break;
        };
        state.scores = scores;
        state.trees_built += round.trees.len();
        state.iterations += 1;
        model.rounds.push(round);
        run.refresh(&mut state);
        state.iteration_times.push(start.elapsed());
        run.record(&mut state);
        run.observer
            .iteration_committed(&model, model.rounds.last().expect("just pushed"), &state);
    }
    if state.train_loss <= config.stop_eps {
        state.stop_reason = StopReason::Converged;
    }
    if state.loss_history.last().map(|p| p.trees) != Some(state.trees_built) {
        state.loss_history.push(LossPoint {
            trees: state.trees_built,
            loss: state.train_loss,
        });
    }
    Ok((model, state))
}

struct Run<'a, 'o> {
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    observer: &'o mut dyn TrainObserver,
    next_record: usize,
}

type Step = Option<(Round, ScoreMatrix)>;

impl Run<'_, '_> {
    fn refresh(&mut self, state: &mut BoostState) {
        state.train_loss = link_rows_with_loss(self.dataset.labels(), &state.scores, &mut state.probs);
        state.prob_refreshes += 1;
        self.observer.probabilities_refreshed(state);
    }

    fn record(&mut self, state: &mut BoostState) {
        if state.trees_built >= self.next_record {
            state.loss_history.push(LossPoint {
                trees: state.trees_built,
                loss: state.train_loss,
            });
            let every = self.config.eval_every;
            self.next_record = (state.trees_built / every + 1) * every;
        }
    }

    fn commit(&self, state: &BoostState, grown: &[GrownTree]) -> ScoreMatrix {
        let mut scores = state.scores.clone();
        for g in grown {
            g.apply_to(&mut scores, self.config.shrinkage);
        }
        scores
    }

    fn aoso_step(&mut self, grower: &mut TreeGrower<'_>, state: &BoostState) -> Result<Step> {
        let grown = grower.grow(&state.probs, NodeObjective::Adaptive(self.config.pair_rule))?;
        if grown.total_gain <= 0.0 {
            return Ok(None);
        }
        let scores = self.commit(state, std::slice::from_ref(&grown));
        Ok(Some((
            Round {
                base_class: None,
                trees: vec![grown.tree],
            },
            scores,
        )))
    }

    fn logitboost_step(&mut self, grower: &mut TreeGrower<'_>, state: &BoostState) -> Result<Step> {
        let k = self.dataset.num_classes();
        let grown = (0..k)
            .map(|c| grower.grow(&state.probs, NodeObjective::SingleClass(ClassLabel::from_index(c))))
            .collect::<Result<Vec<_>>>()?;
        if grown.iter().all(|g| g.total_gain <= 0.0) {
            return Ok(None);
        }
        let scores = self.commit(state, &grown);
        Ok(Some((
            Round {
                base_class: None,
                trees: grown.into_iter().map(|g| g.tree).collect(),
            },
            scores,
        )))
    }

    fn abc_step(&mut self, grower: &mut TreeGrower<'_>, state: &mut BoostState) -> Result<Step> {
        let k = self.dataset.num_classes();
        let fixed = |r: usize, s: usize| NodeObjective::Fixed(ClassPair::from_indices(r, s));
        let (base, grown) = match self.config.abc_base_rule {
            AbcBaseRule::WorstClass => {
                let b = worst_class(self.dataset.labels(), &state.probs, k);
                let grown = (0..k)
                    .filter(|&c| c != b)
                    .map(|c| grower.grow(&state.probs, fixed(c, b)))
                    .collect::<Result<Vec<_>>>()?;
                state.candidate_trees += k - 1;
                (b, grown)
            }
            AbcBaseRule::Exhaustive => {
                // Trees for (a, b) and (b, a) differ only by orientation, so
                // each unordered pair is grown once and mirrored.
                let mut table: Vec<Option<GrownTree>> = vec![None; k * k];
                for a in 0..k {
                    for b in a + 1..k {
                        let g = grower.grow(&state.probs, fixed(a, b))?;
                        table[b * k + a] = Some(GrownTree {
                            tree: g.tree.mirrored(),
                            leaf_of: g.leaf_of.clone(),
                            total_gain: g.total_gain,
                        });
                        table[a * k + b] = Some(g);
                    }
                }
                state.candidate_trees += k * (k - 1);
                let candidate = |b: usize| -> Vec<&GrownTree> {
                    (0..k)
                        .filter(|&c| c != b)
                        .map(|c| table[c * k + b].as_ref().expect("all ordered pairs grown"))
                        .collect()
                };
                let mut best: Option<(usize, f64)> = None;
                for b in 0..k {
                    let mut scores = state.scores.clone();
                    for g in candidate(b) {
                        g.apply_to(&mut scores, self.config.shrinkage);
                    }
                    let loss = total_loss(self.dataset.labels(), &scores);
                    if best.is_none_or(|(_, l)| loss < l) {
                        best = Some((b, loss));
                    }
                }
                let b = best.expect("at least two classes").0;
                let mut grown = Vec::with_capacity(k - 1);
                for c in (0..k).filter(|&c| c != b) {
                    grown.push(table[c * k + b].take().expect("all ordered pairs grown"));
                }
                (b, grown)
            }
        };
        if grown.iter().all(|g| g.total_gain <= 0.0) {
            return Ok(None);
        }
        let scores = self.commit(state, &grown);
        Ok(Some((
            Round {
                base_class: Some(ClassLabel::from_index(base)),
                trees: grown.into_iter().map(|g| g.tree).collect(),
            },
            scores,
        )))
    }
}

/// Class whose examples carry the largest total loss; ties go to the lowest class.
pub fn worst_class(labels: &[ClassLabel], probs: &ScoreMatrix, num_classes: usize) -> usize {
    let mut per_class = vec![0.0; num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y.index()] += -probs.row(i)[y.index()].max(crate::numerics::LOSS_PROB_FLOOR).ln();
    }
    argmax(&per_class)
}

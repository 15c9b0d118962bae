//! End-to-end helpers: synthesize a dataset, train one model, run seeded trials.

use serde::{Deserialize, Serialize};

use crate::corpus::{generate_logs, GeneratorConfig};
use crate::error::{Result, SteerError};
use crate::eval::{evaluate_with_predictions, EvalReport, TrialSummary};
use crate::model::{Prediction, SteerConfig, SteerModel, Variant, Vocabs};
use crate::sampler::{build_dataset, mine, DatasetSplits, Label, LabeledPair, SamplerConfig};
use crate::seeds::{derive_seed, stream};
use crate::training::{train, TrainConfig, TrainReport};

/// Generates logs and mines balanced splits from them.
pub fn synthesize(generator: &GeneratorConfig, sampler: &SamplerConfig, split_seed: u64) -> Result<DatasetSplits> {
    let logs = generate_logs(generator)?;
    let mined = mine(&logs.turns, sampler)?;
    build_dataset(mined.positives, mined.negatives, split_seed)
}

/// Synthesizes a balanced dataset of exactly `pairs` pairs (rounded down to
/// even), growing the simulated log until enough positives are mined.
pub fn synthesize_pairs(pairs: usize, generator: &GeneratorConfig, sampler: &SamplerConfig, seed: u64) -> Result<DatasetSplits> {
    let per_class = pairs / 2;
    if per_class == 0 {
        return Err(SteerError::Config("at least two pairs are needed".into()));
    }
    let mut cfg = generator.clone();
    cfg.seed = derive_seed(seed, stream::CORPUS);
    for _ in 0..8 {
        let logs = generate_logs(&cfg)?;
        let mined = mine(&logs.turns, sampler)?;
        let have = mined.positives.len().min(mined.negatives.len());
        if have >= per_class {
            let mut pos = mined.positives;
            let mut neg = mined.negatives;
            // build_dataset downsamples the larger class; trim both first.
            let split_seed = derive_seed(seed, stream::SAMPLE);
            let keep = |v: &mut Vec<LabeledPair>, s: u64| {
                use rand::seq::index;
                let mut rng = crate::seeds::rng(split_seed, s);
                let mut idx = index::sample(&mut rng, v.len(), per_class).into_vec();
                idx.sort_unstable();
                let picked: Vec<LabeledPair> = idx.into_iter().map(|i| v[i].clone()).collect();
                *v = picked;
            };
            keep(&mut pos, 1);
            keep(&mut neg, 2);
            return build_dataset(pos, neg, split_seed);
        }
        let rate = have.max(1) as f64 / cfg.conversations as f64;
        cfg.conversations = ((per_class as f64 / rate) * 1.1).ceil() as usize + 1;
    }
    Err(SteerError::Config(format!("could not mine {per_class} pairs per class")))
}

/// Pools all splits and re-splits them with `seed`.
pub fn resplit(splits: &DatasetSplits, seed: u64) -> Result<DatasetSplits> {
    let (pos, neg): (Vec<LabeledPair>, Vec<LabeledPair>) = splits
        .parts()
        .into_iter()
        .flatten()
        .cloned()
        .partition(|p| p.label == Label::Steering);
    build_dataset(pos, neg, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: SteerConfig,
    pub train: TrainConfig,
    pub min_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: SteerConfig::default(),
            train: TrainConfig::default(),
            min_count: 1,
        }
    }
}

pub struct TrialOutcome {
    pub model: SteerModel<f32>,
    pub vocabs: Vocabs,
    pub train_report: TrainReport,
    pub test_report: EvalReport,
    pub test_predictions: Vec<Prediction>,
    pub seed: u64,
}

/// The model config for `variant`, sized to `vocabs`.
pub fn bind_config(base: &SteerConfig, variant: Variant, vocabs: &Vocabs) -> SteerConfig {
    SteerConfig {
        variant,
        token_vocab_size: vocabs.tokens.len(),
        node_vocab_size: vocabs.nodes.len(),
        ..base.clone()
    }
}

/// Builds vocabularies from the training split, trains, and evaluates on test.
pub fn run_single(splits: &DatasetSplits, variant: Variant, config: &ExperimentConfig, seed: u64) -> Result<TrialOutcome> {
    let vocabs = Vocabs::build(&splits.train, config.min_count)?;
    let model_cfg = bind_config(&config.model, variant, &vocabs);
    let mut model = SteerModel::new(model_cfg, derive_seed(seed, stream::INIT))?;
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let train_report = train(&mut model, &vocabs, &splits.train, &splits.validation, &train_cfg)?;
    let (test_report, test_predictions) = evaluate_with_predictions(&model, &vocabs, &splits.test)?;
    Ok(TrialOutcome {
        model,
        vocabs,
        train_report,
        test_report,
        test_predictions,
        seed,
    })
}

/// Seed of trial `i`; trials differ in both the split and the model init.
pub fn trial_seed(base: u64, i: usize) -> u64 {
    derive_seed(derive_seed(base, stream::TRIAL), i as u64)
}

/// Runs `n` trials of `variant`, re-splitting the pooled data per trial.
pub fn run_trials(
    splits: &DatasetSplits,
    variant: Variant,
    config: &ExperimentConfig,
    base_seed: u64,
    n: usize,
) -> Result<(TrialSummary, Vec<TrialOutcome>)> {
    let outcomes = (0..n)
        .map(|i| {
            let seed = trial_seed(base_seed, i);
            let data = resplit(splits, seed)?;
            log::info!("{} trial {}/{n}", variant.display_name(), i + 1);
            run_single(&data, variant, config, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = outcomes.iter().map(|o| o.test_report.clone()).collect();
    Ok((TrialSummary::from_reports(variant.display_name(), &reports)?, outcomes))
}

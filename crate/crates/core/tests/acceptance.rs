//! Acceptance suite: runs all ten criteria and prints one PASS/FAIL line each.
//!
//! Criteria 5, 7 and 8 share one model trained at the default desk config.

// `ensure!(a >= b)` negates the condition on purpose so that NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::index;
use steer_core::analysis::{aggregate_friction, friction_records};
use steer_core::checkpoint::{self, SaveInfo};
use steer_core::corpus::{generate_logs, GeneratorConfig, Turn};
use steer_core::eval::{
    domain_breakdown, evaluate, predict_pairs, render_domain_table, render_results_table, summary_column,
    EvalReport,
};
use steer_core::model::{encode_inputs, SteerConfig, SteerModel, Variant, Vocabs};
use steer_core::pipeline::{run_single, run_trials, synthesize, synthesize_pairs, ExperimentConfig, TrialOutcome};
use steer_core::sampler::{find_reiterations, make_negatives, mine, DatasetSplits, Label, LabeledPair, SamplerConfig};
use steer_core::seeds;
use steer_core::spt::{self, build_node_vocab, SptCaps};
use steer_core::training::{lr_at, TrainConfig};
use steer_nn::Graph;

type Check = Result<String, String>;
type RunOutput = (EvalReport, Vec<u32>, Vec<(f64, f64)>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn or_fail<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// The alarm parse tree used as the reference example for linearization.
const ALARM_TREE: &str = "create:alarm\n    .name.Str(\"bedtime\")\n    .time.Time\n        .hour.Int(10)\n        .minute.Int(30)";

fn c1_spt_fixture() -> Check {
    let start = Instant::now();
    let tree = or_fail(spt::parse(ALARM_TREE))?;
    let vocab = build_node_vocab([&tree]);
    let lin = or_fail(spt::linearize_encode(&tree, &vocab, SptCaps::default()))?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(lin.depth_ids == [0, 1, 1, 2, 2], "depth indices {:?}", lin.depth_ids);
    ensure!(lin.sibling_ids == [0, 0, 1, 0, 1], "sibling indices {:?}", lin.sibling_ids);
    let labels: Vec<&str> = lin.node_ids.iter().map(|&i| vocab.label(i).unwrap_or("?")).collect();
    ensure!(
        labels == ["create:alarm", ".name.Str", ".time.Time", ".hour.Int", ".minute.Int"],
        "node labels {labels:?}"
    );
    ensure!(secs < 1.0, "took {secs:.3}s");
    Ok(format!("depth {:?}, sibling {:?} in {:.1} ms", lin.depth_ids, lin.sibling_ids, secs * 1e3))
}

/// Independent normalization: lowercase, collapse whitespace, drop trailing
/// punctuation and whitespace.
fn oracle_words(text: &str) -> Vec<String> {
    let joined = text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    let trimmed = joined.trim_end_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation());
    trimmed.split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

fn oracle_is_reiteration(a: &Turn, b: &Turn, window: i64) -> bool {
    let gap = b.timestamp_ms - a.timestamp_ms;
    if a.conversation_id != b.conversation_id || gap < 0 || gap > window {
        return false;
    }
    let (wa, wb) = (oracle_words(&a.text), oracle_words(&b.text));
    !wa.is_empty() && wa.len() < wb.len() && wb[..wa.len()] == wa[..]
}

fn c2_sampler_oracle() -> Check {
    let cfg = GeneratorConfig {
        conversations: 2600,
        seed: 2024,
        ..GeneratorConfig::default()
    };
    let mut turns = or_fail(generate_logs(&cfg))?.turns;
    ensure!(turns.len() >= 10_000, "only {} turns generated", turns.len());
    turns.truncate(10_000);
    let sampler = SamplerConfig::default();

    let start = Instant::now();
    let found = find_reiterations(&turns, &sampler);
    let mined = or_fail(mine(&turns, &sampler))?;
    let secs = start.elapsed().as_secs_f64();

    // Brute force: sort by (conversation, turn index), scan neighbours.
    let mut sorted: Vec<&Turn> = turns.iter().collect();
    sorted.sort_by(|a, b| (&a.conversation_id, a.turn_index).cmp(&(&b.conversation_id, b.turn_index)));
    let mut oracle_pos = Vec::new();
    let mut oracle_neg = Vec::new();
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        let gap = b.timestamp_ms - a.timestamp_ms;
        if a.conversation_id != b.conversation_id || !(0..=sampler.window_ms).contains(&gap) {
            continue;
        }
        if oracle_is_reiteration(a, b, sampler.window_ms) {
            oracle_pos.push((a, b));
        } else {
            oracle_neg.push((a, b));
        }
    }
    let key = |(a, b): &(&Turn, &Turn)| (a.conversation_id.clone(), a.turn_index, b.turn_index);
    let got: Vec<_> = found.iter().map(key).collect();
    let want: Vec<_> = oracle_pos.iter().map(key).collect();
    ensure!(got == want, "find_reiterations returned {} pairs, oracle {}", got.len(), want.len());

    // Positives and negatives partition the in-window consecutive pairs.
    let multiset = |v: Vec<(String, String)>| {
        let mut m: BTreeMap<(String, String), usize> = BTreeMap::new();
        for k in v {
            *m.entry(k).or_default() += 1;
        }
        m
    };
    let pos_got = multiset(
        mined
            .positives
            .iter()
            .map(|p| (p.context_text.clone(), p.full_reiteration_text.clone().unwrap_or_default()))
            .collect(),
    );
    let pos_want = multiset(oracle_pos.iter().map(|(a, b)| (a.text.clone(), b.text.clone())).collect());
    let neg_got = multiset(mined.negatives.iter().map(|p| (p.context_text.clone(), p.followup_text.clone())).collect());
    let neg_want = multiset(oracle_neg.iter().map(|(a, b)| (a.text.clone(), b.text.clone())).collect());
    ensure!(pos_got == pos_want, "positive pairs differ from the oracle");
    ensure!(neg_got == neg_want, "negative pairs differ from the oracle");
    ensure!(
        make_negatives(&turns, &sampler).len() + found.len() == oracle_pos.len() + oracle_neg.len(),
        "positives and negatives do not cover the in-window pairs"
    );
    ensure!(secs < 10.0, "mining took {secs:.2}s");
    Ok(format!(
        "10000 turns: {} reiterations, {} negatives match the brute-force scan ({:.0} ms)",
        oracle_pos.len(),
        oracle_neg.len(),
        secs * 1e3
    ))
}

fn c3_schedule() -> Check {
    let mut out = Vec::new();
    for epochs in [60, 300] {
        let c = TrainConfig {
            epochs,
            ..TrainConfig::default()
        };
        let rel = |t: f64, want: f64| -> Result<f64, String> { Ok((or_fail(lr_at(&c, t))? - want).abs() / want) };
        let errs = [rel(0.0, 1e-7)?, rel(c.warmup(), 1e-4)?, rel(epochs as f64, 1e-7)?];
        ensure!(errs.iter().all(|&e| e <= 1e-12), "epochs {epochs}: relative errors {errs:?}");
        out.push(format!("{epochs} epochs max rel err {:.1e}", errs.iter().cloned().fold(0.0, f64::max)));
    }
    Ok(out.join("; "))
}

fn gradcheck_config(vocabs: &Vocabs) -> SteerConfig {
    SteerConfig {
        variant: Variant::SteerPlus,
        num_layers: 1,
        d_model: 8,
        num_heads: 2,
        ffn_dim: 16,
        max_seq_len: 6,
        dropout: 0.0,
        token_vocab_size: vocabs.tokens.len(),
        node_vocab_size: vocabs.nodes.len(),
        token_dim: 8,
        position_dim: 8,
        turn_dim: 8,
        node_dim: 8,
        depth_dim: 8,
        sibling_dim: 8,
        ..SteerConfig::default()
    }
}

fn c4_gradients() -> Check {
    const EPS: f64 = 1e-5;
    let start = Instant::now();
    let tree = "create:alarm\n    .time.Time";
    let pairs = [
        LabeledPair {
            context_spt: Some(tree.into()),
            ..LabeledPair::new("set an alarm", "for seven am", Label::Steering)
        },
        LabeledPair {
            context_spt: Some(tree.into()),
            ..LabeledPair::new("wake me up", "play some jazz", Label::FollowUp)
        },
    ];
    let vocabs = or_fail(Vocabs::build(&pairs, 1))?;
    let mut worst = Vec::new();
    for combine in [steer_core::model::SptCombine::Sum, steer_core::model::SptCombine::ConcatProject] {
        let cfg = SteerConfig {
            spt_combine: combine,
            ..gradcheck_config(&vocabs)
        };
        let model32 = or_fail(SteerModel::<f32>::new(cfg.clone(), 17))?;
        let mut model = model32.cast::<f64>();
        let inputs = pairs
            .iter()
            .map(|p| encode_inputs(p, &vocabs, &cfg))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        ensure!(
            inputs.iter().all(|x| x.token_ids.len() == 6 && x.spt.as_ref().map(|s| s.len()) == Some(2)),
            "fixture is not 6 tokens + 2 nodes"
        );
        let labels: Vec<usize> = pairs.iter().map(|p| p.label.class()).collect();
        let loss = |m: &SteerModel<f64>| -> Result<f64, String> {
            let mut g = Graph::new(m.params());
            let l = or_fail(m.loss(&mut g, &inputs, &labels, None))?;
            Ok(g.value(l).data()[0])
        };
        let grads = {
            let mut g = Graph::new(model.params());
            let l = or_fail(model.loss(&mut g, &inputs, &labels, None))?;
            or_fail(g.backward(l))?
        };
        let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name.clone(), p.value.len())).collect();
        let mut max_rel: (f64, String) = (0.0, String::new());
        for (id, name, n) in ids {
            let analytic: Vec<f64> = match grads.get(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; n],
            };
            let mut numeric = vec![0.0; n];
            for (i, num) in numeric.iter_mut().enumerate() {
                let orig = model.params().get(id).value.data()[i];
                model.params_mut().get_mut(id).value.data_mut()[i] = orig + EPS;
                let plus = loss(&model)?;
                model.params_mut().get_mut(id).value.data_mut()[i] = orig - EPS;
                let minus = loss(&model)?;
                model.params_mut().get_mut(id).value.data_mut()[i] = orig;
                *num = (plus - minus) / (2.0 * EPS);
            }
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
            let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-6);
            ensure!(rel <= 1e-4, "{combine:?} {name}: relative error {rel:e}");
            if rel > max_rel.0 {
                max_rel = (rel, name);
            }
        }
        worst.push(format!("{combine:?} worst {:.1e} ({})", max_rel.0, max_rel.1));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{} in {secs:.1}s", worst.join(", ")))
}

struct Shared {
    splits: DatasetSplits,
    outcome: TrialOutcome,
}

const PAPER_STEER_MACRO: f64 = 95.99;
const PAPER_STEER_PLUS_MACRO: f64 = 96.44;
const PAPER_UPPER_BOUND_FRACTION: f64 = 62.17;
const PAPER_STEER_FRACTION: f64 = 58.06;
const BUDGET_SECS: f64 = 1800.0;

fn c5_learnability(shared: &mut Option<Shared>) -> Check {
    let start = Instant::now();
    let splits = or_fail(synthesize_pairs(20_000, &GeneratorConfig::default(), &SamplerConfig::default(), 5))?;
    ensure!(splits.len() == 20_000, "dataset has {} pairs", splits.len());
    let pos = splits.parts().iter().flat_map(|p| p.iter()).filter(|p| p.label == Label::Steering).count();
    ensure!(pos == 10_000, "dataset has {pos} positives");
    ensure!(
        (splits.train.len(), splits.validation.len(), splits.test.len()) == (16_000, 2_000, 2_000),
        "split sizes"
    );
    let mut cfg = ExperimentConfig::default();
    // Leave room for the final test evaluation inside the overall budget.
    cfg.train.time_budget_secs = Some(BUDGET_SECS - 120.0 - start.elapsed().as_secs_f64());
    let outcome = or_fail(run_single(&splits, Variant::Steer, &cfg, 5))?;
    let secs = start.elapsed().as_secs_f64();
    let macro_acc = or_fail(outcome.test_report.require_macro())?;
    let detail = format!(
        "test macro {macro_acc:.2}% after {} epochs (best {}, {:?}) in {:.1} min; reference on the original data: {PAPER_STEER_MACRO}%",
        outcome.train_report.epochs_run,
        outcome.train_report.best_epoch,
        outcome.train_report.stop_reason,
        secs / 60.0
    );
    *shared = Some(Shared { splits, outcome });
    ensure!(macro_acc >= 90.0, "{detail}");
    ensure!(secs <= BUDGET_SECS, "{detail}");
    Ok(detail)
}

fn small_experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    let m = &mut cfg.model;
    m.num_layers = 2;
    m.d_model = 64;
    m.num_heads = 4;
    m.ffn_dim = 256;
    for d in [
        &mut m.token_dim,
        &mut m.position_dim,
        &mut m.turn_dim,
        &mut m.node_dim,
        &mut m.depth_dim,
        &mut m.sibling_dim,
    ] {
        *d = 64;
    }
    cfg.train.epochs = 12;
    cfg.train.patience = 3;
    cfg
}

fn merged(outcomes: &[TrialOutcome]) -> EvalReport {
    let mut total = EvalReport::default();
    for o in outcomes {
        total.merge(&o.test_report);
    }
    total
}

fn c6_non_inferiority() -> Check {
    let splits = or_fail(synthesize_pairs(4_000, &GeneratorConfig::default(), &SamplerConfig::default(), 6))?;
    let cfg = small_experiment();
    let (steer, steer_runs) = or_fail(run_trials(&splits, Variant::Steer, &cfg, 60, 5))?;
    let (plus, plus_runs) = or_fail(run_trials(&splits, Variant::SteerPlus, &cfg, 60, 5))?;
    let (a, b) = (steer.macro_accuracy.mean, plus.macro_accuracy.mean);

    println!("{}", render_results_table(&[summary_column(&steer), summary_column(&plus)]));
    println!("reference on the original data: STEER {PAPER_STEER_MACRO}, STEER+ {PAPER_STEER_PLUS_MACRO} macro");
    let rows = domain_breakdown(&merged(&steer_runs), &merged(&plus_runs));
    ensure!(!rows.is_empty(), "empty domain report");
    println!("{}", render_domain_table(&rows, "STEER", "STEER+"));
    let improved = rows.iter().filter(|r| r.delta.is_some_and(|d| d > 0.0)).count();
    ensure!(b >= a - 0.5, "STEER+ mean macro {b:.2} < STEER {a:.2} - 0.5");
    Ok(format!(
        "5 seeds: STEER {a:.2}, STEER+ {b:.2} (delta {:+.2}); {} domains reported, {improved} improved",
        b - a,
        rows.len()
    ))
}

fn c7_friction(shared: Option<&Shared>) -> Check {
    let Some(s) = shared else {
        return Err("no trained model (criterion 5 did not produce one)".into());
    };
    let test = &s.splits.test;
    let labels: Vec<Label> = s.outcome.test_predictions.iter().map(|p| p.label).collect();
    let records = or_fail(friction_records(test, &labels))?;
    for r in &records {
        let y = i64::from(r.detected);
        ensure!(r.f == r.f_request as i64 * y - r.f_steer as i64 * (1 - y), "identity fails on {:?}", r.pair);
    }
    let summary = or_fail(aggregate_friction(&records))?;
    ensure!(
        summary.mean_fraction_saved <= summary.upper_bound_fraction,
        "model {} above bound {}",
        summary.mean_fraction_saved,
        summary.upper_bound_fraction
    );
    // Brute force over the test positives with plain whitespace word counts.
    let positives: Vec<&LabeledPair> = test.iter().filter(|p| p.label == Label::Steering).collect();
    ensure!(positives.len() == records.len(), "record count");
    let words = |t: &str| t.split_whitespace().count() as f64;
    let brute = positives
        .iter()
        .map(|p| words(&p.context_text) / words(p.full_reiteration_text.as_deref().unwrap_or("")))
        .sum::<f64>()
        / positives.len() as f64;
    ensure!(brute == summary.upper_bound_fraction, "bound {} vs brute force {brute}", summary.upper_bound_fraction);
    Ok(format!(
        "{} positives: {:.3} words / {:.2}% saved, upper bound {:.3} / {:.2}% (reference: {PAPER_STEER_FRACTION}% and {PAPER_UPPER_BOUND_FRACTION}%)",
        records.len(),
        summary.mean_words_saved,
        100.0 * summary.mean_fraction_saved,
        summary.upper_bound_words,
        100.0 * summary.upper_bound_fraction
    ))
}

fn c8_checkpoint(shared: Option<&Shared>) -> Check {
    let Some(s) = shared else {
        return Err("no trained model (criterion 5 did not produce one)".into());
    };
    let mut rng = seeds::rng(8, seeds::stream::EVAL);
    let picked: Vec<LabeledPair> = index::sample(&mut rng, s.splits.test.len(), 100)
        .into_iter()
        .map(|i| s.splits.test[i].clone())
        .collect();
    let dir = or_fail(tempfile::tempdir())?;
    let before = or_fail(predict_pairs(&s.outcome.model, &s.outcome.vocabs, &picked))?;
    or_fail(checkpoint::save(dir.path(), &s.outcome.model, &s.outcome.vocabs, &SaveInfo::default()))?;
    let loaded = or_fail(checkpoint::load(dir.path()))?;
    let after = or_fail(predict_pairs(&loaded.model, &loaded.vocabs, &picked))?;
    for (i, (x, y)) in before.iter().zip(&after).enumerate() {
        ensure!(
            x.label == y.label && x.p_steer.to_bits() == y.p_steer.to_bits(),
            "pair {i}: {x:?} vs {y:?}"
        );
    }
    Ok(format!("100 pairs identical to the bit after save/load ({} parameters)", loaded.model.num_parameters()))
}

fn c9_determinism() -> Check {
    let run = || -> Result<RunOutput, String> {
        let generator = GeneratorConfig {
            conversations: 600,
            seed: 99,
            ..GeneratorConfig::default()
        };
        let splits = or_fail(synthesize(&generator, &SamplerConfig::default(), 99))?;
        // Round-trip the splits through disk as the CLI would.
        let dir = or_fail(tempfile::tempdir())?;
        or_fail(splits.write_dir(dir.path()))?;
        let splits = or_fail(DatasetSplits::read_dir(dir.path(), 99))?;
        let mut cfg = small_experiment();
        cfg.train.epochs = 3;
        let o = or_fail(run_single(&splits, Variant::SteerPlus, &cfg, 99))?;
        let report = or_fail(evaluate(&o.model, &o.vocabs, &splits.test))?;
        let bits = o
            .model
            .params()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        let curves = o.train_report.curves.iter().map(|c| (c.train_loss, c.val_macro)).collect();
        Ok((report, bits, curves))
    };
    let a = run()?;
    let b = run()?;
    ensure!(a.0 == b.0, "test metrics differ");
    ensure!(a.2 == b.2, "training curves differ");
    ensure!(a.1 == b.1, "parameters differ");
    Ok(format!(
        "two gen->sample->train->eval runs agree: macro {:.2}, {} parameters bit-identical",
        a.0.macro_accuracy.unwrap_or(f64::NAN),
        a.1.len()
    ))
}

fn c10_macro_definition() -> Check {
    // 100 positives with 80 correct; 900 negatives with 855 correct.
    let mut outcomes = Vec::new();
    for i in 0..100 {
        outcomes.push((Label::Steering, if i < 80 { Label::Steering } else { Label::FollowUp }, "d"));
    }
    for i in 0..900 {
        outcomes.push((Label::FollowUp, if i < 855 { Label::FollowUp } else { Label::Steering }, "d"));
    }
    let r = EvalReport::from_outcomes(outcomes);
    ensure!(r.positive_accuracy == Some(80.0), "positive {:?}", r.positive_accuracy);
    ensure!(r.negative_accuracy == Some(95.0), "negative {:?}", r.negative_accuracy);
    ensure!(r.macro_accuracy == Some(87.5), "macro {:?}", r.macro_accuracy);
    // Pooled accuracy would be 935/1000.
    ensure!(r.macro_accuracy != Some(93.5), "macro equals pooled accuracy");
    Ok("900 negatives / 100 positives: 80.00 and 95.00 give macro 87.50 (pooled would be 93.50)".into())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut shared: Option<Shared> = None;
    let mut results: Vec<(usize, &str, Check)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let started = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let status = if r.is_ok() { "PASS" } else { "FAIL" };
        let detail = match &r {
            Ok(d) | Err(d) => d.clone(),
        };
        println!(
            "criterion {n:>2} [{status}] {name}: {detail} ({:.1}s)",
            started.elapsed().as_secs_f64()
        );
        results.push((n, name, r));
    };
    run(1, "parse tree fixture", &mut c1_spt_fixture);
    run(2, "sampler oracle equivalence", &mut c2_sampler_oracle);
    run(3, "schedule endpoints", &mut c3_schedule);
    run(4, "gradient correctness", &mut c4_gradients);
    run(5, "learnability at desk scale", &mut || c5_learnability(&mut shared));
    run(6, "STEER+ non-inferiority", &mut c6_non_inferiority);
    run(7, "friction identity and bound", &mut || c7_friction(shared.as_ref()));
    run(8, "checkpoint round trip", &mut || c8_checkpoint(shared.as_ref()));
    run(9, "determinism", &mut c9_determinism);
    run(10, "macro accuracy definition", &mut c10_macro_definition);

    println!();
    let failed: Vec<_> = results.iter().filter(|r| r.2.is_err()).collect();
    for (n, name, r) in &results {
        println!("{:<4} {n:>2} {name}", if r.is_ok() { "PASS" } else { "FAIL" });
    }
    if !failed.is_empty() {
        println!("{} of {} criteria failed", failed.len(), results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}

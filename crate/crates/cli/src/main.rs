use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use steer_cli::manifest::manifest_path;
use steer_cli::{predict_stream, RunManifest, Settings};
use steer_core::analysis::{self, FrictionRecord};
use steer_core::checkpoint::{self, Checkpoint, SaveInfo};
use steer_core::corpus::{generate_logs, ingest_logs, write_logs};
use steer_core::eval::{self, EvalReport};
use steer_core::model::Variant;
use steer_core::pipeline::{self, TrialOutcome};
use steer_core::sampler::{self, DatasetSplits, LabeledPair, SPLIT_FILES};
use steer_core::textproc::PosLexicon;

#[derive(Parser)]
#[command(name = "steer", version, about = "Steering detection for voice-assistant follow-ups")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON settings file; flags override it.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Output file or directory (meaning depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate assistant logs (JSONL turns).
    Gen(GenArgs),
    /// Mine labeled pairs from logs and write train/validation/test splits.
    Sample(SampleArgs),
    /// Train a classifier and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or compare two per domain.
    Eval(EvalArgs),
    /// Friction accounting, histograms and boundary POS transitions.
    Analyze(AnalyzeArgs),
    /// Classify JSONL pairs from stdin, a file, or a TCP socket.
    Predict(PredictArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    conversations: Option<usize>,
    #[arg(long)]
    reiteration_probability: Option<f64>,
    /// Share of independent turns replaced by unlabeled continuation fragments.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    /// Log file written by `gen` (or any JSONL turn log).
    #[arg(long = "in", value_name = "LOGS")]
    input: PathBuf,
    #[arg(long)]
    window_ms: Option<i64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "steer")]
    variant: Variant,
    /// Directory holding the split files.
    #[arg(long, default_value = "splits")]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr_peak: Option<f64>,
    /// Wall-clock budget in seconds; no epoch starts that would overrun it.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Independent trials, each with its own split and initialization.
    #[arg(long, default_value_t = 1)]
    trials: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Pair file, or a split directory (its test file is used).
    #[arg(long)]
    data: PathBuf,
    /// Second checkpoint; adds a per-domain comparison.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Pair file, or a split directory (its test file is used).
    #[arg(long)]
    data: PathBuf,
    /// Needed for --friction and --hist.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Second checkpoint for the histogram difference.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long)]
    friction: bool,
    #[arg(long)]
    pos: bool,
    #[arg(long)]
    hist: bool,
    #[arg(long, default_value_t = 0.1)]
    bin_width: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Read requests from this file instead of stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Serve on this TCP address instead of reading stdin.
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,
    /// Exit after serving this many connections.
    #[arg(long)]
    max_connections: Option<usize>,
    /// Largest number of lines held in flight.
    #[arg(long, default_value_t = 64)]
    batch: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::new()
        .parse_filters(level)
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

struct Ctx {
    settings: Settings,
    out: Option<PathBuf>,
    started: Instant,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.settings.seed
    }

    fn out_or(&self, default: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(default))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    let ctx = Ctx {
        settings,
        out: cli.out,
        started: Instant::now(),
    };
    match cli.command {
        Command::Gen(a) => gen(ctx, a),
        Command::Sample(a) => sample(ctx, a),
        Command::Train(a) => train(ctx, a),
        Command::Eval(a) => evaluate(ctx, a),
        Command::Analyze(a) => analyze(ctx, a),
        Command::Predict(a) => predict(ctx, a),
    }
}

fn to_value(v: &impl Serialize) -> anyhow::Result<Value> {
    Ok(serde_json::to_value(v)?)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn gen(ctx: Ctx, a: GenArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.settings.generator.clone();
    cfg.seed = ctx.seed();
    if let Some(n) = a.conversations {
        cfg.conversations = n;
    }
    if let Some(p) = a.reiteration_probability {
        cfg.reiteration_probability = p;
    }
    if let Some(p) = a.noise {
        cfg.steering_noise_probability = p;
    }
    let out = ctx.out_or("logs.jsonl");
    let logs = generate_logs(&cfg)?;
    let mut w = create(&out)?;
    write_logs(&mut w, &logs.turns)?;
    w.flush()?;
    eprintln!(
        "wrote {} turns ({} planted reiterations) to {}",
        logs.turns.len(),
        logs.reiterations,
        out.display()
    );

    let mut m = RunManifest::new("gen", ctx.seed(), to_value(&cfg)?);
    m.outputs.push(out.clone());
    m.summary = json!({ "turns": logs.turns.len(), "reiterations": logs.reiterations, "noise_turns": logs.noise_turns });
    m.finish(ctx.started);
    m.write(&manifest_path(&out, false))
}

fn sample(ctx: Ctx, a: SampleArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.settings.sampler;
    if let Some(w) = a.window_ms {
        cfg.window_ms = w;
    }
    let f = File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?;
    let report = ingest_logs(BufReader::new(f))?;
    for w in report.warnings.iter().take(10) {
        log::warn!("{w}");
    }
    let mined = sampler::mine(&report.turns, &cfg)?;
    let (npos, nneg) = (mined.positives.len(), mined.negatives.len());
    let splits = sampler::build_dataset(mined.positives, mined.negatives, ctx.seed())?;
    let out = ctx.out_or("splits");
    splits.write_dir(&out)?;
    eprintln!(
        "mined {npos} positives and {nneg} negatives; wrote {}/{}/{} pairs to {}",
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        out.display()
    );

    let mut m = RunManifest::new("sample", ctx.seed(), to_value(&cfg)?);
    m.inputs.push(a.input);
    m.outputs = SPLIT_FILES.iter().map(|f| out.join(f)).collect();
    m.summary = json!({
        "turns": report.turns.len(),
        "skipped_lines": report.skipped,
        "positives_mined": npos,
        "negatives_mined": nneg,
        "train": splits.train.len(),
        "validation": splits.validation.len(),
        "test": splits.test.len(),
    });
    m.finish(ctx.started);
    m.write(&manifest_path(&out, true))
}

fn save_outcome(dir: &Path, o: &TrialOutcome) -> anyhow::Result<()> {
    let info = SaveInfo {
        epoch: Some(o.train_report.best_epoch),
        val_macro: Some(o.train_report.best_val_macro),
        seed: Some(o.seed),
    };
    checkpoint::save(dir, &o.model, &o.vocabs, &info)?;
    write_text(&dir.join("train_report.json"), &o.train_report.to_json()?)?;
    o.train_report.write_curves_csv(create(&dir.join("curves.csv"))?)?;
    write_text(&dir.join("test_report.json"), &o.test_report.to_json()?)?;
    Ok(())
}

fn train(ctx: Ctx, a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = ctx.settings.experiment.clone();
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.patience {
        t.patience = v;
    }
    if let Some(v) = a.lr_peak {
        t.lr_peak = v;
    }
    if a.time_budget.is_some() {
        t.time_budget_secs = a.time_budget;
    }
    if a.trials == 0 {
        bail!("--trials must be at least 1");
    }
    let splits = DatasetSplits::read_dir(&a.data, ctx.seed())?;
    let out = ctx.out_or("ckpt");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut m = RunManifest::new("train", ctx.seed(), json!({ "variant": a.variant, "trials": a.trials, "experiment": cfg }));
    m.inputs = SPLIT_FILES.iter().map(|f| a.data.join(f)).collect();
    if a.trials == 1 {
        let o = pipeline::run_single(&splits, a.variant, &cfg, ctx.seed())?;
        save_outcome(&out, &o)?;
        println!("{}", eval::render_results_table(&[eval::report_column(a.variant.display_name(), &o.test_report)]));
        m.outputs.push(out.clone());
        m.summary = json!({
            "best_epoch": o.train_report.best_epoch,
            "best_val_macro": o.train_report.best_val_macro,
            "stop_reason": o.train_report.stop_reason,
            "test": o.test_report,
        });
    } else {
        let (summary, outcomes) = pipeline::run_trials(&splits, a.variant, &cfg, ctx.seed(), a.trials)?;
        for (i, o) in outcomes.iter().enumerate() {
            let dir = out.join(format!("trial-{i:02}"));
            save_outcome(&dir, o)?;
            m.outputs.push(dir);
        }
        let table = eval::render_results_table(&[eval::summary_column(&summary)]);
        println!("{table}");
        write_text(&out.join("results.md"), &format!("{table}\n"))?;
        write_text(&out.join("trials.json"), &serde_json::to_string_pretty(&summary)?)?;
        m.summary = to_value(&summary)?;
    }
    m.finish(ctx.started);
    m.write(&manifest_path(&out, true))
}

fn pairs_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join(SPLIT_FILES[2])
    } else {
        data.to_path_buf()
    }
}

fn load_checkpoint(dir: &Path) -> anyhow::Result<Checkpoint> {
    checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn model_name(dir: &Path, ck: &Checkpoint) -> String {
    let variant = ck.manifest.config.variant.display_name();
    match dir.file_name() {
        Some(n) => format!("{variant} ({})", n.to_string_lossy()),
        None => variant.to_owned(),
    }
}

fn evaluate(ctx: Ctx, a: EvalArgs) -> anyhow::Result<()> {
    let data = pairs_path(&a.data);
    let pairs = sampler::read_pairs_file(&data)?;
    let out = ctx.out_or("eval");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut models = vec![a.model.clone()];
    models.extend(a.compare.clone());
    let mut columns = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    for (i, dir) in models.iter().enumerate() {
        let ck = load_checkpoint(dir)?;
        let report = eval::evaluate(&ck.model, &ck.vocabs, &pairs)?;
        let name = model_name(dir, &ck);
        columns.push(eval::report_column(&name, &report));
        let file = if i == 0 { "eval_report.json" } else { "compare_report.json" };
        write_text(&out.join(file), &report.to_json()?)?;
        reports.push(report);
    }
    let table = eval::render_results_table(&columns);
    println!("{table}");
    write_text(&out.join("results.md"), &format!("{table}\n"))?;

    if let [base, other] = reports.as_slice() {
        let rows = eval::domain_breakdown(base, other);
        let domain_table = eval::render_domain_table(&rows, &columns[0].0, &columns[1].0);
        println!("\n{domain_table}");
        write_text(&out.join("domains.md"), &format!("{domain_table}\n"))?;
        eval::write_domain_csv(create(&out.join("domains.csv"))?, &rows)?;
    }

    let mut m = RunManifest::new("eval", ctx.seed(), json!({ "models": models, "data": data }));
    m.inputs = models.clone();
    m.inputs.push(data);
    m.outputs.push(out.clone());
    m.summary = to_value(&reports)?;
    m.finish(ctx.started);
    m.write(&manifest_path(&out, true))
}

fn friction_for<'a>(ck: &Checkpoint, pairs: &'a [LabeledPair]) -> anyhow::Result<Vec<FrictionRecord<'a>>> {
    let preds = eval::predict_pairs(&ck.model, &ck.vocabs, pairs)?;
    let labels: Vec<_> = preds.iter().map(|p| p.label).collect();
    Ok(analysis::friction_records(pairs, &labels)?)
}

fn analyze(ctx: Ctx, a: AnalyzeArgs) -> anyhow::Result<()> {
    let (friction, pos, hist) = if a.friction || a.pos || a.hist {
        (a.friction, a.pos, a.hist)
    } else {
        (a.model.is_some(), true, a.model.is_some())
    };
    let data = pairs_path(&a.data);
    let pairs = sampler::read_pairs_file(&data)?;
    let out = ctx.out_or("analysis");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();

    if friction || hist {
        let Some(model_dir) = &a.model else {
            bail!("--friction and --hist need --model");
        };
        let mut runs = vec![(model_dir.clone(), load_checkpoint(model_dir)?)];
        if let Some(c) = &a.compare {
            runs.push((c.clone(), load_checkpoint(c)?));
        }
        let names: Vec<String> = runs.iter().map(|(d, ck)| model_name(d, ck)).collect();
        let records = runs
            .iter()
            .map(|(_, ck)| friction_for(ck, &pairs))
            .collect::<anyhow::Result<Vec<_>>>()?;

        if friction {
            let rows = names
                .iter()
                .zip(&records)
                .map(|(n, r)| Ok((n.as_str(), analysis::aggregate_friction(r)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            for (name, s) in &rows {
                println!(
                    "{name}: {:.3} words saved per query ({:.2}% of the query); upper bound {:.3} ({:.2}%) over {} positives",
                    s.mean_words_saved,
                    100.0 * s.mean_fraction_saved,
                    s.upper_bound_words,
                    100.0 * s.upper_bound_fraction,
                    s.records
                );
            }
            let path = out.join("friction_summary.csv");
            analysis::write_friction_summary_csv(create(&path)?, &rows)?;
            outputs.push(path);
            summary.insert("friction".into(), to_value(&rows)?);
        }
        if hist {
            let columns = names
                .iter()
                .zip(&records)
                .map(|(n, r)| Ok((n.as_str(), analysis::friction_histogram(r, a.bin_width)?)))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let path = out.join("friction_hist.csv");
            analysis::write_histogram_csv(create(&path)?, &columns)?;
            outputs.push(path);
            if let [ra, rb] = records.as_slice() {
                let delta = analysis::improvement_histogram(ra, rb, a.bin_width)?;
                let path = out.join("friction_delta_hist.csv");
                analysis::write_delta_csv(create(&path)?, &delta)?;
                outputs.push(path);
            }
        }
    }
    if pos {
        let positives: Vec<LabeledPair> = pairs
            .iter()
            .filter(|p| p.label == sampler::Label::Steering)
            .cloned()
            .collect();
        let matrix = analysis::pos_transitions(&positives, &PosLexicon::english())?;
        println!("most common boundary transitions over {} positives:", matrix.total());
        for ((from, to), p) in matrix.top(5) {
            println!("  {} -> {}: {:.3}", from.as_str(), to.as_str(), p);
        }
        let path = out.join("pos_transitions.csv");
        matrix.write_csv(create(&path)?)?;
        outputs.push(path);
        summary.insert("pos_pairs".into(), json!(matrix.total()));
    }

    let mut m = RunManifest::new(
        "analyze",
        ctx.seed(),
        json!({ "friction": friction, "pos": pos, "hist": hist, "bin_width": a.bin_width, "model": a.model, "compare": a.compare }),
    );
    m.inputs.push(data);
    m.inputs.extend(a.model);
    m.inputs.extend(a.compare);
    m.outputs = outputs;
    m.summary = Value::Object(summary);
    m.finish(ctx.started);
    m.write(&manifest_path(&out, true))
}

fn predict(ctx: Ctx, a: PredictArgs) -> anyhow::Result<()> {
    let ck = Arc::new(load_checkpoint(&a.model)?);
    if let Some(addr) = &a.listen {
        let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        let mut handles = Vec::new();
        for (served, conn) in listener.incoming().enumerate() {
            let conn = conn?;
            let ck = Arc::clone(&ck);
            let batch = a.batch;
            handles.push(std::thread::spawn(move || {
                let reader = match conn.try_clone() {
                    Ok(r) => r,
                    Err(e) => return log::warn!("connection setup failed: {e}"),
                };
                if let Err(e) = predict_stream(&ck.model, &ck.vocabs, reader, BufWriter::new(conn), batch) {
                    log::warn!("connection closed: {e}");
                }
            }));
            if a.max_connections.is_some_and(|n| served + 1 >= n) {
                break;
            }
        }
        for h in handles {
            let _ = h.join();
        }
        return Ok(());
    }

    let stats = match (&a.input, &ctx.out) {
        (Some(path), out) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            match out {
                Some(o) => predict_stream(&ck.model, &ck.vocabs, f, create(o)?, a.batch)?,
                None => predict_stream(&ck.model, &ck.vocabs, f, io::stdout().lock(), a.batch)?,
            }
        }
        (None, Some(o)) => predict_stream(&ck.model, &ck.vocabs, io::stdin().lock(), create(o)?, a.batch)?,
        (None, None) => predict_stream(&ck.model, &ck.vocabs, io::stdin().lock(), io::stdout().lock(), a.batch)?,
    };
    if stats.errors > 0 {
        log::warn!("{} of {} lines could not be classified", stats.errors, stats.lines);
    }
    if let Some(out) = &ctx.out {
        let mut m = RunManifest::new("predict", ctx.seed(), json!({ "model": a.model, "batch": a.batch }));
        m.inputs.push(a.model.clone());
        m.inputs.extend(a.input.clone());
        m.outputs.push(out.clone());
        m.summary = json!({ "lines": stats.lines, "errors": stats.errors });
        m.finish(ctx.started);
        m.write(&manifest_path(out, false))?;
    }
    Ok(())
}

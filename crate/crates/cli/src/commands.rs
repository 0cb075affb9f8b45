//! One function per subcommand. Each writes into `out` and returns a summary
//! the caller may print.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use dvp_core::bandit::{self, BernoulliOracle, RewardOracle, ScriptedOracle, SearchConfig};
use dvp_core::prompt::{forward_with_prompt, PromptSpec, Strategy, VisualFeatures};
use dvp_core::tasks::{self, evaluate, Example, Split, TaskDataset};
use dvp_core::train::{self, build_model, keep_used_generators, EpochMetrics, FinalPhase};
use dvp_core::transformer::{checkpoint, estimate_flops, Model, ModelSpec};

use crate::config::{FlopsPreset, OracleKind, RunConfig};
use crate::report::{ascii_heatmap, csv_writer, write_matrix_csv, write_text};

/// The dataset plus the shapes the model needs from it.
pub struct Loaded {
    pub data: TaskDataset,
    pub vocab: usize,
    pub text_len: usize,
}

impl Loaded {
    pub fn n_visual(&self) -> usize {
        self.data.train[0].features.rows()
    }

    pub fn model_spec(&self, cfg: &RunConfig) -> Result<ModelSpec> {
        let visual_width = self.data.train[0].features.cols();
        cfg.model_spec(self.vocab, self.text_len, self.data.num_classes, visual_width)
    }
}

fn check_split(name: &str, examples: &[Example], text_len: usize, shape: &[usize], classes: usize) -> Result<()> {
    for (i, e) in examples.iter().enumerate() {
        if e.tokens.len() != text_len || e.features.shape() != shape || e.label >= classes {
            bail!("{name} example {i} does not match the training split's shapes or class count");
        }
    }
    Ok(())
}

pub fn load_data(cfg: &RunConfig) -> Result<Loaded> {
    match &cfg.data {
        None => {
            let data = tasks::gen_synthetic(&cfg.task)?;
            Ok(Loaded { data, vocab: cfg.task.vocab, text_len: cfg.task.text_len })
        }
        Some(d) => {
            let read = |p: &Path| tasks::load_examples(p).with_context(|| format!("loading {}", p.display()));
            let train = read(&d.train)?;
            let val = read(&d.val)?;
            let test = match &d.test {
                Some(p) => read(p)?,
                None => Vec::new(),
            };
            let first = train.first().context("training split is empty")?;
            if val.is_empty() {
                bail!("validation split is empty");
            }
            let text_len = first.tokens.len();
            let shape = first.features.shape().to_vec();
            for (name, split) in [("train", &train), ("val", &val), ("test", &test)] {
                check_split(name, split, text_len, &shape, d.num_classes)?;
            }
            let vocab = train.iter().chain(&val).chain(&test).flat_map(|e| e.tokens.iter()).max().map_or(1, |m| m + 1);
            let data = TaskDataset { num_classes: d.num_classes, train, val, test, prototypes: None, class_codes: None };
            Ok(Loaded { data, vocab, text_len })
        }
    }
}

fn metrics_header() -> [&'static str; 5] {
    ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]
}

fn metrics_record(m: &EpochMetrics) -> [String; 5] {
    [
        m.epoch.to_string(),
        m.train_loss.to_string(),
        m.train_acc.to_string(),
        m.val_loss.to_string(),
        m.val_acc.to_string(),
    ]
}

fn write_metrics(path: &Path, history: &[EpochMetrics]) -> Result<()> {
    let mut w = csv_writer(path, "metrics", &metrics_header())?;
    for m in history {
        w.write_record(metrics_record(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<String> {
    let loaded = load_data(cfg)?;
    for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
        let examples = loaded.data.split(split);
        if !examples.is_empty() {
            tasks::write_examples(&out.join(format!("{name}.bin")), examples)?;
        }
    }
    Ok(format!(
        "wrote {} train, {} val, {} test examples",
        loaded.data.train.len(),
        loaded.data.val.len(),
        loaded.data.test.len()
    ))
}

pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub test_accuracy: Option<f64>,
    pub model: Model,
}

/// Trains at the configured placement. Writes `metrics.csv`, `init.dvpm`,
/// `final.dvpm` and `summary.txt`.
pub fn run_train(cfg: &RunConfig, out: &Path, mut log: impl FnMut(&str)) -> Result<TrainOutcome> {
    let loaded = load_data(cfg)?;
    let spec = loaded.model_spec(cfg)?;
    let prompt = cfg.prompt_spec();
    prompt.validate(&spec).context("invalid config field prompt")?;
    let mut model = build_model(&spec, cfg.adapter_width(), cfg.seed)?;
    keep_used_generators(&mut model, &prompt);
    checkpoint::save(&model, &out.join("init.dvpm"))?;

    let mut w = csv_writer(&out.join("metrics.csv"), "metrics", &metrics_header())?;
    let mut write_err = None;
    let history = train::train_model(&mut model, &prompt, &loaded.data, &cfg.train, cfg.seed, |m| {
        if let Err(e) = w.write_record(metrics_record(m)).and_then(|_| w.flush().map_err(Into::into)) {
            write_err.get_or_insert(e);
        }
        log(&format!(
            "epoch {:>3}  train loss {:.4} acc {:.4}  val loss {:.4} acc {:.4}",
            m.epoch, m.train_loss, m.train_acc, m.val_loss, m.val_acc
        ));
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    checkpoint::save(&model, &out.join("final.dvpm"))?;

    let test_accuracy = if loaded.data.test.is_empty() {
        None
    } else {
        Some(evaluate(&model, &prompt, &loaded.data.test, cfg.train.eval_batch, cfg.train.loss)?.accuracy)
    };
    let count = model.count_params();
    let mut summary = String::new();
    writeln!(summary, "strategy {}  layer {}", prompt.strategy, prompt.layer)?;
    if let Some(m) = history.last() {
        writeln!(summary, "final val accuracy {:.4}", m.val_acc)?;
    }
    if let Some(a) = test_accuracy {
        writeln!(summary, "test accuracy {a:.4}")?;
    }
    writeln!(
        summary,
        "parameters {} total, {} trainable ({:.2}%)",
        count.total,
        count.trainable,
        100.0 * count.trainable_fraction()
    )?;
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(TrainOutcome { history, test_accuracy, model })
}

/// Per-layer sweep. Writes `sweep.csv` and `summary.txt`.
pub fn run_sweep(cfg: &RunConfig, out: &Path) -> Result<train::SweepReport> {
    let loaded = load_data(cfg)?;
    let spec = loaded.model_spec(cfg)?;
    let layers = cfg.sweep.layers.clone().unwrap_or_else(|| (1..=spec.layers).collect());
    let report = train::run_sweep(
        &spec,
        cfg.prompt.strategy,
        &layers,
        &loaded.data,
        &cfg.train,
        cfg.adapter_width(),
        cfg.seed,
    )?;
    let mut w = csv_writer(&out.join("sweep.csv"), "sweep", &["layer", "final_val_acc", "flops_estimate"])?;
    for r in &report.rows {
        w.write_record([r.layer.to_string(), r.final_val_acc.to_string(), r.total_macs.to_string()])?;
        write_metrics(&out.join(format!("metrics_layer_{:02}.csv", r.layer)), &r.history)?;
    }
    w.flush()?;
    write_text(&out.join("summary.txt"), &format!("strategy {}\nbest layer {}\n", report.strategy, report.best_layer))?;
    Ok(report)
}

/// Live placement search. Writes `trace.csv` and `summary.txt`, plus
/// metrics and a checkpoint when a final phase is configured.
pub fn run_search(cfg: &RunConfig, out: &Path) -> Result<train::LiveSearchReport> {
    let loaded = load_data(cfg)?;
    let spec = loaded.model_spec(cfg)?;
    let search = cfg.search_config(loaded.data.train.len());
    let report = train::run_live_search(
        &spec,
        cfg.prompt.strategy,
        &loaded.data,
        &cfg.train,
        &search,
        cfg.adapter_width(),
        cfg.seed,
        cfg.search.final_phase,
    )?;
    write_trace(&out.join("trace.csv"), &report.outcome.trace, spec.layers)?;
    let mut summary = String::new();
    writeln!(summary, "strategy {}", cfg.prompt.strategy)?;
    writeln!(summary, "best layer {}", report.outcome.best_arm)?;
    writeln!(summary, "steps {}", search.steps)?;
    writeln!(summary, "preferences {}", join(&report.outcome.state.preferences))?;
    writeln!(summary, "policy {}", join(&report.outcome.final_policy()))?;
    if cfg.search.final_phase != FinalPhase::None {
        write_metrics(&out.join("metrics.csv"), &report.final_history)?;
        checkpoint::save(&report.model, &out.join("final.dvpm"))?;
        if let Some(m) = report.final_history.last() {
            writeln!(summary, "final val accuracy {:.4}", m.val_acc)?;
        }
    }
    write_text(&out.join("summary.txt"), &summary)?;
    Ok(report)
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(" ")
}

fn write_trace(path: &Path, trace: &[bandit::TraceRow], arms: usize) -> Result<()> {
    let file = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    bandit::write_trace_csv(std::io::BufWriter::new(file), trace, arms)?;
    Ok(())
}

pub struct BanditSummary {
    pub best_arm: usize,
    pub recovery_rate: f64,
    /// Seeds whose final policy put more than 0.9 on the best arm, among
    /// recovered seeds.
    pub confident_rate: f64,
    pub picks: Vec<usize>,
}

/// Model-free bandit harness over several seeds. Writes `trace.csv` (first
/// seed), `seeds.csv` and `summary.txt`.
pub fn run_bandit_test(cfg: &RunConfig, out: &Path) -> Result<BanditSummary> {
    let b = &cfg.bandit_test;
    let arms = b.means.len();
    let best_arm = bandit::argmax_prefer_last(&b.means) + 1;
    let mut w = csv_writer(&out.join("seeds.csv"), "bandit-seeds", &["seed", "best_arm", "pi_best"])?;
    let (mut recovered, mut confident) = (0usize, 0usize);
    let mut picks = Vec::with_capacity(b.seeds);
    for i in 0..b.seeds {
        let seed = cfg.seed + i as u64;
        let search = SearchConfig { samples: b.samples, alpha: b.alpha, ..SearchConfig::new(arms, b.steps, seed) };
        let mut oracle: Box<dyn RewardOracle> = match b.oracle {
            OracleKind::Scripted => Box::new(ScriptedOracle { rewards: b.means.clone() }),
            OracleKind::Bernoulli => Box::new(BernoulliOracle::new(b.means.clone(), train::derive_seed(seed, 17))),
        };
        let outcome = bandit::run_search(oracle.as_mut(), &search)?;
        let pi_best = outcome.final_policy()[best_arm - 1];
        if outcome.best_arm == best_arm {
            recovered += 1;
            if pi_best > 0.9 {
                confident += 1;
            }
        }
        if i == 0 {
            write_trace(&out.join("trace.csv"), &outcome.trace, arms)?;
        }
        w.write_record([seed.to_string(), outcome.best_arm.to_string(), pi_best.to_string()])?;
        picks.push(outcome.best_arm);
    }
    w.flush()?;
    let summary = BanditSummary {
        best_arm,
        recovery_rate: recovered as f64 / b.seeds as f64,
        confident_rate: if recovered == 0 { 0.0 } else { confident as f64 / recovered as f64 },
        picks,
    };
    write_text(
        &out.join("summary.txt"),
        &format!(
            "best arm {}\nrecovery rate {:.4} over {} seeds\nfinal pi_best > 0.9 in {:.4} of recovered seeds\n",
            summary.best_arm, summary.recovery_rate, b.seeds, summary.confident_rate
        ),
    )?;
    Ok(summary)
}

pub struct FlopsRow {
    pub prompt: PromptSpec,
    pub token_count: usize,
    pub seq_lens: Vec<usize>,
    pub total_macs: u64,
    pub ratio: f64,
}

fn flops_spec(cfg: &RunConfig) -> Result<(ModelSpec, usize)> {
    match cfg.flops.preset {
        FlopsPreset::PaperEncoder => Ok((ModelSpec::paper_scale_encoder(), cfg.flops.n_visual.unwrap_or(197))),
        FlopsPreset::PaperEncoderDecoder => {
            Ok((ModelSpec::paper_scale_encoder_decoder(), cfg.flops.n_visual.unwrap_or(197)))
        }
        FlopsPreset::Config => {
            let t = &cfg.task;
            let spec = cfg.model_spec(t.vocab, t.text_len, t.num_classes, t.visual_width)?;
            Ok((spec, cfg.flops.n_visual.unwrap_or(t.n_visual)))
        }
    }
}

/// Analytic cost table over strategies and insertion layers. Writes
/// `flops.csv` and `flops.txt`.
pub fn run_flops(cfg: &RunConfig, out: &Path) -> Result<Vec<FlopsRow>> {
    let (spec, n_visual) = flops_spec(cfg)?;
    let mut rows = Vec::new();
    for strategy in Strategy::ALL {
        let layers: Vec<usize> = if strategy.is_dynamic() { (1..=spec.layers).collect() } else { vec![1] };
        for layer in layers {
            let prompt = PromptSpec::new(strategy, layer);
            let r = estimate_flops(&spec, &prompt, n_visual)?;
            rows.push(FlopsRow {
                prompt,
                token_count: r.token_count,
                seq_lens: r.seq_lens,
                total_macs: r.total_macs,
                ratio: r.ratio,
            });
        }
    }
    let mut w = csv_writer(
        &out.join("flops.csv"),
        "flops",
        &["strategy", "layer", "token_count", "seq_lens", "total_macs", "ratio_vs_common"],
    )?;
    let mut text = format!(
        "{} model, {} layers, width {}, text length {}, {} visual tokens\n\n{:<11} {:>5} {:>6} {:>16} {:>8}\n",
        match spec.kind {
            dvp_core::transformer::ModelKind::Encoder => "encoder",
            dvp_core::transformer::ModelKind::EncoderDecoder => "encoder-decoder",
        },
        spec.layers,
        spec.width,
        spec.text_len,
        n_visual,
        "strategy",
        "layer",
        "tokens",
        "MACs",
        "ratio"
    );
    for r in &rows {
        let lens = r.seq_lens.iter().map(ToString::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.prompt.strategy.to_string(),
            r.prompt.layer.to_string(),
            r.token_count.to_string(),
            lens,
            r.total_macs.to_string(),
            r.ratio.to_string(),
        ])?;
        writeln!(
            text,
            "{:<11} {:>5} {:>6} {:>16} {:>8.4}",
            r.prompt.strategy.to_string(),
            r.prompt.layer,
            r.token_count,
            r.total_macs,
            r.ratio
        )?;
    }
    w.flush()?;
    write_text(&out.join("flops.txt"), &text)?;
    Ok(rows)
}

/// Attention maps of the prompted stack for one validation example. Writes
/// `layer_XX.csv` per layer and `heatmap.txt`.
pub fn run_dump_attn(cfg: &RunConfig, out: &Path, log: impl FnMut(&str)) -> Result<usize> {
    let loaded = load_data(cfg)?;
    let (model, prompt) = match &cfg.dump.checkpoint {
        Some(path) => {
            let model = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            (model, cfg.prompt_spec())
        }
        None => (run_train(cfg, out, log)?.model, cfg.prompt_spec()),
    };
    let example = loaded
        .data
        .val
        .get(cfg.dump.example)
        .with_context(|| format!("dump.example {} outside the validation split", cfg.dump.example))?;
    let visual = VisualFeatures::new(example.features.clone())?;
    let result = forward_with_prompt(&model, &prompt, &example.tokens, &visual, true)?;
    let maps = result.attn_dump.unwrap_or_default();
    let mut heat = String::new();
    for m in &maps {
        write_matrix_csv(&out.join(format!("layer_{:02}.csv", m.layer)), "attention", &m.matrix)?;
        writeln!(heat, "layer {} ({} queries x {} keys)", m.layer, m.matrix.rows(), m.matrix.cols())?;
        heat.push_str(&ascii_heatmap(&m.matrix));
        heat.push('\n');
    }
    write_text(&out.join("heatmap.txt"), &heat)?;
    Ok(maps.len())
}

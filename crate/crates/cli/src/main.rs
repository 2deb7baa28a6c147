use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tlmr_core::bench::{bench_latency, BenchConfig};
use tlmr_core::dataset::{load_dataset, save_dataset, FeatureDataset};
use tlmr_core::model::{encode_checkpoint, load_checkpoint, save_checkpoint};
use tlmr_core::pipeline::{
    config_hash, evaluate_model, load_matching, run_experiment, synthetic_spec, train_crt, train_stage1,
    train_stage2_lmr, Method, Provenance, TrainedModel,
};
use tlmr_core::rng::run_seed;
use tlmr_core::synth::{generate, SynthSpec};
use tlmr_core::{Error, ExperimentConfig, MetricsReport};

#[derive(Parser)]
#[command(name = "tlmr", version, about = "Two-stage long-tail training with LMR feature refinement")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/test datasets.
    GenData {
        /// Five-class heavy-tail profile from the config's synthetic section.
        #[arg(long, conflicts_with = "spec")]
        meteor_like: bool,
        /// Count divisor for the training split.
        #[arg(long)]
        scale: Option<usize>,
        /// JSON generator spec.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train one method and write checkpoints and stage logs.
    Train {
        #[arg(long, default_value = "tlmr")]
        method: String,
        /// Training dataset; defaults to the config's data.train, else synthetic.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Skip stage 1 and fine-tune this checkpoint.
        #[arg(long)]
        from_stage1: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run CE, cRT and Transfer-LMR over the configured seeds.
    Compare,
    /// Time aggregate, refine and classify on a random batch.
    BenchLatency {
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 2048)]
        dim: usize,
        #[arg(long, default_value_t = 7)]
        time_steps: usize,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
    },
}

struct Failure {
    code: u8,
    id: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::MalformedHeader { .. } | Error::Sidecar(_) | Error::CountMismatch { .. } => 2,
            Error::DimensionMismatch { .. } => 3,
            _ => 1,
        };
        Failure {
            code,
            id: e.id(),
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult {
    fs::write(path, contents).map_err(|e| {
        Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_config(g: &Global) -> CliResult<ExperimentConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(ExperimentConfig::load(g.config.as_deref(), &overrides)?)
}

fn prepare_out(g: &Global, config: &ExperimentConfig) -> CliResult {
    fs::create_dir_all(&g.out).map_err(|e| {
        Failure::from(Error::Io {
            path: g.out.clone(),
            source: e,
        })
    })?;
    write(&g.out.join("config.toml"), config.resolved().to_toml())
}

fn say(g: &Global, text: &str) {
    if !g.quiet {
        println!("{text}");
    }
}

fn count_table(name: &str, ds: &FeatureDataset) -> String {
    let mut s = format!("{name:<6}");
    for (class, n) in ds.class_names().iter().zip(ds.class_counts()) {
        let _ = write!(s, " {class}={n}");
    }
    let _ = write!(s, " total={}", ds.len());
    s
}

fn gen_data(g: &Global, meteor_like: bool, scale: Option<usize>, spec_path: Option<&Path>) -> CliResult {
    let mut config = load_config(g)?;
    if let Some(k) = scale {
        config.data.synthetic.scale = k;
    }
    let spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::invalid("spec", e.to_string()))?
        }
        None if meteor_like => synthetic_spec(&config, config.seed)?,
        None => return Err(Error::invalid("gen-data", "pass --meteor-like or --spec").into()),
    };
    let (train, test) = generate(&spec)?;
    prepare_out(g, &config)?;
    save_dataset(&train, &g.out.join("train.ftlm"))?;
    save_dataset(&test, &g.out.join("test.ftlm"))?;
    say(g, &count_table("train", &train));
    say(g, &count_table("test", &test));
    Ok(())
}

fn write_model(g: &Global, name: &str, model: &TrainedModel) -> CliResult {
    save_checkpoint(&model.params, &g.out.join(format!("{name}.ckpt")))?;
    let mut log = String::new();
    for record in &model.provenance.log {
        log.push_str(&serde_json::to_string(record).expect("record serializes"));
        log.push('\n');
    }
    write(&g.out.join(format!("{name}.log.jsonl")), log)?;
    let prov = serde_json::to_string_pretty(&model.provenance).expect("provenance serializes");
    write(&g.out.join(format!("{name}.provenance.json")), prov)
}

fn train(g: &Global, method: &str, train_path: Option<&Path>, from_stage1: Option<&Path>) -> CliResult {
    let method: Method = method.parse()?;
    let config = load_config(g)?;
    let seed = run_seed(config.seed, 0);
    let ds = match train_path.or(config.data.train.as_deref()) {
        Some(p) => load_dataset(p)?,
        None => generate(&synthetic_spec(&config, seed)?)?.0,
    };
    prepare_out(g, &config)?;

    let stage1 = match from_stage1 {
        Some(p) => {
            if method == Method::Ce {
                return Err(Error::invalid("from-stage1", "method ce has no second stage").into());
            }
            let params = load_checkpoint(p)?;
            TrainedModel {
                params,
                provenance: Provenance {
                    config_hash: config_hash(&config),
                    run_seed: seed,
                    method: Method::Ce,
                    log: Vec::new(),
                },
            }
        }
        None => {
            let m = train_stage1(&config, &ds, seed)?;
            write_model(g, "stage1", &m)?;
            m
        }
    };
    let model = match method {
        Method::Ce => stage1,
        Method::Crt | Method::Tlmr => {
            write(&g.out.join("stage2_init.ckpt"), encode_checkpoint(&stage1.params))?;
            if method == Method::Crt {
                train_crt(&stage1, &config, &ds)?
            } else {
                train_stage2_lmr(&stage1, &config, &ds)?
            }
        }
    };
    write_model(g, method.name(), &model)?;
    let report = evaluate_model(&model.params, &ds)?;
    say(g, "training split:");
    say(g, &MetricsReport::table_header(ds.class_names()));
    say(g, &report.table_row(method.label()));
    Ok(())
}

fn eval(g: &Global, checkpoint: &Path, data: &Path) -> CliResult {
    let config = load_config(g)?;
    let params = load_checkpoint(checkpoint)?;
    let ds = load_matching(data, &params)?;
    let report = evaluate_model(&params, &ds)?;
    prepare_out(g, &config)?;
    write(&g.out.join("metrics.json"), report.to_json())?;
    write(&g.out.join("metrics.csv"), report.to_csv())?;
    say(g, &MetricsReport::table_header(ds.class_names()));
    say(g, &report.table_row("model"));
    Ok(())
}

fn compare(g: &Global) -> CliResult {
    let config = load_config(g)?;
    let report = run_experiment(&config)?;
    prepare_out(g, &config)?;
    write(&g.out.join("comparison.json"), report.to_json())?;
    write(&g.out.join("comparison.csv"), report.to_csv())?;
    write(&g.out.join("plot_data.csv"), report.plot_csv())?;
    say(g, &report.table());
    Ok(())
}

fn bench(g: &Global, batch: usize, dim: usize, time_steps: usize, iterations: usize) -> CliResult {
    let config = load_config(g)?;
    let report = bench_latency(BenchConfig {
        batch,
        d: dim,
        t: time_steps,
        iterations,
        seed: config.seed,
        ..BenchConfig::default()
    })?;
    prepare_out(g, &config)?;
    write(&g.out.join("latency.json"), report.to_json())?;
    say(
        g,
        &format!(
            "per-sample latency: median {:.4} ms, p95 {:.4} ms (B={batch}, D={dim}, T={time_steps}, {iterations} iterations)",
            report.per_sample_median_ms, report.per_sample_p95_ms
        ),
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let g = &cli.global;
    let result = match &cli.command {
        Command::GenData { meteor_like, scale, spec } => gen_data(g, *meteor_like, *scale, spec.as_deref()),
        Command::Train {
            method,
            train: path,
            from_stage1,
        } => train(g, method, path.as_deref(), from_stage1.as_deref()),
        Command::Eval { checkpoint, data } => eval(g, checkpoint, data),
        Command::Compare => compare(g),
        Command::BenchLatency {
            batch,
            dim,
            time_steps,
            iterations,
        } => bench(g, *batch, *dim, *time_steps, *iterations),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.id, f.message);
            ExitCode::from(f.code)
        }
    }
}

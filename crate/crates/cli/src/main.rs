use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use feature_cp::experiment::{
    calibrate_seed, evaluate_calibrated, feature_diagnostics, fit_models, prepare_seed, run_experiment, sweep_alpha,
    sweep_split_index, Calibration, DatasetSpec, ExperimentConfig, FittedModels, Method, RunResult, SeedData,
};
use feature_cp::nn::SplitModel;

#[derive(Parser)]
#[command(name = "feature-cp", version, about = "Feature-space conformal prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV to <out>/<name>/data.csv.
    GenData(Common),
    /// Train the models of every seed into <out>/<name>/<seed>/.
    Train(Common),
    /// Calibrate trained models; writes calibration.json per seed.
    Calibrate(Common),
    /// Evaluate calibrated models on the test fold; writes result.json and summary.csv.
    Evaluate(Common),
    /// Train, calibrate and evaluate every seed in one go.
    Experiment(Common),
    /// Coverage and length over a grid of levels.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated levels.
        #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2])]
        alphas: Vec<f64>,
    },
    /// Coverage and length at several splitting points of the same networks.
    SweepSplit {
        #[command(flatten)]
        common: Common,
        /// Comma-separated split indices.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        splits: Vec<usize>,
    },
    /// Spread diagnostics and bound tightness of a Feature CP calibration.
    Diagnostics(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON file mirroring ExperimentConfig; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// vanilla_cp, feature_cp, cqr, feature_cqr or feature_cp_classify.
    #[arg(long)]
    method: Option<String>,
    /// synthetic_multidim, synthetic_1d_hetero or csv:<path>:<target,...>.
    #[arg(long)]
    dataset: Option<String>,
    /// Sample count for the synthetic generators.
    #[arg(long)]
    n: Option<usize>,
    /// Run name; outputs go to <out>/<name>/.
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Skip training and use the seeded initialization.
    #[arg(long)]
    untrained_control: bool,
}

fn parse_method(s: &str) -> Result<Method> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| anyhow!("unknown method `{s}`"))
}

fn parse_dataset(s: &str, n: Option<usize>) -> Result<DatasetSpec> {
    let n = n.unwrap_or(5000);
    match s {
        "synthetic_multidim" => Ok(DatasetSpec::SyntheticMultidim { n }),
        "synthetic_1d_hetero" => Ok(DatasetSpec::Synthetic1dHetero { n }),
        _ => {
            let rest = s.strip_prefix("csv:").ok_or_else(|| anyhow!("unknown dataset `{s}`"))?;
            let (path, targets) = rest.rsplit_once(':').ok_or_else(|| anyhow!("expected csv:<path>:<targets>"))?;
            Ok(DatasetSpec::Csv {
                path: path.into(),
                targets: targets.split(',').map(str::to_owned).collect(),
            })
        }
    }
}

fn with_n(spec: DatasetSpec, n: Option<usize>) -> DatasetSpec {
    match (spec, n) {
        (DatasetSpec::SyntheticMultidim { .. }, Some(n)) => DatasetSpec::SyntheticMultidim { n },
        (DatasetSpec::Synthetic1dHetero { .. }, Some(n)) => DatasetSpec::Synthetic1dHetero { n },
        (spec, _) => spec,
    }
}

impl Common {
    /// Config from `--config`, else the one saved by `train`, else defaults;
    /// then flag overrides.
    fn resolve(&self, reuse_saved: bool) -> Result<ExperimentConfig> {
        let name = self.name.clone().unwrap_or_else(|| "experiment".into());
        let saved = self.out.join(&name).join("config.json");
        let mut cfg = if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("[config] reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("[config] parsing {}", path.display()))?
        } else if reuse_saved && saved.exists() {
            let text = fs::read_to_string(&saved).with_context(|| format!("[config] reading {}", saved.display()))?;
            serde_json::from_str(&text).with_context(|| format!("[config] parsing {}", saved.display()))?
        } else {
            ExperimentConfig::new(DatasetSpec::SyntheticMultidim { n: 5000 }, Method::FeatureCp)
        };
        if let Some(name) = &self.name {
            cfg.name = name.clone();
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s.clone();
        }
        if let Some(m) = &self.method {
            cfg.method = parse_method(m).context("[config]")?;
        }
        cfg.dataset = match &self.dataset {
            Some(d) => parse_dataset(d, self.n).context("[config]")?,
            None => with_n(cfg.dataset, self.n),
        };
        cfg.untrained_control |= self.untrained_control;
        cfg.validate().context("[config] invalid experiment configuration")?;
        Ok(cfg)
    }
}

fn run_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common.out.join(&cfg.name)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("[output] creating {}", parent.display()))?;
    }
    let text = serde_json::to_string_pretty(value).context("[output] serializing")?;
    fs::write(path, text).with_context(|| format!("[output] writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &str) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("[{stage}] reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("[{stage}] parsing {}", path.display()))
}

fn load_models(seed_dir: &Path, count: usize) -> Result<FittedModels> {
    let nets = (0..count)
        .map(|k| {
            let p = seed_dir.join(format!("model_{k}.json"));
            SplitModel::load_json(&p)
                .map(SplitModel::into_mlp)
                .with_context(|| format!("[load] reading {} (run `train` first)", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let train_loss = read_json(&seed_dir.join("train_loss.json"), "load")?;
    Ok(FittedModels { nets, train_loss })
}

fn net_count(cfg: &ExperimentConfig) -> usize {
    if cfg.method.is_quantile() {
        2
    } else {
        1
    }
}

fn report(runs: &[RunResult], out: &Path) -> Result<()> {
    for r in runs {
        let dir = r.write(out).context("[output]")?;
        let a = &r.aggregate;
        println!(
            "{} {} alpha {}: coverage {:.4} +- {:.4}, length {:.4} +- {:.4} -> {}",
            r.method.label(),
            r.dataset,
            r.alpha,
            a.coverage.mean,
            a.coverage.std,
            a.avg_length.mean,
            a.avg_length.std,
            dir.display()
        );
    }
    Ok(())
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = common.resolve(false)?;
    let ds = cfg.dataset.load(cfg.data_seed).context("[data]")?;
    let path = run_dir(common, &cfg).join("data.csv");
    fs::create_dir_all(run_dir(common, &cfg)).context("[output]")?;
    ds.write_csv(&path).with_context(|| format!("[output] writing {}", path.display()))?;
    println!("{} rows -> {}", ds.len(), path.display());
    Ok(())
}

fn train_cmd(common: &Common) -> Result<()> {
    let cfg = common.resolve(false)?;
    let dir = run_dir(common, &cfg);
    write_json(&dir.join("config.json"), &cfg)?;
    let raw = cfg.dataset.load(cfg.data_seed).context("[data]")?;
    for &seed in &cfg.seeds {
        let data = prepare_seed(&cfg, &raw, seed)?;
        let models = fit_models(&cfg, &data, cfg.alpha)?;
        let seed_dir = dir.join(seed.to_string());
        fs::create_dir_all(&seed_dir).context("[output]")?;
        for (k, m) in models.nets.iter().enumerate() {
            SplitModel::new(m.clone(), cfg.model.split_index)
                .and_then(|sm| sm.save_json(seed_dir.join(format!("model_{k}.json"))))
                .context("[output]")?;
        }
        write_json(&seed_dir.join("train_loss.json"), &models.train_loss)?;
        println!("seed {seed}: trained {} model(s), loss {:?}", models.nets.len(), models.train_loss);
    }
    Ok(())
}

fn calibrate_cmd(common: &Common) -> Result<()> {
    let cfg = common.resolve(true)?;
    let dir = run_dir(common, &cfg);
    let raw = cfg.dataset.load(cfg.data_seed).context("[data]")?;
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(seed.to_string());
        let data = prepare_seed(&cfg, &raw, seed)?;
        let models = load_models(&seed_dir, net_count(&cfg))?;
        let calib = calibrate_seed(&cfg, &data, &models, cfg.alpha, cfg.model.split_index)?;
        write_json(&seed_dir.join("calibration.json"), &calib)?;
        let qs: Vec<f64> = calib.records.iter().map(|r| r.q).collect();
        println!("seed {seed}: quantiles {qs:?}");
    }
    Ok(())
}

/// Data, models and calibration of one seed, as left on disk by earlier stages.
type Calibrated = (SeedData, FittedModels, Calibration);

fn load_calibrated(common: &Common) -> Result<(ExperimentConfig, Vec<Calibrated>)> {
    let cfg = common.resolve(true)?;
    let dir = run_dir(common, &cfg);
    let raw = cfg.dataset.load(cfg.data_seed).context("[data]")?;
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let seed_dir = dir.join(seed.to_string());
        let data = prepare_seed(&cfg, &raw, seed)?;
        let models = load_models(&seed_dir, net_count(&cfg))?;
        let calib: Calibration = read_json(&seed_dir.join("calibration.json"), "load")
            .context("[load] run `calibrate` first")?;
        out.push((data, models, calib));
    }
    Ok((cfg, out))
}

fn evaluate_cmd(common: &Common) -> Result<()> {
    let (cfg, seeds) = load_calibrated(common)?;
    let alpha = seeds.first().map_or(cfg.alpha, |(_, _, c)| c.alpha);
    let results = seeds
        .iter()
        .map(|(data, models, calib)| evaluate_calibrated(&cfg, data, models, calib))
        .collect::<feature_cp::Result<Vec<_>>>()?;
    let run = RunResult::new(&cfg, cfg.name.clone(), alpha, results).context("[evaluate]")?;
    report(&[run], &common.out)
}

fn diagnostics_cmd(common: &Common) -> Result<()> {
    let (cfg, seeds) = load_calibrated(common)?;
    if cfg.method != Method::FeatureCp {
        bail!("[diagnostics] spread diagnostics need method feature_cp, got {}", cfg.method.label());
    }
    let dir = run_dir(common, &cfg);
    for (data, models, calib) in &seeds {
        let model = SplitModel::new(models.nets[0].clone(), calib.split_index).context("[diagnostics]")?;
        let (cubic, tightness) = feature_diagnostics(&cfg, data, &model, calib)?;
        let doc = serde_json::json!({ "seed": data.seed, "cubic": cubic, "tightness_ratio": tightness });
        write_json(&dir.join(data.seed.to_string()).join("diagnostics.json"), &doc)?;
        println!(
            "seed {}: feature spread {:.4}, output spread {:.4}, tightness {:?}",
            data.seed, cubic.feature_spread, cubic.output_spread, tightness
        );
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Train(c) => train_cmd(&c),
        Command::Calibrate(c) => calibrate_cmd(&c),
        Command::Evaluate(c) => evaluate_cmd(&c),
        Command::Diagnostics(c) => diagnostics_cmd(&c),
        Command::Experiment(c) => {
            let cfg = c.resolve(false)?;
            report(&[run_experiment(&cfg).context("[experiment]")?], &c.out)
        }
        Command::SweepAlpha { common, alphas } => {
            let cfg = common.resolve(false)?;
            report(&sweep_alpha(&cfg, &alphas).context("[sweep-alpha]")?, &common.out)
        }
        Command::SweepSplit { common, splits } => {
            let cfg = common.resolve(false)?;
            report(&sweep_split_index(&cfg, &splits).context("[sweep-split]")?, &common.out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("feature-cp: {e:#}");
            ExitCode::FAILURE
        }
    }
}

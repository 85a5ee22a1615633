//! Command-line front end: a TOML run config plus flag overrides.
//!
//! All artifacts are written below `output_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{generate_synthetic, load_manifest, write_signal, EmotionSet, SpeechSample, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, run_loso, unweighted_accuracy, weighted_accuracy, ConfusionMatrix};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::mixup::MixupMode;
use crate::model::{init_params, load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, NamedTensor};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Checkpoint evaluated by `eval`; defaults to `<output_dir>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub emotions: EmotionSet,
    pub synth: Option<SynthSpec>,
    pub manifest: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            emotions: EmotionSet::default(),
            synth: None,
            manifest: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gradcheck: GradcheckConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Relative `manifest` and `output_dir` paths are taken relative to the
    /// directory holding the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.output_dir = base.join(&cfg.output_dir);
        cfg.manifest = cfg.manifest.map(|m| base.join(m));
        Ok(cfg)
    }

    pub fn validate_source(&self) -> Result<()> {
        match (&self.synth, &self.manifest) {
            (Some(_), Some(_)) => Err(Error::Config(
                "config sets both `synth` and `manifest`; choose one data source".into(),
            )),
            (None, None) => Err(Error::Config(
                "config needs a data source: a `[synth]` table or a `manifest` path".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn load_data(&self) -> Result<Vec<SpeechSample>> {
        self.validate_source()?;
        match (&self.synth, &self.manifest) {
            (Some(spec), _) => generate_synthetic(spec, &self.emotions),
            (_, Some(path)) => load_manifest(path, &self.emotions),
            _ => unreachable!(),
        }
    }

    /// SHA-256 over the canonical JSON form of the config. Where artifacts are
    /// written does not change the experiment, so `output_dir` and the eval
    /// checkpoint path are left out.
    pub fn fingerprint(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        canonical.eval = EvalOptions::default();
        let json = serde_json::to_string(&canonical).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.output_dir.join(name)
    }

    fn ensure_output_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).map_err(|e| Error::io(&self.output_dir, e))
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

/// Write `signals/<id>.bin` per sample and a `manifest.csv` pointing at them.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("`synth` needs a `[synth]` table".into()))?;
    let data = generate_synthetic(spec, &cfg.emotions)?;
    let signal_dir = cfg.out_path("signals");
    fs::create_dir_all(&signal_dir).map_err(|e| Error::io(&signal_dir, e))?;
    let mut manifest = String::from("path,label,speaker,session\n");
    for s in &data {
        let rel = format!("signals/{}.bin", s.id);
        write_signal(&cfg.output_dir.join(&rel), s.signal())?;
        let label = cfg.emotions.name(s.label).expect("label in range");
        manifest.push_str(&format!("{rel},{label},{},{}\n", s.speaker_id, s.session_id));
    }
    let path = cfg.out_path("manifest.csv");
    write_file(&path, manifest)?;
    log::info!("wrote {} signals and {}", data.len(), path.display());
    Ok(path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelCard {
    emotions: EmotionSet,
    model: ModelConfig,
}

/// Train on the configured source and write `report.jsonl`, `checkpoint.bin`
/// (parameters plus a `centers` tensor) and `model.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf> {
    check_classes(cfg)?;
    let data = cfg.load_data()?;
    cfg.ensure_output_dir()?;
    let params = init_params(&cfg.model, cfg.train.seed);
    let outcome = train(&cfg.model, params, &data, &cfg.train)?;

    let ckpt_path = cfg.out_path("checkpoint.bin");
    let mut ckpt = Checkpoint::from_params(&outcome.params);
    ckpt.tensors.push(NamedTensor {
        name: "centers".into(),
        shape: outcome.centers.centers.shape().to_vec(),
        values: outcome.centers.centers.iter().copied().collect(),
    });
    save_checkpoint(&ckpt_path, &ckpt)?;

    let mut report = outcome.report;
    report.checkpoint = Some("checkpoint.bin".into());
    let report_path = cfg.out_path("report.jsonl");
    write_file(&report_path, report.to_jsonl())?;
    write_file(
        &cfg.out_path("model.json"),
        to_json(&ModelCard {
            emotions: cfg.emotions.clone(),
            model: cfg.model.clone(),
        }),
    )?;
    log::info!(
        "best epoch {}: val WA {:.4} UA {:.4}",
        report.best_epoch,
        report.best_val_wa,
        report.best_val_ua
    );
    Ok(report_path)
}

#[derive(Debug, Serialize)]
struct LosoSummary<'a> {
    config_fingerprint: String,
    n_folds: usize,
    mean_wa: f64,
    mean_ua: f64,
    folds: &'a [crate::eval::FoldResult],
}

/// Leave-one-session-out run; writes `loso.csv` and `loso_summary.json`.
pub fn cmd_loso(cfg: &RunConfig) -> Result<PathBuf> {
    check_classes(cfg)?;
    let data = cfg.load_data()?;
    cfg.ensure_output_dir()?;
    let report = run_loso(&data, &cfg.model, &cfg.train)?;
    let csv_path = cfg.out_path("loso.csv");
    write_file(&csv_path, report.to_csv())?;
    write_file(
        &cfg.out_path("loso_summary.json"),
        to_json(&LosoSummary {
            config_fingerprint: cfg.fingerprint(),
            n_folds: report.folds.len(),
            mean_wa: report.mean_wa,
            mean_ua: report.mean_ua,
            folds: &report.folds,
        }),
    )?;
    log::info!("LOSO mean WA {:.4} UA {:.4}", report.mean_wa, report.mean_ua);
    Ok(csv_path)
}

/// Writes `gradcheck.txt` and `gradcheck.json`; a failed comparison is a
/// numeric error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.ensure_output_dir()?;
    let report = run_gradcheck(&cfg.gradcheck);
    let text = report.to_text();
    print!("{text}");
    let path = cfg.out_path("gradcheck.txt");
    write_file(&path, &text)?;
    write_file(&cfg.out_path("gradcheck.json"), to_json(&report))?;
    if !report.passed {
        return Err(Error::numeric("gradient check failed"));
    }
    Ok(path)
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    n_samples: usize,
    wa: f64,
    ua: f64,
    confusion: ConfusionMatrix,
}

/// Evaluate a saved checkpoint on the configured data; writes `eval.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<PathBuf> {
    check_classes(cfg)?;
    let data = cfg.load_data()?;
    let ckpt_path = cfg
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out_path("checkpoint.bin"));
    let params = load_checkpoint(&ckpt_path)?.to_params(&cfg.model)?;
    let cm = evaluate(&cfg.model, &params, &data)?;
    cfg.ensure_output_dir()?;
    let summary = EvalSummary {
        n_samples: data.len(),
        wa: weighted_accuracy(&cm)?,
        ua: unweighted_accuracy(&cm)?,
        confusion: cm,
    };
    let path = cfg.out_path("eval.json");
    write_file(&path, to_json(&summary))?;
    log::info!("eval WA {:.4} UA {:.4}", summary.wa, summary.ua);
    Ok(path)
}

fn check_classes(cfg: &RunConfig) -> Result<()> {
    if cfg.model.n_classes != cfg.emotions.len() {
        return Err(Error::Config(format!(
            "model.n_classes = {} but {} emotions are configured",
            cfg.model.n_classes,
            cfg.emotions.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "emomix", version, about = "Emotion classification with length-aware mixup and center loss")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus and its manifest.
    Synth(CommonArgs),
    /// Train one model with an internal validation split.
    Train(CommonArgs),
    /// Leave-one-session-out cross-validation.
    Loso(CommonArgs),
    /// Compare analytic gradients against finite differences.
    Gradcheck(CommonArgs),
    /// Evaluate a checkpoint.
    Eval(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run config; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Use a manifest instead of the config's data source.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_model: Option<f64>,
    #[arg(long, value_parser = parse_mixup_mode)]
    pub mixup: Option<MixupMode>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Gradient-check trials per component.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Inject a gradient fault (gradcheck self-test).
    #[arg(long)]
    pub corrupt: bool,
}

fn parse_mixup_mode(s: &str) -> std::result::Result<MixupMode, String> {
    match s {
        "conventional" => Ok(MixupMode::Conventional),
        "label_adaptive" => Ok(MixupMode::LabelAdaptive),
        "off" => Ok(MixupMode::Off),
        other => Err(format!("unknown mixup mode '{other}' (conventional, label_adaptive, off)")),
    }
}

impl CommonArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(m) = &self.manifest {
            cfg.manifest = Some(m.clone());
            cfg.synth = None;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.gradcheck.seed = seed;
            if let Some(spec) = cfg.synth.as_mut() {
                spec.seed = seed;
            }
        }
        if let Some(v) = self.max_epochs {
            cfg.train.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr_model {
            cfg.train.lr_model = v;
        }
        if let Some(v) = self.mixup {
            cfg.train.mixup.mode = v;
        }
        if let Some(v) = &self.checkpoint {
            cfg.eval.checkpoint = Some(v.clone());
        }
        if let Some(v) = self.trials {
            cfg.gradcheck.trials = v;
        }
        cfg.gradcheck.corrupt |= self.corrupt;
        Ok(cfg)
    }
}

/// Run a parsed command line and return the process exit code.
pub fn run(cli: Cli) -> i32 {
    let (args, cmd): (&CommonArgs, fn(&RunConfig) -> Result<PathBuf>) = match &cli.command {
        Command::Synth(a) => (a, cmd_synth),
        Command::Train(a) => (a, cmd_train),
        Command::Loso(a) => (a, cmd_loso),
        Command::Gradcheck(a) => (a, cmd_gradcheck),
        Command::Eval(a) => (a, cmd_eval),
    };
    match args.resolve().and_then(|cfg| cmd(&cfg)) {
        Ok(path) => {
            println!("{}", path.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The center bank stored alongside a checkpoint, if present.
pub fn checkpoint_centers(ckpt: &Checkpoint) -> Option<Array2<f64>> {
    let t = ckpt.get("centers")?;
    match t.shape.as_slice() {
        [rows, cols] => Array2::from_shape_vec((*rows, *cols), t.values.clone()).ok(),
        _ => None,
    }
}

//! Command-line front end: subcommands, JSON run configuration with strict
//! keys, and the run-directory layout
//! `<output_root>/<name>/<fold>/<regime>/{metrics.jsonl, best.ckpt, resolved-config.json}`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{PatchSet, Split};
use crate::error::{Error, Result};
use crate::eval::{export_embeddings, render_report, FoldReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig};
use crate::preprocess::{run_preprocess, PreprocessOptions};
use crate::synthgen::{generate_corpus, SynthConfig};
use crate::trainer::{evaluate_holdout, train, write_log_line, FoldPlan, HoldoutSplit, Regime, TrainConfig};

pub const SEED_ENV: &str = "HADG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub holdout_split: HoldoutSplit,
    /// PCA components in embedding dumps; 0 exports raw features.
    pub pca_k: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            holdout_split: HoldoutSplit::All,
            pca_k: 20,
        }
    }
}

/// Everything a run needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub output_root: PathBuf,
    /// Patch manifest used by train, eval and embed.
    pub manifest: PathBuf,
    /// Held-out hospital; `None` trains every fold.
    pub hold_out: Option<String>,
    pub synth: SynthConfig,
    pub preprocess: PreprocessOptions,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            output_root: "runs".into(),
            manifest: "patches/manifest.jsonl".into(),
            hold_out: None,
            synth: SynthConfig::default(),
            preprocess: PreprocessOptions::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Defaults with the seed override from the environment applied.
    pub fn defaults_from_env(env_seed: Option<&str>) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
            c.synth.seed = seed;
            c.preprocess.seed = seed;
            c.train.seed = seed;
        }
        Ok(c)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// File values layered over `defaults`. Unknown keys and type mismatches
/// are reported with their key path.
pub fn parse_config(text: &str, defaults: &RunConfig) -> Result<RunConfig> {
    let over: Value = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?
    };
    if !over.is_object() {
        return Err(Error::Config("configuration must be a JSON object".into()));
    }
    let mut merged = serde_json::to_value(defaults).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut merged, over);
    serde_path_to_error::deserialize(merged).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{path}: {}", e.into_inner()))
    })
}

pub fn load_config(path: Option<&Path>, env_seed: Option<&str>) -> Result<RunConfig> {
    let defaults = RunConfig::defaults_from_env(env_seed)?;
    match path {
        None => Ok(defaults),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            parse_config(&text, &defaults).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hadg", version, about = "Hospital-agnostic domain generalization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Masf,
    Baseline,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-hospital slide corpus.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        hospitals: Option<usize>,
        #[arg(long)]
        slides_per_cell: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Segment, tile, split and balance a slide tree into patches.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch_size: Option<usize>,
        #[arg(long)]
        bg_max: Option<f64>,
        /// Train, val and test fractions, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        fractions: Option<Vec<f64>>,
    },
    /// Train one or both regimes on one or every hold-out fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Held-out hospital; omit to train every fold.
        #[arg(long)]
        hold_out: Option<String>,
        #[arg(long, value_enum)]
        regime: Option<RegimeArg>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        output_root: Option<PathBuf>,
        #[arg(long)]
        eta: Option<f32>,
        #[arg(long)]
        gamma: Option<f32>,
        #[arg(long)]
        alpha_inner: Option<f32>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        batch_per_class: Option<usize>,
        /// Parallel fold jobs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score every trained fold of a run on its held-out hospital.
    Eval {
        /// Run directory `<output_root>/<name>`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum)]
        holdout_split: Option<HoldoutArg>,
    },
    /// Export patch features or their PCA projection as CSV.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Resolved configuration of the run that produced the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
        #[arg(long)]
        hospital: Option<String>,
    },
    /// Render fold reports (JSON list) as report.csv and report.txt.
    Report {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum HoldoutArg {
    All,
    Test,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run_dir(cfg: &RunConfig, fold: &str, regime: Regime) -> PathBuf {
    cfg.output_root.join(&cfg.name).join(fold).join(regime.as_str())
}

/// Train one (fold, regime) pair and write its run directory.
pub fn train_one(cfg: &RunConfig, data: &PatchSet, fold: &str, regime: Regime) -> Result<PathBuf> {
    let mut resolved = cfg.clone();
    resolved.hold_out = Some(fold.to_string());
    resolved.train.regime = regime;
    let dir = run_dir(&resolved, fold, regime);
    create_dir(&dir)?;
    write_json(&resolved, &dir.join("resolved-config.json"))?;
    let plan = FoldPlan::new(data, fold)?;
    let metrics = dir.join("metrics.jsonl");
    let file = File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    let mut w = BufWriter::new(file);
    let out = train(regime, &plan, data, &resolved.model, &resolved.train, &mut |l| write_log_line(&mut w, l))?;
    w.flush().map_err(|e| Error::io(&metrics, e))?;
    save_checkpoint(&out.params, &dir.join("best.ckpt"))?;
    let selection = serde_json::json!({
        "best_iteration": out.best_iteration,
        "best_val_accuracy": out.best_val_accuracy,
        "validation": out.validation,
    });
    write_json(&selection, &dir.join("selection.json"))?;
    Ok(dir)
}

fn synth(common: &Common, cfg: &mut RunConfig, out: &Path, overrides: (Option<usize>, Option<usize>, Option<usize>)) -> Result<()> {
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    let (hospitals, slides, size) = overrides;
    cfg.synth.hospitals = hospitals.unwrap_or(cfg.synth.hospitals);
    cfg.synth.slides_per_cell = slides.unwrap_or(cfg.synth.slides_per_cell);
    cfg.synth.size = size.unwrap_or(cfg.synth.size);
    create_dir(out)?;
    let desc = generate_corpus(&cfg.synth, out, cfg.preprocess.patch_size)?;
    eprintln!("wrote {} slides to {}", desc.slides, out.display());
    Ok(())
}

fn train_cmd(cfg: &RunConfig, regime: RegimeArg, jobs: usize) -> Result<()> {
    cfg.train.validate()?;
    let data = PatchSet::load(&cfg.manifest)?;
    let folds = match &cfg.hold_out {
        Some(h) => vec![h.clone()],
        None => data.hospitals(),
    };
    let regimes: Vec<Regime> = match regime {
        RegimeArg::Masf => vec![Regime::Masf],
        RegimeArg::Baseline => vec![Regime::Baseline],
        RegimeArg::Both => vec![Regime::Masf, Regime::Baseline],
    };
    let tasks: Vec<(String, Regime)> = folds
        .iter()
        .flat_map(|f| regimes.iter().map(move |&r| (f.clone(), r)))
        .collect();
    let queue = Mutex::new(tasks.into_iter());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1) {
            s.spawn(|| loop {
                let Some((fold, regime)) = queue.lock().unwrap().next() else {
                    break;
                };
                match train_one(cfg, &data, &fold, regime) {
                    Ok(dir) => eprintln!("trained {}", dir.display()),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Every `<run>/<fold>/<regime>` with a checkpoint, sorted.
fn trained_dirs(run: &Path) -> Result<Vec<(String, Regime, PathBuf)>> {
    let mut out = Vec::new();
    let read = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(p)
            .map_err(|e| Error::io(p, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        Ok(v)
    };
    for fold in read(run)? {
        for dir in read(&fold)? {
            let regime = match dir.file_name().and_then(|n| n.to_str()) {
                Some("masf") => Regime::Masf,
                Some("baseline") => Regime::Baseline,
                _ => continue,
            };
            if dir.join("best.ckpt").is_file() {
                let name = fold.file_name().unwrap().to_string_lossy().into_owned();
                out.push((name, regime, dir));
            }
        }
    }
    Ok(out)
}

fn eval_cmd(run: &Path, manifest: Option<&Path>, holdout: Option<HoldoutArg>) -> Result<()> {
    let dirs = trained_dirs(run)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no trained folds under {}", run.display())));
    }
    let mut reports = Vec::new();
    let mut loaded: Option<(PathBuf, PatchSet)> = None;
    for (fold, regime, dir) in dirs {
        let cfg = load_config(Some(&dir.join("resolved-config.json")), None)?;
        let manifest = manifest.map(Path::to_path_buf).unwrap_or(cfg.manifest.clone());
        if loaded.as_ref().is_none_or(|(p, _)| *p != manifest) {
            loaded = Some((manifest.clone(), PatchSet::load(&manifest)?));
        }
        let data = &loaded.as_ref().unwrap().1;
        let which = match holdout {
            Some(HoldoutArg::All) => HoldoutSplit::All,
            Some(HoldoutArg::Test) => HoldoutSplit::Test,
            None => cfg.eval.holdout_split,
        };
        let params = load_checkpoint(&dir.join("best.ckpt"))?;
        let plan = FoldPlan::new(data, &fold)?;
        reports.push(evaluate_holdout(&plan, data, &cfg.model, &params, regime, which)?);
    }
    write_json(&reports, &run.join("fold_reports.json"))?;
    write_report(&reports, run)
}

fn write_report(reports: &[FoldReport], out: &Path) -> Result<()> {
    let r = render_report(reports)?;
    create_dir(out)?;
    std::fs::write(out.join("report.csv"), &r.csv).map_err(|e| Error::io(out.join("report.csv"), e))?;
    std::fs::write(out.join("report.txt"), &r.text).map_err(|e| Error::io(out.join("report.txt"), e))?;
    print!("{}", r.text);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn embed_cmd(
    checkpoint: &Path,
    config: Option<&Path>,
    manifest: &Path,
    out: &Path,
    k: Option<usize>,
    split: SplitArg,
    hospital: Option<&str>,
) -> Result<()> {
    let cfg = load_config(config, None)?;
    let params = load_checkpoint(checkpoint)?;
    let data = PatchSet::load(manifest)?;
    let want = match split {
        SplitArg::All => None,
        SplitArg::Train => Some(Split::Train),
        SplitArg::Val => Some(Split::Val),
        SplitArg::Test => Some(Split::Test),
    };
    let idx: Vec<usize> = data
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| want.is_none_or(|s| r.split == s) && hospital.is_none_or(|h| r.hospital == h))
        .map(|(i, _)| i)
        .collect();
    export_embeddings(&cfg.model, &params, &data, &idx, k.unwrap_or(cfg.eval.pca_k), out)
}

fn dispatch(cli: Cli, env_seed: Option<&str>) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            out,
            hospitals,
            slides_per_cell,
            size,
        } => {
            let mut cfg = load_config(common.config.as_deref(), env_seed)?;
            synth(&common, &mut cfg, &out, (hospitals, slides_per_cell, size))
        }
        Command::Preprocess {
            common,
            input,
            out,
            patch_size,
            bg_max,
            fractions,
        } => {
            let mut cfg = load_config(common.config.as_deref(), env_seed)?;
            let p = &mut cfg.preprocess;
            p.seed = common.seed.unwrap_or(p.seed);
            p.patch_size = patch_size.unwrap_or(p.patch_size);
            p.bg_max = bg_max.unwrap_or(p.bg_max);
            if let Some(f) = fractions {
                p.fractions = [f[0], f[1], f[2]];
            }
            create_dir(&out)?;
            let s = run_preprocess(&input, &out, &cfg.preprocess)?;
            write_json(&cfg, &out.join("resolved-config.json"))?;
            eprintln!(
                "{} slides, {} tiles, {} retained, {} written",
                s.slides, s.candidates, s.retained, s.written
            );
            Ok(())
        }
        Command::Train {
            common,
            manifest,
            hold_out,
            regime,
            name,
            output_root,
            eta,
            gamma,
            alpha_inner,
            max_iterations,
            batch_per_class,
            jobs,
        } => {
            let mut cfg = load_config(common.config.as_deref(), env_seed)?;
            let t = &mut cfg.train;
            t.seed = common.seed.unwrap_or(t.seed);
            t.eta = eta.unwrap_or(t.eta);
            t.gamma = gamma.unwrap_or(t.gamma);
            t.alpha_inner = alpha_inner.unwrap_or(t.alpha_inner);
            t.max_iterations = max_iterations.unwrap_or(t.max_iterations);
            t.batch_per_class = batch_per_class.unwrap_or(t.batch_per_class);
            cfg.manifest = manifest.unwrap_or(cfg.manifest);
            cfg.hold_out = hold_out.or(cfg.hold_out);
            cfg.name = name.unwrap_or(cfg.name);
            cfg.output_root = output_root.unwrap_or(cfg.output_root);
            let regime = regime.unwrap_or(match cfg.train.regime {
                Regime::Masf => RegimeArg::Masf,
                Regime::Baseline => RegimeArg::Baseline,
            });
            train_cmd(&cfg, regime, jobs)
        }
        Command::Eval {
            run,
            manifest,
            holdout_split,
        } => eval_cmd(&run, manifest.as_deref(), holdout_split),
        Command::Embed {
            checkpoint,
            config,
            manifest,
            out,
            k,
            split,
            hospital,
        } => embed_cmd(&checkpoint, config.as_deref(), &manifest, &out, k, split, hospital.as_deref()),
        Command::Report { reports, out } => {
            let text = std::fs::read_to_string(&reports).map_err(|e| Error::io(&reports, e))?;
            let parsed: Vec<FoldReport> =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", reports.display())))?;
            write_report(&parsed, &out)
        }
    }
}

/// Parse `args` (program name first) and run; returns the process exit
/// status: 0 on success, 2 on usage errors, 1 on any other failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match dispatch(cli, env_seed.as_deref()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let d = RunConfig::default();
        assert_eq!(parse_config("", &d).unwrap(), d);
        assert_eq!(parse_config("{}", &d).unwrap(), d);
    }

    #[test]
    fn file_values_layer_over_defaults() {
        let d = RunConfig::default();
        let c = parse_config(r#"{"train": {"eta": 1e-4}, "name": "x"}"#, &d).unwrap();
        assert_eq!(c.train.eta, 1e-4);
        assert_eq!(c.train.gamma, d.train.gamma);
        assert_eq!(c.name, "x");
    }

    #[test]
    fn unknown_and_mistyped_keys_are_named() {
        let d = RunConfig::default();
        let err = parse_config(r#"{"train": {"learning_rate_typo": 1}}"#, &d).unwrap_err().to_string();
        assert!(err.contains("learning_rate_typo"), "{err}");
        let err = parse_config(r#"{"train": {"eta": "fast"}}"#, &d).unwrap_err().to_string();
        assert!(err.contains("train.eta"), "{err}");
        assert!(parse_config("[1]", &d).is_err());
    }

    #[test]
    fn env_seed_sets_default_seeds() {
        let c = RunConfig::defaults_from_env(Some("17")).unwrap();
        assert_eq!((c.synth.seed, c.preprocess.seed, c.train.seed), (17, 17, 17));
        let c = parse_config(r#"{"train": {"seed": 3}}"#, &c).unwrap();
        assert_eq!((c.synth.seed, c.train.seed), (17, 3));
        assert!(RunConfig::defaults_from_env(Some("x")).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["hadg", "frobnicate"]), 2);
        assert_eq!(run(["hadg", "train", "--no-such-flag"]), 2);
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use limbchan_core::archive::{read_archive, write_archive};
use limbchan_core::checkpoint::{load_model, save_model, sidecar_path, SavedModel};
use limbchan_core::config::RunConfig;
use limbchan_core::eval::{generalization_report, patient_level_report};
use limbchan_core::experiments::{abnormal_predictions, build_scenario, class_counts, make_synthetic_dataset, run_comparison, SplitSpec};
use limbchan_core::preprocess::{build_dataset, select_columns, ChannelConfig, FrameDataset};
use limbchan_core::train::{predict_batched, TrainConfig, train_baseline, train_classifier, train_imputer, History};
use limbchan_core::wfdb::{load_record, CLASS_TABLE};
use limbchan_core::{Error, Result};

const ARCHIVE: &str = "frames.lcb";

#[derive(Parser)]
#[command(name = "limbchan", version, about = "Limited-channel ECG classification via lead imputation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty run directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SplitArgs {
    /// Split file written by `split`.
    #[arg(long, conflicts_with = "scenario")]
    split: Option<PathBuf>,
    /// Build the scenario split on the fly.
    #[arg(long)]
    scenario: Option<u32>,
    /// Keep each record's frames on one side of the split.
    #[arg(long)]
    group_by_patient: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Imputer,
    Classifier,
    Baseline,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a directory of records into a frame archive.
    Ingest {
        /// Record directory; defaults to the config, then LIMBCHAN_DATA_DIR.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Fail on the first unreadable record instead of skipping it.
        #[arg(long)]
        strict: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic cross-distribution dataset as an archive.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Write a scenario split of an archive.
    Split {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        scenario: Option<u32>,
        #[arg(long)]
        group_by_patient: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model on the training side of a split.
    Train {
        #[arg(long, value_enum)]
        stage: Stage,
        #[arg(long)]
        archive: PathBuf,
        /// Imputer checkpoint, required for the classifier stage.
        #[arg(long)]
        imputer: Option<PathBuf>,
        /// Comma-separated observed leads; defaults to the scenario's.
        #[arg(long)]
        leads: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Score a classifier checkpoint.
    Evaluate {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train and score the baseline and ResNet++ on one split.
    Compare {
        /// Frame archive; the synthetic benchmark is generated when absent.
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        scenario: Option<u32>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        group_by_patient: bool,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    scenario: u32,
    seed: u64,
    leads: Vec<String>,
    train_classes: Vec<String>,
    train_fraction: f64,
    group_by_patient: bool,
    train: Vec<usize>,
    test: Vec<usize>,
}

#[derive(Serialize)]
struct OutputFile {
    file: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    seed: u64,
    config_hash: String,
    started_unix: u64,
    finished_unix: u64,
    outputs: Vec<OutputFile>,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// A run directory plus the files written into it.
struct Run {
    dir: PathBuf,
    command: &'static str,
    config: RunConfig,
    started: u64,
    outputs: Vec<String>,
}

impl Run {
    fn open(command: &'static str, common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            config.seed = s;
        }
        let dir = common.out.clone();
        if dir.exists() {
            if !dir.is_dir() {
                return Err(usage(format!("{} is not a directory", dir.display())));
            }
            let non_empty = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?.next().is_some();
            if non_empty && !common.force {
                return Err(usage(format!("{} is not empty; pass --force to overwrite", dir.display())));
            }
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            command,
            config,
            started: now(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn record(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn save_model(&mut self, name: &str, model: &SavedModel) -> Result<()> {
        save_model(&self.path(name), model, self.config.seed)?;
        self.record(name);
        self.record(&format!("{name}.toml"));
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let effective = self.config.to_toml();
        self.write("config.toml", effective.as_bytes())?;
        let mut outputs = Vec::new();
        for name in &self.outputs {
            let path = self.path(name);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            outputs.push(OutputFile {
                file: name.clone(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            command: self.command.to_string(),
            seed: self.config.seed,
            config_hash: self.config.hash(),
            started_unix: self.started,
            finished_unix: now(),
            outputs,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = self.path("manifest.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn counts_table(ds: &FrameDataset) -> String {
    let counts = class_counts(ds);
    let width = CLASS_TABLE.iter().map(|(n, _, _)| n.len()).max().unwrap_or(5);
    let mut out = String::new();
    for (name, _, _) in CLASS_TABLE {
        let c = counts.iter().find(|(n, _)| *n == name).map_or(0, |(_, c)| *c);
        out.push_str(&format!("{name:<width$}  {c:>6}\n"));
    }
    out.push_str(&format!("{:<width$}  {:>6}\n", "total", ds.n));
    out
}

fn cmd_ingest(data_dir: Option<PathBuf>, strict: bool, common: &Common) -> Result<()> {
    let mut run = Run::open("ingest", common)?;
    let dir = data_dir
        .or_else(|| run.config.data_dir())
        .ok_or_else(|| usage("no data directory: pass --data-dir or set LIMBCHAN_DATA_DIR"))?;
    if !dir.is_dir() {
        return Err(Error::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory")));
    }
    let mut headers: Vec<PathBuf> = WalkDir::new(&dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x == "hea"))
        .collect();
    headers.sort();
    if headers.is_empty() {
        return Err(Error::BadContainer {
            path: Some(dir),
            reason: "no records found".into(),
        });
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for h in &headers {
        match load_record(h) {
            Ok(r) => records.push(r),
            Err(e) if !strict => skipped.push((h.display().to_string(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    let (ds, dropped) = build_dataset(&records, &run.config.preprocess()?)?;
    if strict {
        if let Some(d) = dropped.first() {
            return Err(Error::BadContainer {
                path: None,
                reason: format!("record {}: {}", d.record, d.reason),
            });
        }
    }
    skipped.extend(dropped.into_iter().map(|d| (d.record, d.reason)));
    if ds.n == 0 {
        return Err(Error::EmptyDataset);
    }
    write_archive(&run.path(ARCHIVE), &ds)?;
    run.record(ARCHIVE);
    let mut report = String::from("record\treason\n");
    for (r, why) in &skipped {
        report.push_str(&format!("{r}\t{why}\n"));
    }
    run.write("skipped.tsv", report.as_bytes())?;
    print!("{}", counts_table(&ds));
    println!("{} records read, {} skipped", records.len(), skipped.len());
    run.finish()
}

fn cmd_synth(common: &Common) -> Result<()> {
    let mut run = Run::open("synth", common)?;
    let ds = make_synthetic_dataset(&run.config.synthetic_spec()?)?;
    write_archive(&run.path(ARCHIVE), &ds)?;
    run.record(ARCHIVE);
    print!("{}", counts_table(&ds));
    run.finish()
}

fn split_file(spec: &SplitSpec, group_by_patient: bool) -> SplitFile {
    SplitFile {
        scenario: spec.scenario_id,
        seed: spec.seed,
        leads: spec.leads.leads.clone(),
        train_classes: spec.train_classes.clone(),
        train_fraction: spec.train_fraction,
        group_by_patient,
        train: spec.train.clone(),
        test: spec.test.clone(),
    }
}

fn make_split(config: &RunConfig, ds: &FrameDataset, scenario: Option<u32>, group: bool) -> Result<SplitSpec> {
    let mut opts = config.scenario_options()?;
    opts.group_by_record |= group;
    build_scenario(scenario.unwrap_or(config.split.scenario), ds, config.seed, &opts)
}

/// The split from `--split`, or built from `--scenario` and the config.
fn resolve_split(config: &RunConfig, ds: &FrameDataset, args: &SplitArgs) -> Result<SplitSpec> {
    let Some(path) = &args.split else {
        return make_split(config, ds, args.scenario, args.group_by_patient);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: SplitFile = toml::from_str(&text).map_err(|e| Error::BadContainer {
        path: Some(path.clone()),
        reason: e.to_string(),
    })?;
    if let Some(&bad) = f.train.iter().chain(&f.test).find(|&&i| i >= ds.n) {
        return Err(Error::BadContainer {
            path: Some(path.clone()),
            reason: format!("frame index {bad} beyond archive of {} frames", ds.n),
        });
    }
    Ok(SplitSpec {
        scenario_id: f.scenario,
        leads: ChannelConfig::resolve(&f.leads, &ds.channel_names)?,
        train_classes: f.train_classes,
        train_fraction: f.train_fraction,
        seed: f.seed,
        train: f.train,
        test: f.test,
    })
}

fn cmd_split(archive: &Path, scenario: Option<u32>, group: bool, common: &Common) -> Result<()> {
    let mut run = Run::open("split", common)?;
    let ds = read_archive(archive)?;
    let spec = make_split(&run.config, &ds, scenario, group)?;
    let text = toml::to_string(&split_file(&spec, group || run.config.split.group_by_patient)).map_err(|e| Error::Config(e.to_string()))?;
    run.write("split.toml", text.as_bytes())?;
    println!("scenario {}: {} train frames, {} test frames, leads {}", spec.scenario_id, spec.train.len(), spec.test.len(), spec.leads.leads.join(","));
    run.finish()
}

fn with_epochs(mut cfg: TrainConfig, epochs: Option<usize>) -> TrainConfig {
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    cfg
}

fn write_log(run: &mut Run, name: &str, history: &History) -> Result<()> {
    run.write(name, history.to_log().as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    stage: Stage,
    archive: &Path,
    imputer: Option<&Path>,
    leads: Option<&str>,
    epochs: Option<usize>,
    split_args: &SplitArgs,
    common: &Common,
) -> Result<()> {
    if matches!(stage, Stage::Classifier) && imputer.is_none() {
        return Err(usage("--stage classifier needs --imputer <checkpoint>"));
    }
    let mut run = Run::open("train", common)?;
    let ds = read_archive(archive)?;
    let split = resolve_split(&run.config, &ds, split_args)?;
    let train_set = ds.subset(&split.train);
    let leads = match leads {
        Some(l) => ChannelConfig::resolve(&ChannelConfig::parse_list(l), &ds.channel_names)?,
        None => split.leads.clone(),
    };
    let cmp = run.config.comparison()?;
    let (model, history, name) = match stage {
        Stage::Imputer => {
            let cfg = with_epochs(cmp.imputer_train.clone(), epochs);
            let (m, h) = train_imputer(&train_set, &leads, &cmp.imputer, &cfg, None)?;
            (SavedModel::Imputer(m), h, "imputer.lcw")
        }
        Stage::Classifier => {
            let path = imputer.expect("checked above");
            let (loaded, _) = load_model(path)?;
            let SavedModel::Imputer(imp) = loaded else {
                return Err(usage(format!("{} is not an imputer checkpoint", path.display())));
            };
            let cfg = with_epochs(cmp.classifier_train.clone(), epochs);
            let (m, h) = train_classifier(&train_set, imp, &cmp.classifier, cmp.input_mode, cmp.fine_tune, &cfg, None)?;
            (SavedModel::Resnetpp(m), h, "classifier.lcw")
        }
        Stage::Baseline => {
            let cfg = with_epochs(cmp.classifier_train.clone(), epochs);
            let base = run.config.baseline.baseline(leads.len())?;
            let (m, h) = train_baseline(&train_set, &leads, &base, &cfg, None)?;
            (SavedModel::Baseline { leads: leads.clone(), model: m }, h, "baseline.lcw")
        }
    };
    run.save_model(name, &model)?;
    write_log(&mut run, "train_log.txt", &history)?;
    if let Some(last) = history.epochs.last() {
        println!("{} epochs, final training loss {:.6}", history.epochs.len(), last.train_loss);
    }
    println!("wrote {}", run.path(name).display());
    run.finish()
}

fn cmd_evaluate(archive: &Path, model: &Path, subset: Subset, split_args: &SplitArgs, common: &Common) -> Result<()> {
    let mut run = Run::open("evaluate", common)?;
    if !sidecar_path(model).exists() {
        return Err(Error::io(sidecar_path(model), std::io::Error::new(std::io::ErrorKind::NotFound, "missing sidecar")));
    }
    let (saved, _) = load_model(model)?;
    if matches!(saved, SavedModel::Imputer(_)) {
        return Err(usage("evaluate needs a classifier or baseline checkpoint"));
    }
    let ds = read_archive(archive)?;
    let indices: Vec<usize> = match subset {
        Subset::All => (0..ds.n).collect(),
        Subset::Train => resolve_split(&run.config, &ds, split_args)?.train,
        Subset::Test => resolve_split(&run.config, &ds, split_args)?.test,
    };
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let part = ds.subset(&indices);
    let leads = ChannelConfig::resolve(&saved.leads().leads, &part.channel_names)?;
    let x = part.batch(&(0..part.n).collect::<Vec<_>>());
    let probs = predict_batched(&select_columns(&x, &leads.indices), 64, |b| saved.predict(b))?;
    let preds = abnormal_predictions(&probs);
    let report = generalization_report(&preds, &part.labels)?;
    let patients = patient_level_report(&preds, &part.labels, &part.record_ids)?;
    run.write("report.tsv", report.to_tsv().as_bytes())?;
    run.write("patient_report.tsv", patients.to_tsv().as_bytes())?;
    let mut frames = String::from("frame\tclass\tp_abnormal\n");
    for (k, &i) in indices.iter().enumerate() {
        frames.push_str(&format!("{i}\t{}\t{:.9}\n", part.labels[k].class_name, probs.data()[2 * k + 1]));
    }
    run.write("predictions.tsv", frames.as_bytes())?;
    print!("{}", report.to_table());
    run.finish()
}

fn cmd_compare(archive: Option<&Path>, scenario: Option<u32>, epochs: Option<usize>, group: bool, common: &Common) -> Result<()> {
    let mut run = Run::open("compare", common)?;
    let ds = match archive {
        Some(p) => read_archive(p)?,
        None => make_synthetic_dataset(&run.config.synthetic_spec()?)?,
    };
    let split = make_split(&run.config, &ds, scenario, group)?;
    let mut cmp = run.config.comparison()?;
    cmp.imputer_train = with_epochs(cmp.imputer_train, epochs);
    cmp.classifier_train = with_epochs(cmp.classifier_train, epochs);
    let report = run_comparison(&ds, &split, &cmp, run.config.seed)?;
    run.write("comparison.tsv", report.to_tsv().as_bytes())?;
    run.write("baseline_report.tsv", report.baseline.to_tsv().as_bytes())?;
    run.write("resnetpp_report.tsv", report.resnetpp.to_tsv().as_bytes())?;
    write_log(&mut run, "imputer_log.txt", &report.imputer_history)?;
    write_log(&mut run, "classifier_log.txt", &report.classifier_history)?;
    write_log(&mut run, "baseline_log.txt", &report.baseline_history)?;
    run.save_model("resnetpp.lcw", &SavedModel::Resnetpp(report.resnetpp_model.clone()))?;
    run.save_model(
        "baseline.lcw",
        &SavedModel::Baseline {
            leads: split.leads.clone(),
            model: report.baseline_model.clone(),
        },
    )?;
    print!("{}", report.to_table());
    run.finish()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest { data_dir, strict, common } => cmd_ingest(data_dir, strict, &common),
        Command::Synth { common } => cmd_synth(&common),
        Command::Split {
            archive,
            scenario,
            group_by_patient,
            common,
        } => cmd_split(&archive, scenario, group_by_patient, &common),
        Command::Train {
            stage,
            archive,
            imputer,
            leads,
            epochs,
            split,
            common,
        } => cmd_train(stage, &archive, imputer.as_deref(), leads.as_deref(), epochs, &split, &common),
        Command::Evaluate {
            archive,
            model,
            subset,
            split,
            common,
        } => cmd_evaluate(&archive, &model, subset, &split, &common),
        Command::Compare {
            archive,
            scenario,
            epochs,
            group_by_patient,
            common,
        } => cmd_compare(archive.as_deref(), scenario, epochs, group_by_patient, &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

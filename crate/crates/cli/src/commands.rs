use std::fs;
use std::path::{Path, PathBuf};

use lorac::data::Dataset;
use lorac::eval::{linear_probe, qhat_stats, ProbeConfig, ProbeResult, QHatStats};
use lorac::trainer::{run, EpochSummary, MetricsWriter, Observer, StepRecord, TrainState};
use serde::Serialize;

use crate::outdir::{self, RunManifest};
use crate::run_config::RunConfig;
use crate::{CliError, CliResult};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FINAL_CHECKPOINT: &str = "final.lorc";
pub const DATASET_FILE: &str = "dataset.ldset";
pub const HELDOUT_FILE: &str = "heldout.ldset";

const STATS_SEED_SALT: u64 = 0x5157_a75e_ed00_0001;

pub struct PretrainArgs {
    pub config: PathBuf,
    pub overrides: Vec<String>,
    pub out: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub dir: PathBuf,
    pub steps: u64,
    pub last: Option<EpochSummary>,
}

struct RunObserver {
    metrics: MetricsWriter,
    dir: PathBuf,
    every: u64,
    steps: u64,
    last: Option<EpochSummary>,
}

impl Observer for RunObserver {
    fn on_step(&mut self, record: &StepRecord) -> lorac::Result<()> {
        self.steps += 1;
        self.metrics.on_step(record)
    }

    fn on_epoch(&mut self, state: &TrainState, summary: &EpochSummary) -> lorac::Result<()> {
        self.metrics.on_epoch(state, summary)?;
        if self.every > 0 && state.epoch.is_multiple_of(self.every) {
            state.save(&self.dir.join(checkpoint_name(state.epoch)))?;
        }
        self.last = Some(summary.clone());
        Ok(())
    }
}

pub fn checkpoint_name(epoch: u64) -> String {
    format!("ckpt-epoch-{epoch:04}.lorc")
}

pub fn pretrain(args: &PretrainArgs) -> CliResult<PretrainOutcome> {
    let cfg = RunConfig::load(&args.config, &args.overrides)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let dataset = cfg.data.dataset(cfg.train.seed, base)?;
    let (train_split, heldout) = dataset.split(cfg.data.train_fraction)?;
    if train_split.is_empty() {
        return Err(CliError::usage("invalid config `data.train_fraction`: the training split is empty"));
    }

    let mut state = match &args.resume {
        Some(p) => {
            let st = TrainState::load(p).map_err(|e| CliError::usage(format!("cannot resume from {}: {e}", p.display())))?;
            if st.config != cfg.train {
                return Err(CliError::usage("checkpoint config differs from the resolved run config"));
            }
            if st.d_in() != dataset.d_in() {
                return Err(CliError::usage(format!(
                    "checkpoint expects inputs of width {}, dataset has {}",
                    st.d_in(),
                    dataset.d_in()
                )));
            }
            st
        }
        None => TrainState::init(&cfg.train, train_split.samples())?,
    };

    let dir = outdir::prepare(args.out.as_deref(), "run")?;
    let mut manifest = RunManifest::new("pretrain", cfg.train.seed, cfg.to_toml());
    manifest.config_path = Some(args.config.display().to_string());
    manifest.overrides = args.overrides.clone();
    if let Some(p) = &args.resume {
        manifest.artifact("resumed_from", p);
    }
    for name in [METRICS_FILE, SUMMARY_FILE, FINAL_CHECKPOINT, DATASET_FILE, HELDOUT_FILE] {
        manifest.artifact(name, &dir.join(name));
    }
    manifest.write(&dir)?;
    dataset.save(&dir.join(DATASET_FILE))?;
    heldout.save(&dir.join(HELDOUT_FILE))?;

    let mut obs = RunObserver {
        metrics: MetricsWriter::open(&dir.join(METRICS_FILE), &dir.join(SUMMARY_FILE), false)?,
        dir: dir.clone(),
        every: cfg.train.checkpoint_every,
        steps: 0,
        last: None,
    };
    match run(&mut state, train_split.samples(), &mut obs) {
        Ok(()) => {}
        Err(e @ lorac::Error::NonFinite { .. }) => {
            obs.metrics.flush()?;
            let dump = write_diagnostic(&dir, &state, &e)?;
            manifest.artifact("diagnostic", &dump);
            manifest.finish("aborted");
            manifest.write(&dir)?;
            return Err(CliError::Numeric {
                message: format!("numeric abort: {e}"),
                dump: Some(dump),
            });
        }
        Err(e) => return Err(e.into()),
    }
    obs.metrics.flush()?;
    state.save(&dir.join(FINAL_CHECKPOINT))?;
    manifest.finish("completed");
    manifest.write(&dir)?;
    Ok(PretrainOutcome {
        dir,
        steps: obs.steps,
        last: obs.last,
    })
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    epoch: u64,
    step: u64,
    state_checkpoint: &'a str,
    query_params_finite: bool,
    key_params_finite: bool,
}

fn write_diagnostic(dir: &Path, state: &TrainState, err: &lorac::Error) -> CliResult<PathBuf> {
    let ckpt = dir.join("abort-state.lorc");
    state.save(&ckpt)?;
    let d = Diagnostic {
        error: err.to_string(),
        epoch: state.epoch,
        step: state.step,
        state_checkpoint: "abort-state.lorc",
        query_params_finite: state.pair.query.is_finite(),
        key_params_finite: state.pair.key.is_finite(),
    };
    let path = dir.join("diagnostic.json");
    fs::write(&path, serde_json::to_string_pretty(&d).expect("diagnostic serializes") + "\n")?;
    Ok(path)
}

fn load_inputs(checkpoint: &Path, dataset: &Path) -> CliResult<(TrainState, Dataset)> {
    let st = TrainState::load(checkpoint)
        .map_err(|e| CliError::usage(format!("cannot load checkpoint {}: {e}", checkpoint.display())))?;
    let ds = Dataset::load(dataset)
        .map_err(|e| CliError::usage(format!("cannot load dataset {}: {e}", dataset.display())))?;
    if st.d_in() != ds.d_in() {
        return Err(CliError::usage(format!(
            "dimension mismatch: checkpoint expects inputs of width {}, dataset has {}",
            st.d_in(),
            ds.d_in()
        )));
    }
    Ok((st, ds))
}

pub struct ProbeArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub probe: ProbeConfig,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct ProbeRecord {
    pub checkpoint: String,
    pub dataset: String,
    pub epoch: u64,
    #[serde(flatten)]
    pub result: ProbeResult,
}

pub fn probe(args: &ProbeArgs) -> CliResult<ProbeRecord> {
    let (st, ds) = load_inputs(&args.checkpoint, &args.dataset)?;
    let features = st.pair.query.embed(ds.samples())?;
    let labels: Vec<usize> = ds.labels().iter().map(|&l| l as usize).collect();
    let result = linear_probe(&features, &labels, &args.probe)?;
    let record = ProbeRecord {
        checkpoint: args.checkpoint.display().to_string(),
        dataset: args.dataset.display().to_string(),
        epoch: st.epoch,
        result,
    };
    if let Some(p) = &args.out {
        fs::write(p, probe_json(&record) + "\n")?;
    }
    Ok(record)
}

pub fn probe_json(record: &ProbeRecord) -> String {
    serde_json::to_string(record).expect("probe record serializes")
}

pub struct StatsArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub views: usize,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub const STATS_CSV: &str = "qhat.csv";
pub const STATS_JSON: &str = "qhat_summary.json";

pub fn stats(args: &StatsArgs) -> CliResult<(PathBuf, QHatStats)> {
    let (st, ds) = load_inputs(&args.checkpoint, &args.dataset)?;
    let seed = args.seed.unwrap_or(st.config.seed ^ STATS_SEED_SALT);
    let s = qhat_stats(&st.pair.query, ds.samples(), args.views, &st.config.augment, seed)?;
    let dir = outdir::prepare(args.out.as_deref(), "stats")?;
    fs::write(dir.join(STATS_CSV), s.to_csv())?;
    fs::write(dir.join(STATS_JSON), s.summary_json() + "\n")?;
    Ok((dir, s))
}

//! Single experiment runs: scenario construction, three-stage training and
//! evaluation, checkpoints and the reproduction manifest.

use std::fs;
use std::path::{Path, PathBuf};

use biadapt_core::eval::{
    default_gradcam_layer, emit_report, evaluate_domains, gradcam_map, EvalReport, NamedHeatmap,
};
use biadapt_core::nets::ModelState;
use biadapt_core::synthdata::{
    generate_domain, load_dataset_dir, make_scenario, split_domain, DomainDataset, IngestOptions,
    Label, Samples, Scenario,
};
use biadapt_core::trainer::{self, Stage, TrainData, TrainTrace};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, DomainSource, ExperimentSpec, ScenarioSpec};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_DIVERGENCE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Core(#[from] biadapt_core::Error),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use biadapt_core::Error as E;
        match self {
            RunError::Core(E::Divergence { .. }) => EXIT_DIVERGENCE,
            RunError::Io { .. }
            | RunError::Config(ConfigError::Read { .. })
            | RunError::Core(E::Io { .. } | E::Ingestion { .. } | E::Overwrite(_)) => EXIT_IO,
            _ => EXIT_FAILURE,
        }
    }

    pub fn kind(&self) -> &'static str {
        use biadapt_core::Error as E;
        match self {
            RunError::Config(_) | RunError::Core(E::Config(_)) => "config",
            RunError::Core(E::Divergence { .. }) => "divergence",
            RunError::Io { .. } | RunError::Core(E::Io { .. }) => "io",
            RunError::Core(E::Ingestion { .. }) => "ingestion",
            RunError::Core(E::Overwrite(_)) => "overwrite",
            RunError::Core(_) => "runtime",
        }
    }

    /// Machine-readable error record.
    pub fn record(&self) -> serde_json::Value {
        let mut v = json!({
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let RunError::Core(biadapt_core::Error::Divergence { record, reason }) = self {
            v["step"] = serde_json::to_value(record).unwrap_or_default();
            v["reason"] = json!(reason);
        }
        v
    }
}

pub type RunResult<T> = Result<T, RunError>;

fn load_domain(path: &Path, spec: &ScenarioSpec, side: usize) -> RunResult<DomainDataset> {
    let labeled = path.join("real").is_dir() || path.join("fake").is_dir();
    let opts = IngestOptions {
        side,
        balance_classes: spec.balance_classes,
        seed: spec.data_seed,
    };
    Ok(load_dataset_dir(path, labeled, &opts)?)
}

/// Builds (generates or loads) and splits every domain of the scenario.
/// Target `i` is generated with seed `data_seed + 1 + i`.
pub fn build_scenario(spec: &ScenarioSpec, side: usize) -> RunResult<Scenario> {
    let domain = |d: &DomainSource, seed: u64| -> RunResult<DomainDataset> {
        let raw = match d {
            DomainSource::Synthetic(k) => generate_domain(*k, seed, spec.n_real, spec.n_fake, side)?,
            DomainSource::Directory(p) => load_domain(p, spec, side)?,
        };
        Ok(split_domain(&raw, spec.train_fraction, spec.data_seed)?)
    };
    let source = domain(&spec.source, spec.data_seed)?;
    let targets = spec
        .targets
        .iter()
        .enumerate()
        .map(|(i, t)| domain(t, spec.data_seed.wrapping_add(1 + i as u64)))
        .collect::<RunResult<Vec<_>>>()?;
    Ok(make_scenario(source, targets)?)
}

/// SHA-256 over every image of the scenario, in order.
pub fn scenario_digest(s: &Scenario) -> String {
    let mut h = Sha256::new();
    for d in std::iter::once(&s.source).chain(&s.targets) {
        h.update(d.domain_id.as_bytes());
        for split in [&d.train, &d.test] {
            for img in split.images() {
                h.update(img.content_hash());
            }
            if let Some(labels) = split.labels() {
                h.update(labels.iter().map(|l| l.index() as u8).collect::<Vec<_>>());
            }
        }
    }
    hex(&h.finalize())
}

/// SHA-256 of the canonical config, ignoring where and how outputs are written.
pub fn config_digest(spec: &ExperimentSpec) -> String {
    let canonical = ExperimentSpec {
        out_dir: PathBuf::new(),
        overwrite: false,
        ..spec.clone()
    };
    hex(&Sha256::digest(canonical.to_config_string().as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Domains with ground-truth test labels, source first.
pub fn evaluable_domains(s: &Scenario) -> Vec<&DomainDataset> {
    std::iter::once(&s.source)
        .chain(&s.targets)
        .filter(|d| d.test.is_labeled() && !d.test.is_empty())
        .collect()
}

/// Grad-CAM maps of the fake class for the first `per_domain` test images
/// of each evaluable domain.
pub fn heatmaps(state: &ModelState, s: &Scenario, per_domain: usize) -> RunResult<Vec<NamedHeatmap>> {
    let Some(layer) = default_gradcam_layer(&state.backbone) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for d in evaluable_domains(s) {
        let Samples::Labeled(test) = &d.test else { continue };
        for (index, sample) in test.iter().take(per_domain).enumerate() {
            out.push(NamedHeatmap {
                domain: d.domain_id.clone(),
                index,
                class: sample.label,
                map: gradcam_map(state, &sample.image, layer, Label::Fake.index())?,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    train_seed: u64,
    data_seed: u64,
    config_digest: &'a str,
    data_digest: &'a str,
    stages: [&'static str; 3],
    /// Canonical config; `biadapt train --config` on it reproduces the run.
    config: &'a str,
}

/// Artifacts of a finished run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    /// Baseline, forward and backward reports (empty when evaluation is off).
    pub reports: Vec<EvalReport>,
    pub final_state: ModelState,
}

pub const STAGES: [&str; 3] = ["baseline", "forward", "backward"];

fn write(path: &Path, bytes: &[u8]) -> RunResult<()> {
    fs::write(path, bytes).map_err(|e| RunError::io(path, e))
}

struct StageWriter<'a> {
    spec: &'a ExperimentSpec,
    scenario: &'a Scenario,
    digest: &'a str,
    run_id: String,
    reports: Vec<EvalReport>,
}

impl StageWriter<'_> {
    fn finish(&mut self, stage: &str, state: &ModelState, trace: &TrainTrace) -> RunResult<()> {
        let out = &self.spec.out_dir;
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| RunError::io(&ckpt_dir, e))?;
        state.save(&ckpt_dir.join(format!("{stage}.ckpt")))?;
        let dir = out.join(stage);
        if !self.spec.evaluate {
            fs::create_dir_all(&dir).map_err(|e| RunError::io(&dir, e))?;
            return write(&dir.join("trace.csv"), trace.to_csv().as_bytes());
        }
        let domains = evaluable_domains(self.scenario);
        let report = evaluate_domains(state, &domains, &self.run_id, stage, self.digest)?;
        let maps = heatmaps(state, self.scenario, self.spec.heatmaps)?;
        emit_report(&report, trace, &maps, &dir, self.spec.overwrite)?;
        self.reports.push(report);
        Ok(())
    }
}

/// Baseline (source-only) training, then forward and backward adaptation
/// from the same initialisation; each stage is checkpointed, evaluated and
/// reported under `out_dir/<stage>/`.
pub fn run_experiment(spec: &ExperimentSpec) -> RunResult<RunOutcome> {
    spec.validate()?;
    let out = &spec.out_dir;
    let manifest_path = out.join("manifest.json");
    if manifest_path.exists() && !spec.overwrite {
        return Err(biadapt_core::Error::Overwrite(manifest_path).into());
    }
    fs::create_dir_all(out).map_err(|e| RunError::io(out, e))?;
    let result = run_stages(spec);
    if let Err(e) = &result {
        // Best effort: the error itself may be an unwritable directory.
        let _ = fs::write(
            out.join("error.json"),
            serde_json::to_string_pretty(&e.record()).unwrap_or_default(),
        );
    }
    result
}

fn run_stages(spec: &ExperimentSpec) -> RunResult<RunOutcome> {
    let out = &spec.out_dir;
    let config_text = spec.to_config_string();
    let digest = config_digest(spec);
    let scenario = build_scenario(&spec.scenario, spec.backbone.image_side)?;
    let data_digest = scenario_digest(&scenario);
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: biadapt_core::nets::CHECKPOINT_VERSION,
        train_seed: spec.train.seed,
        data_seed: spec.scenario.data_seed,
        config_digest: &digest,
        data_digest: &data_digest,
        stages: STAGES,
        config: &config_text,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), manifest_json.as_bytes())?;
    write(&out.join("config.txt"), config_text.as_bytes())?;

    let data = TrainData::from_scenario(&scenario)?;
    let init = ModelState::init(spec.backbone.clone(), spec.train.seed)?;
    let mut writer = StageWriter {
        spec,
        scenario: &scenario,
        digest: &digest,
        run_id: format!("{}-seed{}", spec.scenario.name(), spec.train.seed),
        reports: Vec::new(),
    };

    let mut base = init.clone();
    let base_cfg = spec.train.baseline();
    let base_trace = trainer::forward_adaptation_stage(&mut base, &data, &base_cfg)?;
    writer.finish(STAGES[0], &base, &base_trace)?;

    let mut state = init;
    let mut stage_err = None;
    trainer::train(&mut state, &data, &spec.train, |stage, s, trace| {
        let name = match stage {
            Stage::Forward => STAGES[1],
            Stage::Backward => STAGES[2],
        };
        writer.finish(name, s, trace).map_err(|e| {
            let msg = e.to_string();
            stage_err = Some(e);
            biadapt_core::Error::Config(msg)
        })
    })
    .map_err(|e| stage_err.take().unwrap_or(RunError::Core(e)))?;
    let reports = writer.reports;
    Ok(RunOutcome {
        out_dir: out.clone(),
        reports,
        final_state: state,
    })
}

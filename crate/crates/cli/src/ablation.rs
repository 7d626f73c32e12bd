//! Ablation grids: named variants (config overrides) × scenarios × seeds,
//! merged into one table of median AUCs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use biadapt_core::eval::{emit_report, evaluate_domains, EvalReport};
use biadapt_core::nets::ModelState;
use biadapt_core::synthdata::Scenario;
use biadapt_core::trainer::{self, BackwardObjective, TeacherUpdate, TrainConfig, TrainData, TrainTrace};

use crate::config::{ConfigError, ExperimentSpec, ScenarioSpec};
use crate::experiment::{build_scenario, config_digest, evaluable_domains, RunError, RunResult};

/// A named set of config overrides applied on top of the grid's base spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

pub const STANDARD_VARIANTS: [&str; 7] = ["baseline", "+GRL", "+MMD", "+FA", "+SD", "+Ent", "full-BA"];

impl Variant {
    pub fn new(name: &str, overrides: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    /// One of [`STANDARD_VARIANTS`]. The forward-only variants skip the
    /// backward stage; `+SD` and `+Ent` drop its adversarial term.
    pub fn standard(name: &str) -> Option<Self> {
        let v = match name {
            "baseline" => Self::new(
                name,
                &[("alpha2", "0"), ("adapter", "none"), ("backward_objective", "none"), ("t2", "0")],
            ),
            "+GRL" => Self::new(name, &[("adapter", "GRL"), ("t2", "0")]),
            "+MMD" => Self::new(name, &[("adapter", "MMD"), ("t2", "0")]),
            "+FA" => Self::new(name, &[("adapter", "FA"), ("t2", "0")]),
            "+SD" => Self::new(name, &[("adapter", "FA"), ("backward_objective", "SD"), ("alpha4", "0")]),
            "+Ent" => Self::new(name, &[("adapter", "FA"), ("backward_objective", "ENT"), ("alpha4", "0")]),
            "full-BA" => Self::new(name, &[("adapter", "FA"), ("backward_objective", "SD")]),
            _ => return None,
        };
        Some(v)
    }

    pub fn all_standard() -> Vec<Self> {
        STANDARD_VARIANTS
            .iter()
            .map(|n| Self::standard(n).expect("standard variant"))
            .collect()
    }

    pub fn apply(&self, base: &ExperimentSpec) -> Result<ExperimentSpec, ConfigError> {
        let mut spec = base.clone();
        for (k, v) in &self.overrides {
            spec.set(k, v).map_err(|m| {
                ConfigError::Invalid(format!("variant {}: key `{k}`: {m}", self.name))
            })?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub base: ExperimentSpec,
    pub scenarios: Vec<ScenarioSpec>,
    pub variants: Vec<Variant>,
    /// Each seed sets both the training and the data seed.
    pub seeds: Vec<u64>,
}

/// Source AUC and mean target AUC of one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageAuc {
    pub source: f64,
    pub target: f64,
    pub per_domain: Vec<(String, f64)>,
}

impl StageAuc {
    fn from_report(r: &EvalReport) -> Self {
        let per_domain: Vec<(String, f64)> = r.domains.iter().map(|d| (d.id.clone(), d.auc)).collect();
        let targets = &per_domain[1..];
        let target = if targets.is_empty() {
            f64::NAN
        } else {
            targets.iter().map(|(_, a)| a).sum::<f64>() / targets.len() as f64
        };
        Self {
            source: per_domain[0].1,
            target,
            per_domain,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub scenario: String,
    pub variant: String,
    pub seed: u64,
    pub forward: Option<StageAuc>,
    /// Absent for forward-only variants.
    pub backward: Option<StageAuc>,
    pub error: Option<String>,
}

impl CellResult {
    /// AUCs of the deployed model: backward when run, else forward.
    pub fn final_stage(&self) -> Option<&StageAuc> {
        self.backward.as_ref().or(self.forward.as_ref())
    }
}

/// What a cell exposes to the observer after its forward stage.
pub struct CellView<'a> {
    pub scenario_name: &'a str,
    pub variant: &'a str,
    pub seed: u64,
    pub scenario: &'a Scenario,
    pub init: &'a ModelState,
    pub forward: &'a ModelState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub scenario: String,
    pub variant: String,
    pub forward: Option<(f64, f64)>,
    pub backward: Option<(f64, f64)>,
    pub ok: usize,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<CellResult>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn fmt_auc(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_default()
}

impl AblationTable {
    fn from_cells(cells: Vec<CellResult>, scenarios: &[String], variants: &[Variant]) -> Self {
        let mut rows = Vec::new();
        for s in scenarios {
            for v in variants {
                let mine: Vec<&CellResult> = cells
                    .iter()
                    .filter(|c| &c.scenario == s && c.variant == v.name)
                    .collect();
                let ok: Vec<&&CellResult> = mine.iter().filter(|c| c.error.is_none()).collect();
                let stage = |pick: fn(&CellResult) -> Option<&StageAuc>| {
                    let aucs: Vec<&StageAuc> = ok.iter().filter_map(|c| pick(c)).collect();
                    let src: Vec<f64> = aucs.iter().map(|a| a.source).collect();
                    let tgt: Vec<f64> = aucs.iter().map(|a| a.target).collect();
                    median(&src).zip(median(&tgt))
                };
                rows.push(AblationRow {
                    scenario: s.clone(),
                    variant: v.name.clone(),
                    forward: stage(|c| c.forward.as_ref()),
                    backward: stage(|c| c.backward.as_ref()),
                    ok: ok.len(),
                    total: mine.len(),
                });
            }
        }
        Self { rows, cells }
    }

    pub fn row(&self, scenario: &str, variant: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.variant == variant)
    }

    /// Median over seeds of the deployed model's target AUC.
    pub fn median_final_target(&self, scenario: &str, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells_of(scenario, variant)
            .filter_map(|c| c.final_stage().map(|a| a.target))
            .collect();
        median(&v)
    }

    pub fn median_final_source(&self, scenario: &str, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .cells_of(scenario, variant)
            .filter_map(|c| c.final_stage().map(|a| a.source))
            .collect();
        median(&v)
    }

    pub fn cells_of<'a>(&'a self, scenario: &'a str, variant: &'a str) -> impl Iterator<Item = &'a CellResult> {
        self.cells
            .iter()
            .filter(move |c| c.scenario == scenario && c.variant == variant && c.error.is_none())
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| scenario | variant | fwd source AUC | fwd target AUC | bwd source AUC | bwd target AUC | seeds |\n\
             |---|---|---:|---:|---:|---:|---|\n",
        );
        for r in &self.rows {
            let status = if r.ok == r.total {
                format!("{}", r.ok)
            } else {
                format!("{}/{} FAILED", r.total - r.ok, r.total)
            };
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {} | {} | {} |",
                r.scenario,
                r.variant,
                fmt_auc(r.forward.map(|a| a.0)),
                fmt_auc(r.forward.map(|a| a.1)),
                fmt_auc(r.backward.map(|a| a.0)),
                fmt_auc(r.backward.map(|a| a.1)),
                status
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scenario,variant,fwd_source_auc,fwd_target_auc,bwd_source_auc,bwd_target_auc,ok,total\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.scenario,
                r.variant,
                fmt_auc(r.forward.map(|a| a.0)),
                fmt_auc(r.forward.map(|a| a.1)),
                fmt_auc(r.backward.map(|a| a.0)),
                fmt_auc(r.backward.map(|a| a.1)),
                r.ok,
                r.total
            );
        }
        s
    }

    /// One line per cell, for paired comparisons across seeds.
    pub fn cells_csv(&self) -> String {
        let mut s = String::from("scenario,variant,seed,fwd_source_auc,fwd_target_auc,bwd_source_auc,bwd_target_auc,error\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.scenario,
                c.variant,
                c.seed,
                fmt_auc(c.forward.as_ref().map(|a| a.source)),
                fmt_auc(c.forward.as_ref().map(|a| a.target)),
                fmt_auc(c.backward.as_ref().map(|a| a.source)),
                fmt_auc(c.backward.as_ref().map(|a| a.target)),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            );
        }
        s
    }
}

/// Everything that can influence the forward stage. Two variants with the
/// same key share one forward run.
fn forward_key(spec: &ExperimentSpec) -> String {
    let t = &spec.train;
    let normalised = TrainConfig {
        t2: 0,
        lr_backward: 1.0,
        batch_backward: 2,
        backward_objective: BackwardObjective::None,
        teacher_update: TeacherUpdate::Copy,
        ema_decay: 0.0,
        detach_teacher: true,
        train_classifier_backward: true,
        weights: biadapt_core::losses::LossWeights {
            alpha3: 0.0,
            alpha4: 0.0,
            ..t.weights
        },
        ..t.clone()
    };
    serde_json::to_string(&(&normalised, &spec.backbone)).expect("config serializes")
}

struct ForwardRun {
    state: ModelState,
    trace: TrainTrace,
    report: EvalReport,
}

fn cell_dir(out: &Path, scenario: &str, variant: &str, seed: u64) -> std::path::PathBuf {
    let clean = |s: &str| s.replace(['>', '+'], "_").replace(['/', '\\', ' '], "-");
    out.join(clean(scenario)).join(clean(variant)).join(format!("seed{seed}"))
}

/// Runs every (scenario, seed, variant) cell and merges the results.
/// Failed cells are recorded in the table instead of aborting the grid.
pub fn run_ablation(
    grid: &AblationGrid,
    out: Option<&Path>,
    mut on_forward: impl FnMut(&CellView<'_>),
) -> RunResult<AblationTable> {
    let specs: Vec<ExperimentSpec> = grid
        .variants
        .iter()
        .map(|v| v.apply(&grid.base))
        .collect::<Result<_, _>>()?;
    if grid.seeds.is_empty() || grid.variants.is_empty() || grid.scenarios.is_empty() {
        return Err(ConfigError::Invalid("ablation grid has no cells".into()).into());
    }
    let names: Vec<String> = grid.scenarios.iter().map(ScenarioSpec::name).collect();
    let mut cells = Vec::new();
    for (scenario_spec, scenario_name) in grid.scenarios.iter().zip(&names) {
        for &seed in &grid.seeds {
            let data_spec = ScenarioSpec {
                data_seed: seed,
                ..scenario_spec.clone()
            };
            let prepared = build_scenario(&data_spec, grid.base.backbone.image_side).and_then(|s| {
                let d = TrainData::from_scenario(&s)?;
                Ok((s, d))
            });
            let (scenario, data) = match prepared {
                Ok(p) => p,
                Err(e) => {
                    cells.extend(grid.variants.iter().map(|v| CellResult {
                        scenario: scenario_name.clone(),
                        variant: v.name.clone(),
                        seed,
                        forward: None,
                        backward: None,
                        error: Some(e.to_string()),
                    }));
                    continue;
                }
            };
            let mut cache: BTreeMap<String, ForwardRun> = BTreeMap::new();
            for (variant, vspec) in grid.variants.iter().zip(&specs) {
                let spec = ExperimentSpec {
                    scenario: data_spec.clone(),
                    ..vspec.clone()
                }
                .with_seed(seed);
                let dir = out.map(|o| cell_dir(o, scenario_name, &variant.name, seed));
                let result = run_cell(
                    &spec,
                    &scenario,
                    &data,
                    &mut cache,
                    dir.as_deref(),
                    |init, fwd| {
                        on_forward(&CellView {
                            scenario_name,
                            variant: &variant.name,
                            seed,
                            scenario: &scenario,
                            init,
                            forward: fwd,
                        })
                    },
                );
                let (forward, backward, error) = match result {
                    Ok((f, b)) => (Some(f), b, None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                cells.push(CellResult {
                    scenario: scenario_name.clone(),
                    variant: variant.name.clone(),
                    seed,
                    forward,
                    backward,
                    error,
                });
            }
        }
    }
    let table = AblationTable::from_cells(cells, &names, &grid.variants);
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| RunError::Io {
            path: o.to_path_buf(),
            source: e,
        })?;
        for (name, body) in [
            ("table.md", table.to_markdown()),
            ("table.csv", table.to_csv()),
            ("cells.csv", table.cells_csv()),
        ] {
            let p = o.join(name);
            fs::write(&p, body).map_err(|e| RunError::Io { path: p, source: e })?;
        }
    }
    Ok(table)
}

fn run_cell(
    spec: &ExperimentSpec,
    scenario: &Scenario,
    data: &TrainData,
    cache: &mut BTreeMap<String, ForwardRun>,
    dir: Option<&Path>,
    observe: impl FnOnce(&ModelState, &ModelState),
) -> RunResult<(StageAuc, Option<StageAuc>)> {
    let digest = config_digest(spec);
    let run_id = format!("{}-seed{}", spec.scenario.name(), spec.train.seed);
    let domains = evaluable_domains(scenario);
    let init = ModelState::init(spec.backbone.clone(), spec.train.seed)?;
    let key = forward_key(spec);
    if !cache.contains_key(&key) {
        let mut state = init.clone();
        let trace = trainer::forward_adaptation_stage(&mut state, data, &spec.train)?;
        let report = evaluate_domains(&state, &domains, &run_id, "forward", &digest)?;
        cache.insert(key.clone(), ForwardRun { state, trace, report });
    }
    let fwd = &cache[&key];
    observe(&init, &fwd.state);
    if let Some(d) = dir {
        emit_report(&fwd.report, &fwd.trace, &[], &d.join("forward"), true)?;
    }
    let forward = StageAuc::from_report(&fwd.report);
    if spec.train.t2 == 0 {
        return Ok((forward, None));
    }
    let mut state = fwd.state.clone();
    let trace = trainer::backward_adaptation_stage(&mut state, data, &spec.train)?;
    let report = evaluate_domains(&state, &domains, &run_id, "backward", &digest)?;
    if let Some(d) = dir {
        emit_report(&report, &trace, &[], &d.join("backward"), true)?;
    }
    Ok((forward, Some(StageAuc::from_report(&report))))
}

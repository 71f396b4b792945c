//! Experiment runner: config ingestion, policy grids, and drop reports.
//!
//! An experiment is described by a single TOML file (see the repository
//! README for the schema): a model source (inline hyperparameters or a
//! checkpoint path), three corpus splits, training and calibration budgets,
//! and a grid of sparsification policies. Running it trains or loads the
//! model once, calibrates once per distinct requirement, evaluates every
//! grid row on the eval split, and emits CSV/markdown reports whose bytes
//! are stable across identical runs.
//!
//! A failed grid row is recorded with its reason and does not abort the run.
//! The `NMSPARSE_OUTPUT_DIR` environment variable overrides the output
//! directory (and nothing else).

use crate::criteria::Criterion;
use crate::error::{Error, Result};
use crate::masks::{MaskPattern, PatternSpec};
use crate::sparse_format::{metadata_bits_per_element, pattern_count};
use crate::toylm::{
    train, CalibrationSettings, PolicyTarget, PreparedPolicy, SiteName, SparsityPolicy, ToyLM,
    ToyLMConfig,
};
use crate::transforms::Transform;
use num_bigint::BigUint;
use serde::Deserialize;
use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const OUTPUT_DIR_ENV: &str = "NMSPARSE_OUTPUT_DIR";

/// Default training budget for the bundled model.
pub const DEFAULT_TRAIN_STEPS: usize = 2000;
pub const DEFAULT_TRAIN_LR: f64 = 0.1;

/// Where the model comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    Config(ToyLMConfig),
    Checkpoint(PathBuf),
}

/// Paths of the three corpus splits. Calibration reads only `calib`,
/// evaluation reads only `eval`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub calib: PathBuf,
    pub eval: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingParams {
    pub steps: usize,
    pub lr: f64,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            steps: DEFAULT_TRAIN_STEPS,
            lr: DEFAULT_TRAIN_LR,
        }
    }
}

/// A full experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSource,
    pub corpus: CorpusPaths,
    pub training: TrainingParams,
    pub calibration: CalibrationSettings,
    pub grid: Vec<SparsityPolicy>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    output_dir: Option<String>,
    model: Option<RawModel>,
    corpus: RawCorpus,
    training: Option<RawTraining>,
    calibration: Option<RawCalibration>,
    grid: Vec<RawPolicy>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawModel {
    checkpoint: Option<String>,
    vocab: Option<usize>,
    dim: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    ffn_mult: Option<usize>,
    ctx: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCorpus {
    train: String,
    calib: String,
    eval: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    steps: Option<usize>,
    lr: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCalibration {
    batches: Option<usize>,
    steps: Option<usize>,
    lr: Option<f64>,
    rank: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPolicy {
    target: Option<String>,
    pattern: String,
    criterion: Option<String>,
    transform: Option<String>,
    include_sites: Option<Vec<String>>,
    exclude_sites: Option<Vec<String>>,
    rank: Option<usize>,
}

fn parse_sites(names: &[String]) -> Result<BTreeSet<SiteName>> {
    names.iter().map(|n| n.parse::<SiteName>()).collect()
}

/// Parse a grid entry. The target defaults to weights for the `wt`
/// criterion and activations otherwise.
fn parse_policy(raw: &RawPolicy) -> Result<SparsityPolicy> {
    let pattern: MaskPattern = raw.pattern.parse()?;
    let criterion: Criterion = raw.criterion.as_deref().unwrap_or("act").parse()?;
    let transform: Transform = raw.transform.as_deref().unwrap_or("none").parse()?;
    let target = match &raw.target {
        Some(t) => t.parse::<PolicyTarget>()?,
        None if criterion == Criterion::Wt => PolicyTarget::Weights,
        None => PolicyTarget::Activations,
    };
    let policy = SparsityPolicy {
        target,
        pattern,
        criterion,
        transform,
        include_sites: parse_sites(raw.include_sites.as_deref().unwrap_or_default())?,
        exclude_sites: parse_sites(raw.exclude_sites.as_deref().unwrap_or_default())?,
        rank: raw.rank,
    };
    policy.validate()?;
    Ok(policy)
}

impl ExperimentConfig {
    /// Parse a TOML document. Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
            reason: e.to_string(),
        })?;
        let resolve = |p: &str| -> PathBuf {
            let path = Path::new(p);
            if path.is_absolute() {
                path.to_path_buf()
            } else {
                base_dir.join(path)
            }
        };
        let seed = raw.seed.unwrap_or(42);
        let model = match raw.model.unwrap_or_default() {
            RawModel {
                checkpoint: Some(path),
                ..
            } => ModelSource::Checkpoint(resolve(&path)),
            m => {
                let defaults = ToyLMConfig::default();
                ModelSource::Config(ToyLMConfig {
                    vocab: m.vocab.unwrap_or(defaults.vocab),
                    dim: m.dim.unwrap_or(defaults.dim),
                    layers: m.layers.unwrap_or(defaults.layers),
                    heads: m.heads.unwrap_or(defaults.heads),
                    ffn_mult: m.ffn_mult.unwrap_or(defaults.ffn_mult),
                    ctx: m.ctx.unwrap_or(defaults.ctx),
                    seed,
                })
            }
        };
        let training = raw.training.map_or_else(TrainingParams::default, |t| {
            TrainingParams {
                steps: t.steps.unwrap_or(DEFAULT_TRAIN_STEPS),
                lr: t.lr.unwrap_or(DEFAULT_TRAIN_LR),
            }
        });
        let calibration = raw.calibration.map_or_else(CalibrationSettings::default, |c| {
            let d = CalibrationSettings::default();
            CalibrationSettings {
                batches: c.batches.unwrap_or(d.batches),
                steps: c.steps.unwrap_or(d.steps),
                lr: c.lr.unwrap_or(d.lr),
                rank: c.rank,
            }
        });
        let grid = raw.grid.iter().map(parse_policy).collect::<Result<Vec<_>>>()?;
        let output_dir = match std::env::var(OUTPUT_DIR_ENV) {
            Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => resolve(raw.output_dir.as_deref().unwrap_or("out")),
        };
        let config = ExperimentConfig {
            seed,
            output_dir,
            model,
            corpus: CorpusPaths {
                train: resolve(&raw.corpus.train),
                calib: resolve(&raw.corpus.calib),
                eval: resolve(&raw.corpus.eval),
            },
            training,
            calibration,
            grid,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::Config {
                reason: "grid must contain at least one policy".into(),
            });
        }
        let mut referenced = vec![&self.corpus.train, &self.corpus.calib, &self.corpus.eval];
        if let ModelSource::Checkpoint(path) = &self.model {
            referenced.push(path);
        }
        for path in referenced {
            if !path.exists() {
                return Err(Error::Config {
                    reason: format!("referenced file does not exist: {}", path.display()),
                });
            }
        }
        if let ModelSource::Config(c) = &self.model {
            c.validate()?;
        }
        Ok(())
    }

    fn read_corpus(&self, path: &Path) -> Result<Vec<u8>> {
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
    }

    /// Train from the train split or load the checkpoint.
    pub fn obtain_model(&self) -> Result<ToyLM> {
        match &self.model {
            ModelSource::Checkpoint(path) => ToyLM::load(path),
            ModelSource::Config(config) => {
                let corpus = self.read_corpus(&self.corpus.train)?;
                train(config, &corpus, self.training.steps, self.training.lr)
            }
        }
    }
}

/// Outcome of one grid row.
#[derive(Clone, Debug, PartialEq)]
pub enum RowOutcome {
    Evaluated { perplexity: f64, drop_pct: f64 },
    Failed { reason: String },
}

#[derive(Clone, Debug)]
pub struct ReportRow {
    pub index: usize,
    pub policy: SparsityPolicy,
    pub outcome: RowOutcome,
}

/// One line of the metadata-cost table.
#[derive(Clone, Debug)]
pub struct MetaRow {
    pub spec: PatternSpec,
    pub configurations: BigUint,
    pub bits_per_element: f64,
}

/// Emitted results: per-policy perplexity drops against the dense baseline,
/// plus the metadata-cost table for the standard block patterns.
#[derive(Clone, Debug)]
pub struct DropReport {
    pub header_notes: Vec<String>,
    pub baseline_perplexity: f64,
    pub rows: Vec<ReportRow>,
    pub meta_rows: Vec<MetaRow>,
}

fn meta_table_rows() -> Vec<MetaRow> {
    PatternSpec::standard_half_density()
        .into_iter()
        .map(|spec| MetaRow {
            spec,
            configurations: pattern_count(spec),
            bits_per_element: metadata_bits_per_element(spec),
        })
        .collect()
}

impl DropReport {
    pub fn any_failed(&self) -> bool {
        self.rows
            .iter()
            .any(|r| matches!(r.outcome, RowOutcome::Failed { .. }))
    }

    fn sites_label(policy: &SparsityPolicy) -> String {
        if policy.include_sites.is_empty() && policy.exclude_sites.is_empty() {
            "all".to_string()
        } else if policy.include_sites.is_empty() {
            let ex: Vec<&str> = policy.exclude_sites.iter().map(|s| s.as_str()).collect();
            format!("all-{}", ex.join("-"))
        } else {
            let inc: Vec<&str> = policy.include_sites.iter().map(|s| s.as_str()).collect();
            inc.join("+")
        }
    }

    /// Policy rows as CSV with fixed 4-decimal formatting. Byte-stable for
    /// identical runs.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for note in &self.header_notes {
            let _ = writeln!(out, "# {note}");
        }
        let _ = writeln!(
            out,
            "index,target,pattern,criterion,transform,sites,status,perplexity,baseline,drop_pct"
        );
        for row in &self.rows {
            let p = &row.policy;
            match &row.outcome {
                RowOutcome::Evaluated {
                    perplexity,
                    drop_pct,
                } => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},ok,{:.4},{:.4},{:.4}",
                        row.index,
                        p.target,
                        p.pattern,
                        p.criterion,
                        p.transform,
                        Self::sites_label(p),
                        perplexity,
                        self.baseline_perplexity,
                        drop_pct
                    );
                }
                RowOutcome::Failed { reason } => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{},failed: {},,,",
                        row.index,
                        p.target,
                        p.pattern,
                        p.criterion,
                        p.transform,
                        Self::sites_label(p),
                        reason.replace(',', ";")
                    );
                }
            }
        }
        out
    }

    /// Metadata-cost table as CSV.
    pub fn meta_csv(&self) -> String {
        let mut out = String::from("pattern,configurations,bits_per_element\n");
        for row in &self.meta_rows {
            let _ = writeln!(
                out,
                "{},{},{:.4}",
                row.spec, row.configurations, row.bits_per_element
            );
        }
        out
    }

    /// Both tables as one markdown document, methods as rows with a drop
    /// column.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# Sparsification drop report\n");
        for note in &self.header_notes {
            let _ = writeln!(out, "> {note}");
        }
        let _ = writeln!(
            out,
            "\nBaseline perplexity: **{:.4}**\n",
            self.baseline_perplexity
        );
        let _ = writeln!(out, "| # | target | pattern | criterion | transform | sites | perplexity | drop (%) |");
        let _ = writeln!(out, "|---|--------|---------|-----------|-----------|-------|------------|----------|");
        for row in &self.rows {
            let p = &row.policy;
            match &row.outcome {
                RowOutcome::Evaluated {
                    perplexity,
                    drop_pct,
                } => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} | {} | {:.4} | {:.4} |",
                        row.index,
                        p.target,
                        p.pattern,
                        p.criterion,
                        p.transform,
                        Self::sites_label(p),
                        perplexity,
                        drop_pct
                    );
                }
                RowOutcome::Failed { reason } => {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {} | {} | {} | failed: {} | |",
                        row.index,
                        p.target,
                        p.pattern,
                        p.criterion,
                        p.transform,
                        Self::sites_label(p),
                        reason
                    );
                }
            }
        }
        let _ = writeln!(out, "\n## Metadata cost per block pattern\n");
        let _ = writeln!(out, "| pattern | configurations | bits/element |");
        let _ = writeln!(out, "|---------|----------------|--------------|");
        for row in &self.meta_rows {
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} |",
                row.spec, row.configurations, row.bits_per_element
            );
        }
        out
    }
}

/// Calibration cache key: policies that share it can share artifacts.
fn calibration_key(policy: &SparsityPolicy) -> Option<String> {
    let sites = format!("{:?}|{:?}", policy.include_sites, policy.exclude_sites);
    match policy.transform {
        Transform::Spts => Some(format!("spts|{sites}")),
        Transform::Rsparse => Some(format!("rsparse|{:?}|{sites}", policy.rank)),
        t if t.needs_calibration() => Some(format!(
            "{t}|{}|{}|{sites}",
            policy.pattern, policy.criterion
        )),
        _ => None,
    }
}

/// Evaluate one policy against the eval split.
fn evaluate_policy(
    model: &ToyLM,
    policy: &SparsityPolicy,
    calib_text: &[u8],
    calibration: &CalibrationSettings,
    eval_text: &[u8],
    cache: &mut HashMap<String, PreparedPolicy>,
) -> Result<f64> {
    match policy.target {
        PolicyTarget::Weights => {
            let masked = model.apply_weight_policy(policy)?;
            masked.perplexity(eval_text, None)
        }
        PolicyTarget::Activations => {
            let prepared = match calibration_key(policy) {
                Some(key) => {
                    if let Some(hit) = cache.get(&key) {
                        PreparedPolicy::with_artifacts(policy.clone(), hit.artifacts().clone())?
                    } else {
                        let prepared =
                            model.prepare_policy(policy, Some((calib_text, calibration)))?;
                        cache.insert(key, prepared.clone());
                        prepared
                    }
                }
                None => model.prepare_policy(policy, None)?,
            };
            model.perplexity(eval_text, Some(&prepared))
        }
    }
}

/// Run the whole experiment: obtain the model once, evaluate every grid row
/// in order (failures are recorded, not fatal), and write both report
/// formats into the output directory.
pub fn run(config: &ExperimentConfig) -> Result<DropReport> {
    config.validate()?;
    let model = config.obtain_model()?;
    let calib_text = config.read_corpus(&config.corpus.calib)?;
    let eval_text = config.read_corpus(&config.corpus.eval)?;
    let baseline = model.perplexity(&eval_text, None)?;

    let mut cache: HashMap<String, PreparedPolicy> = HashMap::new();
    let mut rows = Vec::with_capacity(config.grid.len());
    for (index, policy) in config.grid.iter().enumerate() {
        let outcome = match evaluate_policy(
            &model,
            policy,
            &calib_text,
            &config.calibration,
            &eval_text,
            &mut cache,
        ) {
            Ok(perplexity) => RowOutcome::Evaluated {
                perplexity,
                drop_pct: (perplexity - baseline) / baseline * 100.0,
            },
            Err(e) => RowOutcome::Failed {
                reason: e.to_string(),
            },
        };
        rows.push(ReportRow {
            index,
            policy: policy.clone(),
            outcome,
        });
    }

    let report = DropReport {
        header_notes: vec![
            "drop(%) = (perplexity - baseline) / baseline * 100; perplexity on the eval split \
             is the only desk-scale metric, so magnitudes are not comparable to QA-based drops"
                .to_string(),
            "learned shifts and scales are fitted to layer-local dense outputs on the \
             calibration split; model weights are never updated"
                .to_string(),
        ],
        baseline_perplexity: baseline,
        rows,
        meta_rows: meta_table_rows(),
    };
    emit_report(&report, ReportFormat::Csv, &config.output_dir)?;
    emit_report(&report, ReportFormat::Markdown, &config.output_dir)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Config {
                reason: format!("unknown format '{other}' (expected csv|markdown)"),
            }),
        }
    }
}

/// Write the report files for one format, returning the written paths.
/// CSV yields `report.csv` + `meta_table.csv`; markdown yields `report.md`.
pub fn emit_report(
    report: &DropReport,
    format: ReportFormat,
    output_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(output_dir)
        .map_err(|e| Error::io(format!("creating {}", output_dir.display()), e))?;
    let write = |name: &str, contents: &str| -> Result<PathBuf> {
        let path = output_dir.join(name);
        std::fs::write(&path, contents)
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    };
    match format {
        ReportFormat::Csv => Ok(vec![
            write("report.csv", &report.to_csv())?,
            write("meta_table.csv", &report.meta_csv())?,
        ]),
        ReportFormat::Markdown => Ok(vec![write("report.md", &report.to_markdown())?]),
    }
}

/// Parse the policy rows back out of [`DropReport::to_csv`] output.
/// Returns (index, status, perplexity, drop_pct) per row.
pub fn reparse_csv(text: &str) -> Vec<(usize, String, Option<f64>, Option<f64>)> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("index,") || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 10 {
            continue;
        }
        let index: usize = fields[0].parse().unwrap_or(usize::MAX);
        let status = fields[6].to_string();
        let ppl = fields[7].parse().ok();
        let drop = fields[9].parse().ok();
        out.push((index, status, ppl, drop));
    }
    out
}

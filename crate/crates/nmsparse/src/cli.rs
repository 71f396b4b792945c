//! Command-line interface behind the `nmsparse` binary.
//!
//! Exit codes: 0 on success, 1 on configuration or usage errors, 2 when a
//! grid run completes but some rows failed.

use crate::criteria::{score_act, score_clact, score_wt, Criterion};
use crate::error::{Error, Result};
use crate::harness::{self, emit_report, ExperimentConfig, ReportFormat};
use crate::masks::MaskPattern;
use crate::sparse_format::{self, CompressedNM};
use crate::tensor::Matrix;
use crate::toylm::{PolicyTarget, SiteName, SparsityPolicy, ToyLM};
use crate::transforms::Transform;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "nmsparse",
    about = "Post-training N:M and unstructured sparsification of activations and weights",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model described by a config and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate one policy's perplexity against the dense baseline.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// N:M (e.g. 2:4) or unstructured:S (e.g. unstructured:0.5).
        #[arg(long)]
        pattern: String,
        /// act | wt | clact | amber (wt prunes weights statically).
        #[arg(long, default_value = "act")]
        criterion: String,
        /// none | dpts | spts | lpts | var | var+lpts | pcs | rsparse | ls+lpts | ls+lpts+var
        #[arg(long, default_value = "none")]
        transform: String,
        /// Comma-separated site names; empty means every site.
        #[arg(long, value_delimiter = ',')]
        include_sites: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        exclude_sites: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the config's whole policy grid and emit the drop report.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// csv | markdown (controls what is printed; both files are written).
        #[arg(long, default_value = "csv")]
        format: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the metadata-cost table for the standard block patterns.
    MetaTable {
        #[arg(long, default_value = "markdown")]
        format: String,
    },
    /// Mask a dense text matrix with an N:M pattern and write the
    /// compressed binary form.
    Encode {
        #[arg(long)]
        pattern: String,
        /// act | wt | clact (amber needs a weight matrix and is rejected).
        #[arg(long, default_value = "act")]
        criterion: String,
        input: PathBuf,
        output: PathBuf,
    },
    /// Expand a compressed binary file back to a dense text matrix.
    Decode { input: PathBuf, output: PathBuf },
    /// Fit calibration artifacts for a policy and write them as JSON.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        transform: String,
        #[arg(long)]
        pattern: String,
        #[arg(long, default_value = "act")]
        criterion: String,
        #[arg(long, value_delimiter = ',')]
        include_sites: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        exclude_sites: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Parse argv and execute, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
        if let harness::ModelSource::Config(c) = &mut config.model {
            c.seed = seed;
        }
    }
    Ok(config)
}

fn parse_sites(names: &[String]) -> Result<BTreeSet<SiteName>> {
    names
        .iter()
        .filter(|n| !n.trim().is_empty())
        .map(|n| n.parse())
        .collect()
}

fn build_policy(
    pattern: &str,
    criterion: &str,
    transform: &str,
    include: &[String],
    exclude: &[String],
) -> Result<SparsityPolicy> {
    let criterion: Criterion = criterion.parse()?;
    let target = if criterion == Criterion::Wt {
        PolicyTarget::Weights
    } else {
        PolicyTarget::Activations
    };
    let policy = SparsityPolicy {
        target,
        pattern: pattern.parse()?,
        criterion,
        transform: transform.parse()?,
        include_sites: parse_sites(include)?,
        exclude_sites: parse_sites(exclude)?,
        rank: None,
    };
    policy.validate()?;
    Ok(policy)
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, seed } => {
            let config = load_config(&config, seed)?;
            let model = config.obtain_model()?;
            std::fs::create_dir_all(&config.output_dir)
                .map_err(|e| Error::io(format!("creating {}", config.output_dir.display()), e))?;
            let path = config.output_dir.join("model.ckpt");
            model.save(&path)?;
            println!(
                "trained {} steps (final loss {:.4} nats/byte), checkpoint at {}",
                config.training.steps,
                model.final_loss(),
                path.display()
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            config,
            pattern,
            criterion,
            transform,
            include_sites,
            exclude_sites,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let policy = build_policy(
                &pattern,
                &criterion,
                &transform,
                &include_sites,
                &exclude_sites,
            )?;
            let model = config.obtain_model()?;
            let eval_text = std::fs::read(&config.corpus.eval)
                .map_err(|e| Error::io(format!("reading {}", config.corpus.eval.display()), e))?;
            let baseline = model.perplexity(&eval_text, None)?;
            let perplexity = match policy.target {
                PolicyTarget::Weights => model
                    .apply_weight_policy(&policy)?
                    .perplexity(&eval_text, None)?,
                PolicyTarget::Activations => {
                    let calib_text = std::fs::read(&config.corpus.calib).map_err(|e| {
                        Error::io(format!("reading {}", config.corpus.calib.display()), e)
                    })?;
                    let prepared = model
                        .prepare_policy(&policy, Some((&calib_text, &config.calibration)))?;
                    model.perplexity(&eval_text, Some(&prepared))?
                }
            };
            println!("policy: {}", policy.describe());
            println!("baseline perplexity: {baseline:.4}");
            println!("policy perplexity:   {perplexity:.4}");
            println!(
                "drop: {:+.4}%",
                (perplexity - baseline) / baseline * 100.0
            );
            Ok(EXIT_OK)
        }
        Command::Grid {
            config,
            format,
            seed,
        } => {
            let format: ReportFormat = format.parse()?;
            let config = load_config(&config, seed)?;
            let report = harness::run(&config)?;
            match format {
                ReportFormat::Csv => print!("{}", report.to_csv()),
                ReportFormat::Markdown => print!("{}", report.to_markdown()),
            }
            let written = emit_report(&report, format, &config.output_dir)?;
            for path in written {
                eprintln!("wrote {}", path.display());
            }
            Ok(if report.any_failed() {
                EXIT_PARTIAL
            } else {
                EXIT_OK
            })
        }
        Command::MetaTable { format } => {
            let format: ReportFormat = format.parse()?;
            print!("{}", meta_table_text(format));
            Ok(EXIT_OK)
        }
        Command::Encode {
            pattern,
            criterion,
            input,
            output,
        } => {
            let pattern: MaskPattern = pattern.parse()?;
            let criterion: Criterion = criterion.parse()?;
            let x = read_matrix_text(&input)?;
            let scores = match criterion {
                Criterion::Act => score_act(&x),
                Criterion::Wt => score_wt(&x),
                Criterion::Clact => score_clact(&x),
                Criterion::Amber => {
                    return Err(Error::Selection {
                        reason: "amber scoring needs a weight matrix; use act, wt, or clact"
                            .into(),
                    })
                }
            };
            let mask = pattern.build(&scores)?;
            let compressed = sparse_format::encode(&x, &mask)?;
            compressed.write_to(&output)?;
            println!(
                "encoded {}x{} under {} into {} ({} metadata bits, {} values)",
                x.rows(),
                x.cols(),
                pattern,
                output.display(),
                compressed.meta_bits(),
                compressed.values().len()
            );
            Ok(EXIT_OK)
        }
        Command::Decode { input, output } => {
            let compressed = CompressedNM::read_from(&input)?;
            let dense = sparse_format::decode(&compressed)?;
            write_matrix_text(&output, &dense)?;
            println!(
                "decoded {} ({} pattern) into {}x{} matrix at {}",
                input.display(),
                compressed.spec(),
                dense.rows(),
                dense.cols(),
                output.display()
            );
            Ok(EXIT_OK)
        }
        Command::Fit {
            config,
            transform,
            pattern,
            criterion,
            include_sites,
            exclude_sites,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let policy = build_policy(
                &pattern,
                &criterion,
                &transform,
                &include_sites,
                &exclude_sites,
            )?;
            let needs_any = policy.transform.needs_calibration()
                || policy.transform == Transform::Rsparse;
            if !needs_any {
                return Err(Error::Policy {
                    reason: format!(
                        "transform '{}' has no calibration artifacts to fit",
                        policy.transform
                    ),
                });
            }
            let model = config.obtain_model()?;
            let calib_text = std::fs::read(&config.corpus.calib)
                .map_err(|e| Error::io(format!("reading {}", config.corpus.calib.display()), e))?;
            let prepared =
                model.prepare_policy(&policy, Some((&calib_text, &config.calibration)))?;
            std::fs::create_dir_all(&config.output_dir)
                .map_err(|e| Error::io(format!("creating {}", config.output_dir.display()), e))?;
            let path = config.output_dir.join("artifacts.json");
            let json = artifacts_json(&model, &prepared);
            std::fs::write(&path, serde_json::to_string_pretty(&json).unwrap())
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            println!("wrote calibration artifacts to {}", path.display());
            Ok(EXIT_OK)
        }
    }
}

fn meta_table_text(format: ReportFormat) -> String {
    use crate::masks::PatternSpec;
    use crate::sparse_format::{
        metadata_bits_per_element, pattern_count, stacked_config_count,
    };
    let specs = PatternSpec::standard_half_density();
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str("pattern,configurations,bits_per_element\n");
            for spec in specs {
                out.push_str(&format!(
                    "{spec},{},{:.4}\n",
                    pattern_count(spec),
                    metadata_bits_per_element(spec)
                ));
            }
        }
        ReportFormat::Markdown => {
            out.push_str("| pattern | configurations | bits/element |\n");
            out.push_str("|---------|----------------|--------------|\n");
            for spec in specs {
                out.push_str(&format!(
                    "| {spec} | {} | {:.4} |\n",
                    pattern_count(spec),
                    metadata_bits_per_element(spec)
                ));
            }
            let two_four = PatternSpec::new(2, 4).unwrap();
            let eight_sixteen = PatternSpec::new(8, 16).unwrap();
            let stacked = stacked_config_count(two_four, 4);
            out.push_str(&format!(
                "\nFour stacked 2:4 blocks span {} configurations; a native 8:16 block spans {}.\n",
                stacked,
                pattern_count(eight_sixteen)
            ));
        }
    }
    out
}

/// JSON dump of the fitted artifacts, keyed by `layer.site`.
fn artifacts_json(model: &ToyLM, prepared: &crate::toylm::PreparedPolicy) -> serde_json::Value {
    use serde_json::json;
    let _ = model;
    let artifacts = prepared.artifacts();
    let mut sites = serde_json::Map::new();
    for (site, eta) in &artifacts.spts {
        sites.insert(
            site.to_string(),
            json!({ "kind": "static_shift", "eta": eta.values() }),
        );
    }
    for (site, params) in &artifacts.lpts {
        sites.insert(
            site.to_string(),
            json!({
                "kind": "learned_shift",
                "eta": params.eta().values(),
                "diag_scale": params.diag_scale(),
                "with_var": params.with_var(),
                "initial_loss": params.initial_loss(),
                "final_loss": params.final_loss(),
                "diverged": params.diverged(),
            }),
        );
    }
    for (site, factors) in &artifacts.rsparse {
        sites.insert(
            site.to_string(),
            json!({
                "kind": "low_rank",
                "rank": factors.rank(),
                "a_shape": [factors.a().rows(), factors.a().cols()],
                "b_shape": [factors.b().rows(), factors.b().cols()],
                "a": factors.a().data(),
                "b": factors.b().data(),
            }),
        );
    }
    json!({
        "policy": prepared.policy().describe(),
        "sites": sites,
    })
}

/// One matrix row per line, whitespace-separated decimal floats.
fn read_matrix_text(path: &Path) -> Result<Matrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| Error::Format {
                    reason: format!("{}:{}: '{tok}' is not a number", path.display(), ln + 1),
                })
            })
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || cols == 0 {
        return Err(Error::Format {
            reason: format!("{}: empty matrix", path.display()),
        });
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
        return Err(Error::Format {
            reason: format!(
                "{}: row {} has {} columns, expected {cols}",
                path.display(),
                bad + 1,
                rows[bad].len()
            ),
        });
    }
    Matrix::new(rows.len(), cols, rows.into_iter().flatten().collect())
}

fn write_matrix_text(path: &Path, m: &Matrix) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_text_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let m = Matrix::new(2, 3, vec![1.5, -2.25, 0.1, 1e-17, 3.0, -0.0]).unwrap();
        write_matrix_text(&path, &m).unwrap();
        let back = read_matrix_text(&path).unwrap();
        assert_eq!(back.shape(), (2, 3));
        for (a, b) in back.data().iter().zip(m.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn matrix_text_rejects_ragged_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        std::fs::write(&path, "1 2 3\n4 5\n").unwrap();
        assert!(read_matrix_text(&path).is_err());
        std::fs::write(&path, "1 x 3\n").unwrap();
        assert!(read_matrix_text(&path).is_err());
        std::fs::write(&path, "").unwrap();
        assert!(read_matrix_text(&path).is_err());
    }

    #[test]
    fn meta_table_reports_paper_numbers() {
        let csv = meta_table_text(ReportFormat::Csv);
        assert!(csv.contains("2:4,6,0.7500"));
        assert!(csv.contains("8:16,12870,0.8750"));
        assert!(csv.contains("16:32,601080390,0.9375"));
        let md = meta_table_text(ReportFormat::Markdown);
        assert!(md.contains("1296 configurations"));
    }

    #[test]
    fn usage_errors_exit_with_config_code() {
        assert_eq!(run(["nmsparse", "bogus-subcommand"]), EXIT_CONFIG);
        assert_eq!(run(["nmsparse", "eval"]), EXIT_CONFIG); // missing required args
        assert_eq!(run(["nmsparse", "--help"]), EXIT_OK);
    }

    #[test]
    fn encode_decode_roundtrip_via_files() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        let packed = dir.path().join("out.nmsp");
        let round = dir.path().join("round.txt");
        std::fs::write(&input, "1 -2 3 4\n-5 6 -7 0.5\n").unwrap();
        assert_eq!(
            run([
                "nmsparse",
                "encode",
                "--pattern",
                "2:4",
                input.to_str().unwrap(),
                packed.to_str().unwrap()
            ]),
            EXIT_OK
        );
        assert_eq!(
            run([
                "nmsparse",
                "decode",
                packed.to_str().unwrap(),
                round.to_str().unwrap()
            ]),
            EXIT_OK
        );
        let dense = read_matrix_text(&round).unwrap();
        // top-2 magnitudes per block survive
        assert_eq!(dense.row(0), &[0.0, 0.0, 3.0, 4.0]);
        assert_eq!(dense.row(1), &[0.0, 6.0, -7.0, 0.0]);
    }
}

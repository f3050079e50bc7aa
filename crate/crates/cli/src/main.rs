use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mfae::compare::{compare_files, judge, CompareReport, Tolerances};
use mfae::config::load_config_with;
use mfae::csvout::NumericCsv;
use mfae::idx::{parse_idx, IdxTensor};
use mfae::preprocess::fit_preprocessor;
use mfae::runner::{run, BASIS_FILE, SPECTRUM_FILE};

#[derive(Parser)]
#[command(name = "mfae", version, about = "Mean-field autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config; trailing `--key value` pairs override config keys.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Judge the run's comparison against this tolerance file.
        #[arg(long)]
        tol: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Compare empirical and predicted metric CSVs.
    Compare {
        emp: PathBuf,
        pred: PathBuf,
        #[arg(long)]
        tol: PathBuf,
        /// Verdict CSV path (default: verdict.csv next to the empirical file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the preprocessing to an IDX image file and export spectrum and basis.
    IngestIdx {
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_images: Option<usize>,
    },
    /// Write the covariance spectrum of an IDX image file or a numeric CSV (rows are samples).
    Spectrum {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(flag) = it.next() {
        let Some(key) = flag.strip_prefix("--") else {
            bail!("expected --key value override, got `{flag}`");
        };
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().with_context(|| format!("override --{key} needs a value"))?;
                (key.to_string(), v.clone())
            }
        };
        out.push((key.replace('-', "_"), value));
    }
    Ok(out)
}

fn report(r: &CompareReport) -> bool {
    for v in &r.verdicts {
        let verdict = match v.pass {
            Some(true) => "pass",
            Some(false) => "FAIL",
            None => "skip",
        };
        println!(
            "{verdict:4} {:<20} points={:<4} sup_gap={:.3e} at t={}",
            v.metric, v.points, v.sup_abs_gap, v.worst_t
        );
    }
    let ok = r.passed();
    println!("overall: {}", if ok { "pass" } else { "FAIL" });
    ok
}

fn read_images(path: &Path, max_images: Option<usize>) -> Result<ndarray::Array2<f64>> {
    let t = IdxTensor::read(path)?;
    if t.dims().len() < 2 {
        bail!("{}: expected an image tensor with at least 2 dims", path.display());
    }
    let imgs = t.images();
    Ok(match max_images {
        Some(m) if m < imgs.nrows() => imgs.slice(ndarray::s![..m, ..]).to_owned(),
        _ => imgs,
    })
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            tol,
            overrides,
        } => {
            let cfg = load_config_with(&config, &parse_overrides(&overrides)?)?;
            let summary = run(&cfg, &out)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {} files to {}", summary.files.len(), out.display());
            match tol {
                Some(tol) => {
                    let r = judge(&summary.joined, &Tolerances::read(&tol)?);
                    r.table().write(&out.join("verdict.csv"))?;
                    Ok(report(&r))
                }
                None => Ok(true),
            }
        }
        Command::Compare { emp, pred, tol, out } => {
            let out = out.unwrap_or_else(|| emp.with_file_name("verdict.csv"));
            let r = compare_files(&emp, &pred, &tol, Some(&out))?;
            Ok(report(&r))
        }
        Command::IngestIdx {
            images,
            out,
            max_images,
        } => {
            let imgs = read_images(&images, max_images)?;
            let p = fit_preprocessor(imgs.view(), imgs.ncols())?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            p.write_spectrum(&out.join(SPECTRUM_FILE))?;
            p.write_basis(&out.join(BASIS_FILE))?;
            println!(
                "{} images of dimension {}; top eigenvalue {:.4e}; wrote {} and {}",
                imgs.nrows(),
                p.dim(),
                p.eigvals()[0],
                SPECTRUM_FILE,
                BASIS_FILE
            );
            Ok(true)
        }
        Command::Spectrum { data, out } => {
            let bytes = std::fs::read(&data).with_context(|| format!("reading {}", data.display()))?;
            let samples = if bytes.len() >= 3 && bytes[0] == 0 && bytes[1] == 0 {
                parse_idx(&bytes).with_context(|| data.display().to_string())?.images()
            } else {
                let text =
                    String::from_utf8(bytes).with_context(|| format!("{} is not IDX or text", data.display()))?;
                let csv = NumericCsv::parse(&text).with_context(|| data.display().to_string())?;
                let (n, d) = (csv.rows.len(), csv.header.len());
                ndarray::Array2::from_shape_vec((n, d), csv.rows.into_iter().flatten().collect())?
            };
            let p = fit_preprocessor(samples.view(), samples.ncols())?;
            p.write_spectrum(&out)?;
            println!("wrote {} eigenvalues to {}", p.dim(), out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

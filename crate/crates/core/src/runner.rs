//! Config-driven experiments: train, predict, join, and write CSVs plus a
//! manifest into one output directory.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};

use crate::activations::Activation;
use crate::compare::{join, Joined, JoinedPoint};
use crate::config::{DataSpec, ExperimentConfig, ExperimentKind, RotationSpec, Subsample, ARTIFACT_VERSION};
use crate::coupling::{coupled_run, scaling_study, CouplingConfig, ScalingBase, ScalingTable};
use crate::csvout::{Cell, NumericCsv, Table};
use crate::error::{Error, Result};
use crate::idx::IdxTensor;
use crate::linalg::random_orthogonal;
use crate::mf_bounded::{
    bounded_risk, integrate_particles, integrate_two_scalar, out_of_sample_risk, particle_risk, ParticleOptions,
    QKernel,
};
use crate::mf_relu::ReluMfCurve;
use crate::preprocess::{apply_batch, fit_preprocessor};
use crate::rng::{tag, Stream};
use crate::sgd::{
    checkpoint_metrics, estimate_rec_err_with, init_weights, train_with, BatchSource, Checkpoint, EpochShuffle,
    FreshGaussian, MetricSpec, RiskEstimate, RiskSource, TrainConfig, WeightMatrix,
};
use crate::spectral::{model_from_blocks, read_spectrum_file, Blocks, SpectralModel};
use crate::two_stage::resample_study;

pub const EMP_FILE: &str = "emp_metrics.csv";
pub const PRED_FILE: &str = "pred_metrics.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const MANIFEST_FILE: &str = "manifest.cfg";
pub const SCALING_FILE: &str = "scaling_summary.csv";
pub const COUPLING_FILE: &str = "coupling.csv";
pub const TWO_STAGE_FILE: &str = "two_stage.csv";
pub const SPECTRUM_FILE: &str = "spectrum.txt";
pub const BASIS_FILE: &str = "basis.bin";

/// One row of the two-stage summary.
#[derive(Clone, Debug, PartialEq)]
pub struct TwoStageRow {
    pub m: usize,
    pub mu: f64,
    pub t: f64,
    pub emp_mean: f64,
    pub emp_se: f64,
    pub pred: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub joined: Joined,
    pub scaling: Option<ScalingTable>,
    pub two_stage: Vec<TwoStageRow>,
    /// Non-fatal conditions worth reporting to the user.
    pub warnings: Vec<String>,
}

/// Runs the experiment described by `cfg`, writing everything into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut w = Writer {
        dir: out.to_path_buf(),
        files: Vec::new(),
    };
    let ctx = |e: Error| e.context(format!("{} experiment", cfg.kind));
    let mut summary = match cfg.kind {
        ExperimentKind::ReluDynamics | ExperimentKind::BoundedDynamics => synthetic_dynamics(cfg, &mut w),
        ExperimentKind::TwoStage => two_stage(cfg, &mut w),
        ExperimentKind::Coupling => coupling(cfg, &mut w),
        ExperimentKind::RealData => real_data(cfg, &mut w),
    }
    .map_err(ctx)?;
    summary.joined.table().write(&w.path(COMPARE_FILE))?;
    w.files.push(COMPARE_FILE.into());
    w.write_text(MANIFEST_FILE, &manifest(cfg, &w.files))?;
    summary.files = w.files;
    summary.out_dir = out.to_path_buf();
    Ok(summary)
}

struct Writer {
    dir: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        t.write(&self.path(name))?;
        self.files.push(name.into());
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        self.files.push(name.into());
        Ok(())
    }
}

fn manifest(cfg: &ExperimentConfig, files: &[String]) -> String {
    let mut s = format!("# mfae {ARTIFACT_VERSION} run manifest; load with `mfae run` to reproduce\n");
    s.push_str(&cfg.render());
    s.push_str(&format!("# outputs: {}\n", files.join(", ")));
    s
}

fn summary(joined: Joined) -> RunSummary {
    RunSummary {
        out_dir: PathBuf::new(),
        files: Vec::new(),
        joined,
        scaling: None,
        two_stage: Vec::new(),
        warnings: Vec::new(),
    }
}

/// Model and block partition for synthetic data, with the optional random
/// rotation drawn from the first seed.
pub fn synthetic_model(cfg: &ExperimentConfig) -> Result<(SpectralModel, Blocks)> {
    let (model, blocks) = match &cfg.data {
        DataSpec::Blocks(b) => model_from_blocks(b)?,
        DataSpec::SpectrumFile(p) => {
            let eig = read_spectrum_file(p)?;
            let d = eig.len();
            let model = SpectralModel::new(eig, None)?;
            (model, partition(cfg, d)?)
        }
        DataSpec::Idx { .. } => return Err(Error::Config("idx data is not synthetic".into())),
    };
    if let Some(d) = cfg.d {
        if d != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: model.dim(),
            });
        }
    }
    let model = match cfg.rotation {
        RotationSpec::Identity => model,
        RotationSpec::Random => {
            let mut s = Stream::new(cfg.seeds[0]).substream(tag::INIT, 1);
            let q = random_orthogonal(model.dim(), &mut s);
            model.with_rotation(q)?
        }
    };
    Ok((model, blocks))
}

fn partition(cfg: &ExperimentConfig, d: usize) -> Result<Blocks> {
    match &cfg.block_sizes {
        Some(sizes) => {
            let b = Blocks::from_sizes(sizes)?;
            if b.dim() != d {
                return Err(Error::BadPartition {
                    dim: d,
                    reason: format!("block_sizes sum to {}", b.dim()),
                });
            }
            Ok(b)
        }
        None => Ok(Blocks::whole(d)),
    }
}

fn train_config(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        lambda: cfg.lambda,
        epsilon: cfg.epsilon,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        r0: cfg.r0,
        seed,
        checkpoints: TrainConfig::even_checkpoints(cfg.steps, cfg.checkpoints),
    }
}

/// Checkpoint stream of one seed, with the optional out-of-sample risk.
struct SeedRun {
    checkpoints: Vec<Checkpoint>,
    oos: Vec<RiskEstimate>,
    terminal: WeightMatrix,
}

fn train_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    d: usize,
    source: &mut dyn BatchSource,
    metrics: &MetricSpec<'_>,
    oos_model: Option<&SpectralModel>,
) -> Result<SeedRun> {
    let tc = train_config(cfg, seed);
    let w0 = init_weights(cfg.n, d, cfg.r0, seed)?;
    let mut checkpoints = Vec::with_capacity(tc.checkpoints.len());
    let mut oos = Vec::new();
    let terminal = train_with(w0, &tc, source, cfg.activation, |k, w| {
        checkpoints.push(checkpoint_metrics(w, k, &tc, cfg.activation, metrics)?);
        if let Some(q) = oos_model {
            let mut s = Stream::new(seed).substream(tag::EVAL, k as u64);
            oos.push(estimate_rec_err_with(w, q, cfg.activation, cfg.mc_samples, &mut s)?);
        }
        Ok(())
    })
    .map_err(|e| e.context(format!("seed {seed}")))?;
    Ok(SeedRun {
        checkpoints,
        oos,
        terminal,
    })
}

/// Averages seeds: means of means, standard errors combined in quadrature.
fn mean_estimate(items: impl Iterator<Item = RiskEstimate>) -> (f64, f64) {
    let (mut m, mut v, mut n) = (0.0, 0.0, 0.0);
    for e in items {
        m += e.mean;
        v += e.std_error * e.std_error;
        n += 1.0;
    }
    (m / n, v.sqrt() / n)
}

fn empirical_table(runs: &[SeedRun], nblocks: usize) -> Table {
    let mut header = vec!["t".to_string(), "step".into(), "rec_err".into(), "rec_err_se".into()];
    header.extend((1..=nblocks).map(|b| format!("block_norm_{b}")));
    let with_oos = !runs[0].oos.is_empty();
    if with_oos {
        header.extend(["oos_rec_err".to_string(), "oos_rec_err_se".into()]);
    }
    let mut t = Table::new(header);
    let ns = runs.len() as f64;
    for (i, cp) in runs[0].checkpoints.iter().enumerate() {
        let (m, se) = mean_estimate(runs.iter().map(|r| r.checkpoints[i].rec_err));
        let mut row: Vec<Cell> = vec![cp.time.into(), cp.step.into(), m.into(), se.into()];
        for b in 0..nblocks {
            row.push((runs.iter().map(|r| r.checkpoints[i].block_norms[b]).sum::<f64>() / ns).into());
        }
        if with_oos {
            let (m, se) = mean_estimate(runs.iter().map(|r| r.oos[i]));
            row.extend([m.into(), se.into()]);
        }
        t.push(row);
    }
    t
}

fn write_curves(w: &mut Writer, emp: &Table, pred: &Table) -> Result<Joined> {
    w.table(EMP_FILE, emp)?;
    w.table(PRED_FILE, pred)?;
    // Join what was written so the comparison sees exactly the file contents.
    join(&NumericCsv::parse(&emp.render())?, &NumericCsv::parse(&pred.render())?)
}

fn relu_prediction(model: &SpectralModel, blocks: &Blocks, cfg: &ExperimentConfig, times: &[f64]) -> Result<Table> {
    let curve = ReluMfCurve::new(model, cfg.lambda, cfg.r0)?;
    let mut header = vec!["t".to_string(), "rec_err".into()];
    header.extend((1..=blocks.len()).map(|b| format!("block_norm_{b}")));
    let mut t = Table::new(header);
    for &time in times {
        let mut row: Vec<Cell> = vec![time.into(), curve.risk(time).into()];
        row.extend(curve.block_norms(time, blocks)?.into_iter().map(Cell::from));
        t.push(row);
    }
    Ok(t)
}

fn bounded_prediction(cfg: &ExperimentConfig, times: &[f64]) -> Result<Table> {
    let DataSpec::Blocks(b) = &cfg.data else {
        return Err(Error::Config("bounded_dynamics needs inline blocks".into()));
    };
    let (d1, s1) = b[0];
    let (d2, s2) = b[1];
    let kernel = QKernel::two_block(cfg.activation, d1 as f64 / (d1 + d2) as f64)?;
    let states = integrate_two_scalar(&kernel, s1, s2, cfg.lambda, cfg.r0, times)?;
    let mut header = vec![
        "t".to_string(),
        "rec_err".into(),
        "block_norm_1".into(),
        "block_norm_2".into(),
    ];
    if cfg.q_spectrum.is_some() {
        header.push("oos_rec_err".into());
    }
    let clouds = if cfg.particles > 0 {
        header.push("rec_err_particles".into());
        let opts = ParticleOptions::new(cfg.particles, cfg.seeds[0]);
        Some(integrate_particles(
            &kernel, s1, s2, d1, d2, cfg.lambda, cfg.r0, &opts, times,
        )?)
    } else {
        None
    };
    let mut t = Table::new(header);
    for (i, st) in states.iter().enumerate() {
        let bn = st.block_norms(&kernel);
        let mut row: Vec<Cell> = vec![
            st.t.into(),
            bounded_risk(&kernel, st, s1, s2).into(),
            bn[0].into(),
            bn[1].into(),
        ];
        if let Some([q1, q2]) = cfg.q_spectrum {
            row.push(out_of_sample_risk(&kernel, st, q1, q2).into());
        }
        if let Some((clouds, chi)) = &clouds {
            row.push(particle_risk(&kernel, &clouds[i], chi).into());
        }
        t.push(row);
    }
    Ok(t)
}

fn oos_model(cfg: &ExperimentConfig, model: &SpectralModel) -> Result<Option<SpectralModel>> {
    let (Some([q1, q2]), DataSpec::Blocks(b)) = (cfg.q_spectrum, &cfg.data) else {
        return Ok(None);
    };
    let mut eig = vec![q1; b[0].0];
    eig.extend(std::iter::repeat_n(q2, b[1].0));
    let rotation = match model.rotation() {
        crate::spectral::Rotation::Identity => None,
        crate::spectral::Rotation::Explicit(r) => Some(r.clone()),
    };
    SpectralModel::new(eig, rotation).map(Some)
}

fn gaussian_runs(cfg: &ExperimentConfig, model: &SpectralModel, blocks: &Blocks) -> Result<Vec<SeedRun>> {
    let metrics = MetricSpec {
        risk: RiskSource::Gaussian {
            model,
            n_mc: cfg.mc_samples,
        },
        blocks: blocks.clone(),
        rotation: model.rotation().clone(),
    };
    let q = oos_model(cfg, model)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let mut source = FreshGaussian::new(model, seed);
            train_seed(cfg, seed, model.dim(), &mut source, &metrics, q.as_ref())
        })
        .collect()
}

fn checkpoint_times(cfg: &ExperimentConfig) -> Vec<f64> {
    TrainConfig::even_checkpoints(cfg.steps, cfg.checkpoints)
        .into_iter()
        .map(|k| k as f64 * cfg.epsilon)
        .collect()
}

fn tiny_eigenvalue_warning(model: &SpectralModel) -> Option<String> {
    model
        .has_tiny_eigenvalues()
        .then(|| "spectrum has very small eigenvalues; mean-field predictions may converge slowly".to_string())
}

fn synthetic_dynamics(cfg: &ExperimentConfig, w: &mut Writer) -> Result<RunSummary> {
    let (model, blocks) = synthetic_model(cfg)?;
    let runs = gaussian_runs(cfg, &model, &blocks)?;
    let times = checkpoint_times(cfg);
    let pred = match cfg.kind {
        ExperimentKind::BoundedDynamics => bounded_prediction(cfg, &times)?,
        _ => relu_prediction(&model, &blocks, cfg, &times)?,
    };
    let joined = write_curves(w, &empirical_table(&runs, blocks.len()), &pred)?;
    let mut s = summary(joined);
    s.warnings.extend(tiny_eigenvalue_warning(&model));
    Ok(s)
}

fn two_stage(cfg: &ExperimentConfig, w: &mut Writer) -> Result<RunSummary> {
    let (model, blocks) = synthetic_model(cfg)?;
    let runs = gaussian_runs(cfg, &model, &blocks)?;
    let times = checkpoint_times(cfg);
    let pred = relu_prediction(&model, &blocks, cfg, &times)?;
    let mut joined = write_curves(w, &empirical_table(&runs, blocks.len()), &pred)?;

    let d = model.dim();
    let ms: Vec<(usize, f64)> = match cfg.subsample.as_ref().expect("validated") {
        Subsample::Counts(m) => m.iter().map(|&m| (m, m as f64 / d as f64)).collect(),
        Subsample::Ratios(mu) => mu
            .iter()
            .map(|&mu| {
                let m = (mu * d as f64).round().max(1.0) as usize;
                (m, m as f64 / d as f64)
            })
            .collect(),
    };
    let curve = ReluMfCurve::new(&model, cfg.lambda, cfg.r0)?;
    let t_end = cfg.t_end;
    let trained = &runs[0].terminal;
    let mut rows = Vec::with_capacity(ms.len());
    let mut table = Table::new(["m", "mu", "t", "emp_mean", "emp_se", "pred", "repeats"]);
    for &(m, mu) in &ms {
        let est = resample_study(
            trained,
            &model,
            Activation::Relu,
            m,
            cfg.repeats,
            cfg.mc_samples,
            cfg.seeds[0],
        )?;
        let pred = curve.two_stage_risk(t_end, mu)?;
        table.push(vec![
            m.into(),
            mu.into(),
            t_end.into(),
            est.mean.into(),
            est.std_error.into(),
            pred.into(),
            cfg.repeats.into(),
        ]);
        joined.metrics.push((
            format!("two_stage_m{m}"),
            vec![JoinedPoint {
                t: t_end,
                emp: est.mean,
                emp_se: est.std_error,
                pred,
            }],
        ));
        rows.push(TwoStageRow {
            m,
            mu,
            t: t_end,
            emp_mean: est.mean,
            emp_se: est.std_error,
            pred,
            repeats: cfg.repeats,
        });
    }
    w.table(TWO_STAGE_FILE, &table)?;
    let mut s = summary(joined);
    s.two_stage = rows;
    s.warnings.extend(tiny_eigenvalue_warning(&model));
    Ok(s)
}

fn coupling(cfg: &ExperimentConfig, w: &mut Writer) -> Result<RunSummary> {
    let (model, _) = synthetic_model(cfg)?;
    let base = ScalingBase {
        t_end: cfg.t_end,
        lambda: cfg.lambda,
        r0: cfg.r0,
        batch_size: cfg.batch_size,
    };
    let scaling = scaling_study(&model, &cfg.n_list, &cfg.epsilon_list, &base, &cfg.seeds)?;
    w.table(SCALING_FILE, &scaling.table())?;

    let reference = CouplingConfig {
        n: *cfg.n_list.iter().max().expect("validated"),
        epsilon: cfg.epsilon_list.iter().copied().fold(f64::INFINITY, f64::min),
        t_end: cfg.t_end,
        lambda: cfg.lambda,
        r0: cfg.r0,
        batch_size: cfg.batch_size,
        seed: cfg.seeds[0],
        checkpoints: cfg.checkpoints,
    };
    let report = coupled_run(&model, &reference)?;
    w.table(COUPLING_FILE, &report.table())?;
    let mut emp = Table::new(["t", "step", "coupling_e"]);
    let mut pred = Table::new(["t", "coupling_e"]);
    for p in &report.points {
        emp.push(vec![p.t.into(), p.k.into(), p.e.into()]);
        pred.push(vec![p.t.into(), 0.0.into()]);
    }
    let joined = write_curves(w, &emp, &pred)?;
    let mut s = summary(joined);
    s.scaling = Some(scaling);
    Ok(s)
}

fn read_images(path: &Path) -> Result<Array2<f64>> {
    let tensor = IdxTensor::read(path)?;
    if tensor.dims().len() < 2 {
        return Err(Error::Idx(format!(
            "{}: image file needs at least 2 dimensions",
            path.display()
        )));
    }
    Ok(tensor.images())
}

fn real_data(cfg: &ExperimentConfig, w: &mut Writer) -> Result<RunSummary> {
    let DataSpec::Idx {
        images,
        test_images,
        max_images,
    } = &cfg.data
    else {
        return Err(Error::Config("real_data requires idx_images".into()));
    };
    let mut raw = read_images(images)?;
    if let Some(limit) = *max_images {
        if limit < raw.nrows() {
            raw = raw.slice(s![..limit, ..]).to_owned();
        }
    }
    let d = raw.ncols();
    if let Some(want) = cfg.d {
        if want != d {
            return Err(Error::DimensionMismatch { expected: want, got: d });
        }
    }
    let pre = fit_preprocessor(raw.view(), d)?;
    pre.write_spectrum(&w.path(SPECTRUM_FILE))?;
    w.files.push(SPECTRUM_FILE.into());
    pre.write_basis(&w.path(BASIS_FILE))?;
    w.files.push(BASIS_FILE.into());
    let data: Array2<f64> = apply_batch(&pre, raw.view())?;
    drop(raw);
    let model = pre.spectral_model()?;
    let blocks = partition(cfg, d)?;
    let held_out = match test_images {
        Some(p) => {
            let test = read_images(p)?;
            if test.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: test.ncols(),
                });
            }
            Some(apply_batch(&pre, test.view())?)
        }
        None => None,
    };
    let eval = held_out.as_ref().unwrap_or(&data);
    let eval_rows = cfg.mc_samples.min(eval.nrows());
    let metrics = MetricSpec {
        risk: RiskSource::Dataset(eval.slice(s![..eval_rows, ..])),
        blocks: blocks.clone(),
        rotation: crate::spectral::Rotation::Identity,
    };
    let runs: Vec<SeedRun> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let mut source = EpochShuffle::new(data.view(), seed)?;
            train_seed(cfg, seed, d, &mut source, &metrics, None)
        })
        .collect::<Result<_>>()?;
    let pred = relu_prediction(&model, &blocks, cfg, &checkpoint_times(cfg))?;
    let joined = write_curves(w, &empirical_table(&runs, blocks.len()), &pred)?;
    let mut s = summary(joined);
    s.warnings.extend(tiny_eigenvalue_warning(&model));
    Ok(s)
}

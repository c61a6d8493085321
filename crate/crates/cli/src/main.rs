mod eval;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use voxreg_core::features::{fit_pca, mind_ssc, project};
use voxreg_core::io::{self, fvl1, nifti};
use voxreg_core::metrics::evaluate;
use voxreg_core::synth::make_pair;
use voxreg_core::volume::{preprocess_ct, preprocess_mri};
use voxreg_core::{
    adam, register, FeatureSource, GridGeometry, Preprocessing, RegistrationConfig, StageTimings,
    SynthConfig, Texture,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] voxreg_core::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 2,
        }
    }

    fn kind(&self) -> &'static str {
        match self.code() {
            3 => "io",
            4 => "numerical",
            _ => "usage",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "voxreg",
    version,
    about = "Feature-based 3D deformable image registration"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Dice and Jacobian statistics of a displacement field.
    Metrics(MetricsArgs),
    /// MIND-SSC descriptors of a volume.
    Mind(MindArgs),
    /// Joint PCA projection of two feature volumes.
    Pca(PcaArgs),
    /// Synthetic pair with ground-truth displacement.
    Synth(SynthArgs),
    /// Register and evaluate every pair listed in a manifest.
    EvalPairs(EvalArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeaturesFlag {
    Mind,
    External,
}

/// Config file, `--set` overrides and the flags mapped onto config keys.
#[derive(Debug, Args, Clone)]
pub struct ConfigArgs {
    /// TOML configuration (dotted keys allowed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set convex.search_radius=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for all randomness (PCA sampling); recorded in outputs.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    features: Option<FeaturesFlag>,
}

impl ConfigArgs {
    pub fn load(&self) -> CliResult<RegistrationConfig> {
        let mut cfg = match &self.config {
            Some(path) => RegistrationConfig::from_file(path)?,
            None => RegistrationConfig::default(),
        };
        if let Some(f) = self.features {
            cfg.feature_source = match f {
                FeaturesFlag::Mind => FeatureSource::Mind,
                FeaturesFlag::External => FeatureSource::External,
            };
        }
        if let Some(seed) = self.seed {
            cfg.pca.seed = seed;
        }
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed_feat: Option<PathBuf>,
    #[arg(long)]
    moving_feat: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Displacement field output (FVL1).
    #[arg(long)]
    out_disp: PathBuf,
    /// Warped moving image (NIfTI).
    #[arg(long)]
    out_warped: Option<PathBuf>,
    /// Refinement loss trace (CSV).
    #[arg(long)]
    out_trace: Option<PathBuf>,
    /// Run metadata: timings, seed, config echo (JSON).
    #[arg(long)]
    out_meta: Option<PathBuf>,
    #[arg(long, requires = "moving_seg")]
    fixed_seg: Option<PathBuf>,
    #[arg(long, requires = "fixed_seg")]
    moving_seg: Option<PathBuf>,
    /// Metrics report (JSON); needs both segmentations.
    #[arg(long, requires = "fixed_seg")]
    out_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Full-resolution displacement field (FVL1).
    #[arg(long)]
    disp: PathBuf,
    #[arg(long)]
    fixed_seg: PathBuf,
    #[arg(long)]
    moving_seg: PathBuf,
    #[arg(long)]
    out_report: PathBuf,
}

#[derive(Debug, Args)]
struct MindArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Args)]
struct PcaArgs {
    #[arg(long)]
    fixed_feat: PathBuf,
    #[arg(long)]
    moving_feat: PathBuf,
    #[arg(long)]
    out_fixed: PathBuf,
    #[arg(long)]
    out_moving: PathBuf,
    /// Fitted basis (JSON).
    #[arg(long)]
    out_basis: PathBuf,
    #[arg(long)]
    components: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TextureFlag {
    Smooth,
    Checker,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Cube edge length in voxels.
    #[arg(long, default_value_t = 64, conflicts_with = "dims")]
    size: usize,
    /// Explicit grid, e.g. `48,40,64`.
    #[arg(long, value_delimiter = ',', value_name = "X,Y,Z")]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest displacement component in voxels.
    #[arg(long, default_value_t = 6.0)]
    cap: f64,
    #[arg(long, value_enum, default_value_t = TextureFlag::Smooth)]
    texture: TextureFlag,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Tab-separated: fixed, moving, fixed_seg, moving_seg
    /// [, fixed_feat, moving_feat]. Relative paths resolve against the
    /// manifest's directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Per-pair outputs go to `<out-dir>/pair_NNN/`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Summary JSON.
    #[arg(long)]
    pub out_report: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Serialize)]
struct RunMeta<'a> {
    seed: u64,
    pca_applied: bool,
    timings_ms: StageTimings,
    initial_loss: f64,
    final_loss: f64,
    config: &'a RegistrationConfig,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(voxreg_core::Error::from)?;
    std::fs::write(path, text).map_err(|source| voxreg_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|source| {
        CliError::Core(voxreg_core::Error::Io {
            path: dir.to_path_buf(),
            source,
        })
    })
}

fn run_register(a: &RegisterArgs) -> CliResult<()> {
    let cfg = a.config.load()?;
    let fixed = nifti::read_volume(&a.fixed)?;
    let moving = nifti::read_volume(&a.moving)?;
    let external = match cfg.feature_source {
        FeatureSource::Mind => None,
        FeatureSource::External => {
            let (Some(ff), Some(mf)) = (&a.fixed_feat, &a.moving_feat) else {
                return Err(CliError::Usage(
                    "--features external needs --fixed-feat and --moving-feat".into(),
                ));
            };
            Some((fvl1::ingest_features(ff)?, fvl1::ingest_features(mf)?))
        }
    };
    let segs = match (&a.fixed_seg, &a.moving_seg) {
        (Some(f), Some(m)) => Some((nifti::read_labels(f)?, nifti::read_labels(m)?)),
        _ => None,
    };
    let res = register(
        &fixed,
        &moving,
        &cfg,
        external.as_ref().map(|(f, m)| (f, m)),
    )?;
    fvl1::write_displacement(&res.displacement, &a.out_disp)?;
    if let Some(p) = &a.out_warped {
        nifti::write_nifti(&res.warped_moving, p)?;
    }
    if let Some(p) = &a.out_trace {
        adam::write_loss_csv(&res.loss_trace, p)?;
    }
    if let Some(p) = &a.out_meta {
        let meta = RunMeta {
            seed: cfg.pca.seed,
            pca_applied: res.pca_applied,
            timings_ms: res.timings,
            initial_loss: res.loss_trace.first().map_or(f64::NAN, |r| r.total),
            final_loss: res.loss_trace.last().map_or(f64::NAN, |r| r.total),
            config: &cfg,
        };
        write_json(&meta, p)?;
    }
    if let (Some((fs, ms)), Some(p)) = (&segs, &a.out_report) {
        let report = evaluate(&res.displacement, fs, ms)?;
        io::write_report(&report, p)?;
    }
    Ok(())
}

fn run_metrics(a: &MetricsArgs) -> CliResult<()> {
    let u = fvl1::read_displacement(&a.disp)?;
    let fs = nifti::read_labels(&a.fixed_seg)?;
    let ms = nifti::read_labels(&a.moving_seg)?;
    let report = evaluate(&u, &fs, &ms)?;
    io::write_report(&report, &a.out_report)?;
    Ok(())
}

fn run_mind(a: &MindArgs) -> CliResult<()> {
    let cfg = a.config.load()?;
    let vol = nifti::read_volume(&a.input)?;
    let vol = match cfg.preprocessing {
        Preprocessing::Mri => preprocess_mri(&vol).volume,
        Preprocessing::Ct => preprocess_ct(&vol).volume,
        Preprocessing::None => vol,
    };
    let fv = mind_ssc(&vol, &cfg.mind)?;
    fvl1::write_fvl1(&fv, &a.out)?;
    Ok(())
}

fn run_pca(a: &PcaArgs) -> CliResult<()> {
    let mut cfg = a.config.load()?;
    if let Some(k) = a.components {
        cfg.pca.components = k;
    }
    let f = fvl1::ingest_features(&a.fixed_feat)?;
    let m = fvl1::ingest_features(&a.moving_feat)?;
    let basis = fit_pca(&f, &m, &cfg.pca)?;
    fvl1::write_fvl1(&project(&f, &basis)?, &a.out_fixed)?;
    fvl1::write_fvl1(&project(&m, &basis)?, &a.out_moving)?;
    io::write_basis(&basis, &a.out_basis)?;
    Ok(())
}

fn run_synth(a: &SynthArgs) -> CliResult<()> {
    let dims = match &a.dims {
        Some(d) if d.len() == 3 => [d[0], d[1], d[2]],
        Some(d) => {
            return Err(CliError::Usage(format!(
                "--dims needs 3 values, got {}",
                d.len()
            )))
        }
        None => [a.size; 3],
    };
    let geom = GridGeometry::isotropic(dims)?;
    let cfg = SynthConfig {
        seed: a.seed,
        magnitude_cap: a.cap,
        texture: match a.texture {
            TextureFlag::Smooth => SynthConfig::default().texture,
            TextureFlag::Checker => Texture::Checker { period: 4 },
        },
        ..Default::default()
    };
    let pair = make_pair(&geom, &cfg)?;
    ensure_dir(&a.out_dir)?;
    let p = |n: &str| a.out_dir.join(n);
    nifti::write_nifti(&pair.fixed, &p("fixed.nii.gz"))?;
    nifti::write_nifti(&pair.moving, &p("moving.nii.gz"))?;
    nifti::write_labels(&pair.fixed_seg, &p("fixed_seg.nii.gz"))?;
    nifti::write_labels(&pair.moving_seg, &p("moving_seg.nii.gz"))?;
    fvl1::write_displacement(&pair.truth, &p("truth.fvl1"))?;
    write_json(&cfg, &p("synth.json"))?;
    Ok(())
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Register(a) => run_register(a),
        Command::Metrics(a) => run_metrics(a),
        Command::Mind(a) => run_mind(a),
        Command::Pca(a) => run_pca(a),
        Command::Synth(a) => run_synth(a),
        Command::EvalPairs(a) => eval::run(a, cli.jobs),
    }
}

fn fail(err: &CliError) -> ExitCode {
    let msg = err.to_string().replace('\n', " ");
    eprintln!(
        "voxreg: error code={} kind={}: {msg}",
        err.code(),
        err.kind()
    );
    ExitCode::from(err.code())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VOXREG_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .to_string();
            return fail(&CliError::Usage(
                first.trim_start_matches("error: ").to_string(),
            ));
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return fail(&CliError::Usage("--jobs must be >= 1".into()));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

//! Command-line interface.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::angles::{k_to_theta, Angle};
use crate::beams::{geometry_row, sample, BeamMask, GeometryRow};
use crate::data::{
    generate, load_image_dir, split_indices, write_manifest, Dataset, ManifestRow, Split, SyntheticKind, SyntheticSpec,
};
use crate::imageops::{optimal_padding, pad, rotate, Image, Interpolation, PadMode};
use crate::net::{load_checkpoint, save_checkpoint, BicModel};
use crate::rbt::RawTensor;
use crate::train::{
    build_eval_cases, canonicalize, draw_rotation, export_embeddings, predict_parallel, saliency, score,
    stability_sweep, train, worst_deviation_within, write_eval_report, write_histogram, write_loss_curve,
    write_stability_curve, FixedAngle, RotationRegime, TrainConfig, UniformRandom,
};
use crate::{Error, Result};

/// Environment variable that overrides every seed given by flag or config.
pub const SEED_ENV: &str = "RADIAL_CANON_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "radial-canon", version, about = "Radial beam sampling and rotation canonicalization")]
pub struct Cli {
    /// Worker threads for evaluation and stability sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Closed-form and exact beam coverage and overlap.
    Geometry(GeometryArgs),
    /// Sample one image into a beam tensor file.
    Sample(SampleArgs),
    /// Write a procedural dataset with a manifest.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Angular error of a model or a baseline on rotated copies of a dataset.
    Eval(EvalArgs),
    /// Rotate an image into its predicted canonical orientation.
    Canonicalize(CanonicalizeArgs),
    /// Input-gradient saliency map of one image.
    Saliency(SaliencyArgs),
    /// Prediction drift under small translations.
    Stability(StabilityArgs),
    /// Pre-context beam embeddings of a rotation orbit.
    ExportEmbeddings(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GeometryArgs {
    /// Beam counts, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub beams: Vec<usize>,
    /// Beam lengths, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub length: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub thickness: Vec<usize>,
    /// Also count pixels on a rasterized mask.
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value = "geometry.csv")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub beams: usize,
    /// Beam length; defaults to half the image width.
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub thickness: usize,
    /// Padding; defaults to the smallest padding that keeps rotated corners.
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long, default_value = "zero")]
    pub pad_mode: PadMode,
    #[arg(long, default_value = "beams.rbt")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    #[arg(long, default_value = "lit_sphere")]
    pub kind: SyntheticKind,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 512)]
    pub count: usize,
    /// Canonical light azimuth in degrees.
    #[arg(long, default_value_t = 90.0)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

impl SyntheticArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            kind: self.kind,
            image_size: self.size,
            count: self.count,
            light_azimuth: self.azimuth,
            noise_std: self.noise,
            seed: self.data_seed,
        }
    }

    fn describe(&self) -> String {
        format!(
            "data = synthetic {} size={} count={} azimuth={} noise={} data_seed={}",
            self.kind.name(),
            self.size,
            self.count,
            self.azimuth,
            self.noise,
            self.data_seed
        )
    }
}

/// Where images come from: a PNG directory or the procedural generator.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory of square PNG images; synthetic data is used when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        match &self.data {
            Some(dir) => {
                println!("data = {}", dir.display());
                load_image_dir(dir)
            }
            None => {
                println!("{}", self.synthetic.describe());
                generate(&self.synthetic.spec())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Regime {
    /// Canonical images, no rotation.
    None,
    Finite,
    Continuous,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub synthetic: SyntheticArgs,
    /// Rotate each image after padding it.
    #[arg(long, value_enum, default_value = "none")]
    pub rotate: Regime,
    /// Group order of the finite regime.
    #[arg(long, default_value_t = 32)]
    pub beams: usize,
    #[arg(long, default_value_t = 0.8)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `key = value` configuration file; built-in defaults otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    /// The checkpoint given by --model.
    Model,
    /// Uniformly random angles.
    Random,
    /// Always 0°.
    Zero,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    pub predictor: Baseline,
    #[arg(long, value_enum, default_value = "continuous")]
    pub regime: Regime,
    /// Group order of the finite regime; defaults to the model's beam count.
    #[arg(long)]
    pub beams: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub per_image: usize,
    /// Evaluate only the held-out part of the split.
    #[arg(long)]
    pub held_out: bool,
    #[arg(long, default_value_t = 0.8)]
    pub split_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct CanonicalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "canonical.png")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Angle the loss is taken against, in degrees.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub target: f64,
    #[arg(long, default_value = "saliency.png")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct StabilityArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub max_shift: usize,
    /// Number of images taken from the dataset.
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Orbit angles in degrees; defaults to the multiples of 45°.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub orbit: Vec<f64>,
    #[arg(long, default_value = "embeddings.rbt")]
    pub output: PathBuf,
}

/// Seed from the environment override, else `fallback`.
pub fn resolve_seed(fallback: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(fallback),
    }
}

fn out_path(out: &Path, name: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out)?;
    Ok(out.join(name))
}

fn regime(r: Regime) -> Option<RotationRegime> {
    match r {
        Regime::None => None,
        Regime::Finite => Some(RotationRegime::Finite),
        Regime::Continuous => Some(RotationRegime::Continuous),
    }
}

fn load_model(path: &Path) -> Result<BicModel> {
    let m = load_checkpoint(path)?;
    let c = m.config();
    println!("model = {}", path.display());
    println!(
        "model_config = image_size={} pad={} pad_mode={} channels={} beams={} length={} thickness={} latent={} edge_factor={}",
        c.image_size,
        c.pad,
        c.pad_mode.name(),
        c.channels,
        c.num_beams,
        c.beam_length,
        c.thickness,
        c.latent_dim,
        c.edge_factor
    );
    Ok(m)
}

fn geometry(a: &GeometryArgs, out: &Path) -> Result<()> {
    println!("beams = {:?}\nlength = {:?}\nthickness = {:?}\nexact = {}", a.beams, a.length, a.thickness, a.exact);
    let path = out_path(out, &a.output)?;
    let mut w = csv::Writer::from_path(&path)?;
    let mut stdout = csv::Writer::from_writer(std::io::stdout());
    w.write_record(GeometryRow::HEADER)?;
    stdout.write_record(GeometryRow::HEADER)?;
    for &b in &a.beams {
        for &d in &a.length {
            for &t in &a.thickness {
                let rec = geometry_row(b, d, t, a.exact)?.record();
                w.write_record(&rec)?;
                stdout.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    stdout.flush()?;
    Ok(())
}

fn sample_cmd(a: &SampleArgs, out: &Path) -> Result<()> {
    let img = Image::load_png(&a.input)?;
    if !img.is_square() {
        return Err(Error::NonSquareImage {
            width: img.width(),
            height: img.height(),
        });
    }
    let delta = a.pad.unwrap_or_else(|| optimal_padding(img.width()));
    let length = a.length.unwrap_or(img.width() / 2);
    println!(
        "input = {}\nbeams = {}\nlength = {}\nthickness = {}\npad = {}\npad_mode = {}",
        a.input.display(),
        a.beams,
        length,
        a.thickness,
        delta,
        a.pad_mode.name()
    );
    let padded = pad(&img, delta, a.pad_mode);
    let mask = BeamMask::build(padded.width(), a.beams, length, a.thickness)?;
    let beams = sample(&padded, &mask)?;
    let path = out_path(out, &a.output)?;
    RawTensor::from_f64(&beams.shape(), beams.data())?.save(&path)?;
    println!("wrote {} with shape {:?}", path.display(), beams.shape());
    Ok(())
}

fn gen_data(a: &GenDataArgs, out: &Path) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    println!("{}", a.synthetic.describe());
    println!(
        "rotate = {:?}\nbeams = {}\nsplit_fraction = {}\nseed = {seed}",
        a.rotate, a.beams, a.split_fraction
    );
    let ds = generate(&a.synthetic.spec())?;
    let (_, test) = split_indices(ds.len(), a.split_fraction, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut written = Dataset::default();
    let mut rows = Vec::with_capacity(ds.len());
    for (i, (img, name)) in ds.images.iter().zip(&ds.names).enumerate() {
        let (img, theta, k) = match regime(a.rotate) {
            None => (img.clone(), Angle::ZERO, None),
            Some(r) => {
                let (theta, k) = draw_rotation(r, a.beams, &mut rng);
                let padded = pad(img, optimal_padding(img.width()), PadMode::Zero);
                (rotate(&padded, theta, Interpolation::Bilinear)?, theta, k)
            }
        };
        written.images.push(img);
        written.names.push(name.clone());
        rows.push(ManifestRow {
            filename: format!("{name}.png"),
            theta_degrees: theta.degrees(),
            k,
            split: if test.contains(&i) { Split::Test } else { Split::Train },
        });
    }
    fs::create_dir_all(out)?;
    written.save(out)?;
    write_manifest(out.join("manifest.csv"), &rows)?;
    println!("wrote {} images and manifest.csv to {}", rows.len(), out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs, out: &Path) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.seed = resolve_seed(config.seed)?;
    config.validate()?;
    print!("{}", config.to_text());
    let ds = a.data.load()?;
    fs::create_dir_all(out)?;
    let outcome = train(&config, &ds)?;
    save_checkpoint(&outcome.model, out.join("model.ckpt"))?;
    write_loss_curve(out.join("loss.csv"), &outcome.curve)?;
    fs::write(out.join("config.txt"), config.to_text())?;
    if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
        println!("loss: first {:.6} last {:.6}", first.loss, last.loss);
    }
    println!("wrote model.ckpt and loss.csv to {}", out.display());
    Ok(())
}

fn eval_cmd(a: &EvalArgs, out: &Path, threads: usize) -> Result<()> {
    let seed = resolve_seed(a.seed)?;
    let model = match (a.predictor, &a.model) {
        (Baseline::Model, Some(p)) => Some(load_model(p)?),
        (Baseline::Model, None) => return Err(Error::Config("--model is required for --predictor model".into())),
        (_, Some(p)) => Some(load_model(p)?),
        _ => None,
    };
    let rot = regime(a.regime);
    let beams = a.beams.or(model.as_ref().map(|m| m.config().num_beams)).unwrap_or(32);
    println!(
        "predictor = {:?}\nregime = {:?}\nbeams = {beams}\nper_image = {}\nheld_out = {}\nsplit_fraction = {}\nseed = {seed}\nthreads = {threads}",
        a.predictor, a.regime, a.per_image, a.held_out, a.split_fraction
    );
    let ds = a.data.load()?;
    let images: Vec<Image> = if a.held_out {
        let (_, test) = split_indices(ds.len(), a.split_fraction, seed);
        test.iter().map(|&i| ds.images[i].clone()).collect()
    } else {
        ds.images
    };
    let first = images.first().ok_or(Error::EmptyDataset)?;
    let (delta, mode) = match &model {
        Some(m) => (m.config().pad, m.config().pad_mode),
        None => (optimal_padding(first.width()), PadMode::Zero),
    };
    let cases = match rot {
        Some(r) => build_eval_cases(&images, delta, mode, r, beams, a.per_image, seed)?,
        None => build_eval_cases(&images, delta, mode, RotationRegime::Finite, 1, a.per_image, seed)?,
    };
    let imgs: Vec<Image> = cases.iter().map(|c| c.image.clone()).collect();
    let preds = match (a.predictor, &model) {
        (Baseline::Model, Some(m)) => predict_parallel(m, &imgs, threads)?,
        (Baseline::Random, _) => {
            let p = UniformRandom::new(seed);
            crate::net::AnglePredictor::predict_batch(&p, &imgs)?
        }
        _ => crate::net::AnglePredictor::predict_batch(&FixedAngle(Angle::ZERO), &imgs)?,
    };
    let report = score(&cases, &preds)?;
    write_eval_report(out_path(out, Path::new("eval.csv"))?, &report)?;
    write_histogram(out.join("histogram.csv"), &report)?;
    println!(
        "count = {}\nmean_loss = {:.6}\nmean_error_deg = {:.4}\nmean_error_deg_via_loss = {:.4}",
        report.count, report.mean_loss, report.mean_error_deg, report.mean_error_deg_via_loss
    );
    Ok(())
}

fn canonicalize_cmd(a: &CanonicalizeArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.model)?;
    println!("input = {}", a.input.display());
    let img = model.prepare(&Image::load_png(&a.input)?)?;
    let (canon, theta) = canonicalize(&model, &img)?;
    let path = out_path(out, &a.output)?;
    canon.save_png(&path)?;
    println!("predicted_angle_deg = {:.4}", theta.degrees());
    println!("wrote {}", path.display());
    Ok(())
}

fn saliency_cmd(a: &SaliencyArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.model)?;
    println!("input = {}\ntarget_deg = {}", a.input.display(), a.target);
    let img = Image::load_png(&a.input)?;
    let map = saliency(&model, &img, Angle::from_degrees(a.target))?;
    let path = out_path(out, &a.output)?;
    map.save_png(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn stability_cmd(a: &StabilityArgs, out: &Path, threads: usize) -> Result<()> {
    let model = load_model(&a.model)?;
    println!("max_shift = {}\nimages = {}\nthreads = {threads}", a.max_shift, a.images);
    let ds = a.data.load()?;
    let imgs: Vec<Image> = ds
        .images
        .iter()
        .take(a.images)
        .map(|i| model.prepare(i))
        .collect::<Result<_>>()?;
    let curve = stability_sweep(&model, &imgs, a.max_shift, threads)?;
    write_stability_curve(out_path(out, Path::new("stability.csv"))?, &curve)?;
    let r = (a.max_shift as i64).min(3);
    println!(
        "worst_mean_deviation_deg_within_{r}px = {:.4}",
        worst_deviation_within(&curve, r)
    );
    println!(
        "worst_mean_deviation_deg_within_{}px = {:.4}",
        a.max_shift,
        worst_deviation_within(&curve, a.max_shift as i64)
    );
    Ok(())
}

fn export_cmd(a: &ExportArgs, out: &Path) -> Result<()> {
    let model = load_model(&a.model)?;
    let orbit: Vec<Angle> = if a.orbit.is_empty() {
        (0..8).map(|k| k_to_theta(k, 8)).collect()
    } else {
        a.orbit.iter().map(|&d| Angle::from_degrees(d)).collect()
    };
    let degrees: Vec<f64> = orbit.iter().map(|t| t.degrees()).collect();
    println!("input = {}\norbit_deg = {degrees:?}", a.input.display());
    let img = Image::load_png(&a.input)?;
    let path = out_path(out, &a.output)?;
    let t = export_embeddings(&model, &img, &orbit, &path)?;
    println!("wrote {} with shape {:?}", path.display(), t.dims);
    Ok(())
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be positive".into()));
    }
    let out = cli.out.as_path();
    match &cli.command {
        Command::Geometry(a) => geometry(a, out),
        Command::Sample(a) => sample_cmd(a, out),
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out, cli.threads),
        Command::Canonicalize(a) => canonicalize_cmd(a, out),
        Command::Saliency(a) => saliency_cmd(a, out),
        Command::Stability(a) => stability_cmd(a, out, cli.threads),
        Command::ExportEmbeddings(a) => export_cmd(a, out),
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["radial-canon", "geometry", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["radial-canon", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["radial-canon"]), EXIT_USAGE);
        assert_eq!(run(["radial-canon", "--help"]), EXIT_OK);
    }

    #[test]
    fn runtime_errors_exit_two() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let missing = dir.path().join("missing.ckpt");
        let code = run([
            "radial-canon",
            "--out",
            out,
            "canonicalize",
            "--model",
            missing.to_str().unwrap(),
            "--input",
            "x.png",
        ]);
        assert_eq!(code, EXIT_RUNTIME);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "radial-canon",
            "geometry",
            "--beams",
            "8,16",
            "--length",
            "32",
            "--exact",
            "--threads",
            "2",
        ])
        .unwrap();
        assert_eq!(cli.threads, 2);
        match cli.command {
            Command::Geometry(g) => {
                assert_eq!(g.beams, vec![8, 16]);
                assert_eq!(g.thickness, vec![1]);
                assert!(g.exact);
            }
            other => panic!("{other:?}"),
        }
    }
}

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use chromabench::colorspace::{
    clip_rgb, convert, luminance, yuv_inverse, xyz_inverse, ColorImage, Mat3, Space, WhitePoint, AB_RANGE,
    U_MAX, V_MAX, XYZ_MATRIX, YUV_MATRIX,
};
use chromabench::image_io::{atomic_write, is_supported_extension, read_image, read_rgb, write_image};
use chromabench::losses::{FeatureExtractor, FeatureFile, LpipsWeights};
use chromabench::metrics::{evaluate_dirs, EvalOptions, SsimMode};
use chromabench::pipeline::verify::gradcheck_suite;
use chromabench::pipeline::{colorize, train, Strategy};
use chromabench::tensor::{Graph, Tensor};
use chromabench::unet::UNetWeights;

use crate::config::{echo, env_seed, RunConfig, SEED_ENV};
use crate::encoding::{from_file, to_file};
use crate::error::{CliError, Result};

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_space(name: &str) -> Result<Space> {
    let space: Space = name.parse()?;
    if space == Space::Gray {
        return Err(CliError::Usage("convert works on rgb, yuv, xyz and lab".into()));
    }
    Ok(space)
}

fn print_matrix(title: &str, m: &Mat3) {
    println!("{title}");
    for row in m {
        println!("{} {} {}", row[0], row[1], row[2]);
    }
}

pub fn show_constants() {
    let wp = WhitePoint::default();
    print_matrix("YUV matrix", &YUV_MATRIX);
    print_matrix("YUV inverse", yuv_inverse());
    print_matrix("XYZ matrix", &XYZ_MATRIX);
    print_matrix("XYZ inverse", xyz_inverse());
    let [xn, yn, zn] = wp.as_array();
    println!("white point");
    println!("{xn} {yn} {zn}");
    println!("chrominance ranges");
    println!("{U_MAX} {V_MAX} {AB_RANGE}");
}

pub struct ConvertArgs {
    pub input: PathBuf,
    pub output: PathBuf,
    pub from: String,
    pub to: String,
    pub clip: bool,
    pub and_back: bool,
}

pub fn convert_file(args: &ConvertArgs) -> Result<()> {
    let (from, to) = (parse_space(&args.from)?, parse_space(&args.to)?);
    let wp = WhitePoint::default();
    let source = from_file(&read_rgb(&args.input)?, from, &wp)?;
    let mut converted = convert(&source, to, &wp)?;
    if args.and_back {
        let back = convert(&converted, from, &wp)?;
        let err = back.data().iter().zip(source.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("max round-trip error {err:e}");
    }
    if args.clip && to == Space::Rgb {
        converted = clip_rgb(&converted)?;
    }
    write_image(&args.output, &to_file(&converted, &wp)?)?;
    Ok(())
}

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub flags: RunConfig,
    pub env_seed: Option<String>,
}

pub fn train_run(args: TrainArgs) -> Result<()> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    let env = RunConfig { seed: env_seed(args.env_seed)?, ..Default::default() };
    if env.seed.is_some() {
        log::info!("seed taken from {SEED_ENV}");
    }
    let (preset, cfg) = file.overlay(env).overlay(args.flags).resolve();
    print!("{}", echo(preset, &cfg));
    let out = train(&cfg)?;
    if let (Some(first), Some(last)) = (out.records.first(), out.records.last()) {
        println!("step 1 loss {}, final loss {} (ratio {:.4})", first.loss, last.loss, last.loss / first.loss);
    }
    println!("checkpoint {}", out.final_checkpoint.display());
    println!("loss log {}", out.loss_log.display());
    Ok(())
}

fn gray_input(path: &Path) -> Result<ColorImage> {
    let img = read_image(path)?;
    Ok(if img.space() == Space::Gray { img } else { luminance(&img)? })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> =
        entries.flatten().map(|e| e.path()).filter(|p| p.is_file() && is_supported_extension(p)).collect();
    files.sort();
    Ok(files)
}

/// Colorizes one file, or every image of a directory into an output directory.
pub fn colorize_run(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let weights = UNetWeights::load(checkpoint)?;
    let strategy = Strategy::from_weights(&weights)?;
    let one = |src: &Path, dst: &Path| -> Result<()> {
        let out = colorize(&weights, strategy, &gray_input(src)?)?;
        write_image(dst, &out.rgb)?;
        Ok(())
    };
    if !input.is_dir() {
        return one(input, output);
    }
    std::fs::create_dir_all(output).map_err(|e| CliError::Data(format!("{}: {e}", output.display())))?;
    let files = image_files(input)?;
    for src in &files {
        let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        one(src, &output.join(format!("{stem}.ppm")))?;
    }
    println!("{} images colorized with {strategy}", files.len());
    Ok(())
}

/// `report.csv` -> `report.meta.toml`.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

pub fn evaluate_run(truth: &Path, pred: &Path, csv: &Path, ssim: SsimMode) -> Result<()> {
    let phi = FeatureExtractor::default();
    let weights = LpipsWeights::for_extractor(&phi);
    let mut report = evaluate_dirs(truth, pred, &phi, &weights, EvalOptions { ssim })?;
    if report.rows.is_empty() {
        return Err(CliError::Data(format!("no ground-truth images in {}", truth.display())));
    }
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    report.metadata.insert("truth_dir".into(), truth.display().to_string());
    report.metadata.insert("pred_dir".into(), pred.display().to_string());
    report.metadata.insert("report".into(), csv.display().to_string());
    report.metadata.insert("created_unix".into(), now.to_string());
    write_file(csv, report.to_csv().as_bytes())?;
    write_file(&sidecar_path(csv), report.sidecar().as_bytes())?;
    let flagged = report.flagged().count();
    match report.aggregate() {
        Some(m) => println!(
            "{} pairs, {flagged} flagged: PSNR {:.4} SSIM {:.4} LPIPS {:.6} FID {}",
            report.rows.len(),
            m.psnr,
            m.ssim,
            m.lpips,
            report.frechet.map_or("nan".into(), |f| f.to_string())
        ),
        None => println!("{} pairs, all flagged", report.rows.len()),
    }
    Ok(())
}

pub fn gradcheck_run(module: Option<&str>) -> Result<()> {
    let entries = gradcheck_suite(module)?;
    let mut failed = 0;
    let mut worst = 0.0f64;
    for e in &entries {
        let verdict = if e.check.passed() { "PASS" } else { "FAIL" };
        println!("{:<10} {:<44} {:.3e} ({} elements) {verdict}", e.module, e.check.name, e.check.max_rel_error, e.check.checked);
        failed += usize::from(!e.check.passed());
        worst = worst.max(e.check.max_rel_error);
    }
    println!("{} checks, {failed} failed, max relative error {worst:.3e}", entries.len());
    if failed > 0 {
        return Err(CliError::Numerical(format!("{failed} gradient checks exceed tolerance")));
    }
    Ok(())
}

pub fn features_run(input: &Path, output: &Path) -> Result<()> {
    let phi = FeatureExtractor::default();
    let files = image_files(input)?;
    if files.is_empty() {
        return Err(CliError::Data(format!("no images in {}", input.display())));
    }
    let mut file: Option<FeatureFile> = None;
    for path in &files {
        let img = read_rgb(path)?;
        let x = Tensor::new(vec![1, 3, img.height(), img.width()], img.data().to_vec())?;
        let mut g = Graph::<f64>::new();
        let xv = g.constant(x);
        let layers: Vec<Tensor<f64>> = phi.forward(&mut g, xv)?.into_iter().map(|v| g.value(v).clone()).collect();
        let f = match &mut file {
            Some(f) => f,
            None => {
                let shapes = layers.iter().map(|t| [t.shape()[1], t.shape()[2], t.shape()[3]]).collect();
                file.insert(FeatureFile::new(shapes)?)
            }
        };
        f.push(&layers).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    let file = file.expect("at least one image");
    file.write(output)?;
    println!("{} images, layer shapes {:?}", file.len(), file.layer_shapes());
    Ok(())
}


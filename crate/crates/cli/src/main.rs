use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use glaucoma_cnn::cam::{compute_cam, export_heatmap, inside_outside_ratio, CamMap};
use glaucoma_cnn::data::{read_gray_image, read_manifest, to_model_input, write_manifest, ManifestRow};
use glaucoma_cnn::experiment::{
    cross_validate, evaluate, init_model, plan_splits, trace_csv, train, CrossValidation, Evaluation, Mode, RunConfig,
};
use glaucoma_cnn::metrics::comparison_table;
use glaucoma_cnn::model::{load_weights, save_weights};
use glaucoma_cnn::synth::{generate_dataset, mask_path, SynthConfig};
use glaucoma_cnn::tensor::bilinear_resize;
use glaucoma_cnn::{load_dataset, Dataset, Error, Label, SeededRng, WeightArchive};

#[derive(Parser)]
#[command(name = "glaucoma-cnn", version, about = "Glaucoma detection from circumpapillary OCT B-scans")]
struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    /// Resolved-configuration file (key=value) to start from; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (images, band masks, manifest).
    Synth(SynthArgs),
    /// Train on the training split and save the weights.
    Train(TrainArgs),
    /// Internal cross-validation over the training split.
    Crossval(CrossvalArgs),
    /// Score a manifest with saved weights.
    Evaluate(EvalArgs),
    /// Class activation heat maps for selected samples.
    Cam(CamArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    glaucoma: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    normal: u32,
    /// Synthetic patients per class (default: half the larger class count).
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    patients: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// 124×192 phantoms for reduced runs.
    #[arg(long)]
    reduced: bool,
}

/// Options shared by every model command; unset ones come from `--config`
/// or the mode defaults.
#[derive(Args, Clone, Default)]
struct RunArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// 124×192 inputs and a quarter of the filters.
    #[arg(long)]
    reduced: bool,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: Option<u32>,
    #[arg(long)]
    lr: Option<f32>,
    /// `balanced` or `G,N`.
    #[arg(long)]
    class_weights: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Augmentation factor (0 disables augmentation).
    #[arg(long)]
    augment: Option<f32>,
    /// Initial weights, e.g. an imported pretrained base.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct CrossvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    folds: Option<usize>,
    /// Train with data augmentation of this factor.
    #[arg(long, value_name = "FACTOR", conflicts_with = "compare_da")]
    with_da: Option<f32>,
    /// Run without and with augmentation (factor 0.2) and tabulate both.
    #[arg(long)]
    compare_da: bool,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct CamArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Comma-separated sample ids.
    #[arg(long, value_delimiter = ',', required = true)]
    samples: Vec<String>,
    /// Comma-separated target classes.
    #[arg(long, value_delimiter = ',', default_value = "glaucoma,normal")]
    classes: Vec<String>,
}

/// Augmentation factor used by `crossval --compare-da`.
const COMPARE_DA_FACTOR: f32 = 0.2;

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_io() => 4,
        Error::Config(_) | Error::Parameter(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n as usize).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(4);
        }
    }
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, cli.config.as_deref()),
        Command::Crossval(a) => cmd_crossval(a, cli.config.as_deref()),
        Command::Evaluate(a) => cmd_evaluate(a, cli.config.as_deref()),
        Command::Cam(a) => cmd_cam(a, cli.config.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            if let Error::Partition(_) = e {
                eprintln!("hint: every class needs samples from at least as many patients as there are folds");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Failure::Lib(Error::Io { path: path.to_path_buf(), source: e }))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::Lib(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Mode defaults, then the config file, then flags.
fn resolve(run: &RunArgs, config: Option<&Path>) -> CliResult<RunConfig> {
    let file = match config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?),
        None => None,
    };
    let flag_mode = match &run.mode {
        Some(m) => Some(m.parse::<Mode>().map_err(|e| Failure::Usage(e.to_string()))?),
        None => None,
    };
    let mut cfg = match &file {
        Some(text) => RunConfig::from_kv(text)?,
        None => RunConfig::defaults(flag_mode.unwrap_or(Mode::Scratch)),
    };
    if let Some(m) = flag_mode.filter(|&m| m != cfg.mode) {
        return Err(Failure::Usage(format!("--mode {m} conflicts with mode {} in the config file", cfg.mode)));
    }
    if run.reduced {
        cfg.reduced = true;
    }
    if let Some(v) = run.epochs {
        cfg.epochs = v as usize;
    }
    if let Some(v) = run.batch_size {
        cfg.batch_size = v as usize;
    }
    if let Some(v) = run.lr {
        cfg.lr = v;
    }
    if let Some(v) = &run.class_weights {
        cfg.set("class_weights", v)?;
    }
    if let Some(v) = run.seed {
        cfg.seed = v;
    }
    if let Some(p) = &run.manifest {
        cfg.manifest = Some(p.clone());
    }
    if let Some(p) = &run.out {
        cfg.report_dir = Some(p.clone());
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig) -> CliResult<(PathBuf, PathBuf)> {
    cfg.validate()?;
    let manifest = cfg.manifest.clone().ok_or_else(|| Failure::Usage("--manifest is required".into()))?;
    let out = cfg.report_dir.clone().ok_or_else(|| Failure::Usage("--out is required".into()))?;
    create_dir(&out)?;
    Ok((manifest, out))
}

fn read_archive(path: &Path) -> CliResult<WeightArchive> {
    Ok(WeightArchive::read(path)?)
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let base = if a.reduced { SynthConfig::reduced() } else { SynthConfig::default() };
    let cfg = SynthConfig { seed: a.seed, ..base };
    let patients = a.patients.unwrap_or_else(|| a.glaucoma.max(a.normal).div_ceil(2)) as usize;
    let corpus = generate_dataset(&cfg, a.glaucoma as usize, a.normal as usize, patients, &a.out)?;
    let mut echo = String::new();
    for (k, v) in [
        ("glaucoma", a.glaucoma.to_string()),
        ("normal", a.normal.to_string()),
        ("patients", patients.to_string()),
        ("seed", a.seed.to_string()),
        ("height", cfg.height.to_string()),
        ("width", cfg.width.to_string()),
        ("glaucoma_thickness", format!("{},{}", cfg.glaucoma_thickness.0, cfg.glaucoma_thickness.1)),
        ("normal_thickness", format!("{},{}", cfg.normal_thickness.0, cfg.normal_thickness.1)),
        ("noise", cfg.noise.to_string()),
    ] {
        let _ = writeln!(echo, "{k}={v}");
    }
    write(&a.out.join("config.txt"), &echo)?;
    let (g, n) = corpus.dataset.class_counts();
    println!(
        "wrote {} images ({g} glaucoma, {n} normal, {patients} patients per class) at {}×{} to {}",
        g + n,
        cfg.height,
        cfg.width,
        a.out.display()
    );
    Ok(())
}

/// Writes a manifest listing `ids` from `d` with absolute image paths.
fn write_subset_manifest(path: &Path, source: &Path, ids: &[String]) -> CliResult<()> {
    let keep: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    let rows: Vec<ManifestRow> = read_manifest(source)?
        .into_iter()
        .filter(|r| keep.contains(r.sample_id.as_str()))
        .map(|mut r| {
            r.path = std::path::absolute(&r.path).unwrap_or(r.path);
            r
        })
        .collect();
    Ok(write_manifest(path, &rows)?)
}

fn load(manifest: &Path) -> CliResult<Dataset> {
    let d = load_dataset(manifest)?;
    if d.is_empty() {
        return Err(Failure::Lib(Error::Config(format!("manifest {} lists no samples", manifest.display()))));
    }
    Ok(d)
}

fn cmd_train(a: TrainArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg = resolve(&a.run, config)?;
    if let Some(f) = a.augment {
        cfg.augment = f;
    }
    if let Some(w) = a.weights {
        cfg.weights_in = Some(w);
    }
    let (manifest, out) = finish(&cfg)?;
    cfg.weights_out = Some(out.join("weights.cwt"));
    let d = load(&manifest)?;
    let plan = plan_splits(&cfg, &d)?;
    write_subset_manifest(&out.join("train_manifest.csv"), &manifest, &plan.train)?;
    write_subset_manifest(&out.join("test_manifest.csv"), &manifest, &plan.test)?;

    let pretrained = cfg.weights_in.as_deref().map(read_archive).transpose()?;
    if cfg.mode.is_vgg() && pretrained.is_none() {
        eprintln!("warning: no --weights given; the {} base starts from random initialization", cfg.mode);
    }
    eprintln!(
        "mode={} lr={} epochs={} batch={}{} input={:?} train={} test={}",
        cfg.mode,
        cfg.lr,
        cfg.epochs,
        cfg.batch_size,
        if cfg.mode.is_vgg() { format!(" dropout={}", glaucoma_cnn::model::VGG_TOP_DROPOUT) } else { String::new() },
        cfg.input_shape(),
        plan.train.len(),
        plan.test.len()
    );
    write(&out.join("config.txt"), &cfg.to_kv())?;
    let mut state = init_model(&cfg, pretrained.as_ref())?;
    let trace = train(&cfg, &mut state, &d.subset(&plan.train), |r, _| {
        eprintln!("epoch {:>4}  loss {:.6}  acc {:.4}", r.epoch, r.loss, r.accuracy);
    })?;
    save_weights(&state).write(&out.join("weights.cwt"))?;
    write(&out.join("trace.csv"), &trace_csv(&trace))?;
    println!("weights written to {}", out.join("weights.cwt").display());
    Ok(())
}

fn write_evaluation(dir: &Path, ev: &Evaluation, ids: &[String]) -> CliResult<()> {
    create_dir(dir)?;
    write(&dir.join("metrics.csv"), &ev.report.to_csv())?;
    let mut text = ev.report.to_text();
    match &ev.roc {
        Some(roc) => write(&dir.join("roc.csv"), &roc.to_csv())?,
        None => text.push_str("note: AUC is undefined because the set holds a single class\n"),
    }
    write(&dir.join("metrics.txt"), &text)?;
    let mut scores = String::from("sample_id,label,score\n");
    for ((id, l), s) in ids.iter().zip(&ev.labels).zip(&ev.scores) {
        let _ = writeln!(scores, "{id},{l},{s}");
    }
    write(&dir.join("scores.csv"), &scores)
}

fn cmd_evaluate(a: EvalArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg = resolve(&a.run, config)?;
    // a training run's config points at the weights it produced
    cfg.weights_in = a.weights.or(cfg.weights_out.take()).or(cfg.weights_in.take());
    let (manifest, out) = finish(&cfg)?;
    let weights = cfg.weights_in.clone().ok_or_else(|| Failure::Usage("--weights is required".into()))?;
    let spec = cfg.model_spec()?;
    let state = load_weights(&spec, &read_archive(&weights)?, true, &mut SeededRng::new(0))?;
    let d = load(&manifest)?;
    let ev = evaluate(&state, &d)?;
    write_evaluation(&out, &ev, &d.ids())?;
    write(&out.join("config.txt"), &cfg.to_kv())?;
    if ev.roc.is_none() {
        eprintln!("note: AUC is undefined because the set holds a single class");
    }
    print!("{}", ev.report.to_text());
    Ok(())
}

fn run_crossval(
    cfg: &RunConfig,
    d: &Dataset,
    out: &Path,
    pretrained: Option<&WeightArchive>,
) -> CliResult<CrossValidation> {
    let plan = plan_splits(cfg, d)?;
    let mut failure = None;
    let cv = cross_validate(cfg, d, &plan, pretrained, |i, ev| {
        let show = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
        eprintln!("fold {}: AUC {} ACC {}", i + 1, show(ev.report.auc), show(ev.report.acc));
        if let Err(e) = write_evaluation(&out.join(format!("fold{}", i + 1)), ev, &plan.folds[i].validation) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    write(&out.join("aggregate.csv"), &cv.aggregate.to_csv())?;
    write(&out.join("aggregate.txt"), &cv.aggregate.to_text())?;
    write(&out.join("config.txt"), &cfg.to_kv())?;
    Ok(cv)
}

fn cmd_crossval(a: CrossvalArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg = resolve(&a.run, config)?;
    if let Some(k) = a.folds {
        cfg.folds = k;
    }
    if let Some(w) = a.weights {
        cfg.weights_in = Some(w);
    }
    if let Some(f) = a.with_da {
        cfg.augment = f;
    }
    let (manifest, out) = finish(&cfg)?;
    let d = load(&manifest)?;
    let pretrained = cfg.weights_in.as_deref().map(read_archive).transpose()?;
    if a.compare_da {
        let plain = RunConfig { augment: 0.0, ..cfg.clone() };
        let da = RunConfig { augment: COMPARE_DA_FACTOR, ..cfg.clone() };
        let cv0 = run_crossval(&plain, &d, &out.join("without_da"), pretrained.as_ref())?;
        let cv1 = run_crossval(&da, &d, &out.join("with_da"), pretrained.as_ref())?;
        let table = comparison_table(&[("Without DA", &cv0.aggregate), ("With DA", &cv1.aggregate)]);
        write(&out.join("comparison.txt"), &table)?;
        print!("{table}");
    } else {
        let cv = run_crossval(&cfg, &d, &out, pretrained.as_ref())?;
        print!("{}", cv.aggregate.to_text());
    }
    Ok(())
}

fn cmd_cam(a: CamArgs, config: Option<&Path>) -> CliResult<()> {
    let mut cfg = resolve(&a.run, config)?;
    // a training run's config points at the weights it produced
    cfg.weights_in = a.weights.or(cfg.weights_out.take()).or(cfg.weights_in.take());
    let (manifest, out) = finish(&cfg)?;
    let weights = cfg.weights_in.clone().ok_or_else(|| Failure::Usage("--weights is required".into()))?;
    let classes = a
        .classes
        .iter()
        .map(|c| c.parse::<Label>().map_err(|e| Failure::Usage(e.to_string())))
        .collect::<CliResult<Vec<_>>>()?;
    let state = load_weights(&cfg.model_spec()?, &read_archive(&weights)?, true, &mut SeededRng::new(0))?;
    let d = load(&manifest)?;
    let dataset_dir = manifest.parent().unwrap_or(Path::new("."));
    let mut sidecar = String::from("sample_id,label,class,inside_outside_ratio\n");
    for id in &a.samples {
        let s = d.get(id).ok_or_else(|| Error::Lookup(id.clone()))?;
        let (h, w, _) = s.image.hwc()?;
        let x = to_model_input(&s.image, state.spec.input)?;
        let mask_file = mask_path(dataset_dir, id);
        let mask = if mask_file.is_file() { Some(read_gray_image(&mask_file)?) } else { None };
        for &class in &classes {
            let cam = compute_cam(&state, &x, class)?;
            // shown at the source image's extents
            let map = bilinear_resize(&cam.map, h, w)?.map(|v| v.clamp(0.0, 1.0));
            let cam = CamMap { map, sample_id: id.clone(), ..cam };
            let files = export_heatmap(&cam, &s.image, &out)?;
            eprintln!("{} {}", files.raw.display(), files.overlay.display());
            if let Some(m) = &mask {
                let r = inside_outside_ratio(&cam.map, m)?;
                let _ = writeln!(sidecar, "{id},{},{class},{r:.4}", s.label);
            }
        }
    }
    if sidecar.lines().count() > 1 {
        write(&out.join("localization.csv"), &sidecar)?;
    }
    write(&out.join("config.txt"), &cfg.to_kv())?;
    Ok(())
}

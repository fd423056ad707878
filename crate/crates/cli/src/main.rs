use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use fginet::bmfe::{expand_mask, sample_mask, MaskSpec, NUM_BANDS};
use fginet::data::{self, load_ppm, read_manifest, read_split, DatasetSpec, Family, Sample, Split};
use fginet::train::experiments::{ablation_csv, run_ablation, run_rho_sweep, sweep_csv, RHO_GRID};
use fginet::train::{
    evaluate, load_model, score, train, write_gates_csv, write_logits_csv, write_run_outputs, EvalMetrics, RunConfig,
};
use fginet::verify::{run_suite, Faults, SUITES};
use fginet::wavelet::dwt2;
use fginet::{Purpose, Rng};

#[derive(Parser)]
#[command(name = "fginet", version, about = "Frequency-guided synthetic image detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic real/fake dataset as PPM files plus manifest.json.
    Synth(SynthArgs),
    /// Train a model and write checkpoints, metrics.json and gates.csv.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset's evaluation split.
    Eval(EvalArgs),
    /// Dump the injection gate of every layer to gates.csv.
    Gates(CkptOut),
    /// Dump per-sample logits to logits.csv.
    Logits(EvalArgs),
    /// Train over the mask-ratio grid and write sweep.csv.
    SweepRho(SweepArgs),
    /// Train each listed variant and write ablation.csv.
    Ablation(AblationArgs),
    /// Dump the Haar sub-bands of one image.
    Dwt(DwtArgs),
    /// Sample one band mask and dump it.
    MaskDemo(MaskArgs),
    /// Run the invariant suites; exit status 0 iff all pass.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Evaluation fake families.
    #[arg(long, value_delimiter = ',', default_value = "A,B")]
    families: Vec<Family>,
    #[arg(long, default_value = "A")]
    train_family: Family,
    /// Samples per class in the training split.
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    /// Samples per class (and per family) in the evaluation split.
    #[arg(long, default_value_t = 500)]
    n_eval: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    amplitude: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON config: a full run config, or a flat object of dotted keys
    /// applied on top of the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base hyperparameters: toy, desk or full-scale.
    #[arg(long, default_value = "toy")]
    preset: String,
    /// Override as key=value, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory; generated in memory from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root or its `eval` directory.
    #[arg(long)]
    data: PathBuf,
    /// Restrict fakes to one family; default scores each family separately.
    #[arg(long)]
    family: Option<Family>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CkptOut {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_value = "baseline,+bmfe,+lgfi,+bmfe+lgfi,full")]
    variants: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DwtArgs {
    /// PPM image; a generated real image is used when absent.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, default_value_t = 0.4)]
    rho: f64,
    #[arg(long, default_value_t = 8)]
    patch: usize,
    /// Side of each high-frequency band.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run only these suites.
    #[arg(long, value_delimiter = ',', value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
    suite: Vec<String>,
    /// Fault injection: scale every Haar sub-band before reconstruction.
    #[arg(long)]
    fault_haar_scale: Option<f64>,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("FGINET_SEED") {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("FGINET_SEED '{s}' is not an integer"))?)),
        Err(_) => Ok(None),
    }
}

fn seed_or_env(seed: Option<u64>) -> Result<Option<u64>> {
    Ok(match seed {
        Some(s) => Some(s),
        None => env_seed()?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    write(path, &serde_json::to_string_pretty(v)?)
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::preset(&self.preset)?;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            cfg = match RunConfig::from_value(v.clone()) {
                Ok(c) => c,
                Err(_) => {
                    let Value::Object(map) = v else {
                        bail!("{}: config must be a JSON object", path.display());
                    };
                    let pairs: Vec<String> = map.iter().map(|(k, v)| format!("{k}={v}")).collect();
                    cfg.with_overrides(&pairs)?
                }
            };
        }
        cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(seed) = seed_or_env(self.seed)? {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_train: a.n_train,
        n_eval: a.n_eval,
        image_size: a.size,
        train_family: a.train_family,
        eval_families: a.families.clone(),
        amplitude: a.amplitude,
        seed: seed_or_env(a.seed)?.unwrap_or(0),
    };
    let m = data::write_dataset(&a.out, &spec)?;
    write_json(&a.out.join("config.json"), &serde_json::to_value(&spec)?)?;
    println!(
        "wrote {} files to {}: train {} real / {} fake, eval {} real / {} fake",
        m.files.len(),
        a.out.display(),
        m.count(Split::Train, data::REAL),
        m.count(Split::Train, data::FAKE),
        m.count(Split::Eval, data::REAL),
        m.count(Split::Eval, data::FAKE),
    );
    Ok(())
}

/// Accepts either a dataset root or its `eval` subdirectory.
fn dataset_root(path: &Path) -> PathBuf {
    if !path.join(data::MANIFEST).exists() && path.file_name().is_some_and(|n| n == "eval") {
        if let Some(parent) = path.parent() {
            return parent.to_path_buf();
        }
    }
    path.to_path_buf()
}

/// Named evaluation sets: one per family, each with the shared reals.
fn eval_sets(root: &Path, families: &[Family]) -> Result<Vec<(String, Vec<Sample>)>> {
    families
        .iter()
        .map(|&f| Ok((format!("eval-{f}"), read_split(root, Split::Eval, Some(f))?)))
        .collect()
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (train_set, evals) = match &a.data {
        Some(dir) => {
            let root = dataset_root(dir);
            let manifest = read_manifest(&root)?;
            if manifest.spec.image_size != cfg.model.image_size {
                bail!(
                    "dataset image size {} differs from model image size {}",
                    manifest.spec.image_size,
                    cfg.model.image_size
                );
            }
            (read_split(&root, Split::Train, None)?, eval_sets(&root, &manifest.spec.eval_families)?)
        }
        None => {
            let evals = cfg
                .data
                .eval_families
                .iter()
                .map(|&f| Ok((format!("eval-{f}"), cfg.data.eval_set(f)?)))
                .collect::<Result<Vec<_>>>()?;
            (cfg.data.train_set()?, evals)
        }
    };
    let refs: Vec<(&str, &[Sample])> = evals.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    let run = train(&cfg, &train_set, &refs, Some(&a.out))?;
    write_run_outputs(&a.out, &run)?;
    for e in &run.report.eval {
        println!("{}: accuracy {:.4}, AP {:.4}", e.name, e.accuracy, e.average_precision);
    }
    println!("{} steps, {:.1} s, outputs in {}", run.report.steps, run.wall_clock_secs, a.out.display());
    Ok(())
}

fn out_dir(out: &Option<PathBuf>, ckpt: &Path) -> PathBuf {
    out.clone()
        .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")))
}

fn eval_families(a: &EvalArgs, root: &Path) -> Result<Vec<Family>> {
    Ok(match a.family {
        Some(f) => vec![f],
        None => read_manifest(root)?.spec.eval_families,
    })
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, model, store) = load_model(&a.ckpt)?;
    let root = dataset_root(&a.data);
    let sets = eval_sets(&root, &eval_families(a, &root)?)?;
    let metrics = sets
        .iter()
        .map(|(name, set)| evaluate(&model, &store, name, set, cfg.batch_size, cfg.precision))
        .collect::<Result<Vec<EvalMetrics>, _>>()?;
    for m in &metrics {
        println!("{}: n {}, accuracy {:.4}, AP {:.4}", m.name, m.n, m.accuracy, m.average_precision);
    }
    let dir = out_dir(&a.out, &a.ckpt);
    write_json(&dir.join("config.json"), &cfg.to_value())?;
    write_json(
        &dir.join("metrics.json"),
        &json!({ "checkpoint": a.ckpt.display().to_string(), "eval": metrics }),
    )
}

fn cmd_gates(a: &CkptOut) -> Result<()> {
    let (cfg, model, store) = load_model(&a.ckpt)?;
    let mut gates = model.gate_values(&store);
    if gates.is_empty() {
        gates = vec![0.0; cfg.model.depth];
    }
    let dir = out_dir(&a.out, &a.ckpt);
    write_gates_csv(&dir.join("gates.csv"), &gates)?;
    write_json(&dir.join("config.json"), &cfg.to_value())?;
    for (l, g) in gates.iter().enumerate() {
        println!("layer {l}: {g:.6}");
    }
    Ok(())
}

fn cmd_logits(a: &EvalArgs) -> Result<()> {
    let (cfg, model, store) = load_model(&a.ckpt)?;
    let root = dataset_root(&a.data);
    let samples = match a.family {
        Some(f) => read_split(&root, Split::Eval, Some(f))?,
        None => read_split(&root, Split::Eval, None)?,
    };
    let scored = score(&model, &store, &samples, cfg.batch_size, cfg.precision)?;
    let dir = out_dir(&a.out, &a.ckpt);
    write_logits_csv(&dir.join("logits.csv"), &scored)?;
    write_json(&dir.join("config.json"), &cfg.to_value())?;
    println!("{} rows in {}", scored.len(), dir.join("logits.csv").display());
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let rows = run_rho_sweep(&cfg, &RHO_GRID, &a.seeds)?;
    write(&a.out.join("sweep.csv"), &sweep_csv(&rows))?;
    write_json(&a.out.join("config.json"), &json!({ "run": cfg.to_value(), "seeds": a.seeds }))?;
    print!("{}", sweep_csv(&rows));
    Ok(())
}

fn cmd_ablation(a: &AblationArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let ids: Vec<&str> = a.variants.iter().map(String::as_str).collect();
    let rows = run_ablation(&cfg, &ids)?;
    write(&a.out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_json(&a.out.join("config.json"), &json!({ "run": cfg.to_value(), "variants": a.variants }))?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn cmd_dwt(a: &DwtArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?.unwrap_or(0);
    let image = match &a.image {
        Some(p) => load_ppm(p)?,
        None => data::gen_real(seed, 0, a.size)?.image,
    };
    let bands = dwt2(&image)?;
    let mut csv = String::from("band,channel,row,col,value\n");
    for (name, t) in [("LL", &bands.ll), ("LH", &bands.lh), ("HL", &bands.hl), ("HH", &bands.hh)] {
        let [c, h, w] = t.shape()[..] else { unreachable!("sub-bands are [C, H, W]") };
        for (i, v) in t.data().iter().enumerate() {
            writeln!(csv, "{name},{},{},{},{v}", i / (h * w), (i / w) % h, i % w)?;
        }
        println!("{name}: {c}x{h}x{w}, energy {:.6}", t.sq_norm());
    }
    write(&a.out.join("bands.csv"), &csv)?;
    write_json(
        &a.out.join("config.json"),
        &json!({ "image": a.image.as_ref().map(|p| p.display().to_string()), "size": a.size, "seed": seed }),
    )
}

fn cmd_mask_demo(a: &MaskArgs) -> Result<()> {
    let seed = seed_or_env(a.seed)?.unwrap_or(0);
    let spec = MaskSpec::new(a.rho, a.patch, a.size, a.size)?;
    let mask = sample_mask(&spec, &mut Rng::stream(seed, 0, 0, Purpose::Mask));
    let (gh, gw) = spec.grid;
    let mut csv = String::from("band,row,col,keep\n");
    for (i, v) in mask.m.data().iter().enumerate() {
        writeln!(csv, "{},{},{},{v}", i / (gh * gw), (i / gw) % gh, i % gw)?;
    }
    write(&a.out.join("mask.csv"), &csv)?;
    let up = expand_mask(&mask, &spec, 1);
    let mut pixels = String::from("band,row,col,keep\n");
    let s = a.size;
    for (i, v) in up.data().iter().enumerate() {
        writeln!(pixels, "{},{},{},{v}", i / (s * s), (i / s) % s, i % s)?;
    }
    write(&a.out.join("mask_pixels.csv"), &pixels)?;
    write_json(
        &a.out.join("config.json"),
        &json!({ "rho": a.rho, "patch": a.patch, "size": a.size, "seed": seed }),
    )?;
    println!(
        "{NUM_BANDS} bands of {gh}x{gw} cells, keep rate {:.4} (expected {:.4})",
        mask.keep_rate(),
        1.0 - a.rho
    );
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    let faults = Faults {
        haar_scale: a.fault_haar_scale,
    };
    let names: Vec<&str> = if a.suite.is_empty() {
        SUITES.to_vec()
    } else {
        a.suite.iter().map(String::as_str).collect()
    };
    let mut all = true;
    for name in names {
        let r = run_suite(name, faults).expect("suite names are validated by the parser");
        println!(
            "[{}] {:<10} {:>8.3} s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
        all &= r.passed;
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Synth(a) => cmd_synth(&a)?,
        Command::Train(a) => cmd_train(&a)?,
        Command::Eval(a) => cmd_eval(&a)?,
        Command::Gates(a) => cmd_gates(&a)?,
        Command::Logits(a) => cmd_logits(&a)?,
        Command::SweepRho(a) => cmd_sweep(&a)?,
        Command::Ablation(a) => cmd_ablation(&a)?,
        Command::Dwt(a) => cmd_dwt(&a)?,
        Command::MaskDemo(a) => cmd_mask_demo(&a)?,
        Command::Verify(a) => return cmd_verify(&a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

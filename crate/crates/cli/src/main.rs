//! `textood`: mine labels, generate scenes, train, evaluate, ablate and tabulate.
//!
//! Exit codes: 0 success, 2 usage, 3 data or config, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use textood::config::{RunConfig, SEED_ENV};
use textood::pipeline::{self, Checkpoint, EvalReport, MinedFile, Split};
use textood::synthio::{generate, load_dataset, save_dataset, Dataset, SceneRecipe};
use textood::{Error, Result};

#[derive(Parser)]
#[command(name = "textood", version, about = "Text-driven OOD segmentation experiments")]
struct Cli {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum ScoreFrom {
    Model,
    Gt,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Components,
    SaaLayers,
    Lambda,
    Queries,
}

#[derive(Subcommand)]
enum Command {
    /// Mine outlier labels from the corpus and group them by distance.
    Mine {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a scene set.
    GenData {
        /// Recipe file; defaults to the config's recipe for `--split`.
        #[arg(long)]
        recipe: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
        /// Scene count; defaults to data.train_n or data.eval_n.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, the loss history and the resolved config.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mined: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for `--set train.iterations=N`.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Evaluate a checkpoint (or ground-truth scores) on a scene set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "model")]
        score_from: ScoreFrom,
        /// Dataset name in reports; defaults to the data file stem.
        #[arg(long)]
        name: Option<String>,
        /// Evaluate even if checkpoint and dataset come from different configs.
        #[arg(long)]
        force: bool,
    },
    /// Train and evaluate every variant of an ablation axis over several seeds.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate evaluation reports with a macro average row.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        4
    } else {
        3
    }
}

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let env = std::env::var(SEED_ENV).ok();
    RunConfig::resolve(args.config.as_deref(), &args.set, env.as_deref())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write(&dir.join("config.txt"), format!("# config_hash={}\n{}", cfg.hash(), cfg.to_text()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Mine { out } => mine(&resolve(&cli.cfg)?, &out),
        Command::GenData { recipe, split, n, out } => gen_data(&resolve(&cli.cfg)?, recipe.as_deref(), split, n, &out),
        Command::Train { data, mined, out, iterations } => {
            let mut args = cli.cfg;
            if let Some(n) = iterations {
                args.set.push(format!("train.iterations={n}"));
            }
            train(&resolve(&args)?, &data, &mined, &out)
        }
        Command::Eval { checkpoint, data, out, score_from, name, force } => {
            eval(&cli.cfg, checkpoint.as_deref(), &data, &out, score_from, name, force)
        }
        Command::Ablate { axis, seeds, out } => ablate(&resolve(&cli.cfg)?, axis, &seeds, &out),
        Command::Report { reports, out } => report(&reports, out.as_deref()),
    }
}

fn mine(cfg: &RunConfig, out: &Path) -> Result<()> {
    let corpus = pipeline::load_corpus(cfg)?;
    let mined = pipeline::mine(cfg, &corpus)?;
    let file = MinedFile { config_hash: cfg.hash(), m: cfg.mine.labels, n: cfg.mine.groups, mined: mined.labels() };
    file.save(out)?;
    println!("mined {} labels from {} tokens into {} groups", mined.ood.labels.len(), corpus.len(), mined.groups.len());
    for (i, (size, g)) in mined.histogram().iter().zip(&file.mined.groups).enumerate() {
        println!("group {i}: {size:>3} {}", "#".repeat(*size));
        let preview: Vec<&str> = g.iter().take(4).map(String::as_str).collect();
        println!("          {}", preview.join(", "));
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig, recipe: Option<&Path>, split: SplitArg, n: Option<usize>, out: &Path) -> Result<()> {
    let (split, default_n) = match split {
        SplitArg::Train => (Split::Train, cfg.data.train_n),
        SplitArg::Eval => (Split::Eval, cfg.data.eval_n),
    };
    let recipe = match recipe {
        Some(p) => SceneRecipe::from_text(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => pipeline::recipe(cfg, split),
    };
    let n = n.unwrap_or(default_n);
    let ds = Dataset::new(recipe.num_classes(), cfg.hash(), generate(&recipe, n)?)?;
    save_dataset(out, &ds)?;
    let ood: usize = ds.scenes.iter().map(|s| s.ood_pixels()).sum();
    println!(
        "{} scenes of {}x{}, {:.2}% outlier pixels, config {}",
        n,
        ds.height,
        ds.width,
        100.0 * ood as f64 / (n * ds.height * ds.width).max(1) as f64,
        cfg.short_hash()
    );
    Ok(())
}

fn train(cfg: &RunConfig, data: &Path, mined: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    if ds.config_hash != cfg.hash() {
        eprintln!("note: dataset was generated under config {}, training under {}", &ds.config_hash[..12.min(ds.config_hash.len())], cfg.short_hash());
    }
    let corpus = pipeline::load_corpus(cfg)?;
    let file = MinedFile::load(mined)?;
    let space = pipeline::text_space(cfg, &corpus)?;
    let mined = pipeline::mined_from_labels(&space, &file.mined)?;
    if mined.groups.len() != cfg.mine.groups {
        return Err(Error::Config(format!("mined file has {} groups, config asks for mine.n = {}", mined.groups.len(), cfg.mine.groups)));
    }
    mkdir(out)?;
    echo_config(out, cfg)?;
    let hash = cfg.hash();
    let mut t = pipeline::trainer(cfg, pipeline::build_model(cfg, &corpus, &mined)?)?;
    let iterations = cfg.train.iterations;
    let every = cfg.checkpoint_every;
    let started = Instant::now();
    let mut history = Vec::with_capacity(iterations);
    let mut failure = None;
    for _ in 0..iterations {
        match t.step(&ds.scenes) {
            Ok(rec) => {
                let step = rec.step + 1;
                if step % 50 == 0 || step == iterations {
                    eprintln!(
                        "step {step}/{iterations} loss {:.4} seg {:.4} L_V {:.2e} L_VL {:.4} ({:.0} s)",
                        rec.total,
                        rec.seg,
                        rec.l_v,
                        rec.l_vl,
                        started.elapsed().as_secs_f64()
                    );
                }
                history.push(rec);
                if every > 0 && step % every == 0 && step < iterations {
                    Checkpoint::from_trainer(cfg, &t).save(&out.join(format!("checkpoint-{step}.tdos")))?;
                }
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    // on divergence the trainer still holds the last good parameters
    Checkpoint::from_trainer(cfg, &t).save(&out.join("last.tdos"))?;
    write(&out.join("losses.csv"), pipeline::losses_csv(&hash, &history))?;
    if let Some(e) = failure {
        eprintln!("kept last good checkpoint at step {}", t.steps());
        return Err(e);
    }
    println!("trained {} steps in {:.1} s, config {}", t.steps(), started.elapsed().as_secs_f64(), cfg.short_hash());
    Ok(())
}

fn eval(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    data: &Path,
    out: &Path,
    score_from: ScoreFrom,
    name: Option<String>,
    force: bool,
) -> Result<()> {
    let ds = load_dataset(data)?;
    let name = name.unwrap_or_else(|| data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into()));
    let (cfg, ck) = match checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let mut cfg = ck.config()?;
            if let Some(f) = &args.config {
                let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
                cfg.apply_text(&text)?;
            }
            for o in &args.set {
                cfg.apply_override(o)?;
            }
            cfg.validate()?;
            if ck.config_hash != ds.config_hash && !force {
                return Err(Error::Config(format!(
                    "checkpoint config {} does not match dataset config {} (use --force to evaluate anyway)",
                    ck.config_hash, ds.config_hash
                )));
            }
            (cfg, Some(ck))
        }
        None if score_from == ScoreFrom::Gt => (resolve(args)?, None),
        None => return Err(Error::InvalidArgument("--checkpoint is required unless --score-from gt".into())),
    };
    let (maps, hash, step, source) = match score_from {
        ScoreFrom::Gt => (pipeline::ground_truth_maps(&ds), ds.config_hash.clone(), None, "gt"),
        ScoreFrom::Model => {
            let ck = ck.expect("checked above");
            let model = ck.model()?;
            (pipeline::model_maps(&model, &ds, &cfg)?, ck.config_hash.clone(), Some(ck.meta.step), "model")
        }
    };
    let ev = pipeline::evaluate_maps(&maps, &ds, &name, cfg.eval.thresholds)?;
    mkdir(out)?;
    let rep = EvalReport::new(&hash, &name, source, step, &ev);
    let (pr, th) = pipeline::curves_csv(&hash, &ev);
    write(&out.join("eval.json"), pipeline::eval_json(&rep))?;
    write(&out.join("metrics.csv"), pipeline::metrics_csv(&hash, &[(name.clone(), ev.row)]))?;
    write(&out.join("pr_curve.csv"), pr)?;
    write(&out.join("iou_curve.csv"), th)?;
    write(&out.join("pr.svg"), pipeline::pr_svg(&hash, &ev))?;
    write(&out.join("iou.svg"), pipeline::iou_svg(&hash, &ev))?;
    print!("{}", pipeline::summary_table(&[(name, ev.row)]));
    Ok(())
}

fn ablate(cfg: &RunConfig, axis: AxisArg, seeds: &[u64], out: &Path) -> Result<()> {
    let axis = match axis {
        AxisArg::Components => pipeline::AblationAxis::Components,
        AxisArg::SaaLayers => pipeline::AblationAxis::SaaLayers,
        AxisArg::Lambda => pipeline::AblationAxis::Lambda,
        AxisArg::Queries => pipeline::AblationAxis::Queries,
    };
    let corpus = pipeline::load_corpus(cfg)?;
    mkdir(out)?;
    echo_config(out, cfg)?;
    let started = Instant::now();
    let table = pipeline::ablate(cfg, &corpus, axis, seeds, |v, seed, _, ev| {
        eprintln!(
            "{} seed {seed}: AuPRC {:.4} FPR95 {:.4} mean F1 {:.4} ({:.0} s)",
            v.name,
            ev.row.auprc,
            ev.row.fpr95,
            ev.row.mean_f1,
            started.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let hash = cfg.hash();
    let text = table.render(&hash);
    write(&out.join(format!("ablation-{}.txt", axis.name())), &text)?;
    write(&out.join(format!("ablation-{}.csv", axis.name())), table.to_csv(&hash))?;
    print!("{text}");
    Ok(())
}

fn report(paths: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    let mut hashes = Vec::new();
    for p in paths {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let rep: EvalReport = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if !hashes.contains(&rep.config_hash) {
            hashes.push(rep.config_hash.clone());
        }
        rows.push((rep.dataset, rep.metrics));
    }
    let text = format!("# config_hash={}\n{}", hashes.join(","), pipeline::summary_table(&rows));
    match out {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

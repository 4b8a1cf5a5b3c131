//! Config-driven command-line front end: generate data, run the three
//! training stages, evaluate checkpoints, sweep ablation grids, and merge
//! run metrics into comparison tables.
//!
//! Every command exits 0 on success and 1 with a single `error: …` line on
//! stderr otherwise. Output directories are only reused under `--force`.
//! All artifacts are written atomically (write-then-rename), so a run
//! directory never holds partial CSVs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use rlbind::config::{parse_config, parse_config_file, parse_dataset_spec, ExperimentConfig};
use rlbind::checkpoint::write_atomic;
use rlbind::data::{self, Dataset};
use rlbind::error::Error;
use rlbind::pipeline::{
    evaluate, load_model, prepare_loaded, run_ablation_grid, save_model, stage0_pretrain,
    stage1_fare, stage2_align, write_metrics, Model, PreparedData, TrainLog, CSV_HEADER,
};
use rlbind::report::report_dirs;
use rlbind::Result;

#[derive(Parser)]
#[command(
    name = "rlbind",
    version,
    about = "Two-stage adversarial-invariant cross-modal alignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a deterministic synthetic multi-modal dataset directory.
    GenData {
        /// Dataset spec (TOML: classes, modalities, noise, …)
        #[arg(long)]
        spec: PathBuf,
        /// Generation seed; overrides a `seed` key in the spec file
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset directory
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Stage 0: pretrain modality encoders against the frozen anchors.
    Pretrain(StageArgs),
    /// Stage 1: unsupervised adversarial hardening of a stage-0 model.
    Stage1(StageArgs),
    /// Stage 2: adversarial-invariant alignment fine-tuning.
    Stage2(StageArgs),
    /// Measure clean and robust accuracy of a saved model.
    Eval {
        /// Model checkpoint to evaluate
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated ε list (e.g. 2/255,4/255); overrides the config
        #[arg(long)]
        epsilons: Option<String>,
        /// Experiment config (TOML); defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key (KEY.PATH=VALUE, repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output run directory
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Run the Cartesian ablation grid over scorer/alignment/lora/lambda.
    Ablate {
        /// Base experiment config (TOML)
        #[arg(long)]
        config: PathBuf,
        /// Axis values, e.g. --axes scorer=dot,cosine --axes alignment=l1,l2,kl
        #[arg(long = "axes", value_name = "AXIS=V1,V2,...")]
        axes: Vec<String>,
        /// Override a config key (KEY.PATH=VALUE, repeatable)
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output grid directory
        #[arg(long)]
        out: PathBuf,
        /// Write into an existing non-empty output directory
        #[arg(long)]
        force: bool,
    },
    /// Merge run metrics into a comparison table (first run = baseline).
    Report {
        /// Run directories containing metrics.csv
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write report.csv / report.txt / report.dat here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write into an existing non-empty output directory
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint to initialize from (stage1/stage2 only)
    #[arg(long)]
    init: Option<PathBuf>,
    /// Override a config key (KEY.PATH=VALUE, repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output run directory
    #[arg(long)]
    out: PathBuf,
    /// Write into an existing non-empty output directory
    #[arg(long)]
    force: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        // one line, machine-parseable
        eprintln!("error: {}", e.to_string().replace('\n', "; "));
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, seed, out, force } => gen_data(&spec, seed, &out, force),
        Cmd::Pretrain(args) => run_stage(Stage::Pretrain, &args),
        Cmd::Stage1(args) => run_stage(Stage::One, &args),
        Cmd::Stage2(args) => run_stage(Stage::Two, &args),
        Cmd::Eval { ckpt, data, epsilons, config, set, out, force } => {
            eval_cmd(&ckpt, &data, epsilons.as_deref(), config.as_deref(), &set, &out, force)
        }
        Cmd::Ablate { config, axes, set, out, force } => {
            ablate_cmd(&config, &axes, &set, &out, force)
        }
        Cmd::Report { dirs, out, force } => report_cmd(&dirs, out.as_deref(), force),
    }
}

/// Refuse to write into an existing non-empty directory unless forced.
fn ensure_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "output path {} exists and is not a directory",
                dir.display()
            )));
        }
        if std::fs::read_dir(dir)?.next().is_some() && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} already exists and is not empty; pass --force to reuse it",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn gen_data(spec_path: &Path, seed_flag: Option<u64>, out: &Path, force: bool) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)?;
    let (spec, file_seed) = parse_dataset_spec(&text)?;
    let seed = seed_flag.or(file_seed).unwrap_or(7);
    ensure_out(out, force)?;
    let ds = data::generate(&spec, seed)?;
    ds.save(out)?;
    println!(
        "dataset: {} classes x {} samples, {} modalities, seed {seed} -> {}",
        spec.n_classes,
        spec.samples_per_class,
        spec.modalities.len(),
        out.display()
    );
    Ok(())
}

enum Stage {
    Pretrain,
    One,
    Two,
}

/// The loaded model must fit the dataset it is asked to train or evaluate
/// on; mismatches are config errors, not shape panics deep in a batch.
fn check_model_data_compat(model: &Model, ds: &Dataset) -> Result<()> {
    if model.modalities.len() != ds.spec.modalities.len() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} modalities but the dataset has {}",
            model.modalities.len(),
            ds.spec.modalities.len()
        )));
    }
    for (mm, mspec) in model.modalities.iter().zip(&ds.spec.modalities) {
        if mm.name != mspec.name {
            return Err(Error::InvalidArgument(format!(
                "checkpoint modality {:?} does not match dataset modality {:?}",
                mm.name, mspec.name
            )));
        }
        let input_dim = mm.encoder.layers()[0].weight.shape()[1];
        if input_dim != mspec.input_dim {
            return Err(Error::InvalidArgument(format!(
                "checkpoint encoder for {:?} expects {input_dim}-dim inputs but the dataset provides {}-dim",
                mm.name, mspec.input_dim
            )));
        }
    }
    if model.anchors.num_classes() != ds.spec.n_classes {
        return Err(Error::InvalidArgument(format!(
            "checkpoint anchors cover {} classes but the dataset has {}",
            model.anchors.num_classes(),
            ds.spec.n_classes
        )));
    }
    Ok(())
}

fn load_prepared(data_dir: &Path, cfg: &ExperimentConfig) -> Result<PreparedData> {
    let ds = Dataset::load(data_dir)?;
    prepare_loaded(ds, cfg)
}

fn run_stage(which: Stage, args: &StageArgs) -> Result<()> {
    let cfg = parse_config_file(&args.config, &args.set)?;
    ensure_out(&args.out, args.force)?;
    let prep = load_prepared(&args.data, &cfg)?;

    let (model, log) = match which {
        Stage::Pretrain => {
            if args.init.is_some() {
                return Err(Error::InvalidArgument(
                    "pretrain builds its model from scratch; --init is not accepted".into(),
                ));
            }
            stage0_pretrain(&cfg, &prep.dataset, &prep.train)?
        }
        Stage::One => {
            let init = require_init(args, "stage1", "a stage-0 checkpoint")?;
            let model = load_model(init)?;
            check_model_data_compat(&model, &prep.dataset)?;
            if model.stage_tag != "stage0" {
                return Err(Error::InvalidArgument(format!(
                    "stage1 must start from a stage0 checkpoint, got {:?}",
                    model.stage_tag
                )));
            }
            stage1_fare(model, &cfg, &prep.dataset, &prep.train)?
        }
        Stage::Two => {
            let init = require_init(args, "stage2", "a stage-0 or stage-1 checkpoint")?;
            let model = load_model(init)?;
            check_model_data_compat(&model, &prep.dataset)?;
            if model.stage_tag != "stage0" && !model.stage_tag.starts_with("FARE") {
                return Err(Error::InvalidArgument(format!(
                    "stage2 must start from a stage0 or FARE checkpoint, got {:?}",
                    model.stage_tag
                )));
            }
            stage2_align(model, &cfg, &prep.dataset, &prep.train)?
        }
    };

    save_model(&model, &args.out.join("model.ckpt"))?;
    write_train_log(&args.out.join("train_log.csv"), &log)?;
    let metrics = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset)?;
    write_metrics(&args.out, &cfg, &[metrics.clone()])?;
    println!(
        "{} run {}: mean clean {:.2}%, mean robust@{} {:.2}% -> {}",
        model.stage_tag,
        cfg.run_id(),
        100.0 * metrics.mean_clean_acc(),
        cfg.eval.epsilons[0].label,
        100.0 * metrics.mean_robust_acc(&cfg.eval.epsilons[0].label),
        args.out.display()
    );
    Ok(())
}

fn require_init<'a>(args: &'a StageArgs, stage: &str, what: &str) -> Result<&'a PathBuf> {
    args.init.as_ref().ok_or_else(|| {
        Error::InvalidArgument(format!("{stage} requires --init with {what}"))
    })
}

fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut s = String::from("stage,modality,step,loss\n");
    for (name, losses) in &log.per_modality {
        for (i, l) in losses.iter().enumerate() {
            let _ = writeln!(s, "{},{name},{i},{l:?}", log.stage);
        }
    }
    write_atomic(path, s.as_bytes())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    ckpt: &Path,
    data_dir: &Path,
    epsilons: Option<&str>,
    config: Option<&Path>,
    set: &[String],
    out: &Path,
    force: bool,
) -> Result<()> {
    let mut overrides = set.to_vec();
    if let Some(eps) = epsilons {
        overrides.push(format!("eval.epsilons={eps}"));
    }
    let cfg = match config {
        Some(path) => parse_config_file(path, &overrides)?,
        None => parse_config("", &overrides)?,
    };
    ensure_out(out, force)?;
    let model = load_model(ckpt)?;
    let prep = load_prepared(data_dir, &cfg)?;
    check_model_data_compat(&model, &prep.dataset)?;
    // The CSV identity columns come from the config; refuse to write rows
    // that misdescribe the checkpoint.
    let model_scorer = model.modalities[0].scorer.name();
    if cfg.scorer.name != model_scorer {
        return Err(Error::InvalidArgument(format!(
            "config scorer {:?} does not match checkpoint scorer {:?}; pass --set scorer.name={model_scorer}",
            cfg.scorer.name, model_scorer
        )));
    }
    let model_lora = model.modalities[0].encoder.has_lora();
    if cfg.lora.enabled != model_lora {
        return Err(Error::InvalidArgument(format!(
            "config lora.enabled={} does not match checkpoint (LoRA {}); pass --set lora.enabled={model_lora}",
            cfg.lora.enabled,
            if model_lora { "attached" } else { "absent" }
        )));
    }
    let metrics = evaluate(&model, &cfg, &prep.dataset, &prep.eval_subset)?;
    write_metrics(out, &cfg, &[metrics.clone()])?;
    for cell in &metrics.cells {
        println!(
            "{} {} eps={}: clean {}/{} robust {}/{}",
            model.stage_tag,
            cell.modality,
            cell.epsilon.label,
            cell.clean_correct,
            cell.total,
            cell.robust_correct,
            cell.total
        );
    }
    Ok(())
}

fn parse_axes(flags: &[String]) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::with_capacity(flags.len());
    for flag in flags {
        let (name, values) = flag.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!(
                "axis {flag:?} is not of the form AXIS=V1,V2,...; example: scorer=dot,cosine"
            ))
        })?;
        let values: Vec<String> = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_string)
            .collect();
        axes.push((name.trim().to_string(), values));
    }
    Ok(axes)
}

fn ablate_cmd(
    config: &Path,
    axes_flags: &[String],
    set: &[String],
    out: &Path,
    force: bool,
) -> Result<()> {
    let cfg = parse_config_file(config, set)?;
    let axes = parse_axes(axes_flags)?;
    ensure_out(out, force)?;
    let prep = rlbind::pipeline::prepare_data(&cfg)?;
    let outcomes = run_ablation_grid(&cfg, &axes, &prep.dataset, &prep.train, &prep.eval_subset)?;

    let mut grid_csv = String::from(CSV_HEADER);
    grid_csv.push('\n');
    let mut failures = String::new();
    let mut n_failed = 0usize;
    for o in &outcomes {
        match &o.result {
            Ok(rm) => {
                grid_csv.push_str(&rlbind::pipeline::csv_rows(&o.config, rm));
                let cell_dir = out.join("cells").join(&o.run_id);
                std::fs::create_dir_all(&cell_dir)?;
                write_metrics(&cell_dir, &o.config, &[rm.clone()])?;
            }
            Err(msg) => {
                n_failed += 1;
                let _ = writeln!(
                    failures,
                    "scorer={} alignment={} lora={} lambda={:?}: {msg}",
                    o.cell.scorer, o.cell.alignment, o.cell.lora, o.cell.lambda
                );
            }
        }
    }
    write_atomic(&out.join("grid.csv"), grid_csv.as_bytes())?;
    write_atomic(&out.join("manifest.txt"), cfg.manifest_text().as_bytes())?;
    if !failures.is_empty() {
        write_atomic(&out.join("failures.txt"), failures.as_bytes())?;
    }
    println!(
        "{} of {} cells succeeded -> {}",
        outcomes.len() - n_failed,
        outcomes.len(),
        out.display()
    );
    if n_failed > 0 {
        return Err(Error::Training(format!(
            "{n_failed} of {} ablation cells failed; see {}",
            outcomes.len(),
            out.join("failures.txt").display()
        )));
    }
    Ok(())
}

fn report_cmd(dirs: &[PathBuf], out: Option<&Path>, force: bool) -> Result<()> {
    let rep = report_dirs(dirs)?;
    print!("{}", rep.text_table);
    if let Some(out) = out {
        ensure_out(out, force)?;
        write_atomic(&out.join("report.csv"), rep.merged_csv.as_bytes())?;
        write_atomic(&out.join("report.txt"), rep.text_table.as_bytes())?;
        write_atomic(&out.join("report.dat"), rep.gnuplot_data.as_bytes())?;
    }
    Ok(())
}

//! Command-line entry point for the poisoning laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use poisonlab::checkpoint::{load_model, save_model};
use poisonlab::config::ExperimentConfig;
use poisonlab::csvio::{read_rows, summarize, summary_table, Row, HEADER, SUMMARY_HEADER};
use poisonlab::error::{LabError, LabResult};
use poisonlab::manifest::PartitionManifest;
use poisonlab::runner::{
    find_cell, init_model, load_base_dataset, prepare_cell, run_cell, run_matrix, single_cell,
    train_config_for,
};
use poisonlab::tensor_dir::save_tensor_dir;
use poisonlab_core::train::{accuracy, adversarial_success, retrain_clean, train_base, EvalSets};

const USAGE: &str = "\
poisonlab - backdoor data-poisoning laboratory

USAGE:
    poisonlab <SUBCOMMAND> [FLAGS]

SUBCOMMANDS:
    poison      materialize the poisoned dataset, adversarial test set,
                poisoning report, and partition manifest
    train       run base training for a single-run config; saves a
                checkpoint and per-epoch metrics
    retrain     clean fine-tuning of a saved checkpoint; appends metrics
    eval        report clean/poison validation accuracy and adversarial
                success for a saved checkpoint
    matrix      run the full experiment matrix to a results CSV
    summarize   aggregate a results CSV (positional argument) into means
    replay      re-run one matrix cell by run id (--replay RUN_ID)

FLAGS:
    --config PATH   experiment config file (key = value lines)
    --seed N        override the config's base seed
    --jobs N        parallel matrix workers (default from config)
    --out PATH      override the config's output path
    --replay RUN_ID run id for the replay subcommand

EXIT CODES:
    0 success, 1 invalid config or usage, 2 runtime failure
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    seed: Option<u64>,
    jobs: Option<usize>,
    out: Option<PathBuf>,
    replay: Option<String>,
    positional: Vec<String>,
}

fn parse_args(argv: &[String]) -> LabResult<Args> {
    let mut it = argv.iter();
    let command = it
        .next()
        .ok_or_else(|| LabError::Config(format!("missing subcommand\n\n{USAGE}")))?
        .clone();
    let mut args = Args {
        command,
        config: None,
        seed: None,
        jobs: None,
        out: None,
        replay: None,
        positional: Vec::new(),
    };
    while let Some(flag) = it.next() {
        let mut value_for = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| LabError::Config(format!("{name} needs a value")))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value_for("--config")?)),
            "--seed" => {
                args.seed = Some(value_for("--seed")?.parse().map_err(|_| {
                    LabError::Config("--seed needs an unsigned integer".into())
                })?)
            }
            "--jobs" => {
                args.jobs = Some(value_for("--jobs")?.parse().map_err(|_| {
                    LabError::Config("--jobs needs a positive integer".into())
                })?)
            }
            "--out" => args.out = Some(PathBuf::from(value_for("--out")?)),
            "--replay" => args.replay = Some(value_for("--replay")?),
            "--help" | "-h" => return Err(LabError::Config(USAGE.into())),
            other if other.starts_with("--") => {
                return Err(LabError::Config(format!("unknown flag `{other}`")))
            }
            other => args.positional.push(other.to_string()),
        }
    }
    Ok(args)
}

fn load_config(args: &Args) -> LabResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(LabError::Config("--jobs must be >= 1".into()));
        }
        cfg.jobs = jobs;
    }
    if let Some(out) = &args.out {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_rows_csv(path: &Path, rows: &[Row]) -> LabResult<()> {
    let mut text = String::from(HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn append_rows_csv(path: &Path, rows: &[Row]) -> LabResult<()> {
    use std::io::Write as _;
    let mut file = if path.exists() {
        std::fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| LabError::io(path, e))?
    } else {
        let mut f = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
        writeln!(f, "{HEADER}").map_err(|e| LabError::io(path, e))?;
        f
    };
    for row in rows {
        writeln!(file, "{}", row.to_line()).map_err(|e| LabError::io(path, e))?;
    }
    Ok(())
}

fn cmd_poison(cfg: &ExperimentConfig) -> LabResult<()> {
    let cell = single_cell(cfg)?;
    let base = load_base_dataset(cfg)?;
    let prepared = prepare_cell(cfg, &cell, &base)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    save_tensor_dir(&out.join("poison_train"), &prepared.bundle.poison_train)?;
    save_tensor_dir(&out.join("poison_val"), &prepared.bundle.poison_val)?;
    save_tensor_dir(&out.join("adv_test"), &prepared.adv_test)?;
    PartitionManifest::from_bundle(&prepared.bundle).save(&out.join("partition.manifest"))?;
    if let Some((h, w)) = prepared.bundle.poison_train.image_dims() {
        // Random-square placement is per image; the audit copy records one
        // deterministic realization.
        let mut rng = poisonlab_core::rng::SplitMix64::new(cell.seed);
        let pattern = prepared.trigger.pattern_for(h, w, &mut rng)?;
        poisonlab::bdtf::write_pattern(&out.join("trigger"), &pattern)?;
    }
    match &prepared.report {
        Some(report) => {
            let path = out.join("poison_report.csv");
            std::fs::write(&path, report.table_csv()).map_err(|e| LabError::io(&path, e))?;
            println!(
                "poisoned {} of {} training images (effective rate {:.4})",
                report.total_poisoned,
                prepared.bundle.poison_train.len(),
                report.effective_rate
            );
        }
        None => println!("lambda = 0: nothing poisoned; adversarial test set still triggered"),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig) -> LabResult<()> {
    let cell = single_cell(cfg)?;
    let base = load_base_dataset(cfg)?;
    let prepared = prepare_cell(cfg, &cell, &base)?;
    let mut model = init_model(cfg, &cell, &base)?;
    let train_cfg = train_config_for(cfg, &cell, base.n_classes);
    let evals = EvalSets {
        clean_val: &prepared.bundle.clean_val,
        poison_val: &prepared.bundle.poison_val,
        adv_test: &prepared.adv_test,
        poison_class: cell.combo.poison_class,
    };
    let record = train_base(&mut model, &prepared.bundle.poison_train, &evals, &train_cfg)?;
    let out = &cfg.output;
    std::fs::create_dir_all(out).map_err(|e| LabError::io(out, e))?;
    save_model(&out.join("checkpoint"), &model)?;
    let rows = poisonlab::runner::rows_for_record(&cell, cfg, &record);
    write_rows_csv(&out.join("metrics.csv"), &rows)?;
    let last = record.epochs.last();
    println!(
        "run {} stopped at epoch {} (best {}); clean_val {:.3} poison_val {:.3} adv {:.3}",
        cell.run_id,
        record.epochs.len(),
        record.best_epoch,
        last.map_or(0.0, |m| m.clean_val_acc),
        last.map_or(0.0, |m| m.poison_val_acc),
        last.map_or(0.0, |m| m.adv_success),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_retrain(cfg: &ExperimentConfig) -> LabResult<()> {
    let cell = single_cell(cfg)?;
    let base = load_base_dataset(cfg)?;
    let prepared = prepare_cell(cfg, &cell, &base)?;
    let out = &cfg.output;
    let mut model = load_model(&out.join("checkpoint"))?;
    let train_cfg = train_config_for(cfg, &cell, base.n_classes);
    let evals = EvalSets {
        clean_val: &prepared.bundle.clean_val,
        poison_val: &prepared.bundle.poison_val,
        adv_test: &prepared.adv_test,
        poison_class: cell.combo.poison_class,
    };
    let record = retrain_clean(&mut model, &prepared.bundle.clean_train, &evals, &train_cfg)?;
    save_model(&out.join("checkpoint_retrained"), &model)?;
    let rows = poisonlab::runner::rows_for_record(&cell, cfg, &record);
    append_rows_csv(&out.join("metrics.csv"), &rows)?;
    let last = record.epochs.last();
    println!(
        "retrained {} epochs; clean_val {:.3} poison_val {:.3} adv {:.3}",
        record.epochs.len(),
        last.map_or(0.0, |m| m.clean_val_acc),
        last.map_or(0.0, |m| m.poison_val_acc),
        last.map_or(0.0, |m| m.adv_success),
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> LabResult<()> {
    let cell = single_cell(cfg)?;
    let base = load_base_dataset(cfg)?;
    let prepared = prepare_cell(cfg, &cell, &base)?;
    let out = &cfg.output;
    let retrained = out.join("checkpoint_retrained");
    let path = if retrained.is_dir() { retrained } else { out.join("checkpoint") };
    let model = load_model(&path)?;
    println!("checkpoint: {}", path.display());
    println!("clean_val_acc  = {:.4}", accuracy(&model, &prepared.bundle.clean_val)?);
    println!("poison_val_acc = {:.4}", accuracy(&model, &prepared.bundle.poison_val)?);
    println!(
        "adv_success    = {:.4}",
        adversarial_success(&model, &prepared.adv_test, cell.combo.poison_class)?
    );
    Ok(())
}

fn cmd_matrix(cfg: &ExperimentConfig) -> LabResult<()> {
    let outcome = run_matrix(cfg, &cfg.output)?;
    println!(
        "matrix complete: {} cells, {} failures; results in {}",
        outcome.cells,
        outcome.failures.len(),
        cfg.output.display()
    );
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(LabError::Runtime(format!("{} matrix cells failed", outcome.failures.len())))
    }
}

fn cmd_summarize(args: &Args) -> LabResult<()> {
    let input = args
        .positional
        .first()
        .map(PathBuf::from)
        .ok_or_else(|| LabError::Config("summarize needs a results CSV path".into()))?;
    let rows = read_rows(&input)?;
    let summary = summarize(&rows)?;
    if let Some(out) = &args.out {
        let mut text = String::from(SUMMARY_HEADER);
        text.push('\n');
        for s in &summary {
            text.push_str(&s.to_line());
            text.push('\n');
        }
        std::fs::write(out, text).map_err(|e| LabError::io(out, e))?;
        println!("wrote {}", out.display());
    }
    print!("{}", summary_table(&summary));
    Ok(())
}

fn cmd_replay(cfg: &ExperimentConfig, args: &Args) -> LabResult<()> {
    let run_id = args
        .replay
        .clone()
        .or_else(|| args.positional.first().cloned())
        .ok_or_else(|| LabError::Config("replay needs --replay RUN_ID".into()))?;
    let cell = find_cell(cfg, &run_id)?;
    let base = load_base_dataset(cfg)?;
    let (_, rows) = run_cell(cfg, &cell, &base)?;
    if let Some(out) = &args.out {
        write_rows_csv(out, &rows)?;
        println!("wrote {}", out.display());
    } else {
        println!("{HEADER}");
        for row in &rows {
            println!("{}", row.to_line());
        }
    }
    Ok(())
}

fn run(argv: Vec<String>) -> LabResult<()> {
    let args = parse_args(&argv)?;
    match args.command.as_str() {
        "summarize" => return cmd_summarize(&args),
        "help" => {
            println!("{USAGE}");
            return Ok(());
        }
        _ => {}
    }
    let mut cfg = load_config(&args)?;
    match args.command.as_str() {
        "poison" => cmd_poison(&cfg),
        "train" => cmd_train(&cfg),
        "retrain" => cmd_retrain(&cfg),
        "eval" => cmd_eval(&cfg),
        "matrix" => {
            // For replayability the matrix keeps the config's output
            // unless --out overrides it (already applied).
            cmd_matrix(&cfg)
        }
        "replay" => {
            // Replay reruns a single cell deterministically.
            cfg.jobs = 1;
            cmd_replay(&cfg, &args)
        }
        other => Err(LabError::Config(format!("unknown subcommand `{other}`\n\n{USAGE}"))),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Experiment matrix execution: cell expansion, per-cell seeding, the
//! full per-cell pipeline (partition, trigger, poison, train, retrain),
//! and the ordered CSV writer that makes parallel runs reproduce the exact
//! byte stream of a serial run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use poisonlab_core::data::{partition, synth_generate, Dataset, PartitionBundle, Provenance};
use poisonlab_core::model::{Classifier, ClassifierSpec};
use poisonlab_core::poison::{apply_plan, build_adv_test, PoisonPlan, PoisonReport, Strategy};
use poisonlab_core::regularize::{RegConfig, RegKind};
use poisonlab_core::rng::{fnv1a64, mix, SplitMix64};
use poisonlab_core::train::{retrain_clean, train_base, EvalSets, Phase, RunRecord, TrainConfig};
use poisonlab_core::trigger::{fit_low_variance, Trigger, TriggerKind, TriggerSpec};
use poisonlab_core::Tensor;

use crate::cifar::{load_cifar10, subset_classes};
use crate::config::{DatasetSource, ExperimentConfig, StrategyChoice};
use crate::csvio::{Row, HEADER};
use crate::error::{LabError, LabResult};
use crate::tensor_dir::load_tensor_dir;

// Stream tags for seeds derived from a cell seed.
const TAG_PARTITION: u64 = 1;
const TAG_POISON_TRAIN: u64 = 2;
const TAG_POISON_VAL: u64 = 3;
const TAG_ADV: u64 = 4;
const TAG_MODEL_INIT: u64 = 5;
const TAG_TRAIN: u64 = 6;
const TAG_LV_FIT: u64 = 7;

/// One resolved factor combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Combo {
    pub trigger_kind: TriggerKind,
    pub alpha: f32,
    pub lambda: f64,
    pub strategy: StrategyChoice,
    pub source_class: Option<usize>,
    pub poison_class: usize,
    pub reg_kind: RegKind,
    pub reg_weight: f32,
}

/// A runnable unit of the matrix: combo x repeat, with its derived seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub combo: Combo,
    pub repeat: usize,
    pub seed: u64,
    pub run_id: String,
}

/// The cell seed folds every factor value (and the repeat index) into the
/// base seed: `s = mix(s, fnv1a64("key=value"))` over the factors in a
/// fixed order. Growing an axis list therefore never changes the seeds of
/// cells whose own values are unchanged.
fn cell_seed(base: u64, combo: &Combo, repeat: usize) -> u64 {
    let mut s = base;
    let fields: [(&str, String); 8] = [
        ("trigger.kind", combo.trigger_kind.name().to_string()),
        ("trigger.alpha", format!("{}", combo.alpha)),
        ("plan.lambda", format!("{}", combo.lambda)),
        ("plan.strategy", combo.strategy.name().to_string()),
        ("plan.poison_class", format!("{}", combo.poison_class)),
        ("reg.kind", combo.reg_kind.name().to_string()),
        ("reg.weight", format!("{}", combo.reg_weight)),
        ("repeat", format!("{repeat}")),
    ];
    for (key, value) in fields {
        s = mix(s, fnv1a64(format!("{key}={value}").as_bytes()));
    }
    s
}

/// Cartesian product of the factor axes times repeats, in a fixed
/// (documented) axis order. Rejects products above the configured cap.
pub fn expand_cells(cfg: &ExperimentConfig) -> LabResult<Vec<Cell>> {
    let count = cfg.cell_count();
    if count > cfg.matrix_cap {
        return Err(LabError::Config(format!(
            "matrix expands to {count} runs, above the cap of {} (raise matrix.cap to allow)",
            cfg.matrix_cap
        )));
    }
    let mut cells = Vec::with_capacity(count);
    for &trigger_kind in &cfg.trigger_kinds {
        for &alpha_choice in &cfg.alphas {
            for &lambda in &cfg.lambdas {
                for &strategy in &cfg.strategies {
                    for &poison_class in &cfg.poison_classes {
                        for &reg_kind in &cfg.reg_kinds {
                            for &reg_weight in &cfg.reg_weights {
                                for repeat in 0..cfg.repeats {
                                    let alpha =
                                        alpha_choice.unwrap_or_else(|| trigger_kind.default_alpha());
                                    let source_class = match strategy {
                                        StrategyChoice::OneToOne => {
                                            Some(resolve_source(cfg, poison_class)?)
                                        }
                                        StrategyChoice::ManyToOne => None,
                                    };
                                    let combo = Combo {
                                        trigger_kind,
                                        alpha,
                                        lambda,
                                        strategy,
                                        source_class,
                                        poison_class,
                                        reg_kind,
                                        reg_weight,
                                    };
                                    let seed = cell_seed(cfg.seed, &combo, repeat);
                                    cells.push(Cell {
                                        index: cells.len(),
                                        combo,
                                        repeat,
                                        seed,
                                        run_id: format!("{seed:016x}"),
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

fn resolve_source(cfg: &ExperimentConfig, poison_class: usize) -> LabResult<usize> {
    match cfg.source_class {
        Some(s) if s == poison_class => Err(LabError::Config(format!(
            "plan.source_class {s} equals the poison class"
        ))),
        Some(s) => Ok(s),
        // Lowest class index that is not the poison class.
        None => Ok(if poison_class == 0 { 1 } else { 0 }),
    }
}

/// The matrix must expand to exactly one cell for single-run subcommands.
pub fn single_cell(cfg: &ExperimentConfig) -> LabResult<Cell> {
    let cells = expand_cells(cfg)?;
    if cells.len() != 1 {
        return Err(LabError::Config(format!(
            "this command needs a single-run config, but the matrix expands to {} runs",
            cells.len()
        )));
    }
    Ok(cells.into_iter().next().unwrap())
}

pub fn find_cell(cfg: &ExperimentConfig, run_id: &str) -> LabResult<Cell> {
    expand_cells(cfg)?
        .into_iter()
        .find(|c| c.run_id == run_id)
        .ok_or_else(|| LabError::Config(format!("run id {run_id} is not in this config's matrix")))
}

pub fn load_base_dataset(cfg: &ExperimentConfig) -> LabResult<Dataset> {
    let d = &cfg.dataset;
    let limit = if d.limit_per_class == 0 { None } else { Some(d.limit_per_class) };
    let ds = match d.source {
        DatasetSource::Synthetic => {
            synth_generate(d.n_classes, d.per_class, d.height, d.width, d.seed)?
        }
        DatasetSource::Cifar10 => {
            let path = d.path.as_ref().expect("validated");
            let full = load_cifar10(path)?;
            if d.classes.is_empty() && limit.is_none() {
                full
            } else {
                let classes: Vec<usize> = if d.classes.is_empty() {
                    (0..full.n_classes).collect()
                } else {
                    d.classes.clone()
                };
                subset_classes(&full, &classes, limit)?
            }
        }
        DatasetSource::TensorDir => {
            let path = d.path.as_ref().expect("validated");
            let full = load_tensor_dir(path)?;
            if d.classes.is_empty() && limit.is_none() {
                full
            } else {
                let classes: Vec<usize> = if d.classes.is_empty() {
                    (0..full.n_classes).collect()
                } else {
                    d.classes.clone()
                };
                subset_classes(&full, &classes, limit)?
            }
        }
    };
    Ok(ds)
}

/// Everything a training run needs, fully materialized and poisoned.
pub struct PreparedCell {
    pub bundle: PartitionBundle,
    pub adv_test: Dataset,
    pub trigger: Trigger,
    pub plan: PoisonPlan,
    /// Poisoning report for the training split (None when lambda = 0).
    pub report: Option<PoisonReport>,
}

pub fn build_trigger(
    cfg: &ExperimentConfig,
    cell: &Cell,
    bundle: &PartitionBundle,
) -> LabResult<Trigger> {
    let (h, w) = bundle
        .poison_train
        .image_dims()
        .ok_or_else(|| LabError::Runtime("poison training set is empty".into()))?;
    let mut spec = TriggerSpec::new(cell.combo.trigger_kind).with_alpha(cell.combo.alpha)?;
    spec.side_frac = cfg.side_frac;
    spec.offset_frac = cfg.offset_frac;
    spec.lv_threshold = cfg.lv_threshold;
    let trigger = match cell.combo.trigger_kind {
        TriggerKind::Square => Trigger::square(h, w, spec)?,
        TriggerKind::RandomSquare => Trigger::random_square(spec),
        TriggerKind::Sine => Trigger::sine(h, w, spec)?,
        TriggerKind::LowVariance => {
            // PCA on (a capped subsample of) the still-clean poison
            // training set; the reference image is held out of training by
            // construction (first adversarial-split image, pre-trigger).
            let train = &bundle.poison_train.images;
            let mut idx: Vec<usize> = (0..train.len()).collect();
            if idx.len() > cfg.lv_fit_cap {
                let mut rng = SplitMix64::derived(cell.seed, TAG_LV_FIT);
                idx = rng.choose(train.len(), cfg.lv_fit_cap);
            }
            let images: Vec<&Tensor> = idx.iter().map(|&i| &train[i].pixels).collect();
            let reference = &bundle
                .adv_test
                .images
                .first()
                .ok_or_else(|| LabError::Runtime("adversarial split is empty".into()))?
                .pixels;
            let fit = fit_low_variance(&images, reference, cfg.lv_threshold)?;
            Trigger::low_variance(spec, fit)
        }
    };
    Ok(trigger)
}

/// Partition the base dataset, realize the trigger, poison the training
/// and validation splits of the poison-set, and build the adversarial
/// test set. A zero lambda skips poisoning but still triggers adv_test.
pub fn prepare_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    base: &Dataset,
) -> LabResult<PreparedCell> {
    let mut bundle = partition(base, cfg.fractions, cfg.inner_split, mix(cell.seed, TAG_PARTITION))?;
    let trigger = build_trigger(cfg, cell, &bundle)?;

    let strategy = match cell.combo.strategy {
        StrategyChoice::ManyToOne => Strategy::ManyToOne,
        StrategyChoice::OneToOne => Strategy::OneToOne {
            source_class: cell.combo.source_class.expect("resolved at expansion"),
        },
    };
    let mk_plan = |seed_tag: u64| {
        PoisonPlan::new(
            cell.combo.poison_class,
            strategy,
            cell.combo.lambda,
            mix(cell.seed, seed_tag),
        )
    };

    let mut report = None;
    if cell.combo.lambda > 0.0 {
        let (train, train_report) = apply_plan(&bundle.poison_train, &mk_plan(TAG_POISON_TRAIN)?, &trigger)?;
        bundle.poison_train = train;
        report = Some(train_report);
        // The smaller validation split is poisoned at the same rate; when
        // floor(lambda * N_t) is zero there, zero poisoned samples IS the
        // realized plan, not an error.
        let val_plan = mk_plan(TAG_POISON_VAL)?;
        if poisonlab_core::poison::planned_total(&bundle.poison_val.class_sizes(), &val_plan) >= 1 {
            let (val, _) = apply_plan(&bundle.poison_val, &val_plan, &trigger)?;
            bundle.poison_val = val;
        }
    }
    let adv_test = build_adv_test(&bundle.adv_test, &mk_plan(TAG_ADV)?, &trigger)?;
    Ok(PreparedCell { bundle, adv_test, trigger, plan: mk_plan(TAG_POISON_TRAIN)?, report })
}

pub fn model_spec_for(cfg: &ExperimentConfig, base: &Dataset) -> LabResult<ClassifierSpec> {
    let (h, w) = base
        .image_dims()
        .ok_or_else(|| LabError::Runtime("dataset is empty".into()))?;
    Ok(ClassifierSpec {
        input: (h, w, 3),
        conv_blocks: cfg.conv_blocks.clone(),
        pooling: cfg.pooling,
        hidden_dim: cfg.hidden_dim,
        n_classes: base.n_classes,
    })
}

pub fn train_config_for(cfg: &ExperimentConfig, cell: &Cell, n_classes: usize) -> TrainConfig {
    let mut reg = RegConfig::new(cell.combo.reg_kind, n_classes);
    reg.weight = cell.combo.reg_weight;
    reg.margin = cfg.margin;
    reg.temperature = cfg.temperature;
    reg.snnl_same_class_numerator = cfg.snnl_same_class;
    TrainConfig {
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        retrain_epochs: cfg.retrain_epochs,
        seed: mix(cell.seed, TAG_TRAIN),
        reg,
    }
}

pub fn init_model(cfg: &ExperimentConfig, cell: &Cell, base: &Dataset) -> LabResult<Classifier> {
    Ok(Classifier::init(model_spec_for(cfg, base)?, mix(cell.seed, TAG_MODEL_INIT))?)
}

/// CSV rows for one phase record of one cell.
pub fn rows_for_record(cell: &Cell, cfg: &ExperimentConfig, record: &RunRecord) -> Vec<Row> {
    let early_stop = match record.phase {
        Phase::Base => record.best_epoch,
        Phase::Retrain => 0,
    };
    record
        .epochs
        .iter()
        .map(|m| Row {
            run_id: cell.run_id.clone(),
            phase: record.phase.name().to_string(),
            epoch: m.epoch,
            dataset: cfg.dataset.source.name().to_string(),
            trigger: cell.combo.trigger_kind.name().to_string(),
            alpha: cell.combo.alpha,
            lambda: cell.combo.lambda,
            strategy: cell.combo.strategy.name().to_string(),
            poison_class: cell.combo.poison_class,
            reg_kind: cell.combo.reg_kind.name().to_string(),
            reg_weight: cell.combo.reg_weight,
            seed: cell.seed,
            clean_val_acc: m.clean_val_acc,
            poison_val_acc: m.poison_val_acc,
            adv_success: m.adv_success,
            early_stop,
        })
        .collect()
}

/// Full pipeline for one cell: returns the trained model plus one CSV row
/// per (phase, epoch).
pub fn run_cell(cfg: &ExperimentConfig, cell: &Cell, base: &Dataset) -> LabResult<(Classifier, Vec<Row>)> {
    let prepared = prepare_cell(cfg, cell, base)?;
    let mut model = init_model(cfg, cell, base)?;
    let train_cfg = train_config_for(cfg, cell, base.n_classes);
    let evals = EvalSets {
        clean_val: &prepared.bundle.clean_val,
        poison_val: &prepared.bundle.poison_val,
        adv_test: &prepared.adv_test,
        poison_class: cell.combo.poison_class,
    };
    let base_record = train_base(&mut model, &prepared.bundle.poison_train, &evals, &train_cfg)?;
    let retrain_record = retrain_clean(&mut model, &prepared.bundle.clean_train, &evals, &train_cfg)?;
    let mut rows = rows_for_record(cell, cfg, &base_record);
    rows.extend(rows_for_record(cell, cfg, &retrain_record));
    Ok((model, rows))
}

pub struct MatrixOutcome {
    pub cells: usize,
    pub failures: Vec<(String, String)>,
}

/// Runs every cell, up to `jobs` in parallel, appending rows to the output
/// CSV strictly in cell order (a reorder buffer holds out-of-order
/// completions), so reruns with the same base seed are byte-identical
/// regardless of scheduling. Cell failures are recorded and skipped.
pub fn run_matrix(cfg: &ExperimentConfig, out_path: &Path) -> LabResult<MatrixOutcome> {
    let cells = expand_cells(cfg)?;
    let base = load_base_dataset(cfg)?;
    if let Some(dir) = out_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        }
    }
    let mut file = fs::File::create(out_path).map_err(|e| LabError::io(out_path, e))?;
    writeln!(file, "{HEADER}").map_err(|e| LabError::io(out_path, e))?;

    let jobs = cfg.jobs.min(cells.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, LabResult<Vec<Row>>)>();

    let failures: Vec<(String, String)> = std::thread::scope(|scope| {
        for _ in 0..jobs {
            let tx = tx.clone();
            let cells = &cells;
            let base = &base;
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= cells.len() {
                    break;
                }
                let result = run_cell(cfg, &cells[i], base).map(|(_, rows)| rows);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut pending: BTreeMap<usize, LabResult<Vec<Row>>> = BTreeMap::new();
        let mut write_at = 0usize;
        let mut failures = Vec::new();
        let mut flush = |pending: &mut BTreeMap<usize, LabResult<Vec<Row>>>,
                         write_at: &mut usize,
                         failures: &mut Vec<(String, String)>| {
            while let Some(result) = pending.remove(write_at) {
                match result {
                    Ok(rows) => {
                        for row in rows {
                            writeln!(file, "{}", row.to_line()).expect("write results csv");
                        }
                        file.flush().expect("flush results csv");
                    }
                    Err(e) => {
                        let run_id = cells[*write_at].run_id.clone();
                        eprintln!("run {run_id} failed: {e}");
                        failures.push((run_id, e.to_string()));
                    }
                }
                *write_at += 1;
            }
        };
        for (i, result) in rx {
            pending.insert(i, result);
            flush(&mut pending, &mut write_at, &mut failures);
        }
        flush(&mut pending, &mut write_at, &mut failures);
        failures
    });

    if !failures.is_empty() {
        let log = out_path.with_extension("failures.log");
        let mut text = String::new();
        for (run_id, err) in &failures {
            text.push_str(&format!("{run_id}\t{err}\n"));
        }
        fs::write(&log, text).map_err(|e| LabError::io(&log, e))?;
    }
    Ok(MatrixOutcome { cells: cells.len(), failures })
}

/// Marker used by tests and the CLI: count of poisoned images in a set.
pub fn poisoned_count(ds: &Dataset) -> usize {
    ds.images
        .iter()
        .filter(|i| matches!(i.provenance, Provenance::Poisoned { .. }))
        .count()
}

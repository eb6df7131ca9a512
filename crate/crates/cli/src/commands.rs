use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fatigue_rec_core::data::{
    build_instances, load_interactions, load_split_file, prepare_splits, save_interactions, save_split_file, simulate_exposures, ItemCatalog, LabeledSequence, Split,
    TrainingInstance,
};
use fatigue_rec_core::eval::{evaluate, evtr_curve, grouped_eval, EvtrPoint, MetricReport};
use fatigue_rec_core::model::{
    load_checkpoint, loss_gradient_check, save_checkpoint, score_instances, train, training_examples, FRec, TrainOutcome,
};
use fatigue_rec_core::numerics::{CheckReport, DEFAULT_EPS};
use serde::Serialize;

use crate::config::{PrepareConfig, RunConfig, SPLITS_FILE, STATS_FILE};
use crate::exposures::{load_exposures, save_exposures};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PrepareStats {
    pub input_events: usize,
    pub kept_events: usize,
    pub users: usize,
    pub items: usize,
    pub instances: SplitCounts,
}

/// k-core filtering, truncation and splitting of the log at `input`.
/// Writes `splits.tsv` and `stats.json` into `out_dir`. An empty result is
/// written as well, with a warning.
pub fn cmd_prepare(input: &Path, out_dir: &Path, cfg: &PrepareConfig) -> Result<PrepareStats> {
    let log = load_interactions(input)?;
    let sequences = prepare_splits(&log, cfg.k_core, cfg.max_len, cfg.split_ratios());
    let mut instances = SplitCounts::default();
    for ls in &sequences {
        for split in &ls.labels[1..] {
            match split {
                Split::Train => instances.train += 1,
                Split::Valid => instances.valid += 1,
                Split::Test => instances.test += 1,
            }
        }
    }
    let stats = PrepareStats {
        input_events: log.len(),
        kept_events: sequences.iter().map(|s| s.sequence.len()).sum(),
        users: sequences.len(),
        items: ItemCatalog::from_sequences(&sequences).len(),
        instances,
    };
    if sequences.is_empty() {
        log::warn!("no user survives {}-core filtering of {}; writing empty splits", cfg.k_core, input.display());
    }
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    save_split_file(&sequences, &out_dir.join(SPLITS_FILE))?;
    fs::write(out_dir.join(STATS_FILE), serde_json::to_string_pretty(&stats)? + "\n")?;
    Ok(stats)
}

/// Simulates the corpus of `run.synthetic`; the engaged events go to
/// `output` and every exposure with its outcome to `exposures`. Returns the
/// number of engaged events.
pub fn cmd_synth(run: &RunConfig, output: &Path, exposures: &Path) -> Result<usize> {
    let sim = simulate_exposures(&run.synthetic)?;
    let log = sim.engaged_log();
    for path in [output, exposures] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    save_interactions(&log, output)?;
    save_exposures(&sim, exposures)?;
    Ok(log.len())
}

/// Sequences, catalog and instances of a split file; negatives are drawn
/// from `seed`.
pub fn load_instances(splits: &Path, seed: u64) -> Result<(Vec<LabeledSequence>, ItemCatalog, Vec<TrainingInstance>)> {
    let sequences = load_split_file(splits).with_context(|| format!("loading {}", splits.display()))?;
    let catalog = ItemCatalog::from_sequences(&sequences);
    let instances = build_instances(&sequences, &catalog, seed)?;
    Ok((sequences, catalog, instances))
}

fn of_split(instances: &[TrainingInstance], split: Split) -> Vec<TrainingInstance> {
    instances.iter().filter(|i| i.split == split).cloned().collect()
}

/// Trains on the split file, writing the best checkpoint and a JSON-lines
/// history of step and epoch records.
pub fn cmd_train(run: &RunConfig) -> Result<TrainOutcome> {
    run.validate()?;
    let (_, catalog, instances) = load_instances(&run.paths.splits(), run.train.seed)?;
    let (train_set, valid_set) = (of_split(&instances, Split::Train), of_split(&instances, Split::Valid));
    log::info!(
        "{} items, {} train and {} validation instances, ablations {}",
        catalog.len(),
        train_set.len(),
        valid_set.len(),
        run.model.ablations
    );
    let mut model = FRec::new(run.model.clone(), catalog.len(), run.train.seed)?;
    for path in [&run.paths.checkpoint, &run.paths.history] {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
    }
    let file = File::create(&run.paths.history).with_context(|| format!("creating {}", run.paths.history.display()))?;
    let mut history = BufWriter::new(file);
    let outcome = train(&mut model, &train_set, &valid_set, &catalog, &run.train, |record| {
        let line = serde_json::to_string(record).map_err(|e| std::io::Error::other(e.to_string()))?;
        writeln!(history, "{line}")?;
        Ok(())
    })?;
    history.flush()?;
    save_checkpoint(&model, &catalog, &run.paths.checkpoint)?;
    Ok(outcome)
}

/// Largest relative error accepted by [`cmd_grad_check`].
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of the training loss on the first `instances`
/// training instances, over at most `coordinates` parameters.
pub fn cmd_grad_check(run: &RunConfig, instances: usize, coordinates: Option<usize>) -> Result<CheckReport> {
    run.validate()?;
    let (_, catalog, all) = load_instances(&run.paths.splits(), run.train.seed)?;
    let batch: Vec<&TrainingInstance> = all.iter().filter(|i| i.split == Split::Train).take(instances.max(1)).collect();
    if batch.is_empty() {
        bail!("no training instances in {}", run.paths.splits().display());
    }
    let model = FRec::new(run.model.clone(), catalog.len(), run.train.seed)?;
    let examples = training_examples(&model, &batch, &catalog, run.train.seed, 1)?;
    Ok(loss_gradient_check(&model, &examples, DEFAULT_EPS, coordinates, run.train.seed)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub overall: MetricReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub groups: Vec<MetricReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub evtr: Vec<EvtrPoint>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub split: Option<Split>,
    pub group_by_m: bool,
    /// Exposure log and look-back window for the EVTR curve.
    pub evtr: Option<(PathBuf, usize)>,
    pub batch_size: usize,
}

/// Scores one split of `splits` with the model in `checkpoint`. Negatives
/// are drawn from `seed`.
pub fn cmd_eval(checkpoint: &Path, splits: &Path, seed: u64, opts: &EvalOptions) -> Result<EvalReport> {
    let (model, catalog) = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let sequences = load_split_file(splits).with_context(|| format!("loading {}", splits.display()))?;
    let instances = build_instances(&sequences, &catalog, seed)?;
    let split = opts.split.unwrap_or(Split::Test);
    let chosen = of_split(&instances, split);
    if chosen.is_empty() {
        bail!("{} has no {split} instances", splits.display());
    }
    let scored = score_instances(&model, &chosen, &catalog, opts.batch_size.max(1), opts.group_by_m)?;
    let groups = if opts.group_by_m { grouped_eval(&scored)? } else { Vec::new() };
    let evtr = match &opts.evtr {
        Some((path, window)) => {
            let exposures = load_exposures(path)?;
            evtr_curve(&exposures.log, |i| exposures.engaged[i], *window)
        }
        None => Vec::new(),
    };
    Ok(EvalReport {
        split: split.to_string(),
        overall: evaluate(&scored)?,
        groups,
        evtr,
    })
}

/// Plain-text tables of a report.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let ks: Vec<usize> = report.overall.hr.keys().copied().collect();
    let mut header = format!("{:<10} {:>9} {:>7} {:>7}", "group", "instances", "AUC", "GAUC");
    for k in &ks {
        let _ = write!(header, " {:>7} {:>7}", format!("HR@{k}"), format!("NDCG@{k}"));
    }
    let _ = writeln!(out, "{header} {:>7}", "MRR");
    let overall = format!("{} (all)", report.split);
    for r in std::iter::once(&report.overall).chain(&report.groups) {
        let name = r.group.as_deref().unwrap_or(&overall);
        let _ = write!(out, "{:<10} {:>9} {:>7.4} {:>7.4}", name, r.instances, r.auc, r.gauc);
        for k in &ks {
            let _ = write!(out, " {:>7.4} {:>7.4}", r.hr[k], r.ndcg[k]);
        }
        let _ = writeln!(out, " {:>7.4}", r.mrr);
    }
    if !report.evtr.is_empty() {
        let _ = writeln!(out, "\n{:>7} {:>9} {:>8} {:>7} {:>10}", "repeats", "exposures", "engaged", "EVTR", "normalized");
        for p in &report.evtr {
            let norm = p.normalized.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{:>7} {:>9} {:>8} {:>7.4} {:>10}", p.repeats, p.exposures, p.engaged, p.rate, norm);
        }
    }
    out
}

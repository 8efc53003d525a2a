//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use trimodal_core::dataio::{
    apply_normalization, export_dataset, fit_normalization, generate_trimodal, load_checkpoint, load_dataset_dir,
    save_checkpoint, split_dataset, Checkpoint, SplitIndices, TrimodalDataset,
};
use trimodal_core::fusion::{
    derive_weights, fuse_logit_pool, fuse_majority_vote, fuse_stacked, fuse_weighted_average, meta_features,
    train_stacker, FusionResult, FusionWeights, ModalityPrediction, StackerModel, Strategy,
};
use trimodal_core::metrics::{auc_score, build_report, roc_points, MetricsReport, ScoredSet, DEFAULT_THRESHOLD};
use trimodal_core::modalities::{build_for, predict_batch, train_modality, Modality, TrainHistory};

use crate::config::RunConfig;
use crate::CliError;

type CmdResult<T = ()> = Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CmdResult {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, contents).map_err(io(path))
}

/// Sidecar written next to the generated files.
#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    provenance: String,
    seed: u64,
    n_subjects: usize,
}

/// Sidecar written next to each checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub modality: Modality,
    pub val_auc: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

pub fn generate(cfg: &RunConfig) -> CmdResult {
    let start = Instant::now();
    let ds = generate_trimodal(cfg.seed, &cfg.dataset.synthetic())?;
    let dir = cfg.data_dir();
    export_dataset(&ds, &dir)?;
    let meta = DatasetMeta { provenance: ds.provenance.clone(), seed: cfg.seed, n_subjects: ds.len() };
    write(&dir.join("dataset.json"), serde_json::to_string_pretty(&meta).expect("serializable"))?;
    println!("generated {} subjects in {} [{:.1}s]", ds.len(), dir.display(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Dataset on disk plus the seeded split.
struct Prepared {
    ds: TrimodalDataset,
    split: SplitIndices,
}

fn prepare(cfg: &RunConfig) -> CmdResult<Prepared> {
    let dir = cfg.data_dir();
    let mut ds = load_dataset_dir(&dir)?;
    if let Ok(text) = fs::read_to_string(dir.join("dataset.json")) {
        let meta: DatasetMeta =
            serde_json::from_str(&text).map_err(|e| CliError::Runtime(format!("dataset.json: {e}")))?;
        ds.provenance = meta.provenance;
        ds.seed = meta.seed;
    }
    let split = split_dataset(&ds, cfg.dataset.split, cfg.seed)?;
    Ok(Prepared { ds, split })
}

fn history_csv(h: &TrainHistory) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
    for e in 0..h.epochs() {
        let _ = writeln!(out, "{},{},{},{}", e + 1, h.train_loss[e], h.val_loss[e], h.val_accuracy[e]);
    }
    out
}

fn positive_scores(probs: &[[f64; 2]]) -> Vec<f64> {
    probs.iter().map(|p| p[1]).collect()
}

pub struct TrainOutcome {
    pub modality: Modality,
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
    pub val_auc: f64,
}

fn train_branch(cfg: &RunConfig, data: &Prepared, m: Modality) -> CmdResult<TrainOutcome> {
    let train_raw = data.ds.subset(&data.split.train);
    let stats = fit_normalization(&train_raw);
    let train = apply_normalization(&stats, &train_raw)?;
    let val = apply_normalization(&stats, &data.ds.subset(&data.split.val))?;
    let seed = cfg.branch_seed(m);
    let spec = build_for(m, data.ds.geometry.input(m), seed)?;
    let (spec, history) = train_modality(spec, &train.samples(m), &val.samples(m), &cfg.train_config(m))?;
    let val_samples = val.samples(m);
    let val_auc = auc_score(&positive_scores(&predict_batch(&spec, &val_samples.inputs)?), &val_samples.labels)?;
    let checkpoint = Checkpoint { spec, geometry: data.ds.geometry, training_seed: seed, stats };
    Ok(TrainOutcome { modality: m, checkpoint, history, val_auc })
}

fn persist(cfg: &RunConfig, out: &TrainOutcome) -> CmdResult {
    let m = out.modality;
    let path = cfg.checkpoint_path(m);
    fs::create_dir_all(cfg.checkpoint_dir()).map_err(io(&path))?;
    save_checkpoint(&out.checkpoint, &path)?;
    write(&cfg.checkpoint_dir().join(format!("{m}.history.csv")), history_csv(&out.history))?;
    let meta = CheckpointMeta {
        modality: m,
        val_auc: out.val_auc,
        epochs_run: out.history.epochs(),
        best_epoch: out.history.best_epoch + 1,
    };
    write(&cfg.checkpoint_meta_path(m), serde_json::to_string_pretty(&meta).expect("serializable"))
}

fn log_trained(out: &TrainOutcome, secs: f64) {
    println!(
        "trained {}: {} epochs (best {}), validation AUC {:.4} [{secs:.1}s]",
        out.modality,
        out.history.epochs(),
        out.history.best_epoch + 1,
        out.val_auc
    );
}

pub fn train(cfg: &RunConfig, m: Modality) -> CmdResult {
    let data = prepare(cfg)?;
    let start = Instant::now();
    let out = train_branch(cfg, &data, m)?;
    persist(cfg, &out)?;
    log_trained(&out, start.elapsed().as_secs_f64());
    Ok(())
}

/// Trains the three branches as independent tasks.
fn train_all(cfg: &RunConfig) -> CmdResult {
    let data = prepare(cfg)?;
    let start = Instant::now();
    let outcomes: Vec<CmdResult<(TrainOutcome, f64)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = Modality::ALL
            .iter()
            .map(|&m| {
                let data = &data;
                scope.spawn(move || {
                    let t = Instant::now();
                    train_branch(cfg, data, m).map(|o| (o, t.elapsed().as_secs_f64()))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect()
    });
    for outcome in outcomes {
        let (out, secs) = outcome?;
        persist(cfg, &out)?;
        log_trained(&out, secs);
    }
    println!("trained all branches [{:.1}s]", start.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    fn indices<'a>(&self, s: &'a SplitIndices) -> &'a [usize] {
        match self {
            SplitName::Train => &s.train,
            SplitName::Val => &s.val,
            SplitName::Test => &s.test,
        }
    }
}

/// Per-subject predictions of one branch over a subset; `None` where the
/// subject lacks the modality.
fn branch_predictions(cp: &Checkpoint, ds: &TrimodalDataset) -> CmdResult<Vec<Option<[f64; 2]>>> {
    let m = cp.spec.modality;
    let mut inputs = Vec::new();
    for s in &ds.subjects {
        if let Some(t) = s.modality(m) {
            inputs.push(cp.stats.normalize(m, t)?);
        }
    }
    let mut probs = predict_batch(&cp.spec, &inputs)?.into_iter();
    Ok(ds.subjects.iter().map(|s| s.modality(m).and_then(|_| probs.next())).collect())
}

pub fn eval(cfg: &RunConfig, m: Modality, split: SplitName) -> CmdResult {
    let data = prepare(cfg)?;
    let cp = load_checkpoint(&cfg.checkpoint_path(m))?;
    if cp.spec.modality != m {
        return Err(CliError::Runtime(format!("checkpoint holds a {} model", cp.spec.modality)));
    }
    let subset = data.ds.subset(split.indices(&data.split));
    let preds = branch_predictions(&cp, &subset)?;
    let (scores, labels): (Vec<f64>, Vec<usize>) =
        preds.iter().zip(&subset.subjects).filter_map(|(p, s)| p.map(|p| (p[1], s.label))).unzip();
    let set = ScoredSet { name: m.display_name(), scores: &scores, labels: &labels };
    let report = build_report(&[set], DEFAULT_THRESHOLD, &data.ds.provenance, cfg.seed)?;
    print!("{}", report.to_text());
    Ok(())
}

/// Branch predictions over validation and test subjects, fusion weights
/// and the stacker fitted on validation predictions.
pub struct FusionInputs {
    pub test_ids: Vec<String>,
    pub test_labels: Vec<usize>,
    /// Outer index: subject; inner: modality slot.
    pub test_preds: Vec<Vec<ModalityPrediction>>,
    pub present: Vec<Modality>,
    pub weights: FusionWeights,
    pub stacker: StackerModel,
    pub prior: f64,
}

fn slot_predictions(per_branch: &[Option<Vec<Option<[f64; 2]>>>], i: usize) -> Vec<ModalityPrediction> {
    Modality::ALL
        .iter()
        .zip(per_branch)
        .map(|(&m, preds)| match preds.as_ref().and_then(|p| p[i]) {
            Some(p) => ModalityPrediction::present(m, p),
            None => ModalityPrediction::missing(m),
        })
        .collect()
}

fn recorded_auc(cfg: &RunConfig, m: Modality) -> Option<f64> {
    let text = fs::read_to_string(cfg.checkpoint_meta_path(m)).ok()?;
    serde_json::from_str::<CheckpointMeta>(&text).ok().map(|meta| meta.val_auc)
}

fn fusion_inputs(cfg: &RunConfig, data: &Prepared, drop: Option<Modality>) -> CmdResult<FusionInputs> {
    let val = data.ds.subset(&data.split.val);
    let test = data.ds.subset(&data.split.test);

    let mut val_preds = Vec::new();
    let mut test_preds = Vec::new();
    let mut aucs: Vec<Option<f64>> = Vec::new();
    let mut present = Vec::new();
    for m in Modality::ALL {
        let path = cfg.checkpoint_path(m);
        if Some(m) == drop || !path.exists() {
            println!("modality {m}: missing ({})", if Some(m) == drop { "dropped" } else { "no checkpoint" });
            val_preds.push(None);
            test_preds.push(None);
            aucs.push(recorded_auc(cfg, m));
            continue;
        }
        let cp = load_checkpoint(&path)?;
        let v = branch_predictions(&cp, &val)?;
        let (scores, labels): (Vec<f64>, Vec<usize>) =
            v.iter().zip(&val.subjects).filter_map(|(p, s)| p.map(|p| (p[1], s.label))).unzip();
        aucs.push(Some(auc_score(&scores, &labels)?));
        val_preds.push(Some(v));
        test_preds.push(Some(branch_predictions(&cp, &test)?));
        present.push(m);
    }
    if present.is_empty() {
        return Err(CliError::Runtime(format!("no usable checkpoints in {}", cfg.checkpoint_dir().display())));
    }

    let weights = match cfg.fusion.weights {
        Some(w) => FusionWeights::from_raw(&w)?,
        None => {
            let known: Vec<f64> = aucs.iter().flatten().copied().collect();
            let fallback = known.iter().sum::<f64>() / known.len() as f64;
            derive_weights(&aucs.iter().map(|a| a.unwrap_or(fallback)).collect::<Vec<_>>())?
        }
    };

    let val_features: Vec<Vec<f64>> =
        (0..val.len()).map(|i| meta_features(&slot_predictions(&val_preds, i))).collect();
    let stacker = train_stacker(&val_features, &val.labels())?;

    Ok(FusionInputs {
        test_ids: test.subjects.iter().map(|s| s.id.clone()).collect(),
        test_labels: test.labels(),
        test_preds: (0..test.len()).map(|i| slot_predictions(&test_preds, i)).collect(),
        present,
        weights,
        stacker,
        prior: cfg.fusion.prior,
    })
}

impl FusionInputs {
    pub fn fuse(&self, strategy: Strategy) -> CmdResult<Vec<FusionResult>> {
        self.test_preds
            .iter()
            .map(|preds| {
                Ok(match strategy {
                    Strategy::Weighted => fuse_weighted_average(preds, &self.weights)?,
                    Strategy::Majority => fuse_majority_vote(preds, &self.weights)?,
                    Strategy::Bayes => fuse_logit_pool(preds, self.prior)?,
                    Strategy::Stacked => fuse_stacked(&self.stacker, preds)?,
                })
            })
            .collect()
    }

    /// Test scores of one branch over the subjects that have it.
    fn branch_scores(&self, m: Modality) -> (Vec<f64>, Vec<usize>) {
        self.test_preds
            .iter()
            .zip(&self.test_labels)
            .filter_map(|(p, &l)| p[m.index()].positive().map(|s| (s, l)))
            .unzip()
    }
}

fn fusion_csv(inputs: &FusionInputs, results: &[FusionResult]) -> String {
    let mut out = String::from("subject_id,image,cognitive,biomarker,fused,label,confidence,true_label\n");
    for ((id, preds), (r, truth)) in inputs.test_ids.iter().zip(&inputs.test_preds).zip(results.iter().zip(&inputs.test_labels)) {
        out.push_str(id);
        for p in preds {
            match p.positive() {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push_str(",MISSING"),
            }
        }
        let _ = writeln!(out, ",{},{},{},{truth}", r.positive(), r.label, r.confidence);
    }
    out
}

pub fn fuse(cfg: &RunConfig, drop: Option<Modality>) -> CmdResult {
    let inputs = fusion_inputs(cfg, &prepare(cfg)?, drop)?;
    let strategy = cfg.fusion.strategy;
    let results = inputs.fuse(strategy)?;
    let path = cfg.paths.workdir.join(format!("fusion_{strategy}.csv"));
    write(&path, fusion_csv(&inputs, &results))?;
    let mean_conf = results.iter().map(|r| r.confidence).sum::<f64>() / results.len() as f64;
    println!("fused {} test subjects with {strategy} (mean confidence {mean_conf:.4}) -> {}", results.len(), path.display());
    Ok(())
}

/// Report plus the context needed to interpret it.
#[derive(Debug, Serialize)]
pub struct ReportDocument {
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub modalities_present: Vec<Modality>,
    pub dropped: Option<Modality>,
    pub fusion_weights: Vec<f64>,
    pub mean_confidence: Vec<(Strategy, f64)>,
}

pub fn report(cfg: &RunConfig, drop: Option<Modality>) -> CmdResult {
    let data = prepare(cfg)?;
    let inputs = fusion_inputs(cfg, &data, drop)?;
    let mut names: Vec<(String, String)> = Vec::new();
    let mut columns: Vec<(Vec<f64>, Vec<usize>)> = Vec::new();
    for &m in &inputs.present {
        names.push((m.display_name().to_owned(), m.name().to_owned()));
        columns.push(inputs.branch_scores(m));
    }
    let mut mean_confidence = Vec::new();
    for strategy in Strategy::ALL {
        let results = inputs.fuse(strategy)?;
        mean_confidence.push((strategy, results.iter().map(|r| r.confidence).sum::<f64>() / results.len() as f64));
        names.push((strategy.display_name().to_owned(), format!("fused_{strategy}")));
        columns.push((results.iter().map(FusionResult::positive).collect(), inputs.test_labels.clone()));
    }
    let sets: Vec<ScoredSet> = names
        .iter()
        .zip(&columns)
        .map(|((name, _), (scores, labels))| ScoredSet { name, scores, labels })
        .collect();
    let metrics = build_report(&sets, DEFAULT_THRESHOLD, &data.ds.provenance, cfg.seed)?;

    let dir = cfg.report_dir();
    for ((_, slug), (scores, labels)) in names.iter().zip(&columns) {
        write(&dir.join(format!("roc_{slug}.csv")), roc_points(scores, labels)?.to_csv())?;
    }
    write(&dir.join("report.txt"), metrics.to_text())?;
    let doc = ReportDocument {
        metrics,
        modalities_present: inputs.present.clone(),
        dropped: drop,
        fusion_weights: inputs.weights.as_slice().to_vec(),
        mean_confidence,
    };
    let json = serde_json::to_string_pretty(&doc).expect("serializable") + "\n";
    write(&dir.join("report.json"), json)?;
    print!("{}", doc.metrics.to_text());
    println!("report written to {}", dir.display());
    Ok(())
}

pub fn pipeline(cfg: &RunConfig, drop: Option<Modality>) -> CmdResult {
    let start = Instant::now();
    generate(cfg)?;
    train_all(cfg)?;
    fuse(cfg, drop)?;
    report(cfg, drop)?;
    println!("pipeline finished [{:.1}s]", start.elapsed().as_secs_f64());
    Ok(())
}

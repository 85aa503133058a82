//! Pipeline stages. Each stage reads its inputs, checks that they are
//! consistent with one another, computes, and writes its outputs atomically
//! with the hashes of every input in the header.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array2;
use reasonroute_core::features::{
    extract_features_batch, fit_cost_model, CostModel, CostSample, EmbeddingDump, FeatureSchema, FeatureVector,
    Standardizer, DELTA_COST_FEATURE,
};
use reasonroute_core::io::{hash_file, kinds, read_jsonl_lenient, sha256_hex, Header};
use reasonroute_core::policy::{
    calibrate_eta, default_eta_grid, epsilon_point, freeze_policy, knee_point, pareto_filter, sweep_eta,
    umax_point, utopia_point, Anchor, AnchorParams, FrontierPoint, LoggedPair, PolicyArtifact, Provenance,
    SweepInputs,
};
use reasonroute_core::probe::{aggregate_pairs, ChecklistQuestion, ProbeResult};
use reasonroute_core::ranking::{
    advantage_label, outcome_utility, AdvantageLabel, DualModeRecord, Mode, RankingInstance,
};
use reasonroute_core::router::{train as train_router, RouterModel};
use reasonroute_core::select::{select_features, SelectionReport, Setting};
use reasonroute_gateway::{ChatBackend, Gateway, HttpBackend, StubBackend};
use serde::{Deserialize, Serialize};

use crate::artifacts::{check_provenance, index_by_id, load, read_text, save, save_bytes, split_of, Loaded, StaleInput};
use crate::config::{BackendKind, PipelineConfig, SplitName};
use crate::eval::{build_report, evaluate_arms, rebase, render_markdown, Arm, EvalItem, EvalReport};
use crate::synth::{generate, SynthTruth, SYNTH_TRUTH_KIND};

/// What a stage did, for the one-line summary the CLI prints.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageSummary {
    pub stage: &'static str,
    pub outputs: Vec<PathBuf>,
    pub detail: String,
}

impl StageSummary {
    fn new(stage: &'static str, outputs: Vec<PathBuf>, detail: impl Into<String>) -> Self {
        StageSummary {
            stage,
            outputs,
            detail: detail.into(),
        }
    }
}

/// One row of the frontier file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierRecord {
    #[serde(flatten)]
    pub point: FrontierPoint,
    pub non_dominated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub instance_id: String,
    pub a_hat: f64,
    pub delta_cost: f64,
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLoss {
    pub round: usize,
    pub loss: f64,
}

/// External files for `ingest`; any subset may be given.
#[derive(Clone, Debug, Default)]
pub struct IngestSources {
    pub instances: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub dual_mode: Option<PathBuf>,
    pub probes: Option<PathBuf>,
}

fn checklist_hash(checklist: &[ChecklistQuestion]) -> Result<String> {
    let mut text = String::new();
    for q in checklist {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    Ok(sha256_hex(text.as_bytes()))
}

fn current_hash(path: &Path) -> Result<Option<String>> {
    Ok(if path.exists() { Some(hash_file(path)?) } else { None })
}

fn in_split(cfg: &PipelineConfig, id: &str, split: SplitName) -> bool {
    split_of(cfg.seed, id) == split
}

pub fn synth(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let checklist = cfg.checklist()?;
    let data = generate(&cfg.synth, cfg.seed, &checklist, cfg.exec())?;

    let inst_path = cfg.path(|p| &p.instances);
    let header = Header::new(kinds::INSTANCES)
        .with_meta("seed", cfg.seed)
        .with_meta("generator", &cfg.synth);
    save(&inst_path, &header, &data.instances)?;
    let inst_hash = hash_file(&inst_path)?;

    let derived = |kind: &str| {
        Header::new(kind)
            .with_input("instances", inst_hash.clone())
            .with_meta("seed", cfg.seed)
    };
    let emb_path = cfg.path(|p| &p.embeddings);
    save(&emb_path, &derived(kinds::EMBEDDINGS), &data.embeddings)?;
    let dual_path = cfg.path(|p| &p.dual_mode);
    save(&dual_path, &derived(kinds::DUAL_MODE_LOG), &data.records)?;
    let probe_path = cfg.path(|p| &p.probes);
    let probe_header = derived(kinds::PROBE_RESULTS).with_input("checklist", checklist_hash(&checklist)?);
    save(&probe_path, &probe_header, &data.probes)?;
    let truth_path = cfg.path(|p| &p.synth_truth);
    save(&truth_path, &derived(SYNTH_TRUTH_KIND), &data.truth)?;

    Ok(StageSummary::new(
        "synth",
        vec![inst_path, emb_path, dual_path, probe_path, truth_path],
        format!(
            "{} instances with {} candidates each",
            data.instances.len(),
            cfg.synth.n_candidates
        ),
    ))
}

pub fn read_truth(cfg: &PipelineConfig) -> Result<Vec<SynthTruth>> {
    Ok(load(&cfg.path(|p| &p.synth_truth), SYNTH_TRUTH_KIND)?.records)
}

fn ingest_file<T, F>(source: &Path, target: &Path, kind: &str, extra: &[(&str, &str)], check: F) -> Result<usize>
where
    T: Serialize + serde::de::DeserializeOwned,
    F: Fn(&T) -> Result<()>,
{
    let (_, records): (Option<Header>, Vec<T>) =
        read_jsonl_lenient(source).with_context(|| format!("reading {}", source.display()))?;
    for (i, r) in records.iter().enumerate() {
        check(r).with_context(|| format!("{} record {}", source.display(), i + 1))?;
    }
    let mut header = Header::new(kind)
        .with_input("source", hash_file(source)?)
        .with_meta("source_path", source.display().to_string());
    for (name, hash) in extra {
        header = header.with_input(*name, *hash);
    }
    save(target, &header, &records)?;
    Ok(records.len())
}

/// Copy externally produced records into headered pipeline files, validating
/// each record and its instance id.
pub fn ingest(cfg: &PipelineConfig, sources: &IngestSources) -> Result<StageSummary> {
    let mut outputs = Vec::new();
    let mut detail = Vec::new();
    let inst_path = cfg.path(|p| &p.instances);
    if let Some(src) = &sources.instances {
        let n = ingest_file::<RankingInstance, _>(src, &inst_path, kinds::INSTANCES, &[], |i| Ok(i.validate()?))?;
        outputs.push(inst_path.clone());
        detail.push(format!("{n} instances"));
    }
    let others = sources.embeddings.is_some() || sources.dual_mode.is_some() || sources.probes.is_some();
    if !others {
        if outputs.is_empty() {
            bail!("ingest needs at least one of --instances, --embeddings, --dual-mode, --probes");
        }
        return Ok(StageSummary::new("ingest", outputs, detail.join(", ")));
    }
    let instances: Loaded<RankingInstance> = load(&inst_path, kinds::INSTANCES)?;
    let by_id = index_by_id("instances", &instances.records, |i| i.id.as_str())?;
    let known = |id: &str| -> Result<()> {
        if by_id.contains_key(id) {
            Ok(())
        } else {
            bail!("unknown instance id `{id}`")
        }
    };
    let inputs = [("instances", instances.hash.as_str())];
    if let Some(src) = &sources.embeddings {
        let out = cfg.path(|p| &p.embeddings);
        let n = ingest_file::<EmbeddingDump, _>(src, &out, kinds::EMBEDDINGS, &inputs, |d| {
            known(&d.instance_id)?;
            Ok(d.validate()?)
        })?;
        outputs.push(out);
        detail.push(format!("{n} embedding dumps"));
    }
    if let Some(src) = &sources.dual_mode {
        let out = cfg.path(|p| &p.dual_mode);
        let n = ingest_file::<DualModeRecord, _>(src, &out, kinds::DUAL_MODE_LOG, &inputs, |r| {
            known(&r.instance_id)?;
            r.validate()?;
            let inst = by_id[r.instance_id.as_str()];
            r.non_think.ranking.validate(inst)?;
            r.think.ranking.validate(inst)?;
            Ok(())
        })?;
        outputs.push(out);
        detail.push(format!("{n} dual-mode records"));
    }
    if let Some(src) = &sources.probes {
        let out = cfg.path(|p| &p.probes);
        let checklist = cfg.checklist()?;
        let ck = checklist_hash(&checklist)?;
        let inputs = [("instances", instances.hash.as_str()), ("checklist", ck.as_str())];
        let n = ingest_file::<ProbeResult, _>(src, &out, kinds::PROBE_RESULTS, &inputs, |r| {
            known(&r.instance_id)?;
            aggregate_pairs(r, &checklist)?;
            Ok(())
        })?;
        outputs.push(out);
        detail.push(format!("{n} probe results"));
    }
    Ok(StageSummary::new("ingest", outputs, detail.join(", ")))
}

fn load_instances_and_logs(cfg: &PipelineConfig) -> Result<(Loaded<RankingInstance>, Loaded<DualModeRecord>)> {
    let instances: Loaded<RankingInstance> = load(&cfg.path(|p| &p.instances), kinds::INSTANCES)?;
    let logs: Loaded<DualModeRecord> = load(&cfg.path(|p| &p.dual_mode), kinds::DUAL_MODE_LOG)?;
    check_provenance("dual-mode log", &logs.header, &[("instances", &instances.hash)])?;
    Ok((instances, logs))
}

pub fn label(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let (instances, logs) = load_instances_and_logs(cfg)?;
    let by_id = index_by_id("instances", &instances.records, |i| i.id.as_str())?;
    let mut labels = Vec::with_capacity(logs.records.len());
    let mut skipped = 0usize;
    for r in &logs.records {
        if !r.is_complete() {
            log::warn!("skipping `{}`: a mode failed to generate", r.instance_id);
            skipped += 1;
            continue;
        }
        let inst = by_id
            .get(r.instance_id.as_str())
            .ok_or_else(|| anyhow!("log record for unknown instance `{}`", r.instance_id))?;
        labels.push(advantage_label(r, inst, cfg.metric, cfg.lambda)?);
    }
    let path = cfg.path(|p| &p.labels);
    let header = Header::new(kinds::LABELS)
        .with_input("instances", instances.hash.clone())
        .with_input("dual_mode", logs.hash.clone())
        .with_meta("lambda", cfg.lambda)
        .with_meta("metric", cfg.metric)
        .with_meta("skipped_incomplete", skipped);
    save(&path, &header, &labels)?;
    let mean = labels.iter().map(|l| l.advantage).sum::<f64>() / labels.len().max(1) as f64;
    Ok(StageSummary::new(
        "label",
        vec![path],
        format!("{} labels (mean advantage {mean:.4}), {skipped} incomplete records skipped", labels.len()),
    ))
}

pub fn features(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let (instances, logs) = load_instances_and_logs(cfg)?;
    let dumps: Loaded<EmbeddingDump> = load(&cfg.path(|p| &p.embeddings), kinds::EMBEDDINGS)?;
    check_provenance("embeddings", &dumps.header, &[("instances", &instances.hash)])?;
    let checklist = cfg.checklist()?;
    let ck = checklist_hash(&checklist)?;
    let probe_path = cfg.path(|p| &p.probes);
    let probes: Option<Loaded<ProbeResult>> = if probe_path.exists() {
        let p = load(&probe_path, kinds::PROBE_RESULTS)?;
        check_provenance("probe results", &p.header, &[("instances", &instances.hash), ("checklist", &ck)])?;
        Some(p)
    } else {
        log::warn!("no probe results at {}; checklist signals are omitted", probe_path.display());
        None
    };

    let inst_by_id = index_by_id("instances", &instances.records, |i| i.id.as_str())?;
    let log_by_id = index_by_id("dual-mode log", &logs.records, |r| r.instance_id.as_str())?;
    let mut samples = Vec::new();
    for d in &dumps.records {
        let inst = inst_by_id
            .get(d.instance_id.as_str())
            .ok_or_else(|| anyhow!("embedding dump for unknown instance `{}`", d.instance_id))?;
        if inst.candidates.len() != d.candidates.len() {
            bail!(
                "instance `{}` has {} candidates but its dump has {}",
                d.instance_id,
                inst.candidates.len(),
                d.candidates.len()
            );
        }
        if !in_split(cfg, &d.instance_id, SplitName::Train) {
            continue;
        }
        if let Some(r) = log_by_id.get(d.instance_id.as_str()).filter(|r| r.is_complete()) {
            samples.push(CostSample {
                prompt_tokens: d.prompt_tokens as f64,
                n_candidates: d.candidates.len() as f64,
                delta_tokens: r.think.tokens as f64 - r.non_think.tokens as f64,
            });
        }
    }
    if samples.is_empty() {
        bail!("no complete train-split records to fit the extra-cost estimator");
    }
    let cost_model = fit_cost_model(&samples)?;
    let mut vectors = extract_features_batch(cfg.exec(), &dumps.records, &cost_model, &cfg.kmeans)?;

    if let Some(p) = &probes {
        let by_id = index_by_id("probe results", &p.records, |r| r.instance_id.as_str())?;
        for v in &mut vectors {
            let r = by_id
                .get(v.instance_id.as_str())
                .ok_or_else(|| anyhow!("no probe result for instance `{}`", v.instance_id))?;
            let signals = aggregate_pairs(r, &checklist)?;
            v.join_signals(signals.signals.iter());
        }
    }
    let schema = vectors.first().map(FeatureVector::names).unwrap_or_default();
    for v in &vectors {
        v.values_for(&schema)?;
    }

    let path = cfg.path(|p| &p.features);
    let mut header = Header::new(kinds::FEATURES)
        .with_input("instances", instances.hash.clone())
        .with_input("embeddings", dumps.hash.clone())
        .with_input("dual_mode", logs.hash.clone())
        .with_meta("cost_model", cost_model)
        .with_meta("kmeans", cfg.kmeans)
        .with_meta("schema", &schema)
        .with_meta("split_seed", cfg.seed);
    if let Some(p) = &probes {
        header = header.with_input("probes", p.hash.clone()).with_input("checklist", ck);
    }
    save(&path, &header, &vectors)?;
    let fitted = match cost_model {
        CostModel::Fitted(m) => format!("extra-cost fit on {} train rows", m.n_train),
        CostModel::Unfitted => "extra-cost model unfitted".into(),
    };
    Ok(StageSummary::new(
        "features",
        vec![path],
        format!("{} vectors x {} features; {fitted}", vectors.len(), schema.len()),
    ))
}

fn probe_with<B: ChatBackend + Sync>(
    gw: &Gateway<B>,
    instances: &[&RankingInstance],
    checklist: &[ChecklistQuestion],
) -> Result<Vec<ProbeResult>> {
    instances
        .iter()
        .map(|i| gw.probe_checklist(i, checklist).with_context(|| format!("probing `{}`", i.id)))
        .collect()
}

fn select_instances<'a>(cfg: &PipelineConfig, all: &'a [RankingInstance], split: Option<SplitName>) -> Vec<&'a RankingInstance> {
    all.iter()
        .filter(|i| split.is_none_or(|s| in_split(cfg, &i.id, s)))
        .collect()
}

/// Ask the backbone every checklist question for each instance.
pub fn probe(cfg: &PipelineConfig, split: Option<SplitName>) -> Result<StageSummary> {
    cfg.validate()?;
    let instances: Loaded<RankingInstance> = load(&cfg.path(|p| &p.instances), kinds::INSTANCES)?;
    let checklist = cfg.checklist()?;
    let chosen = select_instances(cfg, &instances.records, split);
    let results = match cfg.backend {
        BackendKind::Http => {
            let gw = Gateway::new(HttpBackend::new(&cfg.gateway)?, cfg.gateway.clone())?;
            probe_with(&gw, &chosen, &checklist)?
        }
        BackendKind::Stub => probe_with(&Gateway::new(StubBackend::default(), cfg.gateway.clone())?, &chosen, &checklist)?,
    };
    let path = cfg.path(|p| &p.probes);
    let header = Header::new(kinds::PROBE_RESULTS)
        .with_input("instances", instances.hash.clone())
        .with_input("checklist", checklist_hash(&checklist)?)
        .with_meta("model", &cfg.gateway.model)
        .with_meta("backend", cfg.backend);
    save(&path, &header, &results)?;
    Ok(StageSummary::new(
        "probe",
        vec![path],
        format!("{} instances x {} questions", results.len(), checklist.len()),
    ))
}

/// Generate both modes (and optionally a self-selected run) per instance.
pub fn collect(cfg: &PipelineConfig, split: Option<SplitName>, self_select: bool) -> Result<StageSummary> {
    cfg.validate()?;
    let instances: Loaded<RankingInstance> = load(&cfg.path(|p| &p.instances), kinds::INSTANCES)?;
    let chosen: Vec<RankingInstance> = select_instances(cfg, &instances.records, split).into_iter().cloned().collect();
    let path = cfg.path(|p| &p.dual_mode);
    let header = Header::new(kinds::DUAL_MODE_LOG)
        .with_input("instances", instances.hash.clone())
        .with_meta("model", &cfg.gateway.model)
        .with_meta("backend", cfg.backend);
    let summary = match cfg.backend {
        BackendKind::Http => Gateway::new(HttpBackend::new(&cfg.gateway)?, cfg.gateway.clone())?
            .collect_dual_mode(&chosen, &path, header, self_select)?,
        BackendKind::Stub => Gateway::new(StubBackend::default(), cfg.gateway.clone())?
            .collect_dual_mode(&chosen, &path, header, self_select)?,
    };
    Ok(StageSummary::new(
        "collect",
        vec![path],
        format!(
            "{} instances: {} already logged, {} completed, {} failed (rerun to retry)",
            summary.total, summary.skipped, summary.completed, summary.failed
        ),
    ))
}

/// Train-split rows that have both a feature vector and a label, in
/// feature-file order.
struct Joined<'a> {
    vectors: Vec<&'a FeatureVector>,
    labels: Vec<&'a AdvantageLabel>,
}

fn join_labels<'a>(
    cfg: &PipelineConfig,
    features: &'a [FeatureVector],
    labels: &'a [AdvantageLabel],
    split: SplitName,
) -> Result<Joined<'a>> {
    let by_id = index_by_id("labels", labels, |l| l.instance_id.as_str())?;
    let mut out = Joined {
        vectors: Vec::new(),
        labels: Vec::new(),
    };
    for v in features.iter().filter(|v| in_split(cfg, &v.instance_id, split)) {
        if let Some(l) = by_id.get(v.instance_id.as_str()) {
            out.vectors.push(v);
            out.labels.push(l);
        }
    }
    if out.vectors.len() < 2 {
        bail!("only {} labelled {:?}-split rows; need at least 2", out.vectors.len(), split);
    }
    Ok(out)
}

fn design(vectors: &[&FeatureVector], schema: &[String]) -> Result<Array2<f64>> {
    let mut x = Array2::zeros((vectors.len(), schema.len()));
    for (i, v) in vectors.iter().enumerate() {
        let row = v.values_for(schema).with_context(|| format!("instance `{}`", v.instance_id))?;
        for (j, val) in row.into_iter().enumerate() {
            x[[i, j]] = val;
        }
    }
    Ok(x)
}

fn load_features_and_labels(cfg: &PipelineConfig) -> Result<(Loaded<FeatureVector>, Loaded<AdvantageLabel>)> {
    let features: Loaded<FeatureVector> = load(&cfg.path(|p| &p.features), kinds::FEATURES)?;
    let labels: Loaded<AdvantageLabel> = load(&cfg.path(|p| &p.labels), kinds::LABELS)?;
    for (name, path) in [("instances", cfg.path(|p| &p.instances)), ("dual_mode", cfg.path(|p| &p.dual_mode))] {
        if let Some(h) = current_hash(&path)? {
            check_provenance("features", &features.header, &[(name, &h)])?;
            check_provenance("labels", &labels.header, &[(name, &h)])?;
        }
    }
    Ok((features, labels))
}

fn schema_of(features: &Loaded<FeatureVector>) -> Result<Vec<String>> {
    match features.header.meta_as::<Vec<String>>("schema") {
        Ok(s) => Ok(s),
        Err(_) => Ok(features.records.first().map(FeatureVector::names).unwrap_or_default()),
    }
}

/// Lasso probe per train-split fold, cross-fold consistency vote, then
/// within-class redundancy pruning, on standardized features.
pub fn select(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let (features, labels) = load_features_and_labels(cfg)?;
    let names = schema_of(&features)?;
    for keep in &cfg.select.always_keep {
        if !names.contains(keep) {
            return Err(reasonroute_core::Error::SchemaMismatch {
                missing: vec![keep.clone()],
            }
            .into());
        }
    }
    let joined = join_labels(cfg, &features.records, &labels.records, SplitName::Train)?;
    let x = design(&joined.vectors, &names)?;
    let (_, z) = Standardizer::fit(&x)?;
    let folds = cfg.select_folds;
    let settings: Vec<Setting> = (0..folds)
        .map(|f| {
            let rows: Vec<usize> = (0..z.nrows()).filter(|i| i % folds == f).collect();
            Setting {
                name: format!("fold-{f}"),
                x: z.select(ndarray::Axis(0), &rows),
                y: rows.iter().map(|&i| joined.labels[i].advantage).collect(),
            }
        })
        .collect();
    let report = select_features(cfg.exec(), &settings, &names, &cfg.select)?;
    let path = cfg.path(|p| &p.selection);
    let header = Header::new(kinds::SELECTION)
        .with_input("features", features.hash.clone())
        .with_input("labels", labels.hash.clone())
        .with_meta("config", &cfg.select)
        .with_meta("n_rows", joined.vectors.len())
        .with_meta("split_seed", cfg.seed);
    save(&path, &header, std::slice::from_ref(&report))?;
    Ok(StageSummary::new(
        "select",
        vec![path],
        format!("kept {} of {} features: {}", report.kept.len(), names.len(), report.kept.join(", ")),
    ))
}

/// The split is a function of the seed, so a downstream stage run with a
/// different seed would silently score the model on its own training rows.
fn check_split_seed(cfg: &PipelineConfig, header: &Header) -> Result<()> {
    let Ok(recorded) = header.meta_as::<u64>("split_seed") else {
        return Ok(());
    };
    if recorded != cfg.seed {
        return Err(StaleInput {
            artifact: "selection report".into(),
            input: "split seed".into(),
            recorded: recorded.to_string(),
            found: cfg.seed.to_string(),
        }
        .into());
    }
    Ok(())
}

fn load_selection(cfg: &PipelineConfig, features: &str, labels: &str) -> Result<(SelectionReport, String)> {
    let sel: Loaded<SelectionReport> = load(&cfg.path(|p| &p.selection), kinds::SELECTION)?;
    check_provenance("selection report", &sel.header, &[("features", features), ("labels", labels)])?;
    check_split_seed(cfg, &sel.header)?;
    let [report]: [SelectionReport; 1] = sel
        .records
        .try_into()
        .map_err(|v: Vec<_>| anyhow!("selection file must hold one report, found {}", v.len()))?;
    Ok((report, sel.hash))
}

pub fn train(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let (features, labels) = load_features_and_labels(cfg)?;
    let (selection, sel_hash) = load_selection(cfg, &features.hash, &labels.hash)?;
    let schema = FeatureSchema::new(selection.kept.clone());
    let joined = join_labels(cfg, &features.records, &labels.records, SplitName::Train)?;
    let x = design(&joined.vectors, &schema.names)?;
    let y: Vec<f64> = joined.labels.iter().map(|l| l.advantage).collect();
    let w: Vec<f64> = joined.labels.iter().map(|l| l.weight).collect();
    let (model, log) = train_router(cfg.exec(), &x, &y, &w, &schema, &cfg.train)?;

    let model_path = cfg.path(|p| &p.model);
    let text = model.save_with_inputs([
        ("features", features.hash.as_str()),
        ("labels", labels.hash.as_str()),
        ("selection", sel_hash.as_str()),
    ])?;
    save_bytes(&model_path, text.as_bytes())?;
    let log_path = cfg.path(|p| &p.train_log);
    let rounds: Vec<RoundLoss> = log
        .losses
        .iter()
        .enumerate()
        .map(|(round, &loss)| RoundLoss { round, loss })
        .collect();
    let header = Header::new("train-log")
        .with_input("model", sha256_hex(text.as_bytes()))
        .with_input("features", features.hash.clone())
        .with_input("labels", labels.hash.clone())
        .with_meta("config", &cfg.train);
    save(&log_path, &header, &rounds)?;
    let first = log.losses.first().copied().unwrap_or(0.0);
    let last = log.losses.last().copied().unwrap_or(0.0);
    Ok(StageSummary::new(
        "train",
        vec![model_path, log_path],
        format!(
            "{} trees on {} rows x {} features; weighted loss {first:.4} -> {last:.4}",
            model.trees.len(),
            y.len(),
            schema.names.len()
        ),
    ))
}

/// Model and its file hash, checked against the current features, labels
/// and selection so a stale model is never applied.
fn load_model(cfg: &PipelineConfig, features_hash: &str) -> Result<(RouterModel, String)> {
    let (text, hash) = read_text(&cfg.path(|p| &p.model), "router model")?;
    let (header, model) = RouterModel::load_with_header(&text).context("loading router model")?;
    let mut current = vec![("features", features_hash.to_string())];
    for (name, path) in [("labels", cfg.path(|p| &p.labels)), ("selection", cfg.path(|p| &p.selection))] {
        if let Some(h) = current_hash(&path)? {
            current.push((name, h));
        }
    }
    let current: Vec<(&str, &str)> = current.iter().map(|(n, h)| (*n, h.as_str())).collect();
    check_provenance("router model", &header, &current)?;
    let sel_path = cfg.path(|p| &p.selection);
    if sel_path.exists() {
        let sel: Loaded<SelectionReport> = load(&sel_path, kinds::SELECTION)?;
        check_split_seed(cfg, &sel.header)?;
        if let Some(report) = sel.records.first() {
            model.check_schema(&FeatureSchema::new(report.kept.clone()))?;
        }
    }
    Ok((model, hash))
}

/// Features, predictions, cost estimates and logged outcomes for one split.
pub struct SplitInputs {
    pub ids: Vec<String>,
    pub predictions: Vec<f64>,
    pub delta_costs: Vec<f64>,
    pub pairs: Vec<LoggedPair>,
    pub model_hash: String,
    pub hashes: BTreeMap<&'static str, String>,
}

impl SplitInputs {
    pub fn sweep(&self) -> Result<SweepInputs<'_>> {
        Ok(SweepInputs::new(&self.predictions, &self.delta_costs, &self.pairs)?)
    }
}

fn delta_cost(v: &FeatureVector) -> Result<f64> {
    v.features
        .get(DELTA_COST_FEATURE)
        .copied()
        .ok_or_else(|| anyhow!("feature vector `{}` lacks `{DELTA_COST_FEATURE}`", v.instance_id))
}

pub fn split_inputs(cfg: &PipelineConfig, split: SplitName) -> Result<SplitInputs> {
    let (instances, logs) = load_instances_and_logs(cfg)?;
    let features: Loaded<FeatureVector> = load(&cfg.path(|p| &p.features), kinds::FEATURES)?;
    check_provenance(
        "features",
        &features.header,
        &[("instances", &instances.hash), ("dual_mode", &logs.hash)],
    )?;
    let (model, model_hash) = load_model(cfg, &features.hash)?;
    let inst_by_id = index_by_id("instances", &instances.records, |i| i.id.as_str())?;
    let log_by_id = index_by_id("dual-mode log", &logs.records, |r| r.instance_id.as_str())?;

    let mut vectors = Vec::new();
    let mut pairs = Vec::new();
    for v in features.records.iter().filter(|v| in_split(cfg, &v.instance_id, split)) {
        let id = v.instance_id.as_str();
        let (Some(inst), Some(rec)) = (inst_by_id.get(id), log_by_id.get(id)) else {
            bail!("instance `{id}` is missing from the instances or dual-mode log");
        };
        if !rec.is_complete() {
            log::warn!("leaving `{id}` out of the sweep: a mode failed to generate");
            continue;
        }
        pairs.push(LoggedPair {
            u_non: outcome_utility(cfg.metric, inst, &rec.non_think)?,
            u_think: outcome_utility(cfg.metric, inst, &rec.think)?,
            t_non: rec.non_think.tokens as f64,
            t_think: rec.think.tokens as f64,
        });
        vectors.push(v.clone());
    }
    if vectors.is_empty() {
        bail!("no complete {split:?}-split instances to sweep");
    }
    let predictions = model.predict_batch(cfg.exec(), &vectors)?;
    let delta_costs = vectors.iter().map(delta_cost).collect::<Result<Vec<_>>>()?;
    let hashes = BTreeMap::from([
        ("instances", instances.hash),
        ("dual_mode", logs.hash),
        ("features", features.hash),
        ("model", model_hash.clone()),
    ]);
    Ok(SplitInputs {
        ids: vectors.into_iter().map(|v| v.instance_id).collect(),
        predictions,
        delta_costs,
        pairs,
        model_hash,
        hashes,
    })
}

fn mean_point(pairs: &[LoggedPair], mode: Mode) -> (f64, f64) {
    let n = pairs.len() as f64;
    let (t, u) = pairs.iter().map(|p| p.outcome(mode)).fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    (t / n, u / n)
}

pub fn sweep(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let split = cfg.policy.sweep_split;
    let data = split_inputs(cfg, split)?;
    let inputs = data.sweep()?;
    let grid = default_eta_grid(&data.predictions, &data.delta_costs, cfg.policy.grid_size);
    let points = sweep_eta(cfg.exec(), &inputs, &grid)?;
    let front = pareto_filter(&points);
    let records: Vec<FrontierRecord> = points
        .iter()
        .map(|p| FrontierRecord {
            point: *p,
            non_dominated: front
                .iter()
                .any(|f| f.mean_tokens == p.mean_tokens && f.utility == p.utility),
        })
        .collect();
    let (t_think, u_think) = mean_point(&data.pairs, Mode::Think);
    let (t_non, u_non) = mean_point(&data.pairs, Mode::NonThink);
    let mut header = Header::new(kinds::FRONTIER)
        .with_meta("split", split)
        .with_meta("n_instances", data.pairs.len())
        .with_meta("always_think", FrontierPoint {
            eta: 0.0,
            mean_tokens: t_think,
            utility: u_think,
            think_fraction: 1.0,
        })
        .with_meta("always_non_think", FrontierPoint {
            eta: f64::MAX,
            mean_tokens: t_non,
            utility: u_non,
            think_fraction: 0.0,
        });
    for (name, hash) in &data.hashes {
        header = header.with_input(*name, hash.clone());
    }
    let path = cfg.path(|p| &p.frontier);
    save(&path, &header, &records)?;
    Ok(StageSummary::new(
        "sweep",
        vec![path],
        format!(
            "{} eta values on {} {split:?} instances, {} non-dominated",
            records.len(),
            data.pairs.len(),
            front.len()
        ),
    ))
}

pub fn policy(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let frontier: Loaded<FrontierRecord> = load(&cfg.path(|p| &p.frontier), kinds::FRONTIER)?;
    let (_, model_hash) = read_text(&cfg.path(|p| &p.model), "router model")?;
    check_provenance("frontier", &frontier.header, &[("model", &model_hash)])?;
    let points: Vec<FrontierPoint> = frontier.records.iter().map(|r| r.point).collect();
    let front = pareto_filter(&points);
    let pc = &cfg.policy;
    let mut params = AnchorParams::default();
    let point = match pc.anchor {
        Anchor::Knee => {
            let (p, flag) = knee_point(&front)?;
            params.knee_flag = flag;
            p
        }
        Anchor::Utopia => {
            params.w_tokens = Some(pc.w_tokens);
            params.w_utility = Some(pc.w_utility);
            utopia_point(&front, pc.w_tokens, pc.w_utility)?
        }
        Anchor::Epsilon => {
            let u_base = match pc.u_base {
                Some(u) => u,
                None => frontier.header.meta_as::<FrontierPoint>("always_think")?.utility,
            };
            params.u_base = Some(u_base);
            params.epsilon = Some(pc.epsilon);
            epsilon_point(&front, u_base, pc.epsilon)?
        }
        Anchor::Umax => umax_point(&front)?,
        Anchor::Manual => {
            let split: SplitName = frontier.header.meta_as("split")?;
            let data = split_inputs(cfg, split)?;
            let inputs = data.sweep()?;
            let eta = match (pc.eta, pc.token_budget) {
                (Some(eta), _) => eta,
                (None, Some(budget)) => {
                    let grid: Vec<f64> = points.iter().map(|p| p.eta).collect();
                    calibrate_eta(cfg.exec(), budget, &inputs, &grid)?
                }
                (None, None) => bail!("the manual anchor needs policy.eta or policy.token_budget"),
            };
            inputs.evaluate(eta)?
        }
    };
    let provenance = Provenance {
        model_hash,
        data_hash: frontier.hash.clone(),
        timestamp: None,
    };
    let artifact = freeze_policy(pc.anchor, &point, params, provenance)?;
    let path = cfg.path(|p| &p.policy);
    save_bytes(&path, artifact.save()?.as_bytes())?;
    Ok(StageSummary::new(
        "policy",
        vec![path],
        format!(
            "{:?} anchor: eta {:.6e}, expected tokens {:.1}, utility {:.4}, think fraction {:.3}",
            pc.anchor, point.eta, point.mean_tokens, point.utility, point.think_fraction
        ),
    ))
}

pub fn load_policy(cfg: &PipelineConfig) -> Result<(PolicyArtifact, String)> {
    let (text, hash) = read_text(&cfg.path(|p| &p.policy), "policy artifact")?;
    Ok((PolicyArtifact::load(&text).context("loading policy artifact")?, hash))
}

pub fn route(cfg: &PipelineConfig, split: SplitName) -> Result<StageSummary> {
    cfg.validate()?;
    let (policy, policy_hash) = load_policy(cfg)?;
    let features: Loaded<FeatureVector> = load(&cfg.path(|p| &p.features), kinds::FEATURES)?;
    let (model, model_hash) = load_model(cfg, &features.hash)?;
    policy.check_model(&model_hash);
    let vectors: Vec<FeatureVector> = features
        .records
        .iter()
        .filter(|v| in_split(cfg, &v.instance_id, split))
        .cloned()
        .collect();
    if vectors.is_empty() {
        bail!("no {split:?}-split instances to route");
    }
    let preds = model.predict_batch(cfg.exec(), &vectors)?;
    let mut decisions = Vec::with_capacity(vectors.len());
    for (v, a_hat) in vectors.iter().zip(preds) {
        let delta_cost = delta_cost(v)?;
        decisions.push(Decision {
            instance_id: v.instance_id.clone(),
            a_hat,
            delta_cost,
            mode: policy.route(a_hat, delta_cost)?,
        });
    }
    let path = cfg.path(|p| &p.decisions);
    let header = Header::new(kinds::DECISIONS)
        .with_input("policy", policy_hash)
        .with_input("model", model_hash)
        .with_input("features", features.hash.clone())
        .with_meta("split", split)
        .with_meta("eta", policy.eta_frozen);
    save(&path, &header, &decisions)?;
    let think = decisions.iter().filter(|d| d.mode == Mode::Think).count();
    Ok(StageSummary::new(
        "route",
        vec![path],
        format!("{} {split:?} decisions, {think} think", decisions.len()),
    ))
}

pub fn eval(cfg: &PipelineConfig) -> Result<StageSummary> {
    cfg.validate()?;
    let decisions: Loaded<Decision> = load(&cfg.path(|p| &p.decisions), kinds::DECISIONS)?;
    let (instances, logs) = load_instances_and_logs(cfg)?;
    let mut current = Vec::new();
    for (name, path) in [("features", cfg.path(|p| &p.features)), ("policy", cfg.path(|p| &p.policy))] {
        if let Some(h) = current_hash(&path)? {
            current.push((name, h));
        }
    }
    let current: Vec<(&str, &str)> = current.iter().map(|(n, h)| (*n, h.as_str())).collect();
    check_provenance("decisions", &decisions.header, &current)?;
    let split: SplitName = decisions.header.meta_as("split")?;

    let inst_by_id = index_by_id("instances", &instances.records, |i| i.id.as_str())?;
    let log_by_id: HashMap<&str, &DualModeRecord> =
        index_by_id("dual-mode log", &logs.records, |r| r.instance_id.as_str())?;
    let mut items = Vec::with_capacity(decisions.records.len());
    for d in &decisions.records {
        let id = d.instance_id.as_str();
        let record = log_by_id
            .get(id)
            .ok_or_else(|| anyhow!("instance `{id}` has a decision but no dual-mode log record"))?;
        let instance = inst_by_id
            .get(id)
            .ok_or_else(|| anyhow!("instance `{id}` has a decision but is not in the instances file"))?;
        if !record.is_complete() {
            log::warn!("`{id}` has a failed mode; it scores zero utility in that mode");
        }
        items.push(EvalItem {
            instance,
            record,
            routed: d.mode,
        });
    }
    let arms = evaluate_arms(cfg.metric, &items, cfg.eval.random_p, cfg.seed)?;
    let report = build_report(split, cfg.metric, items.len(), arms, cfg.eval.baseline)?;
    let path = cfg.path(|p| &p.eval);
    let header = Header::new(kinds::EVAL)
        .with_input("decisions", decisions.hash.clone())
        .with_input("instances", instances.hash.clone())
        .with_input("dual_mode", logs.hash.clone())
        .with_meta("random_p", cfg.eval.random_p)
        .with_meta("seed", cfg.seed);
    save(&path, &header, std::slice::from_ref(&report))?;
    let routed = report.arms.iter().find(|a| a.arm == Arm::Routed).expect("routed arm");
    Ok(StageSummary::new(
        "eval",
        vec![path],
        format!(
            "{} instances; routed {} {:.4} at {:.1} tokens (think fraction {:.3})",
            report.n_instances, report.metric, routed.utility, routed.mean_tokens, routed.think_fraction
        ),
    ))
}

pub fn load_eval(cfg: &PipelineConfig) -> Result<(EvalReport, String)> {
    let loaded: Loaded<EvalReport> = load(&cfg.path(|p| &p.eval), kinds::EVAL)?;
    let [report]: [EvalReport; 1] = loaded
        .records
        .try_into()
        .map_err(|v: Vec<_>| anyhow!("eval file must hold one report, found {}", v.len()))?;
    Ok((report, loaded.hash))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub inputs: BTreeMap<String, String>,
    #[serde(flatten)]
    pub report: EvalReport,
}

/// Markdown and JSON reports with deltas against `baseline`, plus the
/// frontier as CSV when a sweep has been run.
pub fn report(cfg: &PipelineConfig, baseline: Option<Arm>) -> Result<StageSummary> {
    let (eval, eval_hash) = load_eval(cfg)?;
    let report = rebase(&eval, baseline.unwrap_or(eval.baseline))?;
    let mut inputs = BTreeMap::from([("eval".to_string(), eval_hash)]);
    let mut outputs = Vec::new();

    let frontier_path = cfg.path(|p| &p.frontier);
    if frontier_path.exists() {
        let frontier: Loaded<FrontierRecord> = load(&frontier_path, kinds::FRONTIER)?;
        let mut csv = String::from("eta,mean_tokens,utility,think_fraction,non_dominated\n");
        for r in &frontier.records {
            let p = r.point;
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                p.eta, p.mean_tokens, p.utility, p.think_fraction, r.non_dominated
            );
        }
        let csv_path = cfg.path(|p| &p.frontier_csv);
        save_bytes(&csv_path, csv.as_bytes())?;
        outputs.push(csv_path);
        inputs.insert("frontier".into(), frontier.hash);
    }

    let pairs: Vec<(&str, &str)> = inputs.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    let md_path = cfg.path(|p| &p.report_md);
    save_bytes(&md_path, render_markdown(&report, &pairs).as_bytes())?;
    let json_path = cfg.path(|p| &p.report_json);
    let doc = ReportDoc {
        inputs,
        report: report.clone(),
    };
    let mut json = serde_json::to_string_pretty(&doc)?;
    json.push('\n');
    save_bytes(&json_path, json.as_bytes())?;
    outputs.insert(0, json_path);
    outputs.insert(0, md_path);

    let failed = report.checks.iter().filter(|c| !c.passed).count();
    Ok(StageSummary::new(
        "report",
        outputs,
        format!("baseline {}; {} checks, {failed} failed", report.baseline, report.checks.len()),
    ))
}

/// Every offline stage from generation to report.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageSummary>> {
    Ok(vec![
        synth(cfg)?,
        label(cfg)?,
        features(cfg)?,
        select(cfg)?,
        train(cfg)?,
        sweep(cfg)?,
        policy(cfg)?,
        route(cfg, cfg.eval.split)?,
        eval(cfg)?,
        report(cfg, None)?,
    ])
}

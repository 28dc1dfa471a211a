//! The four subcommands. Each one fans (user, seed) jobs out over the
//! rayon pool and writes its outputs in a fixed order, so reruns with the
//! same config produce identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crop_core::benchmark::{self, user_split, UserSplit};
use crop_core::diagnostics::write_heatmap_csv;
use crop_core::metrics::{EvalRow, SummaryRow, STATE_CONVENTIONAL, STATE_CROP, STATE_GENERIC};
use crop_core::nn::EpochRecord;
use crop_core::{
    conventional_finetune, crop_personalize, fim_trace, gip, magnitude_heatmap, CropError, EvalReport,
    LabeledDataset, ModelFile, ModelParams, Result,
};
use rayon::prelude::*;

use crate::config::ExperimentConfig;

pub const STATE_FINETUNED: &str = "finetuned";
pub const STATE_PRUNED: &str = "pruned";
pub const STATE_MIXED: &str = "mixed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Conventional,
    Crop,
    All,
}

impl Method {
    fn runs_conventional(self) -> bool {
        matches!(self, Method::Conventional | Method::All)
    }

    fn runs_crop(self) -> bool {
        matches!(self, Method::Crop | Method::All)
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn generic_model(&self, seed: u64) -> PathBuf {
        self.root.join("generic").join(format!("seed{seed}.cropmdl"))
    }

    pub fn generic_history(&self, seed: u64) -> PathBuf {
        self.root.join("generic").join(format!("seed{seed}_history.csv"))
    }

    pub fn personal_model(&self, method: &str, user: &str, seed: u64) -> PathBuf {
        self.root.join(method).join(user).join(format!("seed{seed}.cropmdl"))
    }

    /// Snapshots of one CRoP run: `finetuned`, `pruned`, `mixed` models
    /// and `history.csv`.
    pub fn stage_dir(&self, user: &str, seed: u64) -> PathBuf {
        self.root.join(STATE_CROP).join(user).join(format!("seed{seed}"))
    }

    pub fn stage_model(&self, user: &str, seed: u64, stage: &str) -> PathBuf {
        self.stage_dir(user, seed).join(format!("{stage}.cropmdl"))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("eval").join("report.csv")
    }

    pub fn summary(&self) -> PathBuf {
        self.root.join("eval").join("summary.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("diagnostics")
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn save_model(path: &Path, file: &ModelFile) -> Result<()> {
    write_file(path, &file.to_bytes())
}

fn load_required(path: &Path, what: &str) -> Result<ModelFile> {
    if !path.exists() {
        return Err(CropError::Usage(format!("missing {what}: {}", path.display())));
    }
    ModelFile::load(path)
}

fn csv_bytes<T: serde::Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.into_inner().map_err(|e| CropError::Io(e.into_error()))
}

fn csv_error(e: csv::Error) -> CropError {
    CropError::Format(format!("csv: {e}"))
}

#[derive(serde::Serialize)]
struct HistoryRow<'a> {
    stage: &'a str,
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
}

fn history_rows<'a>(stage: &'a str, records: &[EpochRecord]) -> Vec<HistoryRow<'a>> {
    records
        .iter()
        .map(|r| HistoryRow {
            stage,
            epoch: r.epoch,
            train_loss: r.train_loss,
            val_loss: r.val_loss,
        })
        .collect()
}

fn jobs(cfg: &ExperimentConfig) -> Vec<(String, u64)> {
    cfg.users
        .personalize
        .iter()
        .flat_map(|u| cfg.seeds.iter().map(move |s| (u.clone(), *s)))
        .collect()
}

fn split_for(cfg: &ExperimentConfig, data: &LabeledDataset, user: &str, seed: u64) -> Result<UserSplit> {
    user_split(
        data,
        user,
        &cfg.scenario.available,
        &cfg.scenario.unseen,
        cfg.test_fraction,
        cfg.seeded(seed).split_seed,
    )
}

fn model_file(cfg: &ExperimentConfig, model: ModelParams, metadata: String) -> ModelFile {
    ModelFile {
        model,
        metric: cfg.metric,
        mask: None,
        metadata,
    }
}

/// Trains one generic model per seed on the generic users (all contexts)
/// and writes it with its training curve.
pub fn train_generic(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let data = cfg.dataset()?;
    let users = cfg.generic_users(&data);
    let generic_data = data.for_users(&users);
    if generic_data.is_empty() {
        return Err(CropError::Usage("no rows belong to generic-training users".into()));
    }
    let layout = Layout::new(&cfg.out_dir);
    cfg.seeds
        .par_iter()
        .map(|&seed| {
            let start = Instant::now();
            let s = cfg.seeded(seed);
            let outcome = benchmark::train_generic(&generic_data, &cfg.layer_dims, &s.generic_train)?;
            let path = layout.generic_model(seed);
            let meta = format!("role=generic seed={seed} best_epoch={}", outcome.best_epoch);
            save_model(&path, &model_file(cfg, outcome.best, meta))?;
            write_file(&layout.generic_history(seed), &csv_bytes(history_rows("generic", &outcome.history))?)?;
            log::info!(
                "generic seed {seed}: best epoch {} in {:.2}s",
                outcome.best_epoch,
                start.elapsed().as_secs_f64()
            );
            Ok(path)
        })
        .collect()
}

/// Personalizes every configured user for every seed.
pub fn personalize(cfg: &ExperimentConfig, method: Method) -> Result<Vec<PathBuf>> {
    let data = cfg.dataset()?;
    let layout = Layout::new(&cfg.out_dir);
    let generics = cfg
        .seeds
        .iter()
        .map(|&s| Ok((s, load_required(&layout.generic_model(s), "generic model (run train-generic first)")?.model)))
        .collect::<Result<BTreeMap<u64, ModelParams>>>()?;
    let written = jobs(cfg)
        .par_iter()
        .map(|(user, seed)| personalize_one(cfg, &layout, &data, &generics[seed], user, *seed, method))
        .collect::<Result<Vec<_>>>()?;
    Ok(written.into_iter().flatten().collect())
}

fn personalize_one(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &LabeledDataset,
    generic: &ModelParams,
    user: &str,
    seed: u64,
    method: Method,
) -> Result<Vec<PathBuf>> {
    let s = cfg.seeded(seed);
    let split = split_for(cfg, data, user, seed)?;
    let mut written = Vec::new();
    if method.runs_conventional() {
        let start = Instant::now();
        let model = conventional_finetune(generic, &split.pool, &s.conventional)?;
        let path = layout.personal_model(STATE_CONVENTIONAL, user, seed);
        save_model(&path, &model_file(cfg, model, format!("role=conventional user={user} seed={seed}")))?;
        log::info!("{user} seed {seed}: conventional in {:.2}s", start.elapsed().as_secs_f64());
        written.push(path);
    }
    if method.runs_crop() {
        let start = Instant::now();
        let res = crop_personalize(generic, &split.pool, &s.crop)?;
        let best_epochs: Vec<String> = res.passes.iter().map(|p| p.best_epoch.to_string()).collect();
        let meta = format!(
            "role=crop user={user} seed={seed} prune_fraction={:?} best_epochs={}",
            res.prune_fraction,
            best_epochs.join(";")
        );
        let path = layout.personal_model(STATE_CROP, user, seed);
        let mut file = model_file(cfg, res.final_model, meta);
        file.mask = Some(res.mask.clone());
        save_model(&path, &file)?;
        written.push(path);
        if let Some(stages) = res.stages {
            for (name, model, mask) in [
                (STATE_FINETUNED, stages.finetuned, None),
                (STATE_PRUNED, stages.pruned, Some(res.mask.clone())),
                (STATE_MIXED, stages.mixed, Some(res.mask.clone())),
            ] {
                let stage_path = layout.stage_model(user, seed, name);
                let mut f = model_file(cfg, model, format!("role={name} user={user} seed={seed}"));
                f.mask = mask;
                save_model(&stage_path, &f)?;
                written.push(stage_path);
            }
            let mut rows = history_rows("initial", &res.initial_history);
            let labels: Vec<String> = (1..=res.passes.len()).map(|i| format!("final{i}")).collect();
            for (label, pass) in labels.iter().zip(&res.passes) {
                rows.extend(history_rows(label, &pass.history));
            }
            let hist = layout.stage_dir(user, seed).join("history.csv");
            write_file(&hist, &csv_bytes(rows)?)?;
            written.push(hist);
        }
        log::info!(
            "{user} seed {seed}: crop pruned {:.2} in {:.2}s",
            res.prune_fraction,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(written)
}

fn optional_model(path: &Path) -> Result<Option<ModelParams>> {
    if path.exists() {
        Ok(Some(ModelFile::load(path)?.model))
    } else {
        Ok(None)
    }
}

/// Scores every saved model on each context's test rows and writes the
/// long-format report plus the delta summary. Returns the report.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<EvalReport> {
    let data = cfg.dataset()?;
    let layout = Layout::new(&cfg.out_dir);
    let per_job = jobs(cfg)
        .par_iter()
        .map(|(user, seed)| evaluate_one(cfg, &layout, &data, user, *seed))
        .collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport::new(cfg.metric);
    report.rows = per_job.into_iter().flatten().collect();
    write_file(&layout.report(), &csv_bytes(&report.rows)?)?;
    let summary = report.summary(STATE_CROP)?;
    write_file(&layout.summary(), &summary_csv(&summary)?)?;
    for row in summary.iter().filter(|r| r.label == "mean") {
        if let (Some(p), Some(g)) = (row.delta_p, row.delta_g) {
            log::info!("delta_p {:+.2} +- {:.2}, delta_g {:+.2} +- {:.2}", p.0, p.1, g.0, g.1);
        }
    }
    Ok(report)
}

fn evaluate_one(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &LabeledDataset,
    user: &str,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    let generic = load_required(&layout.generic_model(seed), "generic model")?.model;
    let mut states = vec![(STATE_GENERIC, generic)];
    for (state, path) in [
        (STATE_CONVENTIONAL, layout.personal_model(STATE_CONVENTIONAL, user, seed)),
        (STATE_FINETUNED, layout.stage_model(user, seed, STATE_FINETUNED)),
        (STATE_PRUNED, layout.stage_model(user, seed, STATE_PRUNED)),
        (STATE_MIXED, layout.stage_model(user, seed, STATE_MIXED)),
        (STATE_CROP, layout.personal_model(STATE_CROP, user, seed)),
    ] {
        if let Some(m) = optional_model(&path)? {
            states.push((state, m));
        }
    }
    if states.len() == 1 {
        return Err(CropError::Usage(format!(
            "no personalized models for user {user} seed {seed} (run personalize first)"
        )));
    }
    let split = split_for(cfg, data, user, seed)?;
    let mut rows = Vec::new();
    for (state, model) in &states {
        for (ctx, test) in &split.test {
            rows.push(EvalRow {
                user: user.to_string(),
                seed,
                state: state.to_string(),
                context: ctx.clone(),
                value: crop_core::evaluate(model, test, cfg.metric)?,
            });
        }
    }
    Ok(rows)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct SummaryRecord {
    label: String,
    delta_p_mean: Option<f64>,
    delta_p_std: Option<f64>,
    delta_g_mean: Option<f64>,
    delta_g_std: Option<f64>,
}

fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    // the `std` row carries the across-user spread in its mean columns
    // and has no spread of its own
    csv_bytes(rows.iter().map(|r| {
        let own_std = r.label != "std";
        SummaryRecord {
            label: r.label.clone(),
            delta_p_mean: r.delta_p.map(|v| v.0),
            delta_p_std: r.delta_p.filter(|_| own_std).map(|v| v.1),
            delta_g_mean: r.delta_g.map(|v| v.0),
            delta_g_std: r.delta_g.filter(|_| own_std).map(|v| v.1),
        }
    }))
}

/// Reads a report written by [`evaluate`].
pub fn read_report(path: &Path, metric: crop_core::MetricKind) -> Result<EvalReport> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<EvalRow>, _>>()
        .map_err(csv_error)?;
    let mut report = EvalReport::new(metric);
    report.rows = rows;
    Ok(report)
}

/// `(label, delta_p mean, delta_g mean)` for one row of a summary file.
pub type SummaryLine = (String, Option<f64>, Option<f64>);

pub fn read_summary(path: &Path) -> Result<Vec<SummaryLine>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    reader
        .deserialize()
        .map(|r| {
            let r: SummaryRecord = r.map_err(csv_error)?;
            Ok((r.label, r.delta_p_mean, r.delta_g_mean))
        })
        .collect()
}

#[derive(serde::Serialize)]
struct GipRow<'a> {
    user: &'a str,
    seed: u64,
    step: usize,
    stage: &'a str,
    gip: f64,
}

#[derive(serde::Serialize)]
struct FimRow<'a> {
    user: &'a str,
    seed: u64,
    model: &'a str,
    context: &'a str,
    fim_trace: f64,
}

struct Diagnosis {
    user: String,
    seed: u64,
    gip: Vec<(usize, &'static str, f64)>,
    fim: Vec<(&'static str, String, f64)>,
    heatmaps: Vec<(&'static str, Vec<Vec<f64>>)>,
}

/// Per-stage gradient inner products over the user's test contexts,
/// Fisher traces of the generic, conventional and CRoP models, and weight
/// magnitude maps of their penultimate layer.
pub fn diagnose(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let data = cfg.dataset()?;
    let layout = Layout::new(&cfg.out_dir);
    let results = jobs(cfg)
        .par_iter()
        .map(|(user, seed)| diagnose_one(cfg, &layout, &data, user, *seed))
        .collect::<Result<Vec<_>>>()?;

    let dir = layout.diagnostics();
    let mut gip_rows = Vec::new();
    let mut fim_rows = Vec::new();
    for d in &results {
        for (step, stage, value) in &d.gip {
            gip_rows.push(GipRow {
                user: &d.user,
                seed: d.seed,
                step: *step,
                stage,
                gip: *value,
            });
        }
        for (model, ctx, value) in &d.fim {
            fim_rows.push(FimRow {
                user: &d.user,
                seed: d.seed,
                model,
                context: ctx,
                fim_trace: *value,
            });
        }
        for (state, grid) in &d.heatmaps {
            let mut buf = Vec::new();
            write_heatmap_csv(grid, &mut buf)?;
            let name = format!("{}_seed{}_{state}.csv", d.user, d.seed);
            write_file(&dir.join("heatmaps").join(name), &buf)?;
        }
    }
    write_file(&dir.join("gip.csv"), &csv_bytes(gip_rows)?)?;
    write_file(&dir.join("fim.csv"), &csv_bytes(fim_rows)?)?;
    Ok(dir)
}

fn diagnose_one(
    cfg: &ExperimentConfig,
    layout: &Layout,
    data: &LabeledDataset,
    user: &str,
    seed: u64,
) -> Result<Diagnosis> {
    let snapshot = |path: PathBuf| load_required(&path, "stage snapshot (set crop.keep_stages and personalize with crop)");
    let generic = load_required(&layout.generic_model(seed), "generic model")?.model;
    let conventional = load_required(
        &layout.personal_model(STATE_CONVENTIONAL, user, seed),
        "conventional model (personalize with --method conventional or all)",
    )?
    .model;
    let finetuned = snapshot(layout.stage_model(user, seed, STATE_FINETUNED))?.model;
    let pruned = snapshot(layout.stage_model(user, seed, STATE_PRUNED))?.model;
    let mixed = snapshot(layout.stage_model(user, seed, STATE_MIXED))?.model;
    let crop = snapshot(layout.personal_model(STATE_CROP, user, seed))?.model;

    let split = split_for(cfg, data, user, seed)?;
    let domains: Vec<&LabeledDataset> = split.test.values().collect();
    let mut gips = Vec::new();
    for (step, stage, model) in [
        (2, STATE_FINETUNED, &finetuned),
        (3, STATE_PRUNED, &pruned),
        (4, STATE_MIXED, &mixed),
        (5, STATE_CROP, &crop),
    ] {
        gips.push((step, stage, gip(model, &domains)?));
    }
    let mut fim = Vec::new();
    let mut heatmaps = Vec::new();
    for (name, model) in [
        (STATE_GENERIC, &generic),
        (STATE_CONVENTIONAL, &conventional),
        (STATE_CROP, &crop),
    ] {
        for (ctx, test) in &split.test {
            fim.push((name, ctx.clone(), fim_trace(model, test)?));
        }
        let layer = model.layers().len().saturating_sub(2);
        heatmaps.push((name, magnitude_heatmap(model, layer)?));
    }
    Ok(Diagnosis {
        user: user.to_string(),
        seed,
        gip: gips,
        fim,
        heatmaps,
    })
}

/// Process exit status for an error: 3 for numeric failures, 2 otherwise.
pub fn exit_code(err: &CropError) -> i32 {
    match err {
        CropError::Numeric(_) => 3,
        _ => 2,
    }
}

//! The subcommands. Each reads what earlier commands wrote under the output
//! directory (see [`Layout`]) and writes its own artifacts plus a manifest.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use pairgan_core::analysis::{cohort_accuracy, evaluate_case, CaseReport};
use pairgan_core::phantom::{generate, generate_suite, write_case};
use pairgan_core::preprocess::{
    center_brain, histogram_match, normalize_unit, resample, resample_mask, shift_mask, MatchDirection,
};
use pairgan_core::{read_mask, read_volume, write_mask, write_volume, Mask, Volume};
use pairgan_train::ensemble::save_member;
use pairgan_train::{
    ensemble_map, history_csv, render_overlays, run_training, CheckpointEnsemble, EnsembleMember, EpochStats, Observer,
    PairData, TrainError,
};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{io, CliError};
use crate::layout::{Layout, STAGES};

pub fn layout(cfg: &RunConfig) -> Layout {
    Layout::new(&cfg.output, &cfg.volume_ext)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
    std::fs::write(path, text).map_err(|e| io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

/// An upstream artifact that an earlier command should have written.
fn missing(what: &str, path: &Path) -> CliError {
    CliError::Invalid(format!("missing {what}: {} does not exist", path.display()))
}

fn read_existing_volume(field: &str, path: &Path) -> Result<Volume, CliError> {
    if !path.exists() {
        return Err(missing(field, path));
    }
    Ok(read_volume(path)?)
}

fn read_existing_mask(field: &str, path: &Path) -> Result<Mask, CliError> {
    if !path.exists() {
        return Err(missing(field, path));
    }
    Ok(read_mask(path)?)
}

fn file_entry(path: &Path) -> Result<Value, CliError> {
    Ok(json!({ "file": path.display().to_string(), "sha256": sha256_file(path)? }))
}

/// Result of [`preprocess`], mostly for callers that chain commands.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub t1: Volume,
    pub t2: Volume,
    pub shifts: [[i64; 3]; 2],
    pub manifest: PathBuf,
}

/// Resample, histogram-match, normalise and centre the pair, writing every
/// stage. Brain masks default to the nonzero voxels of each resampled volume;
/// segmentations, when given, are carried into the frame of their timepoint.
pub fn preprocess(cfg: &RunConfig) -> Result<Preprocessed, CliError> {
    cfg.validate()?;
    let p = &cfg.paths;
    let t1_path = cfg.require("paths.t1", &p.t1)?;
    let t2_path = cfg.require("paths.t2", &p.t2)?;
    let brain_paths = [cfg.optional("paths.brain_t1", &p.brain_t1)?, cfg.optional("paths.brain_t2", &p.brain_t2)?];
    let seg_paths = [cfg.optional("paths.seg1", &p.seg1)?, cfg.optional("paths.seg2", &p.seg2)?];
    let lay = layout(cfg);
    std::fs::create_dir_all(lay.preprocessed_dir()).map_err(|e| io(lay.preprocessed_dir(), e))?;
    let target = cfg.shape();

    let raw = [read_volume(&t1_path)?, read_volume(&t2_path)?];
    let resampled = [resample(&raw[0], target)?, resample(&raw[1], target)?];
    let mut brains = Vec::with_capacity(2);
    for k in 0..2 {
        brains.push(match &brain_paths[k] {
            Some(path) => {
                let m = read_mask(path)?;
                if m.shape() != raw[k].shape() {
                    return Err(CliError::Invalid(format!(
                        "brain mask {} has grid {}, its volume has {}",
                        path.display(),
                        m.shape(),
                        raw[k].shape()
                    )));
                }
                resample_mask(&m, target)
            }
            None => Mask::from_fn(target, |x, y, z| resampled[k].get(x, y, z) > 0.0),
        });
    }
    let mut warnings = Vec::new();
    let matched = match cfg.preprocess.match_direction {
        MatchDirection::T2ToT1 => {
            let m = histogram_match(&resampled[1], &resampled[0]);
            warnings.extend(m.warning);
            [resampled[0].clone(), m.volume]
        }
        MatchDirection::T1ToT2 => {
            let m = histogram_match(&resampled[0], &resampled[1]);
            warnings.extend(m.warning);
            [m.volume, resampled[1].clone()]
        }
    };
    let normalized = [normalize_unit(&matched[0]), normalize_unit(&matched[1])];
    let (c1, s1) = center_brain(&normalized[0], &brains[0])?;
    let (c2, s2) = center_brain(&normalized[1], &brains[1])?;
    let shifts = [s1, s2];
    let stages = [&resampled, &matched, &normalized, &[c1, c2]];

    let names = ["t1", "t2"];
    let mut stage_entries = Vec::new();
    for (k, vols) in stages.iter().enumerate() {
        let mut entry = serde_json::Map::new();
        entry.insert("stage".into(), json!(STAGES[k]));
        for (v, name) in vols.iter().zip(names) {
            let path = lay.stage(name, k);
            write_volume(v, &path)?;
            entry.insert(name.into(), file_entry(&path)?);
        }
        stage_entries.push(Value::Object(entry));
    }
    let centered = stages[3];
    let mut masks = serde_json::Map::new();
    for (k, name) in ["brain_t1", "brain_t2"].into_iter().enumerate() {
        let path = lay.preprocessed(name);
        write_mask(&shift_mask(&brains[k], shifts[k]), &centered[k], &path)?;
        masks.insert(name.into(), file_entry(&path)?);
    }
    for (k, name) in ["seg1", "seg2"].into_iter().enumerate() {
        if let Some(src) = &seg_paths[k] {
            let m = read_mask(src)?;
            if m.shape() != raw[k].shape() {
                return Err(CliError::Invalid(format!(
                    "segmentation {} has grid {}, its volume has {}",
                    src.display(),
                    m.shape(),
                    raw[k].shape()
                )));
            }
            let path = lay.preprocessed(name);
            write_mask(&shift_mask(&resample_mask(&m, target), shifts[k]), &centered[k], &path)?;
            masks.insert(name.into(), file_entry(&path)?);
        }
    }
    let manifest = json!({
        "command": "preprocess",
        "inputs": { "t1": t1_path, "t2": t2_path, "brain_t1": brain_paths[0], "brain_t2": brain_paths[1],
                    "seg1": seg_paths[0], "seg2": seg_paths[1] },
        "grid": target.0,
        "match_direction": cfg.preprocess.match_direction,
        "shifts": { "t1": s1, "t2": s2 },
        "warnings": warnings,
        "stages": stage_entries,
        "masks": masks,
        "created_unix": unix_now(),
    });
    write_json(&lay.preprocess_manifest(), &manifest)?;
    let [t1, t2] = [centered[0].clone(), centered[1].clone()];
    Ok(Preprocessed { t1, t2, shifts, manifest: lay.preprocess_manifest() })
}

/// Writes every checkpoint as soon as it exists and reports progress.
struct CheckpointSink {
    dir: PathBuf,
    started: Instant,
    total: usize,
    quiet: bool,
}

impl Observer<f32> for CheckpointSink {
    fn epoch_end(&mut self, s: &EpochStats) -> Result<(), TrainError> {
        if !self.quiet && (s.epoch % 10 == 0 || s.epoch + 1 == self.total) {
            eprintln!(
                "epoch {:>5}/{}  critic {:>9.4}  W {:>8.4}  gp {:>7.4}  gen {:>9.4}  |M| {:.4}  {:.0}s",
                s.epoch + 1,
                self.total,
                s.critic_loss,
                s.wasserstein,
                s.penalty,
                s.generator_loss,
                s.mean_abs_map,
                self.started.elapsed().as_secs_f64()
            );
        }
        Ok(())
    }

    fn checkpoint(&mut self, m: &EnsembleMember<f32>) -> Result<(), TrainError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| TrainError::Io { path: self.dir.clone(), source: e })?;
        save_member(m, &self.dir).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub ensemble: CheckpointEnsemble<f32>,
    pub checkpoints: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Train on the preprocessed pair and save the checkpoint ensemble, loss
/// curves and a manifest of the realised schedule.
pub fn train(cfg: &RunConfig, quiet: bool) -> Result<Trained, CliError> {
    cfg.validate()?;
    let lay = layout(cfg);
    let t1 = read_existing_volume("preprocessed t1", &lay.preprocessed("t1"))?;
    let t2 = read_existing_volume("preprocessed t2", &lay.preprocessed("t2"))?;
    if t1.shape() != cfg.shape() {
        return Err(CliError::Invalid(format!("preprocessed grid {} differs from grid.shape {}", t1.shape(), cfg.shape())));
    }
    let data = PairData::new(t1, t2)?;
    let tcfg = cfg.train_config();
    let started = Instant::now();
    let mut sink = CheckpointSink { dir: lay.checkpoints(), started, total: tcfg.schedule.total_epochs, quiet };
    let outcome = run_training::<f32>(&data, &tcfg, cfg.seed, &mut sink)?;
    let elapsed = started.elapsed().as_secs_f64();
    let checkpoints = outcome.ensemble.save(&lay.checkpoints())?;
    write_text(&lay.losses(), &history_csv(&outcome.history))?;
    let members: Vec<Value> = outcome
        .ensemble
        .members
        .iter()
        .zip(&checkpoints)
        .map(|(m, p)| Ok(json!({ "epoch": m.epoch, "exclusion": m.exclusion, "checkpoint": file_entry(p)? })))
        .collect::<Result<_, CliError>>()?;
    let manifest = json!({
        "command": "train",
        "seed": cfg.seed,
        "config": tcfg,
        "slices": data.slices,
        "realized": {
            "critic_updates": outcome.critic_updates,
            "generator_updates": outcome.generator_updates,
            "critic_steps_per_epoch": outcome.history.iter().map(|s| s.critic_steps).collect::<Vec<_>>(),
            "checkpoint_epochs": outcome.ensemble.members.iter().map(|m| m.epoch).collect::<Vec<_>>(),
        },
        "members": members,
        "losses": lay.losses(),
        "created_unix": unix_now(),
        "elapsed_seconds": elapsed,
    });
    write_json(&lay.train_manifest(), &manifest)?;
    Ok(Trained { ensemble: outcome.ensemble, checkpoints, manifest: lay.train_manifest() })
}

#[derive(Debug, Clone)]
pub struct Predicted {
    pub map: Volume,
    pub map_path: PathBuf,
    pub overlays: Vec<PathBuf>,
}

/// Ensemble change map of the preprocessed baseline, plus overlays on the
/// preprocessed follow-up.
pub fn predict(cfg: &RunConfig) -> Result<Predicted, CliError> {
    cfg.validate()?;
    let lay = layout(cfg);
    let index = lay.checkpoints().join(pairgan_train::ensemble::INDEX_FILE);
    if !index.exists() {
        return Err(missing("checkpoints", &index));
    }
    let ens = CheckpointEnsemble::<f32>::load(&lay.checkpoints())?;
    let t1 = read_existing_volume("preprocessed t1", &lay.preprocessed("t1"))?;
    let t2 = read_existing_volume("preprocessed t2", &lay.preprocessed("t2"))?;
    let map = ensemble_map(&ens, &t1)?;
    let map_path = lay.change_map();
    write_volume(&map, &map_path)?;
    let slices: Vec<usize> =
        if cfg.overlay.slices.is_empty() { (0..t2.shape().nz()).collect() } else { cfg.overlay.slices.clone() };
    let overlays = render_overlays(&map, &t2, &lay.overlays(), &slices, &cfg.overlay_style())?;
    let manifest = json!({
        "command": "predict",
        "ensemble": index,
        "members": ens.members.iter().map(|m| json!({ "epoch": m.epoch, "exclusion": m.exclusion })).collect::<Vec<_>>(),
        "change_map": file_entry(&map_path)?,
        "overlays": overlays,
        "overlay_style": cfg.overlay_style(),
        "created_unix": unix_now(),
    });
    write_json(&lay.predict_manifest(), &manifest)?;
    Ok(Predicted { map, map_path, overlays })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedReport {
    pub case: String,
    #[serde(flatten)]
    pub report: CaseReport,
}

/// Evaluate the case whose outputs live in `lay`.
pub fn evaluate_dir(lay: &Layout, cfg: &RunConfig) -> Result<CaseReport, CliError> {
    let map = read_existing_volume("change map", &lay.change_map())?;
    let seg1 = read_existing_mask("preprocessed seg1", &lay.preprocessed("seg1"))?;
    let seg2 = read_existing_mask("preprocessed seg2", &lay.preprocessed("seg2"))?;
    let brain = read_existing_mask("preprocessed brain_t1", &lay.preprocessed("brain_t1"))?;
    if map.shape() != seg1.shape() || map.shape() != seg2.shape() || map.shape() != brain.shape() {
        return Err(CliError::Invalid(format!("change map grid {} does not match the masks", map.shape())));
    }
    Ok(evaluate_case(&map, &seg1, &seg2, Some(&brain), &cfg.analysis)?)
}

fn case_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per case plus an overall accuracy row.
pub fn cohort_csv(reports: &[NamedReport]) -> String {
    let mut out = String::from(
        "case,v1,v2_true,v2_predicted,volume_change,truth,predicted,match,growth_auc,reduction_auc,micro_auc\n",
    );
    for r in reports {
        let rep = &r.report;
        let v1 = rep.truth.map(|t| t.v1.to_string()).unwrap_or_default();
        let v2t = rep.truth.map(|t| t.v2.to_string()).unwrap_or_default();
        let v2p = rep.predicted.map(|p| p.v2.to_string()).unwrap_or_default();
        let truth = rep.truth.map(|t| t.category.as_str()).unwrap_or("");
        let pred = rep.predicted.map(|p| p.category.as_str()).unwrap_or("");
        let matched = rep.matches.map(|m| m.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{v1},{v2t},{v2p},{},{truth},{pred},{matched},{},{},{}\n",
            r.case,
            rep.volume_change,
            fmt_opt(rep.roc.growth.as_ref().map(|c| c.auc)),
            fmt_opt(rep.roc.reduction.as_ref().map(|c| c.auc)),
            fmt_opt(rep.roc.micro_auc),
        ));
    }
    let scored = reports.iter().filter(|r| r.report.matches.is_some()).count();
    let correct = reports.iter().filter(|r| r.report.matches == Some(true)).count();
    let acc = if scored > 0 { correct as f64 / scored as f64 } else { f64::NAN };
    out.push_str(&format!("accuracy,,,,,,,{correct}/{scored},{acc:.6},,\n"));
    out
}

fn accuracy_csv(reports: &[NamedReport]) -> String {
    let plain: Vec<CaseReport> = reports.iter().map(|r| r.report.clone()).collect();
    let mut out = String::from("category,cases,correct,accuracy\n");
    let (mut n, mut c) = (0, 0);
    for a in cohort_accuracy(&plain) {
        let acc = if a.cases > 0 { format!("{:.6}", a.correct as f64 / a.cases as f64) } else { String::new() };
        out.push_str(&format!("{},{},{},{acc}\n", a.category.as_str(), a.cases, a.correct));
        n += a.cases;
        c += a.correct;
    }
    let acc = if n > 0 { format!("{:.6}", c as f64 / n as f64) } else { String::new() };
    out.push_str(&format!("total,{n},{c},{acc}\n"));
    out
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    /// The case in the output directory itself, when the cohort is empty.
    pub report: Option<CaseReport>,
    pub cohort: Vec<NamedReport>,
}

/// Evaluate the output directory's own case, or every directory listed in
/// `evaluate.cohort`.
pub fn evaluate(cfg: &RunConfig) -> Result<Evaluated, CliError> {
    cfg.validate()?;
    let lay = layout(cfg);
    if cfg.evaluate.cohort.is_empty() {
        let report = evaluate_dir(&lay, cfg)?;
        write_json(&lay.report(), &NamedReport { case: case_name(&lay.root), report: report.clone() })?;
        return Ok(Evaluated { report: Some(report), cohort: Vec::new() });
    }
    let mut reports = Vec::new();
    for (k, dir) in cfg.evaluate.cohort.iter().enumerate() {
        if !dir.is_dir() {
            return Err(CliError::config(&format!("evaluate.cohort[{k}]"), format!("{} is not a directory", dir.display())));
        }
        let report = evaluate_dir(&Layout::new(dir, &cfg.volume_ext), cfg)?;
        reports.push(NamedReport { case: case_name(dir), report });
    }
    std::fs::create_dir_all(&lay.root).map_err(|e| io(&lay.root, e))?;
    write_text(&lay.cohort_csv(), &cohort_csv(&reports))?;
    write_text(&lay.cohort_accuracy_csv(), &accuracy_csv(&reports))?;
    write_json(&lay.report(), &reports)?;
    Ok(Evaluated { report: None, cohort: reports })
}

/// Write phantom cases under `<output>/phantoms/case_NN`.
pub fn phantom(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ph = &cfg.phantom;
    ph.spec.validate().map_err(|e| CliError::config("phantom.spec", e.to_string()))?;
    if !ph.single && ph.n_per_class == 0 {
        return Err(CliError::config("phantom.n_per_class", "must be positive"));
    }
    let cases = if ph.single { vec![generate(&ph.spec)?] } else { generate_suite(ph.n_per_class, ph.seed, &ph.spec)? };
    let root = layout(cfg).phantoms();
    let mut dirs = Vec::new();
    let mut listing = Vec::new();
    for (k, case) in cases.iter().enumerate() {
        let dir = root.join(format!("case_{k:02}"));
        write_case(case, &dir, &cfg.volume_ext)?;
        listing.push(json!({ "dir": dir, "truth": case.truth }));
        dirs.push(dir);
    }
    write_json(&root.join("suite.json"), &json!({ "seed": ph.seed, "single": ph.single, "cases": listing }))?;
    Ok(dirs)
}

/// Preprocess, train, predict, and evaluate when segmentations are given.
pub fn run_all(cfg: &RunConfig, quiet: bool) -> Result<Option<CaseReport>, CliError> {
    preprocess(cfg)?;
    train(cfg, quiet)?;
    predict(cfg)?;
    if cfg.paths.seg1.is_some() && cfg.paths.seg2.is_some() {
        let mut single = cfg.clone();
        single.evaluate.cohort.clear();
        return Ok(evaluate(&single)?.report);
    }
    Ok(None)
}

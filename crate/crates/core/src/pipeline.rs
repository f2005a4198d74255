//! File-in/file-out orchestration of the two-stage pipeline: dataset
//! generation, training both networks from a dataset directory, per-case
//! inference with all artifacts on disk, batch evaluation, and longitudinal
//! tracking. The CLI is a thin flag parser over these functions, so
//! everything here is exercisable in-process by tests.
//!
//! Every output directory gets a `provenance.json` carrying the tool
//! version, the effective configuration, the seeds, and SHA-256 checksums
//! of the inputs — enough to re-run or audit any artifact. No timestamps,
//! so identical runs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, format_err, Error, Result};
use crate::image::Mask2;
use crate::longitudinal::{progression_series, quantify_timepoint, ProgressionSeries};
use crate::metrics::{self, ConfusionCounts};
use crate::nn::checkpoint::Checkpoint;
use crate::ovol;
use crate::pgm;
use crate::phantom::{self, CaseEntry, DatasetManifest, PhantomConfig, Split};
use crate::rnv::{self, refine_vessels, RnvCase, RnvLogRow, RnvNet, RnvNetConfig};
use crate::slab::{build_stack, StackProvenance};
use crate::volume::{mask_to_surface, surface_to_mask, LesionMask, VriMask, VriSurface};
use crate::vri::{infer_vri, VriCase, VriLogRow, VriNet, VriNetConfig};

pub const TOOL_NAME: &str = "rnvkit";

pub fn tool_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

// ============================================================
// Provenance
// ============================================================

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Audit record written next to every command's outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    /// Input label -> SHA-256 of the file contents.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str) -> Self {
        Provenance {
            tool: TOOL_NAME.into(),
            version: tool_version().into(),
            command: command.into(),
            seeds: BTreeMap::new(),
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn config<C: Serialize>(mut self, cfg: &C) -> Result<Self> {
        self.config = serde_json::to_value(cfg)?;
        Ok(self)
    }

    pub fn input(mut self, label: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(label.into(), sha256_file(path)?);
        Ok(self)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("provenance.json"), self)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err!("{}: {e}", path.display()))
}

// ============================================================
// Dataset generation
// ============================================================

/// Top-level config for `phantom gen`: split sizes, master seed, and the
/// per-case template.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub template: PhantomConfig,
}

pub fn run_phantom_gen(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let manifest =
        phantom::generate_dataset(&spec.template, spec.n_train, spec.n_test, spec.seed, out_dir)?;
    Provenance::new("phantom gen")
        .seed("dataset", spec.seed)
        .config(spec)?
        .save(out_dir)?;
    Ok(manifest)
}

// ============================================================
// Case preparation
// ============================================================

/// Where the projection surface for stage 2 comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// Ground-truth interface from the dataset (oracle ablation / training).
    Truth,
    /// Stage-1 network prediction (the deployable two-stage path).
    Predicted,
}

impl std::str::FromStr for SurfaceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truth" => Ok(SurfaceMode::Truth),
            "predicted" => Ok(SurfaceMode::Predicted),
            other => Err(config_err!("surface mode must be truth|predicted, got '{other}'")),
        }
    }
}

impl std::fmt::Display for SurfaceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SurfaceMode::Truth => "truth",
            SurfaceMode::Predicted => "predicted",
        })
    }
}

pub fn prepare_vri_cases(dir: &Path, entries: &[&CaseEntry]) -> Result<Vec<VriCase>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let lc = phantom::load_case(dir, e)?;
        let truth = surface_to_mask(&lc.truth.vri, lc.oct.nz())?;
        out.push(VriCase {
            id: lc.id,
            oct: lc.oct,
            octa: lc.octa,
            truth,
        });
    }
    Ok(out)
}

/// Build stage-2 cases: project each case's five-channel stack over either
/// the truth surface or the stage-1 prediction.
pub fn prepare_rnv_cases(
    dir: &Path,
    entries: &[&CaseEntry],
    mode: SurfaceMode,
    vri_net: Option<&VriNet<f64>>,
    k: f32,
) -> Result<Vec<RnvCase>> {
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let lc = phantom::load_case(dir, e)?;
        let (surface, surface_id) = resolve_surface(mode, &lc.oct, &lc.octa, &lc.truth.vri, vri_net)?;
        let stack = build_stack(
            &lc.oct,
            &lc.octa,
            &surface,
            k,
            StackProvenance {
                oct_id: e.files.oct.clone(),
                octa_id: e.files.octa.clone(),
                surface_id,
                k,
            },
        )?;
        out.push(RnvCase {
            id: e.id.clone(),
            stack,
            truth: lc.truth.lesions.mask.clone(),
        });
    }
    Ok(out)
}

fn resolve_surface(
    mode: SurfaceMode,
    oct: &crate::volume::Volume,
    octa: &crate::volume::Volume,
    truth: &VriSurface,
    vri_net: Option<&VriNet<f64>>,
) -> Result<(VriSurface, String)> {
    match mode {
        SurfaceMode::Truth => Ok((truth.clone(), "truth".into())),
        SurfaceMode::Predicted => {
            let net = vri_net
                .ok_or_else(|| config_err!("predicted surface requested without a stage-1 checkpoint"))?;
            let (_, s) = infer_vri(oct, octa, net)?;
            Ok((s, "vri-net".into()))
        }
    }
}

// ============================================================
// Training commands
// ============================================================

/// The dataset root is the manifest's parent directory; all case files in
/// the manifest are relative to it.
fn dataset_root(manifest_path: &Path) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf()
}

pub fn run_train_vri(
    manifest_path: &Path,
    cfg: &VriNetConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<VriLogRow>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let dataset_dir = dataset_root(manifest_path);
    let cases = prepare_vri_cases(&dataset_dir, &manifest.split_cases(Split::Train))?;
    let (ck, log) = crate::vri::train_vri(&cases, cfg, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let ck_path = out_dir.join("vri.ckpt");
    ck.save(&ck_path)?;
    let mut csv = String::from("epoch,train_loss,val_bce,val_dice\n");
    for r in &log {
        csv.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_bce, r.val_dice));
    }
    std::fs::write(out_dir.join("train_log.csv"), csv)?;
    Provenance::new("train vri")
        .seed("train", seed)
        .config(cfg)?
        .input("manifest", manifest_path)?
        .save(out_dir)?;
    Ok((ck_path, log))
}

#[derive(Debug, Clone)]
pub struct TrainRnvOptions {
    pub surface: SurfaceMode,
    /// Required when `surface` is `Predicted`.
    pub vri_ckpt: Option<PathBuf>,
    pub k: f32,
}

pub fn run_train_rnv(
    manifest_path: &Path,
    cfg: &RnvNetConfig,
    seed: u64,
    opts: &TrainRnvOptions,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<RnvLogRow>)> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let dataset_dir = dataset_root(manifest_path);
    let vri_net = match (opts.surface, &opts.vri_ckpt) {
        (SurfaceMode::Predicted, Some(p)) => Some(VriNet::<f64>::from_checkpoint(&Checkpoint::load(p)?)?),
        (SurfaceMode::Predicted, None) => {
            return Err(config_err!("train rnv with predicted surfaces needs --vri-ckpt"))
        }
        (SurfaceMode::Truth, _) => None,
    };
    let cases = prepare_rnv_cases(
        &dataset_dir,
        &manifest.split_cases(Split::Train),
        opts.surface,
        vri_net.as_ref(),
        opts.k,
    )?;
    let (ck, log) = rnv::train_rnv(&cases, cfg, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let ck_path = out_dir.join("rnv.ckpt");
    ck.save(&ck_path)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for r in &log {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    std::fs::write(out_dir.join("train_log.csv"), csv)?;
    let mut prov = Provenance::new("train rnv")
        .seed("train", seed)
        .config(&serde_json::json!({
            "net": cfg,
            "surface": opts.surface,
            "k": opts.k,
        }))?
        .input("manifest", manifest_path)?;
    if let Some(p) = &opts.vri_ckpt {
        prov = prov.input("vri_ckpt", p)?;
    }
    prov.save(out_dir)?;
    Ok((ck_path, log))
}

// ============================================================
// Inference command
// ============================================================

#[derive(Debug, Clone)]
pub struct InferOptions {
    pub surface: SurfaceMode,
    /// Stage-1 checkpoint; required when `surface` is `Predicted`.
    pub vri_ckpt: Option<PathBuf>,
    /// Truth interface mask volume; required when `surface` is `Truth`.
    pub truth_vri: Option<PathBuf>,
    pub k: f32,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            surface: SurfaceMode::Predicted,
            vri_ckpt: None,
            truth_vri: None,
            k: 0.8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LesionReport {
    pub area_px: usize,
    pub area_mm2: f64,
    pub centroid_x: f64,
    pub centroid_y: f64,
}

/// The diagnosis JSON written by `infer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub case_id: String,
    pub is_rnv: bool,
    /// Maximum membrane probability over the en-face map.
    pub score: f64,
    pub threshold: f64,
    pub min_area_px: usize,
    pub total_area_px: usize,
    pub total_area_mm2: f64,
    pub lesions: Vec<LesionReport>,
    pub vessel_area_px: usize,
}

fn case_id_from(path: &Path) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "case".into());
    stem.strip_suffix("_oct").map(str::to_owned).unwrap_or(stem)
}

/// Run the full two-stage pipeline on one OCT/OCTA pair and write every
/// artifact: the surface actually used, the five raw projections, the
/// membrane probability map, lesion and vessel masks (OVOL + PGM), an
/// outline overlay, the diagnosis JSON, and provenance.
pub fn run_infer(
    oct_path: &Path,
    octa_path: &Path,
    rnv_ckpt: &Path,
    opts: &InferOptions,
    out_dir: &Path,
) -> Result<DiagnosisReport> {
    let oct = ovol::load_volume(oct_path)?;
    let octa = ovol::load_volume(octa_path)?;
    let spacing = oct.spacing();

    let (surface, surface_id) = match opts.surface {
        SurfaceMode::Truth => {
            let p = opts
                .truth_vri
                .as_ref()
                .ok_or_else(|| config_err!("--surface truth needs --truth-vri"))?;
            let vol = ovol::load_volume(p)?;
            (mask_to_surface(&VriMask::from_volume(&vol)), "truth".to_string())
        }
        SurfaceMode::Predicted => {
            let p = opts
                .vri_ckpt
                .as_ref()
                .ok_or_else(|| config_err!("--surface predicted needs --vri-ckpt"))?;
            let net = VriNet::<f32>::from_checkpoint(&Checkpoint::load(p)?)?;
            let (_, s) = infer_vri(&oct, &octa, &net)?;
            (s, "vri-net".to_string())
        }
    };

    let stack = build_stack(
        &oct,
        &octa,
        &surface,
        opts.k,
        StackProvenance {
            oct_id: oct_path.to_string_lossy().into_owned(),
            octa_id: octa_path.to_string_lossy().into_owned(),
            surface_id,
            k: opts.k,
        },
    )?;

    let rnv_net = RnvNet::<f32>::from_checkpoint(&Checkpoint::load(rnv_ckpt)?)?;
    let (prob, diag) = rnv::infer_rnv(&stack, &rnv_net, spacing)?;
    let vessels = refine_vessels(&stack.octa_vitreous, &diag.lesions)?;

    std::fs::create_dir_all(out_dir)?;
    let surf_mask = surface_to_mask(&surface, oct.nz())?;
    ovol::save_volume(&surf_mask.to_volume(spacing)?, &out_dir.join("surface.ovol"))?;
    for (name, img) in [
        ("stack_oct_vitreous.pgm", &stack.oct_vitreous),
        ("stack_octa_vitreous.pgm", &stack.octa_vitreous),
        ("stack_oct_gcc.pgm", &stack.oct_gcc),
        ("stack_octa_gcc.pgm", &stack.octa_gcc),
        ("stack_octa_subtracted.pgm", &stack.octa_subtracted),
    ] {
        pgm::write_pgm(&pgm::image_to_pgm16(img), &out_dir.join(name))?;
    }
    pgm::write_pgm(&pgm::prob_to_pgm16(&prob), &out_dir.join("rnv_prob.pgm"))?;
    ovol::save_volume(&diag.lesions.to_volume(spacing)?, &out_dir.join("rnv_mask.ovol"))?;
    pgm::write_pgm(&pgm::mask_to_pgm16(&diag.lesions.mask), &out_dir.join("rnv_mask.pgm"))?;
    let vessel_lesions = LesionMask::from_mask(vessels.clone(), spacing);
    ovol::save_volume(&vessel_lesions.to_volume(spacing)?, &out_dir.join("vessels.ovol"))?;
    pgm::write_pgm(&pgm::mask_to_pgm16(&vessels), &out_dir.join("vessels.pgm"))?;
    pgm::write_pgm(
        &pgm::overlay_to_pgm16(&stack.octa_vitreous, &diag.lesions.mask)?,
        &out_dir.join("overlay.pgm"),
    )?;

    let report = DiagnosisReport {
        case_id: case_id_from(oct_path),
        is_rnv: diag.is_rnv,
        score: diag.score,
        threshold: rnv_net.cfg().threshold,
        min_area_px: rnv_net.cfg().min_area_px,
        total_area_px: diag.lesions.total_area_px(),
        total_area_mm2: diag.lesions.components.iter().map(|c| c.area_mm2).sum(),
        lesions: diag
            .lesions
            .components
            .iter()
            .map(|c| LesionReport {
                area_px: c.area_px,
                area_mm2: c.area_mm2,
                centroid_x: c.centroid.0,
                centroid_y: c.centroid.1,
            })
            .collect(),
        vessel_area_px: vessels.data().iter().filter(|&&b| b).count(),
    };
    write_json(&out_dir.join("diagnosis.json"), &report)?;

    let mut prov = Provenance::new("infer")
        .config(&serde_json::json!({
            "surface": opts.surface,
            "k": opts.k,
            "threshold": rnv_net.cfg().threshold,
            "min_area_px": rnv_net.cfg().min_area_px,
        }))?
        .input("oct", oct_path)?
        .input("octa", octa_path)?
        .input("rnv_ckpt", rnv_ckpt)?;
    if let Some(p) = &opts.vri_ckpt {
        prov = prov.input("vri_ckpt", p)?;
    }
    if let Some(p) = &opts.truth_vri {
        prov = prov.input("truth_vri", p)?;
    }
    prov.save(out_dir)?;
    Ok(report)
}

// ============================================================
// Evaluation command
// ============================================================

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalCaseRow {
    pub case_id: String,
    pub truth_positive: bool,
    pub pred_positive: bool,
    pub score: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_cases: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    /// Case-level ROC AUC of `score` vs the truth label; absent when only
    /// one class is present.
    pub case_auc: Option<f64>,
    /// Pixel-overlap means over truth-positive cases.
    pub mean_iou_positive: f64,
    pub mean_f1_positive: f64,
    pub case_tp: usize,
    pub case_fp: usize,
    pub case_fn: usize,
    pub case_tn: usize,
    pub case_accuracy: f64,
    pub case_precision: f64,
    pub case_recall: f64,
    pub case_f1: f64,
    /// Fraction of truth-negative cases called positive.
    pub false_positive_rate_negative: f64,
}

/// Score every case that has an inference directory under `pred_root`
/// against the dataset truth, and write `per_case.csv` + `summary.json`.
pub fn run_eval(
    pred_root: &Path,
    truth_dir: &Path,
    out_dir: &Path,
) -> Result<(Vec<EvalCaseRow>, EvalSummary)> {
    let manifest_path = truth_dir.join("manifest.json");
    let manifest = DatasetManifest::load(&manifest_path)?;
    let mut rows = Vec::new();
    let mut prov = Provenance::new("eval").input("manifest", &manifest_path)?;
    for entry in &manifest.cases {
        let case_dir = pred_root.join(&entry.id);
        if !case_dir.join("diagnosis.json").is_file() {
            continue;
        }
        let report: DiagnosisReport = read_json(&case_dir.join("diagnosis.json"))?;
        let pred_mask_path = case_dir.join("rnv_mask.ovol");
        let pred = LesionMask::from_volume(&ovol::load_volume(&pred_mask_path)?)?;
        let truth =
            LesionMask::from_volume(&ovol::load_volume(&truth_dir.join(&entry.files.lesions))?)?;
        let c = ConfusionCounts::from_masks(&pred.mask, &truth.mask)?;
        let (precision, recall, f1) = metrics::precision_recall_f1(&c);
        rows.push(EvalCaseRow {
            case_id: entry.id.clone(),
            truth_positive: entry.positive,
            pred_positive: report.is_rnv,
            score: report.score,
            iou: metrics::iou(&pred.mask, &truth.mask)?,
            precision,
            recall,
            f1,
        });
        prov = prov.input(&format!("pred:{}", entry.id), &pred_mask_path)?;
    }
    if rows.is_empty() {
        return Err(config_err!(
            "eval: no case under {} has a diagnosis.json",
            pred_root.display()
        ));
    }

    let summary = summarize_eval(&rows)?;
    std::fs::create_dir_all(out_dir)?;
    let mut csv =
        String::from("case_id,truth_positive,pred_positive,score,iou,precision,recall,f1\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.case_id,
            r.truth_positive,
            r.pred_positive,
            r.score,
            r.iou,
            r.precision,
            r.recall,
            r.f1
        ));
    }
    std::fs::write(out_dir.join("per_case.csv"), csv)?;
    write_json(&out_dir.join("summary.json"), &summary)?;
    prov.save(out_dir)?;
    Ok((rows, summary))
}

fn summarize_eval(rows: &[EvalCaseRow]) -> Result<EvalSummary> {
    let n = rows.len();
    let positives: Vec<&EvalCaseRow> = rows.iter().filter(|r| r.truth_positive).collect();
    let n_pos = positives.len();
    let n_neg = n - n_pos;

    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.truth_positive).collect();
    let case_auc = match metrics::roc_auc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };

    let mean = |vals: Vec<f64>| -> f64 {
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let mean_iou_positive = mean(positives.iter().map(|r| r.iou).collect());
    let mean_f1_positive = mean(positives.iter().map(|r| r.f1).collect());

    let mut c = ConfusionCounts::default();
    for r in rows {
        match (r.pred_positive, r.truth_positive) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    let (case_precision, case_recall, case_f1) = metrics::precision_recall_f1(&c);
    Ok(EvalSummary {
        n_cases: n,
        n_positive: n_pos,
        n_negative: n_neg,
        case_auc,
        mean_iou_positive,
        mean_f1_positive,
        case_tp: c.true_pos,
        case_fp: c.false_pos,
        case_fn: c.false_neg,
        case_tn: c.true_neg,
        case_accuracy: (c.true_pos + c.true_neg) as f64 / n as f64,
        case_precision,
        case_recall,
        case_f1,
        false_positive_rate_negative: if n_neg == 0 {
            0.0
        } else {
            c.false_pos as f64 / n_neg as f64
        },
    })
}

// ============================================================
// Longitudinal command
// ============================================================

/// Sidecar each visit directory must carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisitMeta {
    pub time_months: f64,
}

/// Read `infer` outputs arranged as one subdirectory per visit (each with
/// `visit.json`, `rnv_mask.ovol`, `vessels.ovol`), quantify every visit,
/// and write the progression CSV/JSON.
pub fn run_track(case_dir: &Path, out_dir: &Path) -> Result<ProgressionSeries> {
    let mut visits: Vec<(f64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(case_dir)? {
        let path = entry?.path();
        if !path.is_dir() || !path.join("visit.json").is_file() {
            continue;
        }
        let meta: VisitMeta = read_json(&path.join("visit.json"))?;
        visits.push((meta.time_months, path));
    }
    visits.sort_by(|a, b| a.0.total_cmp(&b.0));
    if visits.len() < 2 {
        return Err(config_err!(
            "track: need >= 2 visit directories under {}, found {}",
            case_dir.display(),
            visits.len()
        ));
    }

    let mut points = Vec::with_capacity(visits.len());
    let mut prov = Provenance::new("track");
    for (i, (t, dir)) in visits.iter().enumerate() {
        let mask_path = dir.join("rnv_mask.ovol");
        let vessel_path = dir.join("vessels.ovol");
        let mask_vol = ovol::load_volume(&mask_path)?;
        let spacing = mask_vol.spacing();
        let membrane = LesionMask::from_volume(&mask_vol)?;
        let vessels: Mask2 = LesionMask::from_volume(&ovol::load_volume(&vessel_path)?)?.mask;
        points.push((*t, quantify_timepoint(&membrane, &vessels, spacing)?));
        prov = prov
            .input(&format!("visit{i}:rnv_mask"), &mask_path)?
            .input(&format!("visit{i}:vessels"), &vessel_path)?;
    }
    let series = progression_series(&points)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("progression.csv"), series.to_csv())?;
    write_json(&out_dir.join("progression.json"), &series)?;
    prov = prov.config(&serde_json::json!({
        "visit_times_months": points.iter().map(|(t, _)| *t).collect::<Vec<f64>>(),
    }))?;
    prov.save(out_dir)?;
    Ok(series)
}

// ============================================================
// Tests
// ============================================================

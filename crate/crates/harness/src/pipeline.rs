//! The gen → search → retrain → eval → report steps, one function each.
//! Every step regenerates the dataset from the config, so artifacts carry
//! only results.

use std::fs;
use std::path::{Path, PathBuf};

use matchsearch::bcm::Branch;
use matchsearch::desk::train::split;
use matchsearch::desk::{
    gen_synthetic, label_all, stage1_search, stage2_retrain, train_single, BranchModel, LabeledPair, SiameseModel,
    TrainReport, Wiring,
};
use matchsearch::desk::train::fresh_model;
use matchsearch::gradcheck::check_operator;
use matchsearch::{OperatorKind, PairDims, ParamStore, SearchResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::{eval_metrics, Metrics};
use crate::report::{write_report, ReportRow, DETAIL_FILE, MATRIX_FILE};

pub const DATASET_FILE: &str = "dataset.json";
pub const SEARCH_FILE: &str = "search.json";
pub const SEARCH_MODEL: &str = "search_model.json";
pub const RETRAIN_FILE: &str = "retrain.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";

pub struct Dataset {
    pub train: Vec<LabeledPair<f64>>,
    pub val: Vec<LabeledPair<f64>>,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let pairs = label_all(gen_synthetic::<f64>(&cfg.data())?);
        let (train, val) = split(pairs, cfg.n_sequences, cfg.split_ratio)?;
        if train.is_empty() || val.is_empty() {
            return Err(HarnessError::Config("split leaves an empty train or validation set".into()));
        }
        Ok(Self { train, val })
    }

    pub fn dims(&self) -> PairDims {
        self.train[0].sample.pair.dims()
    }

    /// SHA-256 over every feature value, box and attribute, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in self.train.iter().chain(&self.val) {
            let s = &p.sample;
            h.update((s.sequence_id as u64).to_le_bytes());
            for t in [&s.pair.fz, &s.pair.fx] {
                for &x in t.data() {
                    h.update(x.to_le_bytes());
                }
            }
            let b = s.gt_box;
            for x in [b.x0, b.y0, b.x1, b.y1] {
                h.update(x.to_le_bytes());
            }
            for a in &s.attributes {
                h.update(a.name().as_bytes());
            }
            h.update([0xff]);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub clean_val_pairs: usize,
    /// Validation pairs carrying each attribute, canonical order.
    pub val_attribute_counts: Vec<(String, usize)>,
    pub dims: PairDims,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchArtifact {
    pub cls: SearchResult,
    pub reg: SearchResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainArtifact {
    pub cls: Wiring,
    pub reg: Wiring,
    pub report: TrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub mean_iou: f64,
    pub clean_mean_iou: Option<f64>,
    pub metrics: Metrics,
}

/// Output directory plus the overwrite policy.
#[derive(Debug, Clone)]
pub struct Outputs {
    pub dir: PathBuf,
    pub overwrite: bool,
}

impl Outputs {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Refuses to clobber any of `names` (and checkpoint blobs beside them)
    /// unless overwriting was requested.
    fn claim(&self, names: &[&str]) -> Result<()> {
        fs::create_dir_all(&self.dir)?;
        if self.overwrite {
            return Ok(());
        }
        for n in names {
            let p = self.path(n);
            let blob = p.with_extension("bin");
            for q in [&p, &blob] {
                if q.exists() {
                    return Err(HarnessError::Usage(format!(
                        "{} exists; pass --overwrite to replace it",
                        q.display()
                    )));
                }
            }
        }
        Ok(())
    }

    fn read<T: for<'de> Deserialize<'de>>(&self, name: &str, producer: &str) -> Result<T> {
        let p = self.path(name);
        let text = fs::read_to_string(&p).map_err(|e| {
            HarnessError::Runtime(format!("cannot read {} (run `{producer}` first): {e}", p.display()))
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    cls: Wiring,
    reg: Wiring,
    dims: PairDims,
}

fn branch_from(branch: Branch, wiring: &Wiring, kinds: &[OperatorKind]) -> Result<BranchModel> {
    Ok(match wiring {
        Wiring::Gated => BranchModel::gated(branch, kinds)?,
        Wiring::Retained { pair } => BranchModel::retained(branch, *pair)?,
        Wiring::Single { kind } => BranchModel::single(branch, *kind)?,
    })
}

pub fn save_model(path: &Path, cfg: &RunConfig, model: &SiameseModel<f64>) -> Result<()> {
    let meta = ModelMeta {
        cls: model.cls.wiring.clone(),
        reg: model.reg.wiring.clone(),
        dims: model.dims,
    };
    save_checkpoint(
        path,
        &Checkpoint {
            config: cfg.echo(),
            meta: serde_json::to_value(meta)?,
            tensors: matchsearch::desk::train::weights(model),
        },
    )
}

/// Rebuilds a model from a checkpoint; every stored tensor must match a
/// model parameter by name and shape.
pub fn load_model(path: &Path, cfg: &RunConfig) -> Result<SiameseModel<f64>> {
    let ck = load_checkpoint(path)?;
    let meta: ModelMeta = serde_json::from_value(ck.meta)
        .map_err(|e| HarnessError::Checkpoint(format!("bad model description: {e}")))?;
    let mut model = fresh_model::<f64>(
        branch_from(Branch::Cls, &meta.cls, &cfg.operators)?,
        branch_from(Branch::Reg, &meta.reg, &cfg.operators)?,
        meta.dims,
        &cfg.retrain(),
    )?;
    let mut used = 0;
    for store in [&mut model.theta, &mut model.arch] {
        let names: Vec<String> = store.names().map(str::to_owned).collect();
        let mut next = ParamStore::new();
        for n in names {
            let want = store.get(&n).map(|t| t.shape().to_vec()).unwrap_or_default();
            let t = ck
                .tensors
                .get(&n)
                .ok_or_else(|| HarnessError::Checkpoint(format!("missing tensor {n}")))?;
            if t.shape() != want.as_slice() {
                return Err(HarnessError::Checkpoint(format!(
                    "tensor {n} has shape {:?}, model expects {want:?}",
                    t.shape()
                )));
            }
            next.insert(n, t.clone());
            used += 1;
        }
        *store = next;
    }
    if used != ck.tensors.len() {
        return Err(HarnessError::Checkpoint(format!(
            "checkpoint has {} tensors, model uses {used}",
            ck.tensors.len()
        )));
    }
    Ok(model)
}

pub fn gen(cfg: &RunConfig, out: &Outputs) -> Result<DatasetSummary> {
    out.claim(&[DATASET_FILE])?;
    let ds = Dataset::build(cfg)?;
    let summary = DatasetSummary {
        train_pairs: ds.train.len(),
        val_pairs: ds.val.len(),
        clean_val_pairs: ds.val.iter().filter(|p| p.sample.is_clean()).count(),
        val_attribute_counts: matchsearch::desk::Attribute::ALL
            .iter()
            .map(|&a| (a.name().to_owned(), ds.val.iter().filter(|p| p.sample.has(a)).count()))
            .collect(),
        dims: ds.dims(),
        sha256: ds.digest(),
    };
    write_json(&out.path(DATASET_FILE), &summary)?;
    Ok(summary)
}

pub fn search(cfg: &RunConfig, out: &Outputs) -> Result<SearchArtifact> {
    out.claim(&[SEARCH_FILE, SEARCH_MODEL])?;
    let ds = Dataset::build(cfg)?;
    let s1 = stage1_search(&ds.train, &ds.val, &cfg.search())?;
    let art = SearchArtifact { cls: s1.cls, reg: s1.reg };
    save_model(&out.path(SEARCH_MODEL), cfg, &s1.model)?;
    write_json(&out.path(SEARCH_FILE), &art)?;
    Ok(art)
}

pub fn retrain(cfg: &RunConfig, out: &Outputs) -> Result<RetrainArtifact> {
    let found: SearchArtifact = out.read(SEARCH_FILE, "search")?;
    out.claim(&[RETRAIN_FILE, MODEL_FILE])?;
    let ds = Dataset::build(cfg)?;
    let (model, report) = stage2_retrain(&found.cls.retained, &found.reg.retained, &ds.train, &ds.val, &cfg.retrain())?;
    save_model(&out.path(MODEL_FILE), cfg, &model)?;
    let art = RetrainArtifact {
        cls: model.cls.wiring.clone(),
        reg: model.reg.wiring.clone(),
        report,
    };
    write_json(&out.path(RETRAIN_FILE), &art)?;
    Ok(art)
}

fn evaluate(model: &SiameseModel<f64>, val: &[LabeledPair<f64>]) -> Result<EvalArtifact> {
    let metrics = eval_metrics(model, val)?;
    Ok(EvalArtifact {
        mean_iou: metrics.mean_iou(),
        clean_mean_iou: metrics.clean_mean_iou(val),
        metrics,
    })
}

pub fn eval(cfg: &RunConfig, out: &Outputs) -> Result<EvalArtifact> {
    let model_path = out.path(MODEL_FILE);
    if !model_path.exists() {
        return Err(HarnessError::Runtime(format!(
            "{} not found (run `retrain` first)",
            model_path.display()
        )));
    }
    out.claim(&[METRICS_FILE])?;
    let model = load_model(&model_path, cfg)?;
    let ds = Dataset::build(cfg)?;
    let art = evaluate(&model, &ds.val)?;
    write_json(&out.path(METRICS_FILE), &art)?;
    Ok(art)
}

fn wiring_label(w: &Wiring) -> String {
    match w {
        Wiring::Gated => "gated".into(),
        Wiring::Retained { pair } if pair.first == pair.second => pair.first.name().into(),
        Wiring::Retained { pair } => format!("{}+{}", pair.first, pair.second),
        Wiring::Single { kind } => kind.name().into(),
    }
}

/// Trains one single-operator model per configured operator, evaluates
/// them next to the retrained searched model and writes the matrix and
/// detail files.
pub fn report(cfg: &RunConfig, out: &Outputs) -> Result<Vec<ReportRow>> {
    let found: SearchArtifact = out.read(SEARCH_FILE, "search")?;
    let model_path = out.path(MODEL_FILE);
    if !model_path.exists() {
        return Err(HarnessError::Runtime(format!(
            "{} not found (run `retrain` first)",
            model_path.display()
        )));
    }
    out.claim(&[MATRIX_FILE, DETAIL_FILE])?;
    let searched = load_model(&model_path, cfg)?;
    let ds = Dataset::build(cfg)?;
    let rc = cfg.retrain();
    let singles: Vec<Result<ReportRow>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .operators
            .iter()
            .map(|&kind| {
                let (ds, rc) = (&ds, &rc);
                s.spawn(move || -> Result<ReportRow> {
                    let (model, _) = train_single(kind, &ds.train, &ds.val, rc)?;
                    Ok(ReportRow {
                        label: kind.name().into(),
                        metrics: evaluate(&model, &ds.val)?.metrics,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(HarnessError::Runtime("training thread panicked".into()))))
            .collect()
    });
    let mut rows = singles.into_iter().collect::<Result<Vec<_>>>()?;
    rows.push(ReportRow {
        label: format!(
            "searched[cls {} | reg {}]",
            wiring_label(&searched.cls.wiring),
            wiring_label(&searched.reg.wiring)
        ),
        metrics: evaluate(&searched, &ds.val)?.metrics,
    });
    write_report(&out.dir, &rows, &[found.cls, found.reg])?;
    Ok(rows)
}

/// Max relative gradient error per configured operator on a 4×4×4
/// candidate with a 2×2 exemplar.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<(OperatorKind, f64)>> {
    let c = if 4 % cfg.heads == 0 { 4 } else { cfg.heads };
    let dims = PairDims { hz: 2, wz: 2, hx: 4, wx: 4, c };
    cfg.operators
        .iter()
        .map(|&k| Ok((k, check_operator(k, &cfg.operator_config(), dims, cfg.seed)?)))
        .collect()
}

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crl::{write_h_csv, CrlInput, CrlState, HTableRows};
use crate::dataio::{apply_mask, generate_mask, split_dataset, Dataset, SynthSpec, MAX_MISSING_RATE};
use crate::error::{Error, Result};
use crate::m2r2::{self, IterationRecord, M2r2Config, Mode, TestOutcome, TrainedModel};
use crate::numerics::Checkpoint;
use crate::panet::{Panet, PanetSpec};

const SPLIT_SEED: u64 = 101;
const MASK_SEED: u64 = 211;

/// One JSON document configuring data generation, the split/mask protocol
/// and the model. Unknown fields are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub num_conversations: usize,
    /// Fraction of conversations held out for testing.
    pub test_fraction: f64,
    /// Fraction of the remaining conversations used for validation.
    pub val_fraction: f64,
    /// Missing rate imposed on every split; `None` keeps the data as given.
    pub eta: Option<f64>,
    pub model: M2r2Config,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SynthSpec::default(),
            num_conversations: 100,
            test_fraction: 0.2,
            val_fraction: 0.25,
            eta: None,
            model: M2r2Config::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("test_fraction", self.test_fraction), ("val_fraction", self.val_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {f}")));
            }
        }
        if let Some(eta) = self.eta {
            check_eta(eta)?;
        }
        if self.num_conversations < 3 {
            return Err(Error::Config("num_conversations must be >= 3".into()));
        }
        self.data.validate()?;
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub fn check_eta(eta: f64) -> Result<()> {
    if !(0.0..=MAX_MISSING_RATE + 1e-12).contains(&eta) {
        return Err(Error::Config(format!("missing rate {eta} outside [0, {MAX_MISSING_RATE:.6}]")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Conversation-level train/val/test split, each part masked at `eta`.
/// Everything is derived from `seed`, so runs sharing a seed share masks.
pub fn prepare(dataset: &Dataset, cfg: &ExperimentConfig, eta: Option<f64>, seed: u64) -> Result<Splits> {
    let base = seed.wrapping_mul(7_919);
    let (rest, test) = split_dataset(dataset, 1.0 - cfg.test_fraction, base.wrapping_add(SPLIT_SEED))?;
    let (train, val) = split_dataset(&rest, 1.0 - cfg.val_fraction, base.wrapping_add(SPLIT_SEED + 1))?;
    let mask = |d: Dataset, k: u64| -> Result<Dataset> {
        match eta {
            Some(eta) => {
                check_eta(eta)?;
                let masks = generate_mask(&d, eta, base.wrapping_add(MASK_SEED + k))?;
                apply_mask(&d, &masks)
            }
            None => Ok(d),
        }
    };
    Ok(Splits {
        train: mask(train, 0)?,
        val: mask(val, 1)?,
        test: mask(test, 2)?,
    })
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub model: TrainedModel,
    pub history: Vec<IterationRecord>,
    pub outcome: TestOutcome,
}

/// Split, mask, train and test with `mode`, seeding the model with `seed`.
pub fn run_once(dataset: &Dataset, cfg: &ExperimentConfig, eta: Option<f64>, seed: u64, mode: Mode) -> Result<RunResult> {
    let splits = prepare(dataset, cfg, eta, seed)?;
    let model_cfg = M2r2Config {
        seed,
        mode,
        ..cfg.model.clone()
    };
    let run = m2r2::train(&splits.train, &splits.val, &model_cfg)?;
    let outcome = m2r2::test(&splits.test, &run.model)?;
    Ok(RunResult {
        model: run.model,
        history: run.history,
        outcome,
    })
}

/// What is needed to rebuild a [`TrainedModel`] from its checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub config: M2r2Config,
    pub panet_spec: PanetSpec,
    /// Modality dims of the learner, `None` when the model has none.
    pub crl_dims: Option<Vec<usize>>,
    pub num_classes: usize,
    pub best_iteration: usize,
}

pub const MANIFEST_FILE: &str = "model.json";
pub const PANET_FILE: &str = "panet.ckpt.json";
pub const CRL_FILE: &str = "crl.ckpt.json";

pub fn save_model(model: &TrainedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        config: model.config.clone(),
        panet_spec: model.panet.spec.clone(),
        crl_dims: model.crl.as_ref().map(|s| s.modality_dims.clone()),
        num_classes: model.panet.spec.num_classes,
        best_iteration: model.best_iteration,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    model.panet.params.to_checkpoint("panet").save(&dir.join(PANET_FILE))?;
    if let Some(s) = &model.crl {
        s.to_checkpoint().save(&dir.join(CRL_FILE))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<TrainedModel> {
    let manifest: ModelManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut panet = Panet::new(manifest.panet_spec.clone(), 0)?;
    panet.params.load_checkpoint(&Checkpoint::load(&dir.join(PANET_FILE))?)?;
    let crl = match &manifest.crl_dims {
        Some(dims) => {
            let mut s = CrlState::new(manifest.config.crl.clone(), dims, manifest.num_classes, 0)?;
            s.load_checkpoint(&Checkpoint::load(&dir.join(CRL_FILE))?)?;
            Some(s)
        }
        None => None,
    };
    Ok(TrainedModel {
        config: manifest.config,
        panet,
        crl,
        best_iteration: manifest.best_iteration,
    })
}

/// Writes the representations fitted to `dataset` from its observed
/// modalities as an embeddings CSV.
pub fn write_embeddings<W: Write>(model: &TrainedModel, dataset: &Dataset, seed: u64, out: W) -> Result<()> {
    let state = model
        .crl
        .as_ref()
        .ok_or_else(|| Error::Model("this model has no representation learner".into()))?;
    let inputs = dataset
        .conversations
        .iter()
        .map(|c| CrlInput::build(c, &dataset.dims, None))
        .collect::<Result<Vec<_>>>()?;
    let h = state.test_time_finetune(&inputs, seed)?;
    let labels: Vec<Vec<usize>> = dataset.conversations.iter().map(|c| c.labels()).collect();
    let rows: Vec<HTableRows<'_>> = dataset
        .conversations
        .iter()
        .zip(&h)
        .zip(&labels)
        .map(|((c, h), labels)| HTableRows { id: &c.id, labels, h })
        .collect();
    write_h_csv(out, &rows)
}

/// Pretty JSON followed by a newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Output directory of one run: config snapshot, per-iteration JSON lines,
/// checkpoints, metrics and a plain-text log.
pub struct RunDir {
    pub root: PathBuf,
    log: File,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let log = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(root.join("run.log"))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn log(&mut self, line: &str) -> Result<()> {
        writeln!(self.log, "{line}")?;
        Ok(())
    }

    pub fn write_history(&self, history: &[IterationRecord]) -> Result<()> {
        let mut out = String::new();
        for rec in history {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        fs::write(self.path("history.jsonl"), out)?;
        Ok(())
    }
}

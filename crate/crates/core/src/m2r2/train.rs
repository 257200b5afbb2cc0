use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::crl::{CrlInput, CrlLosses, CrlState};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::harness::MetricsReport;
use crate::m2r2::augment::{extend_with, plain_inputs, zero_tables, AttachmentKind};
use crate::m2r2::config::{BSource, M2r2Config, Mode};
use crate::numerics::{Adam, AdamConfig, Tensor};
use crate::panet::{ConversationInput, Panet, PanetSpec, PanetTrace};

const PANET_INIT: u64 = 11;
const PANET_SHUFFLE: u64 = 23;
const CRL_INIT: u64 = 37;
const VAL_FINETUNE: u64 = 41;
const TEST_FINETUNE: u64 = 53;

/// One outer iteration of the alternating loop.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub val_accuracy: f64,
    pub panet_loss: f64,
    pub panet_train_accuracy: f64,
    pub panet_epochs: usize,
    pub crl_epochs: usize,
    /// Losses of the last representation-learning epoch, absent when the
    /// mode trains the classifier alone.
    pub crl: Option<CrlLosses>,
    pub best_iteration: usize,
}

/// The checkpoint kept by [`train`]: the classifier and, when it was
/// trained on common representations, the learner that produced them.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: M2r2Config,
    pub panet: Panet,
    /// `None` when the classifier expects zero representations
    /// (first iteration) or takes none at all (ablated modes).
    pub crl: Option<CrlState>,
    pub best_iteration: usize,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: TrainedModel,
    pub history: Vec<IterationRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TestOutcome {
    pub mode: Mode,
    /// Per conversation, per turn.
    pub predictions: Vec<Vec<usize>>,
    pub metrics: MetricsReport,
    /// The fitted `h*` tables, when the model uses them.
    #[serde(skip)]
    pub representations: Option<Vec<Tensor>>,
}

/// Phase boundaries reported to a [`train_observed`] observer.
pub enum Phase<'a> {
    PanetStart { iteration: usize, panet: &'a Panet, crl: Option<&'a CrlState> },
    PanetEnd { iteration: usize, panet: &'a Panet, crl: Option<&'a CrlState> },
    CrlStart { iteration: usize, panet: &'a Panet, crl: &'a CrlState },
    CrlEnd { iteration: usize, panet: &'a Panet, crl: &'a CrlState },
    Iteration(&'a IterationRecord),
}

/// True when the best accuracy of the last `k` entries exceeds the best
/// before them by no more than `eps`. Always false while `k >= len`.
pub fn converged(history: &[f64], eps: f64, k: usize) -> bool {
    if k == 0 || k >= history.len() {
        return false;
    }
    let split = history.len() - k;
    let before = history[..split].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let recent = history[split..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    recent - before <= eps
}

pub fn train(train_set: &Dataset, val_set: &Dataset, config: &M2r2Config) -> Result<RunOutcome> {
    train_observed(train_set, val_set, config, &mut |_| {})
}

/// [`train`], reporting every phase boundary to `observer`.
pub fn train_observed(
    train_set: &Dataset,
    val_set: &Dataset,
    config: &M2r2Config,
    observer: &mut dyn FnMut(Phase<'_>),
) -> Result<RunOutcome> {
    config.validate()?;
    check_pair(train_set, val_set)?;
    let augment = config.mode.augments();
    let d_h = config.crl.common_dim;
    let spec = panet_spec(config, train_set, val_set.max_parties())?;
    let mut panet = Panet::new(spec, config.seed_for(PANET_INIT))?;
    let mut adam = Adam::new(AdamConfig::with_lr(config.panet_lr));
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed_for(PANET_SHUFFLE));

    let labels: Vec<Vec<usize>> = train_set.conversations.iter().map(|c| c.labels()).collect();
    let val_labels: Vec<usize> = val_set.conversations.iter().flat_map(|c| c.labels()).collect();
    let mut crl: Option<CrlState> = None;
    let mut best: Option<(f64, TrainedModel)> = None;
    let mut history = Vec::new();
    let mut accuracies = Vec::new();

    for iteration in 0..config.max_iterations {
        let tag = |e: Error| at_iteration(e, iteration);
        let inputs = if augment {
            let table = match &crl {
                Some(s) => h_tables(s, train_set)?,
                None => zero_tables(train_set, d_h),
            };
            extend_with(train_set, table, AttachmentKind::H)?.panet_inputs()?
        } else {
            plain_inputs(train_set)?
        };

        observer(Phase::PanetStart { iteration, panet: &panet, crl: crl.as_ref() });
        let mut stats = None;
        for _ in 0..config.n_e {
            stats = Some(
                panet
                    .train_epoch(&inputs, &labels, &mut adam, config.panet_l2, &mut shuffle)
                    .map_err(tag)?,
            );
        }
        let stats = stats.expect("n_e >= 1");
        observer(Phase::PanetEnd { iteration, panet: &panet, crl: crl.as_ref() });

        let val_seed = config.seed_for(VAL_FINETUNE).wrapping_add(iteration as u64);
        let (val_inputs, _) = classifier_inputs(config, val_set, crl.as_ref(), val_seed).map_err(tag)?;
        let val_preds = predict_all(&panet, &val_inputs)?;
        let val_accuracy =
            crate::harness::weighted_accuracy(&val_preds.concat(), &val_labels)?;
        accuracies.push(val_accuracy);
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            let model = TrainedModel {
                config: config.clone(),
                panet: panet.clone(),
                crl: crl.clone(),
                best_iteration: iteration,
            };
            best = Some((val_accuracy, model));
        }

        let mut crl_losses = None;
        let mut crl_epochs = 0;
        if augment {
            let b = b_tables(&panet, &inputs, config.b_source)?;
            let crl_inputs = extend_with(train_set, b, AttachmentKind::B)?.crl_inputs()?;
            let state = match &mut crl {
                Some(s) => s,
                None => {
                    let dims: Vec<usize> = crl_inputs[0].dims();
                    let mut s = CrlState::new(
                        config.crl.clone(),
                        &dims,
                        train_set.num_classes(),
                        config.seed_for(CRL_INIT),
                    )?;
                    s.init_h(&crl_inputs);
                    crl.insert(s)
                }
            };
            observer(Phase::CrlStart { iteration, panet: &panet, crl: state });
            for _ in 0..config.n_p {
                crl_losses = Some(state.train_epoch(&crl_inputs, &labels).map_err(tag)?);
                crl_epochs += 1;
            }
            observer(Phase::CrlEnd { iteration, panet: &panet, crl: state });
        }

        let record = IterationRecord {
            iteration,
            val_accuracy,
            panet_loss: stats.mean_loss,
            panet_train_accuracy: stats.accuracy,
            panet_epochs: config.n_e,
            crl_epochs,
            crl: crl_losses,
            best_iteration: best.as_ref().map_or(0, |(_, m)| m.best_iteration),
        };
        observer(Phase::Iteration(&record));
        history.push(record);
        if converged(&accuracies, config.epsilon, config.window) {
            break;
        }
    }
    let (_, model) = best.expect("max_iterations >= 1");
    Ok(RunOutcome { model, history })
}

/// Fine-tunes representations for `test_set` if the model uses them, then
/// predicts every turn. Labels are read only to score the predictions.
pub fn test(test_set: &Dataset, model: &TrainedModel) -> Result<TestOutcome> {
    let seed = model.config.seed_for(TEST_FINETUNE);
    let (inputs, representations) = classifier_inputs(&model.config, test_set, model.crl.as_ref(), seed)?;
    if let Some(first) = inputs.first() {
        if first.features.cols() != model.panet.spec.input_dim {
            return Err(Error::shape(
                "test input",
                &[model.panet.spec.input_dim],
                &[first.features.cols()],
            ));
        }
    }
    let predictions = predict_all(&model.panet, &inputs)?;
    let labels: Vec<usize> = test_set.conversations.iter().flat_map(|c| c.labels()).collect();
    let metrics = MetricsReport::compute(&predictions.concat(), &labels, test_set.num_classes())?;
    Ok(TestOutcome {
        mode: model.config.mode,
        predictions,
        metrics,
        representations,
    })
}

/// Trains and tests one pipeline variant.
pub fn ablation_run(
    mode: Mode,
    train_set: &Dataset,
    val_set: &Dataset,
    test_set: &Dataset,
    config: &M2r2Config,
) -> Result<TestOutcome> {
    let config = M2r2Config { mode, ..config.clone() };
    let run = train(train_set, val_set, &config)?;
    test(test_set, &run.model)
}

fn panet_spec(config: &M2r2Config, train_set: &Dataset, other_parties: usize) -> Result<PanetSpec> {
    let ext = if config.mode.augments() { config.crl.common_dim } else { 0 };
    let d = &config.panet;
    Ok(PanetSpec {
        input_dim: train_set.dims.total() + ext,
        global_dim: d.global_dim,
        party_dim: d.party_dim,
        emotion_dim: d.emotion_dim,
        num_classes: train_set.num_classes(),
        max_parties: train_set.max_parties().max(other_parties),
        party_attention: config.mode != Mode::NoPartyAttention,
        bidirectional: d.bidirectional,
    })
}

fn check_pair(train_set: &Dataset, val_set: &Dataset) -> Result<()> {
    train_set.validate()?;
    val_set.validate()?;
    if train_set.conversations.is_empty() || val_set.conversations.is_empty() {
        return Err(Error::Data("training and validation sets must be nonempty".into()));
    }
    if train_set.dims != val_set.dims || train_set.classes != val_set.classes {
        return Err(Error::Data("training and validation sets disagree on dims or classes".into()));
    }
    let ids: std::collections::HashSet<&str> =
        train_set.conversations.iter().map(|c| c.id.as_str()).collect();
    if let Some(c) = val_set.conversations.iter().find(|c| ids.contains(c.id.as_str())) {
        return Err(Error::Data(format!("conversation {} is in both training and validation sets", c.id)));
    }
    Ok(())
}

/// Classifier inputs for held-out data: representations fitted from the
/// three observed modalities when a learner is present, zeros otherwise.
/// Also returns the fitted tables.
fn classifier_inputs(
    config: &M2r2Config,
    set: &Dataset,
    crl: Option<&CrlState>,
    seed: u64,
) -> Result<(Vec<ConversationInput>, Option<Vec<Tensor>>)> {
    if !config.mode.augments() {
        return Ok((plain_inputs(set)?, None));
    }
    let fitted = match crl {
        Some(s) => {
            let crl_inputs = set
                .conversations
                .iter()
                .map(|c| CrlInput::build(c, &set.dims, None))
                .collect::<Result<Vec<_>>>()?;
            Some(s.test_time_finetune(&crl_inputs, seed)?)
        }
        None => None,
    };
    let table = fitted.clone().unwrap_or_else(|| zero_tables(set, config.crl.common_dim));
    Ok((extend_with(set, table, AttachmentKind::H)?.panet_inputs()?, fitted))
}

fn h_tables(state: &CrlState, set: &Dataset) -> Result<Vec<Tensor>> {
    set.conversations
        .iter()
        .map(|c| {
            state
                .h_table(&c.id)
                .cloned()
                .ok_or_else(|| Error::Model(format!("no representation for conversation {}", c.id)))
        })
        .collect()
}

fn b_tables(panet: &Panet, inputs: &[ConversationInput], source: BSource) -> Result<Vec<Tensor>> {
    inputs
        .iter()
        .map(|input| {
            let trace = panet.trace(input)?;
            Ok(match source {
                BSource::Emotion => trace.speaker_emotions(),
                BSource::Global => rows(&trace, |t| t.global.clone()),
                BSource::Party => rows(&trace, |t| t.party[t.speaker].clone()),
            })
        })
        .collect()
}

fn rows(trace: &PanetTrace, pick: impl Fn(&crate::panet::TurnTrace) -> Vec<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = trace.turns.iter().map(pick).collect();
    Tensor::from_rows(&rows).expect("trace rows share one width")
}

fn predict_all(panet: &Panet, inputs: &[ConversationInput]) -> Result<Vec<Vec<usize>>> {
    inputs.iter().map(|i| panet.predict(i)).collect()
}

fn at_iteration(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite(msg) => Error::NonFinite(format!("outer iteration {iteration}: {msg}")),
        other => other,
    }
}

//! Party-attentive recurrent network.
//!
//! Per turn `t` with speaker `s = I(t)`:
//!
//! ```text
//! g_t   = GRU_G(g_{t-1}, u_t ++ p^{I(t-1)}_{t-1} ++ e^{I(t-1)}_{t-1})
//! c^g_t = ATTN([g_0..g_t], u_t)
//! p^q_t = GRU_P(p^q_{t-1}, u_t ++ c^g_t ++ e^q_{t-1})          for every party q
//! c^q_t = ATTN([p^q_0..p^q_t], g_t)                             for every party q
//! e^q_t = GRU_E(e^q_{t-1}, c^0_t ++ .. ++ c^{Qmax-1}_t ++ g_t)  for every party q
//! P_t   = softmax(W2 relu(W1 e^s_t + b1) + b2)
//! ```
//!
//! All recurrent states start at zero, and contexts of absent parties
//! (`q >= Q`) are zero-padded up to `max_parties`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Conversation, Dims, Modality};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::panet::attention::attend;
use crate::panet::gru::GruCell;

/// Probabilities are clamped here before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanetSpec {
    /// Width of `u_t`: `D_a + D_t + D_v`, plus `D_H` when extended.
    pub input_dim: usize,
    pub global_dim: usize,
    pub party_dim: usize,
    pub emotion_dim: usize,
    pub num_classes: usize,
    pub max_parties: usize,
    /// When false, party contexts are replaced by the current party states.
    pub party_attention: bool,
    /// Adds a reversed GRU_E pass whose states are summed with the forward ones.
    pub bidirectional: bool,
}

impl PanetSpec {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.global_dim,
            self.party_dim,
            self.emotion_dim,
            self.num_classes,
            self.max_parties,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("PANet dims must all be >= 1: {self:?}")));
        }
        Ok(())
    }

    fn head_hidden(&self) -> usize {
        (self.emotion_dim / 2).max(1)
    }
}

#[derive(Clone, Debug)]
struct PanetIds {
    gru_g: GruCell,
    gru_p: GruCell,
    gru_e: GruCell,
    gru_e_rev: Option<GruCell>,
    attn_global: ParamId,
    attn_party: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Panet {
    pub spec: PanetSpec,
    pub params: ParamSet,
    ids: PanetIds,
}

/// Model-ready view of one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConversationInput {
    pub id: String,
    /// `[T, input_dim]`, absent modality segments zero-filled.
    pub features: Tensor,
    pub speakers: Vec<usize>,
    pub num_parties: usize,
}

impl ConversationInput {
    /// Concatenates audio, text and visual segments (zeros where absent) and,
    /// if given, the per-turn `extension` rows.
    pub fn build(conv: &Conversation, dims: &Dims, extension: Option<&Tensor>) -> Result<Self> {
        let base = dims.total();
        let ext = extension.map_or(0, Tensor::cols);
        if let Some(e) = extension {
            if e.rows() != conv.len() {
                return Err(Error::shape("extend input", &[conv.len(), ext], e.shape()));
            }
        }
        let width = base + ext;
        let mut data = Vec::with_capacity(conv.len() * width);
        for (t, u) in conv.utterances.iter().enumerate() {
            for m in Modality::ALL {
                match u.feature(m) {
                    Some(v) if v.len() == dims.get(m) => data.extend_from_slice(v),
                    Some(v) => {
                        return Err(Error::shape("modality", &[dims.get(m)], &[v.len()]));
                    }
                    None => data.extend(std::iter::repeat_n(0.0, dims.get(m))),
                }
            }
            if let Some(e) = extension {
                data.extend_from_slice(e.row_slice(t));
            }
        }
        Ok(Self {
            id: conv.id.clone(),
            features: Tensor::new(vec![conv.len(), width], data)?,
            speakers: conv.speakers(),
            num_parties: conv.num_parties,
        })
    }

    pub fn turns(&self) -> usize {
        self.speakers.len()
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub global: Vec<Var>,
    pub party: Vec<Var>,
    /// Emotion states fed to the classifier (forward + reverse when bidirectional).
    pub emotion: Vec<Var>,
    pub global_attention: Vec<Var>,
    pub party_attention: Vec<Vec<Var>>,
    pub probs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TurnTrace {
    pub speaker: usize,
    pub global: Vec<f64>,
    pub party: Vec<Vec<f64>>,
    pub emotion: Vec<Vec<f64>>,
    pub global_attention: Vec<f64>,
    pub party_attention: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub prediction: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PanetTrace {
    pub turns: Vec<TurnTrace>,
}

impl PanetTrace {
    pub fn predictions(&self) -> Vec<usize> {
        self.turns.iter().map(|t| t.prediction).collect()
    }

    /// The speaker's emotion state per turn, `[T, D_E]`.
    pub fn speaker_emotions(&self) -> Tensor {
        let rows: Vec<Vec<f64>> = self
            .turns
            .iter()
            .map(|t| t.emotion[t.speaker].clone())
            .collect();
        Tensor::from_rows(&rows).expect("trace rows share D_E")
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Panet {
    pub fn new(spec: PanetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (du, dg, dp, de) = (spec.input_dim, spec.global_dim, spec.party_dim, spec.emotion_dim);
        let gru_g = GruCell::new(&mut params, "gru_g", du + dp + de, dg, &mut rng);
        let gru_p = GruCell::new(&mut params, "gru_p", du + dg + de, dp, &mut rng);
        let e_in = spec.max_parties * dp + dg;
        let gru_e = GruCell::new(&mut params, "gru_e", e_in, de, &mut rng);
        let gru_e_rev = spec
            .bidirectional
            .then(|| GruCell::new(&mut params, "gru_e_rev", e_in, de, &mut rng));
        let attn_global = params.add("attn_global", Tensor::glorot(du, dg, &mut rng));
        let attn_party = params.add("attn_party", Tensor::glorot(dg, dp, &mut rng));
        let hh = spec.head_hidden();
        let head_w1 = params.add("head.w1", Tensor::glorot(de, hh, &mut rng));
        let head_b1 = params.add("head.b1", Tensor::zeros(&[1, hh]));
        let head_w2 = params.add("head.w2", Tensor::glorot(hh, spec.num_classes, &mut rng));
        let head_b2 = params.add("head.b2", Tensor::zeros(&[1, spec.num_classes]));
        Ok(Self {
            spec,
            params,
            ids: PanetIds {
                gru_g,
                gru_p,
                gru_e,
                gru_e_rev,
                attn_global,
                attn_party,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
        })
    }

    fn check_input(&self, input: &ConversationInput) -> Result<()> {
        if input.features.cols() != self.spec.input_dim {
            return Err(Error::shape(
                "panet input",
                &[input.turns(), self.spec.input_dim],
                input.features.shape(),
            ));
        }
        if input.num_parties > self.spec.max_parties {
            return Err(Error::Model(format!(
                "conversation {} has {} parties, model supports {}",
                input.id, input.num_parties, self.spec.max_parties
            )));
        }
        if input.turns() == 0 || input.features.rows() != input.turns() {
            return Err(Error::Model(format!("conversation {} has no usable turns", input.id)));
        }
        if let Some(&s) = input.speakers.iter().find(|&&s| s >= input.num_parties) {
            return Err(Error::Model(format!("speaker {s} out of range in {}", input.id)));
        }
        Ok(())
    }

    /// Classification head applied to a `[1, D_E]` emotion state.
    pub fn classify(&self, g: &mut Graph, p: &Bound, emotion: Var) -> Result<Var> {
        let h = g.matmul(emotion, p.get(self.ids.head_w1))?;
        let h = g.add_row(h, p.get(self.ids.head_b1))?;
        let h = g.relu(h);
        let logits = g.matmul(h, p.get(self.ids.head_w2))?;
        let logits = g.add_row(logits, p.get(self.ids.head_b2))?;
        g.softmax(logits)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, input: &ConversationInput) -> Result<ForwardVars> {
        self.check_input(input)?;
        let spec = &self.spec;
        let q = input.num_parties;
        let turns = input.turns();
        let u_all = g.constant(input.features.clone());

        let mut global_state = g.constant(Tensor::zeros(&[1, spec.global_dim]));
        let mut party_state = g.constant(Tensor::zeros(&[q, spec.party_dim]));
        let mut emotion_state = g.constant(Tensor::zeros(&[q, spec.emotion_dim]));
        let zero_party_row = g.constant(Tensor::zeros(&[1, spec.party_dim]));
        let zero_emotion_row = g.constant(Tensor::zeros(&[1, spec.emotion_dim]));
        let broadcast: Vec<usize> = vec![0; q];

        let mut out = ForwardVars {
            global: Vec::with_capacity(turns),
            party: Vec::with_capacity(turns),
            emotion: Vec::with_capacity(turns),
            global_attention: Vec::with_capacity(turns),
            party_attention: Vec::with_capacity(turns),
            probs: Vec::with_capacity(turns),
        };
        let mut party_rows: Vec<Vec<Var>> = vec![Vec::with_capacity(turns); q];
        let mut emotion_inputs = Vec::with_capacity(turns);
        let mut forward_emotions = Vec::with_capacity(turns);

        for t in 0..turns {
            let u = g.row(u_all, t)?;

            let (prev_p, prev_e) = if t == 0 {
                (zero_party_row, zero_emotion_row)
            } else {
                let s = input.speakers[t - 1];
                (g.row(party_state, s)?, g.row(emotion_state, s)?)
            };
            let x_g = g.concat(&[u, prev_p, prev_e], 1)?;
            global_state = self.ids.gru_g.step(g, p, x_g, global_state)?;
            out.global.push(global_state);

            let memory = g.concat(&out.global, 0)?;
            let (alpha_g, c_g) = attend(g, memory, u, p.get(self.ids.attn_global))?;

            let shared = g.concat(&[u, c_g], 1)?;
            let shared = g.select_rows(shared, &broadcast)?;
            let x_p = g.concat(&[shared, emotion_state], 1)?;
            party_state = self.ids.gru_p.step(g, p, x_p, party_state)?;

            let mut contexts = Vec::with_capacity(spec.max_parties + 1);
            let mut alphas = Vec::with_capacity(q);
            for (qi, rows) in party_rows.iter_mut().enumerate() {
                let row = g.row(party_state, qi)?;
                rows.push(row);
                if spec.party_attention {
                    let mem = g.concat(rows, 0)?;
                    let (a, c) = attend(g, mem, global_state, p.get(self.ids.attn_party))?;
                    alphas.push(a);
                    contexts.push(c);
                } else {
                    let mut onehot = vec![0.0; t + 1];
                    onehot[t] = 1.0;
                    alphas.push(g.constant(Tensor::row(onehot)));
                    contexts.push(row);
                }
            }
            for _ in q..spec.max_parties {
                contexts.push(zero_party_row);
            }
            contexts.push(global_state);
            let x_e = g.concat(&contexts, 1)?;
            let x_e = g.select_rows(x_e, &broadcast)?;
            emotion_state = self.ids.gru_e.step(g, p, x_e, emotion_state)?;

            emotion_inputs.push(x_e);
            forward_emotions.push(emotion_state);
            out.party.push(party_state);
            out.global_attention.push(alpha_g);
            out.party_attention.push(alphas);
        }

        if let Some(rev) = &self.ids.gru_e_rev {
            let mut state = g.constant(Tensor::zeros(&[q, spec.emotion_dim]));
            let mut reversed = vec![state; turns];
            for t in (0..turns).rev() {
                state = rev.step(g, p, emotion_inputs[t], state)?;
                reversed[t] = state;
            }
            for t in 0..turns {
                let sum = g.add(forward_emotions[t], reversed[t])?;
                out.emotion.push(sum);
            }
        } else {
            out.emotion = forward_emotions;
        }

        for t in 0..turns {
            let e = g.row(out.emotion[t], input.speakers[t])?;
            let probs = self.classify(g, p, e)?;
            out.probs.push(probs);
        }
        Ok(out)
    }

    /// Mean negative log-likelihood plus `l2 * ||params||_2`.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        fwd: &ForwardVars,
        labels: &[usize],
        l2: f64,
    ) -> Result<Var> {
        if labels.len() != fwd.probs.len() {
            return Err(Error::Model(format!(
                "{} labels for {} turns",
                labels.len(),
                fwd.probs.len()
            )));
        }
        let mut nll = Vec::with_capacity(labels.len());
        for (&probs, &y) in fwd.probs.iter().zip(labels) {
            let py = g.pick(probs, y)?;
            nll.push(g.ln_clamped(py, LOG_FLOOR));
        }
        let stacked = g.concat(&nll, 0)?;
        let mean = g.mean(stacked);
        let ce = g.neg(mean);
        if l2 == 0.0 {
            return Ok(ce);
        }
        let norm = l2_norm(g, p.vars());
        let reg = g.scale(norm, l2);
        g.add(ce, reg)
    }

    pub fn trace(&self, input: &ConversationInput) -> Result<PanetTrace> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let fwd = self.forward(&mut g, &p, input)?;
        let rows = |v: Var| -> Vec<Vec<f64>> {
            let t = g.value(v);
            (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
        };
        let turns = (0..input.turns())
            .map(|t| {
                let probs = g.value(fwd.probs[t]).data().to_vec();
                TurnTrace {
                    speaker: input.speakers[t],
                    global: g.value(fwd.global[t]).data().to_vec(),
                    party: rows(fwd.party[t]),
                    emotion: rows(fwd.emotion[t]),
                    global_attention: g.value(fwd.global_attention[t]).data().to_vec(),
                    party_attention: fwd.party_attention[t]
                        .iter()
                        .map(|&a| g.value(a).data().to_vec())
                        .collect(),
                    prediction: argmax(&probs),
                    probs,
                }
            })
            .collect();
        Ok(PanetTrace { turns })
    }

    pub fn predict(&self, input: &ConversationInput) -> Result<Vec<usize>> {
        Ok(self.trace(input)?.predictions())
    }
}

/// `sqrt(sum of squares)` over every tensor in `vars`.
pub(crate) fn l2_norm(g: &mut Graph, vars: &[Var]) -> Var {
    let sums: Vec<Var> = vars
        .iter()
        .map(|&v| {
            let sq = g.square(v);
            g.sum(sq)
        })
        .collect();
    let stacked = g.concat(&sums, 0).expect("scalars stack");
    let total = g.sum(stacked);
    g.sqrt(total, 1e-12)
}

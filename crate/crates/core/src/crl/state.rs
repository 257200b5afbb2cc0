use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crl::data::CrlInput;
use crate::crl::losses::{
    classification_loss_graph, gradient_penalty_surrogate, reconstruction_loss, Centroids,
};
use crate::crl::mlp::{BnMode, BnStats, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Bound, Checkpoint, Graph, ParamSet, Tensor, Var};

const CRITIC_SEED_OFFSET: u64 = 0xc217_1c00;
const H_SEED_OFFSET: u64 = 0x0b0b_0000;
const LOOP_SEED_OFFSET: u64 = 0x100b_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrlConfig {
    /// Width `D_H` of the common representation.
    pub common_dim: usize,
    pub lambda_r: f64,
    pub lambda_c: f64,
    pub lambda_a: f64,
    pub lambda_g: f64,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    /// Adam learning rate of generators and critics.
    pub lr: f64,
    /// Adam learning rate of the per-utterance representations.
    pub h_lr: f64,
    /// Squared-L2 weight on generator and critic parameters.
    pub weight_decay: f64,
    /// Hidden width; `None` means `max(64, 2 * D_H)`.
    pub hidden_width: Option<usize>,
    pub generator_hidden_layers: usize,
    pub critic_hidden_layers: usize,
    pub batch_norm: bool,
    pub h_init_std: f64,
    pub gp_step: f64,
    /// Observed rows pooled per modality each epoch for the critics.
    pub reservoir_size: usize,
    /// Pooled rows added to each critic's real batch.
    pub real_samples: usize,
    /// Passes over the data during test-time fine-tuning.
    pub finetune_epochs: usize,
}

impl Default for CrlConfig {
    fn default() -> Self {
        Self {
            common_dim: 16,
            lambda_r: 1.0,
            lambda_c: 10.0,
            lambda_a: 10.0,
            lambda_g: 1.0,
            critic_steps: 2,
            lr: 1e-3,
            h_lr: 1e-2,
            weight_decay: 1e-3,
            hidden_width: None,
            generator_hidden_layers: 2,
            critic_hidden_layers: 2,
            batch_norm: true,
            h_init_std: 0.01,
            gp_step: 1e-4,
            reservoir_size: 256,
            real_samples: 32,
            finetune_epochs: 30,
        }
    }
}

impl CrlConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_r, self.lambda_c, self.lambda_a, self.lambda_g];
        if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {lambdas:?}")));
        }
        if self.common_dim == 0 {
            return Err(Error::Config("common representation dim must be >= 1".into()));
        }
        if self.critic_steps == 0 || self.hidden_width == Some(0) {
            return Err(Error::Config("critic steps and hidden width must be >= 1".into()));
        }
        for (name, v) in [("lr", self.lr), ("h_lr", self.h_lr), ("gp_step", self.gp_step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.h_init_std >= 0.0) {
            return Err(Error::Config("weight decay and init std must be >= 0".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.hidden_width.unwrap_or((2 * self.common_dim).max(64))
    }
}

/// Mean per-conversation loss components of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CrlLosses {
    pub reconstruction: f64,
    pub classification: f64,
    pub adversarial: f64,
    pub critic: f64,
    /// `mean D(real) - mean D(fake)`, averaged over critic updates.
    pub wasserstein: f64,
    pub total: f64,
}

/// Outcome of the critic updates for one conversation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdversarialOutcome {
    /// Per modality, the critic loss of each update (empty when skipped).
    pub critic_losses: Vec<Vec<f64>>,
    pub wasserstein: Vec<f64>,
    /// Modalities that had missing rows and therefore an adversarial term.
    pub active: Vec<usize>,
}

/// Losses of one critic update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CriticStep {
    pub loss: f64,
    pub wasserstein: f64,
    pub penalty: f64,
}

/// Representations fitted at test time and the generator copies tuned alongside.
#[derive(Clone, Debug)]
pub struct Finetuned {
    pub h: Vec<Tensor>,
    pub generators: Vec<Mlp>,
}

#[derive(Clone, Debug)]
pub struct CrlState {
    pub config: CrlConfig,
    pub modality_dims: Vec<usize>,
    pub num_classes: usize,
    pub generators: Vec<Mlp>,
    pub critics: Vec<Mlp>,
    /// Conversation ids and their `[T, D_H]` representation tables.
    pub ids: Vec<String>,
    pub h: Vec<Tensor>,
    pub centroids: Centroids,
    gen_adam: Vec<Adam>,
    critic_adam: Vec<Adam>,
    h_adam: Vec<Adam>,
    rng: ChaCha8Rng,
    seed: u64,
}

fn layer_widths(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut w = vec![input];
    w.extend(std::iter::repeat_n(hidden, layers));
    w.push(output);
    w
}

/// `sum ||theta||^2` over every tensor of `p`.
fn sq_norm_all(g: &mut Graph, p: &Bound) -> Result<Var> {
    let sums: Vec<Var> = p
        .vars()
        .iter()
        .map(|&v| {
            let sq = g.square(v);
            g.sum(sq)
        })
        .collect();
    let stacked = g.concat(&sums, 0)?;
    Ok(g.sum(stacked))
}

fn check_finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Copies the listed rows of `t`.
fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let data = rows.iter().flat_map(|&r| t.row_slice(r).iter().copied()).collect();
    Tensor::new(vec![rows.len(), t.cols()], data).expect("rows share width")
}

/// One critic update on detached real and generated rows:
/// `mean D(fake) - mean D(real) + lambda_g * GP(fake) + wd * ||theta||^2`.
pub fn train_critic(
    critic: &mut Mlp,
    adam: &mut Adam,
    real: &Tensor,
    fake: &Tensor,
    config: &CrlConfig,
) -> Result<CriticStep> {
    let mut g = Graph::new();
    let p = critic.params.bind(&mut g);
    let (loss, wasserstein, penalty) = critic_parts(&mut g, critic, &p, real, fake, config)?;
    let value = check_finite(g.value(loss).item(), "critic loss")?;
    g.backward(loss)?;
    let grads = critic.params.grads(&g, &p);
    adam.update(critic.params.tensors_mut(), &grads)?;
    Ok(CriticStep {
        loss: value,
        wasserstein,
        penalty,
    })
}

/// `mean D(fake) - mean D(real) + lambda_g * GP(fake) + wd * ||theta_d||^2`.
pub fn critic_objective(
    g: &mut Graph,
    critic: &Mlp,
    p: &Bound,
    real: &Tensor,
    fake: &Tensor,
    config: &CrlConfig,
) -> Result<Var> {
    Ok(critic_parts(g, critic, p, real, fake, config)?.0)
}

fn critic_parts(
    g: &mut Graph,
    critic: &Mlp,
    p: &Bound,
    real: &Tensor,
    fake: &Tensor,
    config: &CrlConfig,
) -> Result<(Var, f64, f64)> {
    let rv = g.constant(real.clone());
    let fv = g.constant(fake.clone());
    let (d_real, _) = critic.forward(g, p, rv, BnMode::Eval)?;
    let (d_fake, _) = critic.forward(g, p, fv, BnMode::Eval)?;
    let m_real = g.mean(d_real);
    let m_fake = g.mean(d_fake);
    let mut loss = g.sub(m_fake, m_real)?;
    let wasserstein = g.value(m_real).item() - g.value(m_fake).item();
    let mut penalty = 0.0;
    if config.lambda_g > 0.0 {
        let gp = gradient_penalty_surrogate(g, critic, p, fake, config.gp_step)?;
        penalty = g.value(gp).item();
        let weighted = g.scale(gp, config.lambda_g);
        loss = g.add(loss, weighted)?;
    }
    if config.weight_decay > 0.0 {
        let norm = sq_norm_all(g, p)?;
        let reg = g.scale(norm, config.weight_decay);
        loss = g.add(loss, reg)?;
    }
    Ok((loss, wasserstein, penalty))
}

/// Generated rows at each modality's missing turns, detached (`None` when nothing is missing).
pub fn generated_at_missing(g: &Graph, outputs: &[Var], input: &CrlInput) -> Vec<Option<Tensor>> {
    input
        .blocks
        .iter()
        .zip(outputs)
        .map(|(b, &o)| {
            let rows = b.missing_rows();
            (!rows.is_empty()).then(|| gather_rows(g.value(o), &rows))
        })
        .collect()
}

impl CrlState {
    /// Fresh generators, critics and an empty representation table.
    pub fn new(config: CrlConfig, modality_dims: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if modality_dims.is_empty() || modality_dims.contains(&0) || num_classes == 0 {
            return Err(Error::Config(format!(
                "need modality dims >= 1 and classes >= 1, got {modality_dims:?} / {num_classes}"
            )));
        }
        let width = config.width();
        let mut gen_rng = ChaCha8Rng::seed_from_u64(seed);
        let generators = modality_dims
            .iter()
            .map(|&d| {
                let w = layer_widths(config.common_dim, width, config.generator_hidden_layers, d);
                Mlp::new(&w, config.batch_norm, &mut gen_rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamConfig::with_lr(config.lr);
        let mut state = Self {
            gen_adam: vec![Adam::new(adam); modality_dims.len()],
            critic_adam: Vec::new(),
            critics: Vec::new(),
            generators,
            modality_dims: modality_dims.to_vec(),
            num_classes,
            ids: Vec::new(),
            h: Vec::new(),
            h_adam: Vec::new(),
            centroids: Centroids {
                means: vec![None; num_classes],
            },
            rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(LOOP_SEED_OFFSET)),
            seed,
            config,
        };
        state.reinit_critics(seed.wrapping_add(CRITIC_SEED_OFFSET))?;
        Ok(state)
    }

    /// Replaces every critic with a freshly initialised one.
    pub fn reinit_critics(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = self.config.width();
        self.critics = self
            .modality_dims
            .iter()
            .map(|&d| {
                let w = layer_widths(d, width, self.config.critic_hidden_layers, 1);
                Mlp::new(&w, false, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        self.critic_adam = vec![Adam::new(AdamConfig::with_lr(self.config.lr)); self.modality_dims.len()];
        Ok(())
    }

    /// Draws a fresh `N(0, h_init_std^2)` table for every input conversation.
    pub fn init_h(&mut self, inputs: &[CrlInput]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(H_SEED_OFFSET));
        self.ids = inputs.iter().map(|c| c.id.clone()).collect();
        self.h = inputs
            .iter()
            .map(|c| Tensor::randn(&[c.turns(), self.config.common_dim], self.config.h_init_std, &mut rng))
            .collect();
        self.h_adam = vec![Adam::new(AdamConfig::with_lr(self.config.h_lr)); inputs.len()];
    }

    pub fn h_table(&self, id: &str) -> Option<&Tensor> {
        self.ids.iter().position(|i| i == id).map(|k| &self.h[k])
    }

    fn check_inputs(&self, inputs: &[CrlInput], with_h: bool) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Data("no conversations to learn from".into()));
        }
        for (k, c) in inputs.iter().enumerate() {
            let dims = c.dims();
            if dims.len() > self.modality_dims.len() || dims[..] != self.modality_dims[..dims.len()] {
                return Err(Error::shape("crl modalities", &self.modality_dims, &dims));
            }
            if with_h {
                if dims.len() != self.modality_dims.len() {
                    return Err(Error::shape("crl modalities", &self.modality_dims, &dims));
                }
                if self.ids.get(k) != Some(&c.id) || self.h[k].rows() != c.turns() {
                    return Err(Error::Data(format!(
                        "conversation {} does not match the representation table",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Generator output for modality `m`, eval mode.
    pub fn reconstruct(&self, h: &Tensor, m: usize) -> Result<Tensor> {
        let gen = self
            .generators
            .get(m)
            .ok_or_else(|| Error::Model(format!("unknown modality {m}")))?;
        gen.apply(h)
    }

    /// Means of the current representations per class.
    pub fn refresh_centroids(&mut self, labels: &[Vec<usize>]) -> Result<()> {
        let rows = self.h.iter().zip(labels).flat_map(|(t, ls)| {
            ls.iter().enumerate().map(move |(r, &y)| (t.row_slice(r), y))
        });
        self.centroids = Centroids::from_rows(rows, self.num_classes, self.config.common_dim)?;
        Ok(())
    }

    /// Observed rows per modality, reservoir-sampled across all inputs.
    fn fill_reservoirs(&mut self, inputs: &[CrlInput]) -> Vec<Vec<Vec<f64>>> {
        let cap = self.config.reservoir_size;
        let mut pools: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.modality_dims.len()];
        let mut seen = vec![0usize; self.modality_dims.len()];
        for c in inputs {
            for (m, block) in c.blocks.iter().enumerate() {
                for t in block.observed_rows() {
                    seen[m] += 1;
                    let row = block.values.row_slice(t).to_vec();
                    if pools[m].len() < cap {
                        pools[m].push(row);
                    } else {
                        let j = self.rng.random_range(0..seen[m]);
                        if j < cap {
                            pools[m][j] = row;
                        }
                    }
                }
            }
        }
        pools
    }

    /// Critic updates for every modality with missing rows in `input`, using
    /// `fakes[m]` (generated rows at the missing slots) against the observed
    /// rows plus pooled samples.
    pub fn adversarial_step(
        &mut self,
        input: &CrlInput,
        fakes: &[Option<Tensor>],
        pools: &[Vec<Vec<f64>>],
    ) -> Result<AdversarialOutcome> {
        let mut out = AdversarialOutcome {
            critic_losses: vec![Vec::new(); self.modality_dims.len()],
            ..Default::default()
        };
        for (m, block) in input.blocks.iter().enumerate() {
            let Some(fake) = &fakes[m] else { continue };
            let mut real_rows: Vec<Vec<f64>> = block
                .observed_rows()
                .into_iter()
                .map(|t| block.values.row_slice(t).to_vec())
                .collect();
            let pool = &pools[m];
            if !pool.is_empty() {
                for _ in 0..self.config.real_samples {
                    real_rows.push(pool[self.rng.random_range(0..pool.len())].clone());
                }
            }
            if real_rows.is_empty() {
                continue;
            }
            let real = Tensor::from_rows(&real_rows)?;
            for _ in 0..self.config.critic_steps {
                let step = train_critic(&mut self.critics[m], &mut self.critic_adam[m], &real, fake, &self.config)?;
                out.critic_losses[m].push(step.loss);
                out.wasserstein.push(step.wasserstein);
            }
            out.active.push(m);
        }
        Ok(out)
    }

    /// One pass over the training conversations, one generator/representation
    /// update per conversation, preceded by the critic updates.
    /// `inputs` must match the table built by [`CrlState::init_h`].
    pub fn train_epoch(&mut self, inputs: &[CrlInput], labels: &[Vec<usize>]) -> Result<CrlLosses> {
        self.check_inputs(inputs, true)?;
        if inputs.len() != self.h.len() {
            return Err(Error::Data(format!(
                "{} conversations given, representation table has {}",
                inputs.len(),
                self.h.len()
            )));
        }
        if labels.len() != inputs.len() || labels.iter().zip(inputs).any(|(l, c)| l.len() != c.turns()) {
            return Err(Error::Data("labels do not cover every training turn".into()));
        }
        let cfg = self.config.clone();
        let centroid_matrix = if cfg.lambda_c > 0.0 {
            self.refresh_centroids(labels)?;
            Some(self.centroids.matrix()?)
        } else {
            None
        };
        let adversarial = cfg.lambda_a > 0.0;
        let pools = if adversarial { self.fill_reservoirs(inputs) } else { Vec::new() };
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut self.rng);

        let mut sums = CrlLosses::default();
        let (mut critic_updates, mut critic_sum, mut w_sum) = (0usize, 0.0, 0.0);
        for k in order {
            let input = &inputs[k];
            let mut g = Graph::new();
            let h = g.param(self.h[k].clone());
            let bounds: Vec<Bound> = self.generators.iter().map(|m| m.params.bind(&mut g)).collect();
            let (outputs, stats) = self.forward_generators(&mut g, h, &bounds, BnMode::Train)?;
            if adversarial {
                let fakes = generated_at_missing(&g, &outputs, input);
                let outcome = self.adversarial_step(input, &fakes, &pools)?;
                for losses in &outcome.critic_losses {
                    critic_updates += losses.len();
                    critic_sum += losses.iter().sum::<f64>();
                }
                w_sum += outcome.wasserstein.iter().sum::<f64>();
            }
            let (total, parts) =
                self.generator_objective(&mut g, input, &labels[k], h, &outputs, &bounds, centroid_matrix.as_ref())?;
            sums.reconstruction += parts.reconstruction;
            sums.classification += parts.classification;
            sums.adversarial += parts.adversarial;
            sums.total += check_finite(parts.total, &format!("CRL loss on conversation {}", input.id))?;
            g.backward(total)?;

            for (m, b) in bounds.iter().enumerate() {
                let grads = self.generators[m].params.grads(&g, b);
                self.gen_adam[m].update(self.generators[m].params.tensors_mut(), &grads)?;
                self.generators[m].update_running(&stats[m]);
            }
            let gh = g.grad(h);
            self.h_adam[k].update(std::slice::from_mut(&mut self.h[k]), &[gh])?;
        }
        let n = inputs.len() as f64;
        Ok(CrlLosses {
            reconstruction: sums.reconstruction / n,
            classification: sums.classification / n,
            adversarial: sums.adversarial / n,
            critic: if critic_updates > 0 { critic_sum / critic_updates as f64 } else { 0.0 },
            wasserstein: if critic_updates > 0 { w_sum / critic_updates as f64 } else { 0.0 },
            total: sums.total / n,
        })
    }

    /// Every generator applied to the `[T, D_H]` representation `h`.
    pub fn forward_generators(
        &self,
        g: &mut Graph,
        h: Var,
        bounds: &[Bound],
        mode: BnMode,
    ) -> Result<(Vec<Var>, Vec<BnStats>)> {
        let mut outputs = Vec::with_capacity(bounds.len());
        let mut stats = Vec::with_capacity(bounds.len());
        for (gen, b) in self.generators.iter().zip(bounds) {
            let (o, s) = gen.forward(g, b, h, mode)?;
            outputs.push(o);
            stats.push(s);
        }
        Ok((outputs, stats))
    }

    /// `lambda_r L_R + lambda_c L_C + lambda_a L_A + wd ||theta_u||^2` for one
    /// conversation, with the critics frozen at their current values.
    /// `centroids` of `None` drops the classification term.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_objective(
        &self,
        g: &mut Graph,
        input: &CrlInput,
        labels: &[usize],
        h: Var,
        outputs: &[Var],
        bounds: &[Bound],
        centroids: Option<&Tensor>,
    ) -> Result<(Var, CrlLosses)> {
        let cfg = &self.config;
        let mut parts = CrlLosses::default();
        let mut terms: Vec<Var> = Vec::new();
        let l_r = reconstruction_loss(g, outputs, &input.blocks)?;
        parts.reconstruction = g.value(l_r).item();
        terms.push(g.scale(l_r, cfg.lambda_r));

        if let Some(mu) = centroids {
            let l_c = classification_loss_graph(g, h, labels, mu)?;
            parts.classification = g.value(l_c).item();
            terms.push(g.scale(l_c, cfg.lambda_c));
        }

        if cfg.lambda_a > 0.0 {
            let mut adv_terms = Vec::new();
            for (m, block) in input.blocks.iter().enumerate() {
                let missing = block.missing_rows();
                if missing.is_empty() {
                    continue;
                }
                let critic = &self.critics[m];
                let cb = critic.params.bind_frozen(g);
                let generated = g.select_rows(outputs[m], &missing)?;
                let (score, _) = critic.forward(g, &cb, generated, BnMode::Eval)?;
                let mean = g.mean(score);
                adv_terms.push(g.neg(mean));
            }
            if !adv_terms.is_empty() {
                let stacked = g.concat(&adv_terms, 0)?;
                let l_a = g.sum(stacked);
                parts.adversarial = g.value(l_a).item();
                terms.push(g.scale(l_a, cfg.lambda_a));
            }
        }

        if cfg.weight_decay > 0.0 {
            let norms = bounds.iter().map(|b| sq_norm_all(g, b)).collect::<Result<Vec<_>>>()?;
            let stacked = g.concat(&norms, 0)?;
            let total = g.sum(stacked);
            terms.push(g.scale(total, cfg.weight_decay));
        }
        let stacked = g.concat(&terms, 0)?;
        let total = g.sum(stacked);
        parts.total = g.value(total).item();
        Ok((total, parts))
    }

    /// Critic objective for modality `m` on detached rows, parameters bound by the caller.
    pub fn critic_objective(&self, g: &mut Graph, m: usize, p: &Bound, real: &Tensor, fake: &Tensor) -> Result<Var> {
        critic_objective(g, &self.critics[m], p, real, fake, &self.config)
    }

    pub fn generator_steps(&self) -> u64 {
        self.gen_adam.first().map_or(0, Adam::step_count)
    }

    pub fn critic_steps_taken(&self, m: usize) -> u64 {
        self.critic_adam[m].step_count()
    }

    /// Fits fresh representations (and a private copy of the generators) to
    /// the observed slots of `inputs` by reconstruction alone. Takes no labels.
    /// Only as many generators as `inputs` has blocks are used.
    pub fn test_time_finetune(&self, inputs: &[CrlInput], seed: u64) -> Result<Vec<Tensor>> {
        Ok(self.finetune(inputs, seed)?.h)
    }

    /// [`CrlState::test_time_finetune`], also returning the tuned generator copies.
    pub fn finetune(&self, inputs: &[CrlInput], seed: u64) -> Result<Finetuned> {
        self.check_inputs(inputs, false)?;
        let cfg = &self.config;
        let used = inputs[0].blocks.len();
        if inputs.iter().any(|c| c.blocks.len() != used) {
            return Err(Error::Data("inputs disagree on the number of modalities".into()));
        }
        let mut gens: Vec<Mlp> = self.generators[..used].to_vec();
        let mut gen_adam = vec![Adam::new(AdamConfig::with_lr(cfg.lr)); used];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h: Vec<Tensor> = inputs
            .iter()
            .map(|c| Tensor::randn(&[c.turns(), cfg.common_dim], cfg.h_init_std, &mut rng))
            .collect();
        let mut h_adam = vec![Adam::new(AdamConfig::with_lr(cfg.h_lr)); inputs.len()];
        for _ in 0..cfg.finetune_epochs {
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            order.shuffle(&mut rng);
            for k in order {
                let mut g = Graph::new();
                let hv = g.param(h[k].clone());
                let bounds: Vec<Bound> = gens.iter().map(|m| m.params.bind(&mut g)).collect();
                let outputs = gens
                    .iter()
                    .zip(&bounds)
                    .map(|(gen, b)| gen.forward(&mut g, b, hv, BnMode::Eval).map(|(o, _)| o))
                    .collect::<Result<Vec<_>>>()?;
                let loss = reconstruction_loss(&mut g, &outputs, &inputs[k].blocks)?;
                check_finite(g.value(loss).item(), &format!("fine-tuning loss on {}", inputs[k].id))?;
                g.backward(loss)?;
                for (m, b) in bounds.iter().enumerate() {
                    let grads = gens[m].params.grads(&g, b);
                    gen_adam[m].update(gens[m].params.tensors_mut(), &grads)?;
                }
                let gh = g.grad(hv);
                h_adam[k].update(std::slice::from_mut(&mut h[k]), &[gh])?;
            }
        }
        Ok(Finetuned { h, generators: gens })
    }

    /// Reconstruction loss of one conversation against a representation
    /// table, eval mode, over the blocks present in `input`.
    pub fn reconstruction_error(&self, input: &CrlInput, h: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let outputs = self.generators[..input.blocks.len()]
            .iter()
            .map(|gen| {
                let b = gen.params.bind_frozen(&mut g);
                gen.forward(&mut g, &b, hv, BnMode::Eval).map(|(o, _)| o)
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = reconstruction_loss(&mut g, &outputs, &input.blocks)?;
        Ok(g.value(loss).item())
    }

    /// Generators, critics, representation tables and centroids.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut named: Vec<(String, Tensor)> = Vec::new();
        for (m, gen) in self.generators.iter().enumerate() {
            named.extend(gen.named_tensors(&format!("gen{m}")));
        }
        for (m, critic) in self.critics.iter().enumerate() {
            named.extend(critic.named_tensors(&format!("critic{m}")));
        }
        for (id, t) in self.ids.iter().zip(&self.h) {
            named.push((format!("h.{id}"), t.clone()));
        }
        for (c, mean) in self.centroids.means.iter().enumerate() {
            if let Some(v) = mean {
                named.push((format!("centroid.{c}"), Tensor::row(v.clone())));
            }
        }
        let mut set = ParamSet::new();
        for (n, t) in named {
            set.add(n, t);
        }
        set.to_checkpoint("crl")
    }

    /// Restores a state written by [`CrlState::to_checkpoint`] into one built
    /// with the same configuration and modality dims.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.validate()?;
        if ckpt.kind != "crl" {
            return Err(Error::Model(format!("expected a crl checkpoint, found {}", ckpt.kind)));
        }
        let lookup = |name: &str| -> Option<Tensor> {
            ckpt.tensors
                .iter()
                .find(|t| t.name == name)
                .and_then(|t| Tensor::new(t.shape.clone(), t.values.clone()).ok())
        };
        for (m, gen) in self.generators.iter_mut().enumerate() {
            gen.load_named(&format!("gen{m}"), &lookup)?;
        }
        for (m, critic) in self.critics.iter_mut().enumerate() {
            critic.load_named(&format!("critic{m}"), &lookup)?;
        }
        self.ids.clear();
        self.h.clear();
        let mut means = vec![None; self.num_classes];
        for t in &ckpt.tensors {
            let tensor = || Tensor::new(t.shape.clone(), t.values.clone());
            if let Some(id) = t.name.strip_prefix("h.") {
                self.ids.push(id.to_string());
                self.h.push(tensor()?);
            } else if let Some(c) = t.name.strip_prefix("centroid.") {
                let c: usize = c
                    .parse()
                    .map_err(|_| Error::Model(format!("bad centroid entry {}", t.name)))?;
                if c >= self.num_classes {
                    return Err(Error::Model(format!("centroid {c} outside {} classes", self.num_classes)));
                }
                means[c] = Some(t.values.clone());
            }
        }
        self.centroids = Centroids { means };
        self.h_adam = vec![Adam::new(AdamConfig::with_lr(self.config.h_lr)); self.h.len()];
        Ok(())
    }
}

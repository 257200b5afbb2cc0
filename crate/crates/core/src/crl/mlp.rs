//! Fully connected stacks used as generators (with batch norm) and critics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalise with the batch's own statistics.
    Train,
    /// Normalise with the running statistics.
    Eval,
}

/// Running statistics of one batch-norm layer. Scale and shift live in the
/// owning [`Mlp`]'s parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(width: usize) -> Self {
        Self {
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
        }
    }

    /// Blends batch statistics into the running ones. `var` is the biased
    /// batch variance; the stored estimate uses the unbiased correction.
    pub fn update(&mut self, mean: &[f64], var: &[f64], batch: usize) {
        let correction = if batch > 1 { batch as f64 / (batch - 1) as f64 } else { 1.0 };
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (m * *r + (1.0 - m) * b * correction).max(0.0);
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
    /// Scale and shift when the layer is batch-normalised.
    bn: Option<(ParamId, ParamId)>,
}

/// Batch statistics gathered by a train-mode forward pass, one per BN layer.
#[derive(Clone, Debug, Default)]
pub struct BnStats {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub batch: usize,
}

/// `Linear -> [BN] -> LeakyReLU` repeated, then a final `Linear`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub widths: Vec<usize>,
    pub batch_norm: bool,
    pub params: ParamSet,
    pub bn: Vec<BatchNormState>,
    layers: Vec<Layer>,
}

impl Mlp {
    /// `widths` lists the input width, any hidden widths and the output width.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], batch_norm: bool, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut bn = Vec::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            let w = params.add(format!("l{i}.w"), Tensor::glorot(pair[0], pair[1], rng));
            let b = params.add(format!("l{i}.b"), Tensor::zeros(&[1, pair[1]]));
            let norm = (batch_norm && i < last).then(|| {
                bn.push(BatchNormState::new(pair[1]));
                (
                    params.add(format!("l{i}.gamma"), Tensor::full(&[1, pair[1]], 1.0)),
                    params.add(format!("l{i}.beta"), Tensor::zeros(&[1, pair[1]])),
                )
            });
            layers.push(Layer { w, b, bn: norm });
        }
        Ok(Self {
            widths: widths.to_vec(),
            batch_norm,
            params,
            bn,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    /// Forward pass for a batch of rows `[n, input_dim]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var, mode: BnMode) -> Result<(Var, BnStats)> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::shape("mlp input", &[shape.first().copied().unwrap_or(0), self.input_dim()], &shape));
        }
        let mut stats = BnStats {
            layers: Vec::new(),
            batch: shape[0],
        };
        let last = self.layers.len() - 1;
        let mut h = x;
        let mut bn_index = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            h = g.matmul(h, p.get(layer.w))?;
            h = g.add_row(h, p.get(layer.b))?;
            if i == last {
                break;
            }
            if let Some((gamma, beta)) = layer.bn {
                h = match mode {
                    BnMode::Train => {
                        let (normed, mean, var) = g.batch_norm(h, BN_EPS)?;
                        stats.layers.push((mean, var));
                        normed
                    }
                    BnMode::Eval => {
                        let state = &self.bn[bn_index];
                        let shift = g.constant(Tensor::row(state.running_mean.iter().map(|m| -m).collect()));
                        let inv = g.constant(Tensor::row(
                            state.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
                        ));
                        let centred = g.add_row(h, shift)?;
                        g.mul_row(centred, inv)?
                    }
                };
                h = g.mul_row(h, p.get(gamma))?;
                h = g.add_row(h, p.get(beta))?;
                bn_index += 1;
            }
            h = g.leaky_relu(h);
        }
        Ok((h, stats))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BnStats) {
        for (state, (mean, var)) in self.bn.iter_mut().zip(&stats.layers) {
            state.update(mean, var, stats.batch);
        }
    }

    /// Evaluates the network on plain rows, eval mode, no gradients.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let xv = g.constant(x.clone());
        let (out, _) = self.forward(&mut g, &p, xv, BnMode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Every parameter plus the running statistics, for checkpoints.
    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{prefix}.{n}"), t.clone()))
            .collect();
        for (i, s) in self.bn.iter().enumerate() {
            out.push((format!("{prefix}.bn{i}.running_mean"), Tensor::row(s.running_mean.clone())));
            out.push((format!("{prefix}.bn{i}.running_var"), Tensor::row(s.running_var.clone())));
        }
        out
    }

    /// Inverse of [`Mlp::named_tensors`]; `lookup` returns the stored tensor for a name.
    pub fn load_named(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Tensor>) -> Result<()> {
        let fetch = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = lookup(&name).ok_or_else(|| Error::Model(format!("checkpoint lacks {name}")))?;
            if t.shape() != shape {
                return Err(Error::shape("checkpoint tensor", shape, t.shape()));
            }
            Ok(t)
        };
        let names: Vec<String> = self.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, n) in names.iter().enumerate() {
            let shape = self.params.tensors()[i].shape().to_vec();
            self.params.tensors_mut()[i] = fetch(format!("{prefix}.{n}"), &shape)?;
        }
        for (i, s) in self.bn.iter_mut().enumerate() {
            let width = [1, s.running_mean.len()];
            s.running_mean = fetch(format!("{prefix}.bn{i}.running_mean"), &width)?.into_data();
            s.running_var = fetch(format!("{prefix}.bn{i}.running_var"), &width)?.into_data();
        }
        Ok(())
    }
}

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Adam, Graph, Tensor};
use crate::panet::model::{ConversationInput, Panet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub accuracy: f64,
}

impl Panet {
    /// One optimisation step on a single conversation. Returns the loss and
    /// the number of correct argmax predictions made before the update.
    pub fn train_step(
        &mut self,
        input: &ConversationInput,
        labels: &[usize],
        adam: &mut Adam,
        l2: f64,
    ) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &p, input)?;
        let loss = self.loss(&mut g, &p, &fwd, labels, l2)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("PANet loss on conversation {}", input.id)));
        }
        let correct = fwd
            .probs
            .iter()
            .zip(labels)
            .filter(|(&pr, &y)| crate::panet::argmax(g.value(pr).data()) == y)
            .count();
        g.backward(loss)?;
        let grads = self.params.grads(&g, &p);
        adam.update(self.params.tensors_mut(), &grads).map_err(|e| match e {
            Error::NonFiniteGradient { step } => Error::NonFinite(format!(
                "PANet gradient on conversation {} (optimizer step {step})",
                input.id
            )),
            other => other,
        })?;
        Ok((value, correct))
    }

    /// One pass over `inputs` in a shuffled order, one optimiser step per conversation.
    pub fn train_epoch<R: Rng + ?Sized>(
        &mut self,
        inputs: &[ConversationInput],
        labels: &[Vec<usize>],
        adam: &mut Adam,
        l2: f64,
        rng: &mut R,
    ) -> Result<EpochStats> {
        if inputs.len() != labels.len() {
            return Err(Error::Model(format!(
                "{} inputs but {} label sequences",
                inputs.len(),
                labels.len()
            )));
        }
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(rng);
        let (mut loss_sum, mut correct, mut total) = (0.0, 0usize, 0usize);
        for i in order {
            let (loss, ok) = self.train_step(&inputs[i], &labels[i], adam, l2)?;
            loss_sum += loss;
            correct += ok;
            total += labels[i].len();
        }
        Ok(EpochStats {
            mean_loss: loss_sum / inputs.len().max(1) as f64,
            accuracy: correct as f64 / total.max(1) as f64,
        })
    }

    /// Speaker emotion states per turn (`b_t = e^{I(t)}_t`), detached.
    pub fn extract_b(&self, input: &ConversationInput) -> Result<Tensor> {
        Ok(self.trace(input)?.speaker_emotions())
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::dataio::{apply_mask, generate_mask, generate_synthetic, Conversation, SynthSpec};
use crate::numerics::{grad_check, Adam, AdamConfig, Bound, GradCheckOptions, Graph, Tensor};

fn tiny_config() -> CrlConfig {
    CrlConfig {
        common_dim: 3,
        hidden_width: Some(6),
        reservoir_size: 16,
        real_samples: 4,
        finetune_epochs: 5,
        ..Default::default()
    }
}

fn synthetic(n: usize, eta: f64, seed: u64) -> (Vec<CrlInput>, Vec<Vec<usize>>) {
    let d = generate_synthetic(&SynthSpec { seed, ..Default::default() }, n).unwrap();
    let masks = generate_mask(&d, eta, seed).unwrap();
    let d = apply_mask(&d, &masks).unwrap();
    let inputs = d
        .conversations
        .iter()
        .map(|c| CrlInput::build(c, &d.dims, None).unwrap())
        .collect();
    let labels = d.conversations.iter().map(Conversation::labels).collect();
    (inputs, labels)
}

fn trained_state(config: CrlConfig, inputs: &[CrlInput], labels: &[Vec<usize>], epochs: usize, seed: u64) -> CrlState {
    let mut s = CrlState::new(config, &inputs[0].dims(), 4, seed).unwrap();
    s.init_h(inputs);
    for _ in 0..epochs {
        s.train_epoch(inputs, labels).unwrap();
    }
    s
}

#[test]
fn reconstruct_has_modality_shape_and_is_deterministic() {
    let (inputs, labels) = synthetic(3, 0.3, 1);
    let s = trained_state(tiny_config(), &inputs, &labels, 2, 0);
    let h = &s.h[0];
    for m in 0..3 {
        let out = s.reconstruct(h, m).unwrap();
        assert_eq!(out.shape(), &[h.rows(), 8]);
        assert_eq!(out, s.reconstruct(h, m).unwrap());
    }
    assert!(s.reconstruct(h, 3).is_err());
}

#[test]
fn single_affine_generator_recovers_least_squares_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 40;
    let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let y: Vec<f64> = x
        .iter()
        .map(|&v| { let e: f64 = StandardNormal.sample(&mut rng); 1.7 * v - 0.4 + 0.3 * e })
        .collect();
    let (mx, my) = (x.iter().sum::<f64>() / n as f64, y.iter().sum::<f64>() / n as f64);
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;

    let mut gen = Mlp::new(&[1, 1], false, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(1e-2));
    let (xt, yt) = (Tensor::new(vec![n, 1], x).unwrap(), Tensor::new(vec![n, 1], y).unwrap());
    let block = ModalityBlock {
        values: yt,
        observed: vec![true; n],
    };
    for _ in 0..3000 {
        let mut g = Graph::new();
        let p = gen.params.bind(&mut g);
        let xv = g.constant(xt.clone());
        let (out, _) = gen.forward(&mut g, &p, xv, BnMode::Train).unwrap();
        let loss = reconstruction_loss(&mut g, &[out], std::slice::from_ref(&block)).unwrap();
        g.backward(loss).unwrap();
        let grads = gen.params.grads(&g, &p);
        adam.update(gen.params.tensors_mut(), &grads).unwrap();
    }
    let w = gen.params.tensors()[0].item();
    let b = gen.params.tensors()[1].item();
    assert!((w - slope).abs() < 1e-3, "{w} vs {slope}");
    assert!((b - intercept).abs() < 1e-3, "{b} vs {intercept}");
}

#[test]
fn fully_observed_data_has_no_adversarial_activity() {
    let (inputs, labels) = synthetic(3, 0.0, 3);
    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    s.init_h(&inputs);
    let critics = s.critics.clone();
    let losses = s.train_epoch(&inputs, &labels).unwrap();
    assert_eq!(losses.adversarial, 0.0);
    assert_eq!(losses.critic, 0.0);
    for (a, b) in critics.iter().zip(&s.critics) {
        assert_eq!(a.params, b.params);
    }
    assert_eq!(s.critic_steps_taken(0), 0);
    assert_eq!(s.generator_steps(), 3);
}

#[test]
fn critics_update_twice_per_generator_update() {
    let (inputs, labels) = synthetic(4, 0.5, 4);
    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    s.init_h(&inputs);
    let mut g = Graph::new();
    let h = g.constant(s.h[0].clone());
    let bounds: Vec<Bound> = s.generators.iter().map(|m| m.params.bind_frozen(&mut g)).collect();
    let (outputs, _) = s.forward_generators(&mut g, h, &bounds, BnMode::Train).unwrap();
    let fakes = generated_at_missing(&g, &outputs, &inputs[0]);
    let pools = vec![Vec::new(); 3];
    let outcome = s.adversarial_step(&inputs[0], &fakes, &pools).unwrap();
    for m in 0..3 {
        let expected = if fakes[m].is_some() { 2 } else { 0 };
        assert_eq!(outcome.critic_losses[m].len(), expected);
        assert_eq!(s.critic_steps_taken(m), expected as u64);
    }

    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    s.init_h(&inputs);
    s.train_epoch(&inputs, &labels).unwrap();
    let missing_convs = |m: usize| inputs.iter().filter(|c| !c.blocks[m].missing_rows().is_empty()).count() as u64;
    assert_eq!(s.generator_steps(), 4);
    for m in 0..3 {
        assert_eq!(s.critic_steps_taken(m), 2 * missing_convs(m));
    }
}

#[test]
fn critic_estimate_stays_near_zero_for_a_perfect_generator() {
    let config = CrlConfig {
        weight_decay: 1e-3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut critic = Mlp::new(&[1, 64, 64, 1], false, &mut rng).unwrap();
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let n = 2048;
    let sample = |rng: &mut ChaCha8Rng| {
        Tensor::new(vec![n, 1], (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    };
    for step in 0..200 {
        let real = sample(&mut rng);
        let fake = sample(&mut rng);
        let out = train_critic(&mut critic, &mut adam, &real, &fake, &config).unwrap();
        assert!(out.wasserstein.abs() < 0.1, "step {step}: {}", out.wasserstein);
    }
}

#[test]
fn linear_autoencoding_loss_does_not_increase() {
    let config = CrlConfig {
        common_dim: 2,
        lambda_c: 0.0,
        lambda_a: 0.0,
        generator_hidden_layers: 0,
        batch_norm: false,
        weight_decay: 0.0,
        lr: 1e-3,
        h_lr: 1e-3,
        h_init_std: 0.5,
        ..Default::default()
    };
    // every modality is a linear image of a 2-d latent
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let maps: Vec<Tensor> = (0..3).map(|_| Tensor::randn(&[2, 4], 1.0, &mut rng)).collect();
    let inputs: Vec<CrlInput> = (0..6)
        .map(|c| {
            let z = Tensor::randn(&[5, 2], 1.0, &mut rng);
            let blocks = maps
                .iter()
                .map(|w| {
                    let mut g = Graph::new();
                    let (zv, wv) = (g.constant(z.clone()), g.constant(w.clone()));
                    let v = g.matmul(zv, wv).unwrap();
                    ModalityBlock {
                        values: g.value(v).clone(),
                        observed: (0..5).map(|t| (t + c) % 3 != 0).collect(),
                    }
                })
                .collect();
            CrlInput {
                id: format!("c{c}"),
                blocks,
            }
        })
        .collect();
    let labels: Vec<Vec<usize>> = inputs.iter().map(|c| vec![0; c.turns()]).collect();
    let mut s = CrlState::new(config, &[4, 4, 4], 1, 7).unwrap();
    s.init_h(&inputs);
    let mut prev = f64::INFINITY;
    for epoch in 0..10 {
        let l = s.train_epoch(&inputs, &labels).unwrap();
        assert!(l.reconstruction <= prev + 1e-6, "epoch {epoch}: {} > {prev}", l.reconstruction);
        assert_eq!(l.classification, 0.0);
        prev = l.reconstruction;
    }
}

#[test]
fn without_adversarial_term_critic_seed_is_irrelevant() {
    let (inputs, labels) = synthetic(3, 0.5, 8);
    let config = CrlConfig {
        lambda_a: 0.0,
        ..tiny_config()
    };
    let run = |critic_seed: u64| {
        let mut s = CrlState::new(config.clone(), &inputs[0].dims(), 4, 1).unwrap();
        s.reinit_critics(critic_seed).unwrap();
        s.init_h(&inputs);
        for _ in 0..3 {
            s.train_epoch(&inputs, &labels).unwrap();
        }
        s.h
    };
    assert_eq!(run(10), run(11));
}

#[test]
fn training_is_deterministic_given_seed() {
    let (inputs, labels) = synthetic(3, 0.4, 9);
    let a = trained_state(tiny_config(), &inputs, &labels, 2, 3);
    let b = trained_state(tiny_config(), &inputs, &labels, 2, 3);
    assert_eq!(a.h, b.h);
    let c = trained_state(tiny_config(), &inputs, &labels, 2, 4);
    assert_ne!(a.h, c.h);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (inputs, labels) = synthetic(3, 0.4, 10);
    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    assert!(s.train_epoch(&inputs, &labels).is_err());
    s.init_h(&inputs);
    assert!(s.train_epoch(&inputs[..2], &labels[..2]).is_err());
    assert!(s.train_epoch(&inputs, &labels[..2]).is_err());
    assert!(s.test_time_finetune(&[], 0).is_err());
    assert!(CrlState::new(CrlConfig { lambda_c: -1.0, ..tiny_config() }, &[8], 4, 0).is_err());
}

#[test]
fn empty_class_is_reported_by_name() {
    let (inputs, mut labels) = synthetic(2, 0.0, 11);
    for l in &mut labels {
        l.iter_mut().for_each(|y| *y = if *y == 2 { 0 } else { *y });
    }
    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    s.init_h(&inputs);
    let err = s.train_epoch(&inputs, &labels).unwrap_err().to_string();
    assert!(err.contains("class 2"), "{err}");
}

#[test]
fn finetuning_a_training_sample_reaches_its_training_loss() {
    let (inputs, labels) = synthetic(4, 0.3, 12);
    let config = CrlConfig {
        finetune_epochs: 300,
        ..tiny_config()
    };
    let s = trained_state(config, &inputs, &labels, 30, 5);
    let trained = s.reconstruction_error(&inputs[0], &s.h[0]).unwrap();
    let dup = vec![inputs[0].clone()];
    let h_star = s.test_time_finetune(&dup, 0).unwrap();
    let tuned = finetuned_error(&s, &dup, 0);
    assert!(tuned <= trained + 1e-3, "{tuned} vs {trained}");
    assert_eq!(h_star, s.test_time_finetune(&dup, 0).unwrap());
    assert_eq!(h_star[0].shape(), s.h[0].shape());
}

/// Final reconstruction loss reached by fine-tuning, measured with the tuned generators.
fn finetuned_error(s: &CrlState, inputs: &[CrlInput], seed: u64) -> f64 {
    let tuned = s.finetune(inputs, seed).unwrap();
    let mut copy = s.clone();
    copy.generators[..tuned.generators.len()].clone_from_slice(&tuned.generators);
    copy.reconstruction_error(&inputs[0], &tuned.h[0]).unwrap()
}

#[test]
fn finetuning_never_reads_the_extra_modality() {
    let (inputs, labels) = synthetic(3, 0.3, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let with_b: Vec<CrlInput> = inputs
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.blocks.push(ModalityBlock {
                values: Tensor::randn(&[c.turns(), 4], 1.0, &mut rng),
                observed: vec![true; c.turns()],
            });
            c
        })
        .collect();
    let s = trained_state(tiny_config(), &with_b, &labels, 2, 0);
    assert_eq!(s.generators.len(), 4);
    let plain: Vec<CrlInput> = with_b.iter().map(|c| c.truncated(3)).collect();
    let h = s.test_time_finetune(&plain, 1).unwrap();
    assert_eq!(h.len(), 3);
}

#[test]
fn composite_objective_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let (inputs, labels) = synthetic(3, 0.5, 20 + seed);
        let config = CrlConfig {
            hidden_width: Some(4),
            ..tiny_config()
        };
        let mut s = trained_state(config, &inputs, &labels, 1, seed);
        s.refresh_centroids(&labels).unwrap();
        let mu = s.centroids.matrix().unwrap();
        let input = &inputs[0];
        let mut g = Graph::new();
        let hv = g.constant(s.h[0].clone());
        let bounds: Vec<Bound> = s.generators.iter().map(|m| m.params.bind_frozen(&mut g)).collect();
        let (outputs, _) = s.forward_generators(&mut g, hv, &bounds, BnMode::Train).unwrap();
        let fakes = generated_at_missing(&g, &outputs, input);
        let reals: Vec<Tensor> = input
            .blocks
            .iter()
            .map(|b| Tensor::from_rows(&b.observed_rows().iter().map(|&t| b.values.row_slice(t).to_vec()).collect::<Vec<_>>()).unwrap())
            .collect();

        let mut params = vec![s.h[0].clone()];
        let gen_counts: Vec<usize> = s.generators.iter().map(|m| m.params.len()).collect();
        for m in &s.generators {
            params.extend(m.params.tensors().iter().cloned());
        }
        let critic_counts: Vec<usize> = s.critics.iter().map(|m| m.params.len()).collect();
        for m in &s.critics {
            params.extend(m.params.tensors().iter().cloned());
        }
        let report = grad_check(
            |g, v| {
                let h = v[0];
                let mut at = 1;
                let mut gb = Vec::new();
                for &n in &gen_counts {
                    gb.push(Bound::from_vars(v[at..at + n].to_vec()));
                    at += n;
                }
                let mut cb = Vec::new();
                for &n in &critic_counts {
                    cb.push(Bound::from_vars(v[at..at + n].to_vec()));
                    at += n;
                }
                let (outs, _) = s.forward_generators(g, h, &gb, BnMode::Train)?;
                let (gen_loss, _) = s.generator_objective(g, input, &labels[0], h, &outs, &gb, Some(&mu))?;
                let mut total = gen_loss;
                for (m, fake) in fakes.iter().enumerate() {
                    if let Some(fake) = fake {
                        let c = s.critic_objective(g, m, &cb[m], &reals[m], fake)?;
                        total = g.add(total, c)?;
                    }
                }
                Ok(total)
            },
            &params,
            &GradCheckOptions {
                tol: 1e-3,
                max_entries: Some(12),
                seed,
                floor: crate::crl::losses::SURROGATE_FLOOR,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {:?}", report.tensors);
    }
}

#[test]
fn checkpoint_round_trip() {
    let (inputs, labels) = synthetic(3, 0.4, 14);
    let s = trained_state(tiny_config(), &inputs, &labels, 2, 0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("crl.json");
    s.to_checkpoint().save(&path).unwrap();
    let mut fresh = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 99).unwrap();
    fresh
        .load_checkpoint(&crate::numerics::Checkpoint::load(&path).unwrap())
        .unwrap();
    assert_eq!(fresh.ids, s.ids);
    assert_eq!(fresh.h, s.h);
    assert_eq!(fresh.centroids, s.centroids);
    for (a, b) in fresh.generators.iter().zip(&s.generators) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.bn, b.bn);
    }
    let h = &s.h[1];
    assert_eq!(fresh.reconstruct(h, 2).unwrap(), s.reconstruct(h, 2).unwrap());
}

#[test]
fn training_reduces_reconstruction_on_synthetic_data() {
    let (inputs, labels) = synthetic(6, 0.3, 15);
    let mut s = CrlState::new(tiny_config(), &inputs[0].dims(), 4, 0).unwrap();
    s.init_h(&inputs);
    let first = s.train_epoch(&inputs, &labels).unwrap();
    let mut last = first;
    for _ in 0..20 {
        last = s.train_epoch(&inputs, &labels).unwrap();
        assert!(last.total.is_finite());
    }
    assert!(last.reconstruction < first.reconstruction);
}

//! Reconstruction, centroid-margin classification and gradient-penalty terms.

use serde::{Deserialize, Serialize};

use crate::crl::data::ModalityBlock;
use crate::crl::mlp::{BnMode, Mlp};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, Tensor, Var};


/// Similarity between two common representations: negative squared distance.
pub fn similarity_f(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity", &[a.len()], &[b.len()]));
    }
    Ok(-a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>())
}

/// Per-class mean representation. A class with no members has no centroid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub means: Vec<Option<Vec<f64>>>,
}

impl Centroids {
    /// Means of `rows` grouped by `labels` over `num_classes` classes.
    pub fn from_rows<'a>(
        rows: impl IntoIterator<Item = (&'a [f64], usize)>,
        num_classes: usize,
        dim: usize,
    ) -> Result<Self> {
        let mut sums = vec![vec![0.0; dim]; num_classes];
        let mut counts = vec![0usize; num_classes];
        for (row, y) in rows {
            if y >= num_classes || row.len() != dim {
                return Err(Error::Data(format!("centroid input label {y} or width {} invalid", row.len())));
            }
            for (s, v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
            counts[y] += 1;
        }
        let means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
            .collect();
        Ok(Self { means })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    /// The centroid matrix `[C, D_H]`; fails naming the first empty class.
    pub fn matrix(&self) -> Result<Tensor> {
        if self.means.is_empty() {
            return Err(Error::Model("empty centroid table".into()));
        }
        let rows = self
            .means
            .iter()
            .enumerate()
            .map(|(c, m)| m.clone().ok_or_else(|| Error::Model(format!("class {c} has no centroid"))))
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }
}

/// Nearest centroid under [`similarity_f`], lowest index on ties.
pub fn predict_from_h(h: &[f64], centroids: &Tensor) -> Result<usize> {
    if centroids.is_empty() {
        return Err(Error::Model("empty centroid table".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..centroids.rows() {
        let s = similarity_f(h, centroids.row_slice(c))?;
        if s > best.1 {
            best = (c, s);
        }
    }
    Ok(best.0)
}

/// `max(0, [y != y_hat] + F(mu_yhat, h) - F(mu_y, h))` for one sample.
pub fn classification_loss(h: &[f64], label: usize, centroids: &Tensor) -> Result<f64> {
    if label >= centroids.rows() {
        return Err(Error::Data(format!("label {label} outside {} classes", centroids.rows())));
    }
    let pred = predict_from_h(h, centroids)?;
    let delta = if pred == label { 0.0 } else { 1.0 };
    let gap = similarity_f(centroids.row_slice(pred), h)? - similarity_f(centroids.row_slice(label), h)?;
    Ok((delta + gap).max(0.0))
}

/// Mean classification loss over the rows of `h` (`[T, D_H]`), centroids held fixed.
pub fn classification_loss_graph(g: &mut Graph, h: Var, labels: &[usize], centroids: &Tensor) -> Result<Var> {
    let hv = g.value(h).clone();
    if hv.rows() != labels.len() {
        return Err(Error::shape("classification labels", &[hv.rows()], &[labels.len()]));
    }
    let mut preds = Vec::with_capacity(labels.len());
    let mut deltas = Vec::with_capacity(labels.len());
    for (t, &y) in labels.iter().enumerate() {
        if y >= centroids.rows() {
            return Err(Error::Data(format!("label {y} outside {} classes", centroids.rows())));
        }
        let p = predict_from_h(hv.row_slice(t), centroids)?;
        deltas.push(if p == y { 0.0 } else { 1.0 });
        preds.push(p);
    }
    let mu = g.constant(centroids.clone());
    let mu_y = g.select_rows(mu, labels)?;
    let mu_p = g.select_rows(mu, &preds)?;
    let sq_dist = |g: &mut Graph, m: Var| -> Result<Var> {
        let d = g.sub(h, m)?;
        let sq = g.square(d);
        Ok(g.sum_rows(sq))
    };
    let d_y = sq_dist(g, mu_y)?;
    let d_p = sq_dist(g, mu_p)?;
    let gap = g.sub(d_y, d_p)?;
    let delta = g.constant(Tensor::new(vec![labels.len(), 1], deltas)?);
    let margin = g.add(gap, delta)?;
    let hinge = g.relu(margin);
    Ok(g.mean(hinge))
}

/// `(1/T) * sum_t sum_m s_tm * ||u_tm - f_m(h_t)||^2` over the given blocks.
pub fn reconstruction_loss(g: &mut Graph, outputs: &[Var], blocks: &[ModalityBlock]) -> Result<Var> {
    if outputs.len() != blocks.len() || blocks.is_empty() {
        return Err(Error::Model(format!(
            "{} reconstructions for {} modalities",
            outputs.len(),
            blocks.len()
        )));
    }
    let turns = blocks[0].observed.len();
    let mut terms = Vec::with_capacity(blocks.len());
    for (&out, block) in outputs.iter().zip(blocks) {
        let target = g.constant(block.values.clone());
        let mask = g.constant(block.mask_matrix());
        let diff = g.sub(out, target)?;
        let masked = g.mul(diff, mask)?;
        let sq = g.square(masked);
        terms.push(g.sum(sq));
    }
    let stacked = g.concat(&terms, 0)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / turns.max(1) as f64))
}

/// Gradient of the critic output with respect to each input row, by reverse mode.
pub fn input_gradients(critic: &Mlp, u: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = critic.params.bind_frozen(&mut g);
    let x = g.param(u.clone());
    let (out, _) = critic.forward(&mut g, &p, x, BnMode::Eval)?;
    let total = g.sum(out);
    g.backward(total)?;
    Ok(g.grad(x))
}

/// `mean_i (||grad_u D(u_i)||_2 - 1)^2` with exact input gradients.
pub fn gradient_penalty_exact(critic: &Mlp, u: &Tensor) -> Result<f64> {
    let grads = input_gradients(critic, u)?;
    let n = grads.rows();
    let total: f64 = (0..n)
        .map(|r| {
            let norm = grads.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            (norm - 1.0) * (norm - 1.0)
        })
        .sum();
    let value = total / n.max(1) as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite("gradient penalty".into()));
    }
    Ok(value)
}

/// Relative-error floor for gradient checks through the surrogate. The inner
/// difference quotient divides rounding error by `2 * step`, leaving about
/// 1e-8 of absolute noise on an outer central difference with step 1e-5.
pub const SURROGATE_FLOOR: f64 = 1e-4;

/// The same penalty with the input gradient replaced by central differences
/// of plain forward passes, so that first-order reverse mode can
/// differentiate it with respect to the critic parameters.
pub fn gradient_penalty_surrogate(g: &mut Graph, critic: &Mlp, p: &Bound, u: &Tensor, step: f64) -> Result<Var> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let (n, d) = (u.rows(), u.cols());
    let mut plus = Vec::with_capacity(n * d * d);
    let mut minus = Vec::with_capacity(n * d * d);
    for r in 0..n {
        let row = u.row_slice(r);
        for j in 0..d {
            for (k, &v) in row.iter().enumerate() {
                let e = if k == j { step } else { 0.0 };
                plus.push(v + e);
                minus.push(v - e);
            }
        }
    }
    let mut both = plus;
    both.extend(minus);
    let x = g.constant(Tensor::new(vec![2 * n * d, d], both)?);
    let (out, _) = critic.forward(g, p, x, BnMode::Eval)?;
    let idx_plus: Vec<usize> = (0..n * d).collect();
    let idx_minus: Vec<usize> = (n * d..2 * n * d).collect();
    let out_plus = g.select_rows(out, &idx_plus)?;
    let out_minus = g.select_rows(out, &idx_minus)?;
    let diff = g.sub(out_plus, out_minus)?;
    let slope = g.scale(diff, 0.5 / step);
    let grads = g.reshape(slope, &[n, d])?;
    let sq = g.square(grads);
    let sums = g.sum_rows(sq);
    let norms = g.sqrt(sums, 1e-12);
    let off = g.shift(norms, -1.0);
    let pen = g.square(off);
    Ok(g.mean(pen))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::numerics::GradCheckOptions;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn brute_nearest(h: &[f64], c: &Tensor) -> usize {
        let d: Vec<f64> = (0..c.rows())
            .map(|k| c.row_slice(k).iter().zip(h).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let mut best = 0;
        for k in 1..d.len() {
            if d[k] < d[best] {
                best = k;
            }
        }
        best
    }

    #[test]
    fn similarity_examples() {
        let a = [1.0, -2.0, 0.5];
        let b = [0.0, 1.0, 2.0];
        assert_eq!(similarity_f(&a, &a).unwrap(), 0.0);
        assert_eq!(similarity_f(&a, &b).unwrap(), similarity_f(&b, &a).unwrap());
        assert_eq!(similarity_f(&a, &b).unwrap(), -(1.0 + 9.0 + 2.25));
        assert!(similarity_f(&a, &[1.0]).is_err());
    }

    #[test]
    fn similarity_orders_like_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let t = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let (x, a, b) = (t.row_slice(0), t.row_slice(1), t.row_slice(2));
            let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
            let closer = similarity_f(x, a).unwrap() > similarity_f(x, b).unwrap();
            assert_eq!(closer, dist(x, a) < dist(x, b));
        }
    }

    #[test]
    fn prediction_examples() {
        let c = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 2.0]]).unwrap();
        for k in 0..3 {
            assert_eq!(predict_from_h(c.row_slice(k), &c).unwrap(), k);
        }
        // permuting classes permutes predictions
        let perm = [2, 0, 1];
        let permuted = Tensor::from_rows(&perm.iter().map(|&k| c.row_slice(k).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let h = Tensor::randn(&[1, 2], 1.5, &mut rng);
            let a = predict_from_h(h.data(), &c).unwrap();
            let b = predict_from_h(h.data(), &permuted).unwrap();
            assert_eq!(perm[b], a);
            assert_eq!(a, brute_nearest(h.data(), &c));
        }
        assert!(predict_from_h(&[0.0], &Tensor::zeros(&[0, 1])).is_err());
    }

    #[test]
    fn classification_loss_examples() {
        let c = Tensor::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        // correct prediction
        assert_eq!(classification_loss(&[0.2, 0.1], 0, &c).unwrap(), 0.0);
        // equidistant, tie broken to class 0
        assert_eq!(classification_loss(&[1.0, 0.5], 0, &c).unwrap(), 0.0);
        // misclassified: d_y = 2.5^2 + 0, d_yhat = 0.5^2 -> 1 + 6.25 - 0.25
        assert!((classification_loss(&[2.5, 0.0], 0, &c).unwrap() - 7.0).abs() < 1e-12);
        assert!(classification_loss(&[0.0, 0.0], 5, &c).is_err());
    }

    #[test]
    fn empty_class_is_named() {
        let rows = [(&[1.0, 0.0][..], 0usize), (&[0.0, 1.0][..], 2usize)];
        let c = Centroids::from_rows(rows, 3, 2).unwrap();
        assert_eq!(c.means[0], Some(vec![1.0, 0.0]));
        let err = c.matrix().unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn graph_classification_loss_matches_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let labels = [0, 1, 2, 3, 0, 1, 2];
        let mut g = Graph::new();
        let hv = g.param(h.clone());
        let loss = classification_loss_graph(&mut g, hv, &labels, &c).unwrap();
        let want: f64 = labels
            .iter()
            .enumerate()
            .map(|(t, &y)| classification_loss(h.row_slice(t), y, &c).unwrap())
            .sum::<f64>()
            / 7.0;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    fn blocks_fixture(rng: &mut ChaCha8Rng) -> (Vec<ModalityBlock>, Vec<Tensor>) {
        let blocks = vec![
            ModalityBlock {
                values: Tensor::randn(&[3, 2], 1.0, rng),
                observed: vec![true, false, true],
            },
            ModalityBlock {
                values: Tensor::randn(&[3, 3], 1.0, rng),
                observed: vec![false, true, true],
            },
        ];
        let outs = vec![Tensor::randn(&[3, 2], 1.0, rng), Tensor::randn(&[3, 3], 1.0, rng)];
        (blocks, outs)
    }

    fn recon_value(blocks: &[ModalityBlock], outs: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = outs.iter().map(|o| g.constant(o.clone())).collect();
        let l = reconstruction_loss(&mut g, &vars, blocks).unwrap();
        g.value(l).item()
    }

    #[test]
    fn reconstruction_loss_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (blocks, outs) = blocks_fixture(&mut rng);
        let mut want = 0.0;
        for t in 0..3 {
            for (b, o) in blocks.iter().zip(&outs) {
                if b.observed[t] {
                    for j in 0..b.dim() {
                        want += (b.values.get(t, j) - o.get(t, j)).powi(2);
                    }
                }
            }
        }
        assert!((recon_value(&blocks, &outs) - want / 3.0).abs() < 1e-12);
        let perfect: Vec<Tensor> = blocks.iter().map(|b| b.values.clone()).collect();
        assert_eq!(recon_value(&blocks, &perfect), 0.0);
    }

    #[test]
    fn all_absent_modality_contributes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut blocks, outs) = blocks_fixture(&mut rng);
        blocks[1].observed = vec![false; 3];
        let base = recon_value(&blocks[..1], &outs[..1]);
        assert_eq!(recon_value(&blocks, &outs), base);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn classification_loss_is_nonnegative_and_zero_when_correct(
            seed in any::<u64>(), label in 0usize..4
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let h = Tensor::randn(&[1, 3], 1.5, &mut rng);
            let loss = classification_loss(h.data(), label, &c).unwrap();
            prop_assert!(loss >= 0.0);
            if predict_from_h(h.data(), &c).unwrap() == label {
                prop_assert_eq!(loss, 0.0);
            } else {
                prop_assert!(loss >= 1.0);
            }
        }

        #[test]
        fn reconstruction_ignores_absent_slot_contents(seed in any::<u64>(), junk in -1e3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (blocks, outs) = blocks_fixture(&mut rng);
            let mut altered = blocks.clone();
            for b in &mut altered {
                let d = b.dim();
                for t in b.missing_rows() {
                    for j in 0..d {
                        b.values.data_mut()[t * d + j] = junk + j as f64;
                    }
                }
            }
            prop_assert_eq!(recon_value(&blocks, &outs), recon_value(&altered, &outs));
        }
    }

    #[test]
    fn linear_critic_penalty_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for scale in [0.3, 1.0, 2.5] {
            let mut critic = Mlp::new(&[4, 1], false, &mut rng).unwrap();
            critic.params.tensors_mut()[0] = Tensor::randn(&[4, 1], scale, &mut rng);
            let w = critic.params.tensors()[0].clone();
            let want = (w.sq_norm().sqrt() - 1.0).powi(2);
            let u = Tensor::randn(&[6, 4], 1.0, &mut rng);
            assert!((gradient_penalty_exact(&critic, &u).unwrap() - want).abs() < 1e-10);
            let mut g = Graph::new();
            let p = critic.params.bind(&mut g);
            let s = gradient_penalty_surrogate(&mut g, &critic, &p, &u, 1e-4).unwrap();
            assert!((g.value(s).item() - want).abs() < 1e-10);
        }
        let mut unit = Mlp::new(&[2, 1], false, &mut rng).unwrap();
        unit.params.tensors_mut()[0] = Tensor::matrix(2, 1, vec![0.6, 0.8]).unwrap();
        assert!(gradient_penalty_exact(&unit, &Tensor::randn(&[3, 2], 1.0, &mut rng)).unwrap() < 1e-20);
    }

    #[test]
    fn surrogate_penalty_tracks_exact_on_random_critics() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let critic = Mlp::new(&[4, 16, 1], false, &mut rng).unwrap();
            let u = Tensor::randn(&[8, 4], 1.0, &mut rng);
            let exact = gradient_penalty_exact(&critic, &u).unwrap();
            let mut g = Graph::new();
            let p = critic.params.bind(&mut g);
            let s = gradient_penalty_surrogate(&mut g, &critic, &p, &u, 1e-4).unwrap();
            assert!((g.value(s).item() - exact).abs() < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn surrogate_penalty_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let critic = Mlp::new(&[3, 5, 1], false, &mut rng).unwrap();
        let u = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let report = grad_check(
            |g, v| {
                let b = Bound::from_vars(v.to_vec());
                gradient_penalty_surrogate(g, &critic, &b, &u, 1e-4)
            },
            critic.params.tensors(),
            &GradCheckOptions {
                tol: 1e-3,
                floor: SURROGATE_FLOOR,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed, "{:?}", report.tensors);
    }
}

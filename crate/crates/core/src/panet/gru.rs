use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, ParamSet, Tensor, Var};

/// Parameter handles of one GRU cell. Weights act on row vectors:
/// `z = sigmoid(x W_z + h U_z + b_z)`.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |name: &str, rows: usize| {
            params.add(format!("{prefix}.{name}"), Tensor::glorot(rows, hidden_dim, rng))
        };
        let w_z = w("w_z", input_dim);
        let w_r = w("w_r", input_dim);
        let w_h = w("w_h", input_dim);
        let u_z = w("u_z", hidden_dim);
        let u_r = w("u_r", hidden_dim);
        let u_h = w("u_h", hidden_dim);
        let mut b = |name: &str| params.add(format!("{prefix}.{name}"), Tensor::zeros(&[1, hidden_dim]));
        let b_z = b("b_z");
        let b_r = b("b_r");
        let b_h = b("b_h");
        Self {
            input_dim,
            hidden_dim,
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        }
    }

    /// One step for a batch of rows: `x` is `[n, input_dim]`, `h_prev` is `[n, hidden_dim]`.
    pub fn step(&self, g: &mut Graph, p: &Bound, x: Var, h_prev: Var) -> Result<Var> {
        let (xs, hs) = (g.shape(x).to_vec(), g.shape(h_prev).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input_dim || hs[1] != self.hidden_dim || xs[0] != hs[0] {
            return Err(Error::shape("gru_cell", &xs, &hs));
        }
        let gate = |g: &mut Graph, w: ParamId, u: ParamId, b: ParamId, h: Var| -> Result<Var> {
            let xw = g.matmul(x, p.get(w))?;
            let hu = g.matmul(h, p.get(u))?;
            let s = g.add(xw, hu)?;
            g.add_row(s, p.get(b))
        };
        let z = gate(g, self.w_z, self.u_z, self.b_z, h_prev)?;
        let z = g.sigmoid(z);
        let r = gate(g, self.w_r, self.u_r, self.b_r, h_prev)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_prev)?;
        let cand = gate(g, self.w_h, self.u_h, self.b_h, rh)?;
        let cand = g.tanh(cand);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h_prev)?;
        let new = g.mul(z, cand)?;
        g.add(old, new)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar reference GRU over plain slices, independent of the graph.
    pub(crate) fn reference_gru(x: &[f64], h: &[f64], ps: &ParamSet, cell: &GruCell) -> Vec<f64> {
        let n = cell.hidden_dim;
        let mv = |v: &[f64], w: &Tensor, j: usize| -> f64 {
            v.iter().enumerate().map(|(i, vi)| vi * w.get(i, j)).sum()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z: Vec<f64> = (0..n)
            .map(|j| sig(mv(x, ps.get(cell.w_z), j) + mv(h, ps.get(cell.u_z), j) + ps.get(cell.b_z).data()[j]))
            .collect();
        let r: Vec<f64> = (0..n)
            .map(|j| sig(mv(x, ps.get(cell.w_r), j) + mv(h, ps.get(cell.u_r), j) + ps.get(cell.b_r).data()[j]))
            .collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
        (0..n)
            .map(|j| {
                let c = (mv(x, ps.get(cell.w_h), j) + mv(&rh, ps.get(cell.u_h), j) + ps.get(cell.b_h).data()[j]).tanh();
                (1.0 - z[j]) * h[j] + z[j] * c
            })
            .collect()
    }

    fn run(ps: &ParamSet, cell: &GruCell, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let xv = g.constant(Tensor::row(x.to_vec()));
        let hv = g.constant(Tensor::row(h.to_vec()));
        let out = cell.step(&mut g, &b, xv, hv).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn zero_weights_halve_the_state() {
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "g", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        for t in ps.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let out = run(&ps, &cell, &[1.0, -2.0, 3.0], &[0.8, -0.4]);
        assert_eq!(out, vec![0.4, -0.2]);
    }

    #[test]
    fn bounded_from_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "g", 4, 5, &mut rng);
        let x = Tensor::randn(&[1, 4], 10.0, &mut rng);
        let out = run(&ps, &cell, x.data(), &[0.0; 5]);
        assert!(out.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn two_dim_fixture_matches_scalar_reference() {
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "g", 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let fixed = [
            [0.1, -0.2, 0.3, 0.4],
            [-0.5, 0.6, 0.7, -0.8],
            [0.9, 0.1, -0.3, 0.2],
            [0.25, -0.75, 0.5, 0.05],
            [-0.1, 0.2, 0.3, -0.4],
            [0.6, -0.6, 0.15, 0.35],
        ];
        for (i, vals) in fixed.iter().enumerate() {
            ps.tensors_mut()[i] = Tensor::matrix(2, 2, vals.to_vec()).unwrap();
        }
        ps.tensors_mut()[6] = Tensor::row(vec![0.05, -0.05]);
        ps.tensors_mut()[7] = Tensor::row(vec![0.1, 0.0]);
        ps.tensors_mut()[8] = Tensor::row(vec![-0.2, 0.3]);
        let (x, h) = ([0.7, -1.1], [0.3, -0.9]);
        let got = run(&ps, &cell, &x, &h);
        let want = reference_gru(&x, &h, &ps, &cell);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let mut ps = ParamSet::new();
        let cell = GruCell::new(&mut ps, "g", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let h = g.constant(Tensor::zeros(&[1, 2]));
        assert!(cell.step(&mut g, &b, x, h).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamSet::new();
            let cell = GruCell::new(&mut ps, "g", 3, 4, &mut rng);
            for t in ps.tensors_mut() {
                *t = Tensor::randn(t.shape(), 0.5, &mut rng);
            }
            let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
            let h = Tensor::randn(&[2, 4], 0.5, &mut rng);
            let report = grad_check(
                |g, v| {
                    let b = Bound::from_vars(v.to_vec());
                    let xv = g.constant(x.clone());
                    let hv = g.constant(h.clone());
                    let out = cell.step(g, &b, xv, hv)?;
                    let sq = g.square(out);
                    Ok(g.sum(sq))
                },
                ps.tensors(),
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_rel_err);
        }
    }
}

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Bilinear attention over a memory of row vectors.
///
/// `memory` is `[k, d_mem]`, `query` is `[1, d_q]` and `w` is `[d_q, d_mem]`.
/// Returns the `[1, k]` weights `softmax(query W memory^T)` and the `[1, d_mem]`
/// context `weights * memory`.
pub fn attend(g: &mut Graph, memory: Var, query: Var, w: Var) -> Result<(Var, Var)> {
    let ms = g.shape(memory).to_vec();
    if ms.len() != 2 || ms[0] == 0 {
        return Err(Error::Model("attention over an empty memory".into()));
    }
    let projected = g.matmul(query, w)?;
    if g.shape(projected)[1] != ms[1] {
        return Err(Error::shape("attend", g.shape(projected), &ms));
    }
    let mem_t = g.transpose(memory)?;
    let scores = g.matmul(projected, mem_t)?;
    let weights = g.softmax(scores)?;
    let context = g.matmul(weights, memory)?;
    Ok((weights, context))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_item_memory_is_returned_verbatim() {
        let mut g = Graph::new();
        let mem = g.constant(Tensor::row(vec![0.3, -2.0, 5.0]));
        let q = g.constant(Tensor::row(vec![1.0, 2.0]));
        let w = g.constant(Tensor::full(&[2, 3], 0.7));
        let (a, c) = attend(&mut g, mem, q, w).unwrap();
        assert_eq!(g.value(a).data(), &[1.0]);
        assert_eq!(g.value(c).data(), &[0.3, -2.0, 5.0]);
    }

    #[test]
    fn identical_memory_gives_uniform_weights() {
        let mut g = Graph::new();
        let mem = g.constant(Tensor::from_rows(&vec![vec![0.5, 1.5]; 4]).unwrap());
        let q = g.constant(Tensor::row(vec![2.0, -1.0]));
        let w = g.constant(Tensor::identity(2));
        let (a, _) = attend(&mut g, mem, q, w).unwrap();
        for &v in g.value(a).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn positive_rescaling_preserves_argmax() {
        let argmax = |v: &[f64]| {
            (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
        };
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mem = Tensor::randn(&[5, 3], 1.0, &mut rng);
            let q = Tensor::randn(&[1, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let mut g = Graph::new();
            let (m, qv) = (g.constant(mem), g.constant(q));
            let w1 = g.constant(w.clone());
            let w2 = g.constant(w.scale(3.7));
            let (a1, _) = attend(&mut g, m, qv, w1).unwrap();
            let (a2, _) = attend(&mut g, m, qv, w2).unwrap();
            assert_eq!(argmax(g.value(a1).data()), argmax(g.value(a2).data()));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut g = Graph::new();
        let mem = g.constant(Tensor::zeros(&[2, 3]));
        let q = g.constant(Tensor::zeros(&[1, 2]));
        let w = g.constant(Tensor::zeros(&[2, 4]));
        assert!(attend(&mut g, mem, q, w).is_err());
    }
}

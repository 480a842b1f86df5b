//! Scaled dot-product attention over encoder hidden states.

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Batched attention: `query [B, d]` against `states [B, T, d]`.
/// Returns `(context [B, d], weights [B, T])`.
pub fn attend(g: &mut Graph, query: Var, states: Var) -> Result<(Var, Var)> {
    let d = g.value(states).last_dim();
    let scores = g.attention_scores(states, query, 1.0 / (d as f64).sqrt())?;
    let weights = g.softmax(scores);
    let context = g.weighted_sum(weights, states)?;
    Ok((context, weights))
}

/// Single-query attention on plain values: `query [d]`, `encoder_states [T][d]`.
/// Returns the context vector and the attention weights.
pub fn attention(query: &[f64], encoder_states: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = query.len();
    if encoder_states.is_empty() || encoder_states.iter().any(|s| s.len() != d) {
        return Err(Error::shape("attention", format!("query has {d} dims; states must be non-empty rows of {d}")));
    }
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(vec![1, d], query.to_vec())?);
    let flat: Vec<f64> = encoder_states.iter().flatten().copied().collect();
    let states = g.constant(Tensor::new(vec![1, encoder_states.len(), d], flat)?);
    let (context, weights) = attend(&mut g, q, states)?;
    Ok((g.value(context).data().to_vec(), g.value(weights).data().to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use crate::rng::seeded_rng;

    #[test]
    fn single_state_is_returned() {
        let (c, w) = attention(&[0.3, -2.0], &[vec![1.5, 4.0]]).unwrap();
        assert_eq!(c, vec![1.5, 4.0]);
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn identical_states_give_that_state() {
        let v = vec![0.25, -1.0, 3.0];
        let states = vec![v.clone(); 6];
        let (c, _) = attention(&[1.0, 2.0, -0.5], &states).unwrap();
        for (a, b) in c.iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aligned_query_concentrates_weight() {
        let states = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (_, w_small) = attention(&[1.0, 0.0], &states).unwrap();
        let (_, w_large) = attention(&[100.0, 0.0], &states).unwrap();
        assert!(w_large[0] > w_small[0]);
        assert!(w_large[0] > 1.0 - 1e-12);
    }

    #[test]
    fn weights_form_a_distribution() {
        let mut rng = seeded_rng(3);
        for _ in 0..100 {
            let t = 1 + rng.below(8);
            let states: Vec<Vec<f64>> = (0..t).map(|_| (0..4).map(|_| 5.0 * rng.normal()).collect()).collect();
            let q: Vec<f64> = (0..4).map(|_| 5.0 * rng.normal()).collect();
            let (_, w) = attention(&q, &states).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch() {
        assert!(attention(&[1.0, 2.0], &[vec![1.0]]).is_err());
        assert!(attention(&[1.0], &[]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = seeded_rng(40 + seed);
            let t = 1 + rng.below(5);
            let d = 1 + rng.below(4);
            let q = Tensor::new(vec![2, d], (0..2 * d).map(|_| rng.normal()).collect()).unwrap();
            let s = Tensor::new(vec![2, t, d], (0..2 * t * d).map(|_| rng.normal()).collect()).unwrap();
            let r = gradcheck::check(&[q, s], gradcheck::DEFAULT_STEP, |g, v| {
                let (c, _) = attend(g, v[0], v[1])?;
                let sq = g.mul(c, c)?;
                let th = g.tanh(c);
                let total = g.add(sq, th)?;
                Ok(g.sum(total))
            })
            .unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}

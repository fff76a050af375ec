//! Squared-distance similarity, the triplet hinge loss and the regularized objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Required gap between the negative and positive distances.
    pub gap: f64,
    /// Weight of the squared parameter norm.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gap: 1.0,
            lambda: 0.001,
        }
    }
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimMismatch(format!(
            "embedding dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `|x - y|^2`.
pub fn squared_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `max(0, gap + d_pos - d_neg)`.
pub fn triplet_hinge(d_pos: f64, d_neg: f64, gap: f64) -> f64 {
    (gap + d_pos - d_neg).max(0.0)
}

/// Embeddings of one triplet's query, positive and negative.
#[derive(Debug, Clone, Copy)]
pub struct TripletEmbeddings<'a> {
    pub query: &'a [f64],
    pub positive: &'a [f64],
    pub negative: &'a [f64],
}

impl TripletEmbeddings<'_> {
    pub fn hinge(&self, gap: f64) -> Result<f64> {
        check_dims(self.query, self.negative)?;
        let d_pos = squared_distance(self.query, self.positive)?;
        let d_neg = squared_distance(self.query, self.negative)?;
        Ok(triplet_hinge(d_pos, d_neg, gap))
    }
}

/// Sum of hinge losses over the batch plus `lambda * |W|^2`.
pub fn objective<'p>(
    batch: &[TripletEmbeddings<'_>],
    params: impl IntoIterator<Item = &'p [f64]>,
    config: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for t in batch {
        total += t.hinge(config.gap)?;
    }
    let norm2: f64 = params
        .into_iter()
        .map(|a| a.iter().map(|w| w * w).sum::<f64>())
        .sum();
    Ok(total + config.lambda * norm2)
}

/// Gradients of the triplet hinge with respect to the three embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGrad {
    pub loss: f64,
    pub query: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

impl TripletGrad {
    pub fn is_active(&self) -> bool {
        self.loss > 0.0
    }
}

/// Exact gradient of `max(0, gap + |q - p|^2 - |q - n|^2)`; the zero subgradient is
/// used on the flat side and at the kink.
pub fn loss_grad(q: &[f64], p: &[f64], n: &[f64], gap: f64) -> Result<TripletGrad> {
    check_dims(q, p)?;
    check_dims(q, n)?;
    let d_pos = squared_distance(q, p)?;
    let d_neg = squared_distance(q, n)?;
    let margin = gap + d_pos - d_neg;
    let dim = q.len();
    if margin <= 0.0 {
        return Ok(TripletGrad {
            loss: 0.0,
            query: vec![0.0; dim],
            positive: vec![0.0; dim],
            negative: vec![0.0; dim],
        });
    }
    let mut gq = Vec::with_capacity(dim);
    let mut gp = Vec::with_capacity(dim);
    let mut gn = Vec::with_capacity(dim);
    for k in 0..dim {
        gq.push(2.0 * (n[k] - p[k]));
        gp.push(-2.0 * (q[k] - p[k]));
        gn.push(2.0 * (q[k] - n[k]));
    }
    Ok(TripletGrad {
        loss: margin,
        query: gq,
        positive: gp,
        negative: gn,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn distance_examples() {
        assert_eq!(squared_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(squared_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 25.0);
        assert!(squared_distance(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_hinge(0.2, 1.5, 1.0), 0.0);
        assert_eq!(triplet_hinge(0.7, 0.7, 1.0), 1.0);
        assert_eq!(triplet_hinge(1.0, 0.5, 1.0), 1.5);
    }

    #[test]
    fn objective_reduces_to_regularizer() {
        let params: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        let config = LossConfig::default();
        let reg = 0.001 * 14.0;
        let views = || params.iter().map(Vec::as_slice);
        assert_eq!(objective(&[], views(), &config).unwrap(), reg);
        let (q, p, n) = ([0.0, 0.0], [0.1, 0.0], [5.0, 0.0]);
        let inactive = TripletEmbeddings {
            query: &q,
            positive: &p,
            negative: &n,
        };
        assert_eq!(objective(&[inactive], views(), &config).unwrap(), reg);
    }

    #[test]
    fn inactive_triplet_has_zero_gradient() {
        let g = loss_grad(&[0.0, 0.0], &[0.1, 0.0], &[5.0, 0.0], 1.0).unwrap();
        assert!(!g.is_active());
        assert!(g.query.iter().chain(&g.positive).chain(&g.negative).all(|v| *v == 0.0));
    }

    #[test]
    fn coincident_positive_and_negative() {
        let q = [0.3, -0.2, 0.9];
        let p = [1.0, 0.5, -0.4];
        let g = loss_grad(&q, &p, &p, 1.0).unwrap();
        assert!(g.is_active());
        assert!(g.query.iter().all(|v| *v == 0.0));
        for (a, b) in g.positive.iter().zip(&g.negative) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn kink_uses_zero_subgradient() {
        // gap + d_pos - d_neg == 0 exactly: d_pos = 0, d_neg = 1, gap = 1
        let g = loss_grad(&[0.0], &[0.0], &[1.0], 1.0).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.negative.iter().all(|v| *v == 0.0));
    }

    fn scalar_loss(q: &[f64], p: &[f64], n: &[f64], gap: f64) -> f64 {
        let dp: f64 = q.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
        let dn: f64 = q.iter().zip(n).map(|(a, b)| (a - b).powi(2)).sum();
        (gap + dp - dn).max(0.0)
    }

    proptest! {
        #[test]
        fn hinge_nonnegative_and_zero_iff_satisfied(dp in 0.0f64..10.0, dn in 0.0f64..10.0, gap in 0.0f64..3.0) {
            let h = triplet_hinge(dp, dn, gap);
            prop_assert!(h >= 0.0);
            prop_assert_eq!(h == 0.0, dn >= dp + gap);
        }

        #[test]
        fn distance_symmetric(x in prop::collection::vec(-5.0f64..5.0, 6), y in prop::collection::vec(-5.0f64..5.0, 6)) {
            prop_assert_eq!(squared_distance(&x, &y).unwrap(), squared_distance(&y, &x).unwrap());
        }

        #[test]
        fn gradient_matches_central_differences(
            q in prop::collection::vec(-2.0f64..2.0, 4),
            p in prop::collection::vec(-2.0f64..2.0, 4),
            n in prop::collection::vec(-2.0f64..2.0, 4),
            gap in 0.0f64..2.0,
        ) {
            let base = gap + scalar_loss(&q, &p, &q, 0.0) - scalar_loss(&q, &n, &q, 0.0);
            prop_assume!(base.abs() > 1e-3 * 50.0);
            let g = loss_grad(&q, &p, &n, gap).unwrap();
            let h = 1e-6;
            let probe = |which: usize, k: usize| {
                let mut v = [q.clone(), p.clone(), n.clone()];
                v[which][k] += h;
                let up = scalar_loss(&v[0], &v[1], &v[2], gap);
                v[which][k] -= 2.0 * h;
                let down = scalar_loss(&v[0], &v[1], &v[2], gap);
                (up - down) / (2.0 * h)
            };
            for k in 0..4 {
                for (which, analytic) in [&g.query, &g.positive, &g.negative].into_iter().enumerate() {
                    let numeric = probe(which, k);
                    let scale = analytic[k].abs().max(numeric.abs()).max(1e-3);
                    prop_assert!((analytic[k] - numeric).abs() / scale <= 1e-6,
                        "component {} of {}: analytic {} numeric {}", k, which, analytic[k], numeric);
                }
            }
        }

        #[test]
        fn translation_invariant(
            q in prop::collection::vec(-2.0f64..2.0, 3),
            p in prop::collection::vec(-2.0f64..2.0, 3),
            n in prop::collection::vec(-2.0f64..2.0, 3),
            shift in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let add = |v: &[f64]| v.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>();
            let a = loss_grad(&q, &p, &n, 1.0).unwrap();
            let b = loss_grad(&add(&q), &add(&p), &add(&n), 1.0).unwrap();
            prop_assert!((a.loss - b.loss).abs() < 1e-9);
            for (x, y) in a.query.iter().chain(&a.positive).chain(&a.negative)
                .zip(b.query.iter().chain(&b.positive).chain(&b.negative)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn objective_decreases_as_negative_moves_away(
            q in prop::collection::vec(-1.0f64..1.0, 3),
            p in prop::collection::vec(-1.0f64..1.0, 3),
        ) {
            // negative equal to the query keeps the triplet active
            let n_near = q.clone();
            let n_far: Vec<f64> = q.iter().map(|v| v + 0.3).collect();
            let config = LossConfig::default();
            let w = [0.5f64, -0.5];
            let near = objective(&[TripletEmbeddings { query: &q, positive: &p, negative: &n_near }], [&w[..]], &config).unwrap();
            let far = objective(&[TripletEmbeddings { query: &q, positive: &p, negative: &n_far }], [&w[..]], &config).unwrap();
            prop_assert!(far < near);
        }
    }
}

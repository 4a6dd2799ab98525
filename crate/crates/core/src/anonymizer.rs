//! Embedding anonymization pipelines.
//!
//! * `baseline_farthest`: replace an embedding by the mean of the `top_k`
//!   pool vectors least cosine-similar to it (pseudo-speaker).
//! * `aan1`: pass the original embedding through a trained AAN.
//! * `aan2`: pass the baseline pseudo-speaker embedding through the AAN.

use std::sync::Arc;

use ndarray::Array2;

use crate::aan::AanModel;
use crate::dataset::Corpus;
use crate::error::{Error, Result};

/// Default number of farthest pool vectors averaged into a pseudo-speaker.
pub const DEFAULT_TOP_K: usize = 10;

/// Candidate vectors for pseudo-speaker generation.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoPool {
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    source: String,
}

impl PseudoPool {
    pub fn new(vectors: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let dim = vectors
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("pool", "must not be empty"))?;
        let mut norms = Vec::with_capacity(vectors.len());
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::Shape {
                    context: "pool vector",
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(
                    "pool",
                    format!("vector {i} has non-finite entries"),
                ));
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector(format!(
                    "pool vector {i} has zero norm"
                )));
            }
            norms.push(norm);
        }
        Ok(PseudoPool {
            vectors,
            norms,
            source: source.into(),
        })
    }

    /// Every embedding vector of `corpus`, in corpus order.
    pub fn from_corpus(corpus: &Corpus, source: impl Into<String>) -> Result<Self> {
        Self::new(
            corpus
                .embeddings()
                .iter()
                .map(|e| e.vector.clone())
                .collect(),
            source,
        )
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    /// Pool indices of the `top_k` vectors least cosine-similar to `x`,
    /// farthest first; ties keep pool order.
    pub fn farthest(&self, x: &[f64], top_k: usize) -> Result<Vec<usize>> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                context: "baseline input",
                expected: self.dim(),
                actual: x.len(),
            });
        }
        if top_k == 0 || top_k > self.len() {
            return Err(Error::invalid(
                "top_k",
                format!("must lie in 1..={}, got {top_k}", self.len()),
            ));
        }
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if x_norm == 0.0 || !x_norm.is_finite() {
            return Err(Error::DegenerateVector(
                "input has zero or non-finite norm".into(),
            ));
        }
        let sims: Vec<f64> = self
            .vectors
            .iter()
            .zip(&self.norms)
            .map(|(p, n)| p.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / (n * x_norm))
            .collect();
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
        order.truncate(top_k);
        Ok(order)
    }
}

/// Mean of the `top_k` pool vectors farthest (by cosine) from `x`. The
/// selected vectors are summed in pool order, so the result depends only
/// on which vectors were selected.
pub fn baseline_anonymize(pool: &PseudoPool, x: &[f64], top_k: usize) -> Result<Vec<f64>> {
    let mut chosen = pool.farthest(x, top_k)?;
    chosen.sort_unstable();
    let mut out = vec![0.0; pool.dim()];
    for i in chosen {
        out.iter_mut()
            .zip(&pool.vectors[i])
            .for_each(|(o, v)| *o += v);
    }
    let k = top_k as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// The model's reconstruction of `x`.
pub fn anonymize_aan1(model: &AanModel, x: &[f64]) -> Result<Vec<f64>> {
    let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row vector");
    let out = model.reconstruct(&batch)?;
    let v = out.into_raw_vec_and_offset().0;
    if v.iter().any(|y| !y.is_finite()) {
        return Err(Error::Divergence("non-finite anonymized vector".into()));
    }
    Ok(v)
}

/// `anonymize_aan1(model, baseline_anonymize(pool, x, top_k))`.
pub fn anonymize_aan2(
    model: &AanModel,
    pool: &PseudoPool,
    x: &[f64],
    top_k: usize,
) -> Result<Vec<f64>> {
    if x.len() != model.dims().input {
        return Err(Error::Shape {
            context: "aan input",
            expected: model.dims().input,
            actual: x.len(),
        });
    }
    anonymize_aan1(model, &baseline_anonymize(pool, x, top_k)?)
}

#[derive(Debug, Clone)]
pub enum AnonymizationMethod {
    Identity,
    BaselineFarthest {
        pool: Arc<PseudoPool>,
        top_k: usize,
    },
    Aan1 {
        model: Arc<AanModel>,
    },
    Aan2 {
        model: Arc<AanModel>,
        pool: Arc<PseudoPool>,
        top_k: usize,
    },
}

impl AnonymizationMethod {
    pub fn kind(&self) -> &'static str {
        match self {
            AnonymizationMethod::Identity => "identity",
            AnonymizationMethod::BaselineFarthest { .. } => "baseline_farthest",
            AnonymizationMethod::Aan1 { .. } => "aan1",
            AnonymizationMethod::Aan2 { .. } => "aan2",
        }
    }

    pub fn anonymize(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            AnonymizationMethod::Identity => Ok(x.to_vec()),
            AnonymizationMethod::BaselineFarthest { pool, top_k } => {
                baseline_anonymize(pool, x, *top_k)
            }
            AnonymizationMethod::Aan1 { model } => anonymize_aan1(model, x),
            AnonymizationMethod::Aan2 { model, pool, top_k } => {
                anonymize_aan2(model, pool, x, *top_k)
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        let expected = match self {
            AnonymizationMethod::Identity => return Ok(()),
            AnonymizationMethod::BaselineFarthest { pool, .. } => pool.dim(),
            AnonymizationMethod::Aan1 { model } => model.dims().input,
            AnonymizationMethod::Aan2 { model, pool, .. } => {
                if pool.dim() != model.dims().input {
                    return Err(Error::Shape {
                        context: "pool dimension vs model input",
                        expected: model.dims().input,
                        actual: pool.dim(),
                    });
                }
                pool.dim()
            }
        };
        if dim != expected {
            return Err(Error::Shape {
                context: "corpus dimension",
                expected,
                actual: dim,
            });
        }
        Ok(())
    }
}

/// Maps every embedding through `method`; ids and labels are kept.
pub fn anonymize_corpus(corpus: &Corpus, method: &AnonymizationMethod) -> Result<Corpus> {
    method.check_dim(corpus.dim())?;
    if let AnonymizationMethod::Identity = method {
        return Ok(corpus.clone());
    }
    corpus.map_vectors(|e| method.anonymize(&e.vector))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aan::{build_aan, AanDims, AanModel, Init};
    use ndarray::Array1;
    use proptest::prelude::*;

    fn unit_pool() -> PseudoPool {
        PseudoPool::new(
            vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
            "test",
        )
        .unwrap()
    }

    #[test]
    fn farthest_single() {
        assert_eq!(
            baseline_anonymize(&unit_pool(), &[1.0, 0.0], 1).unwrap(),
            vec![-1.0, 0.0]
        );
    }

    #[test]
    fn farthest_pair_is_averaged() {
        assert_eq!(
            baseline_anonymize(&unit_pool(), &[1.0, 0.0], 2).unwrap(),
            vec![-0.5, 0.5]
        );
    }

    #[test]
    fn full_pool_is_centroid() {
        let pool = unit_pool();
        let a = baseline_anonymize(&pool, &[1.0, 0.0], 3).unwrap();
        let b = baseline_anonymize(&pool, &[0.3, -2.0], 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, vec![0.0, 1.0 / 3.0]);
    }

    #[test]
    fn ties_break_by_pool_index() {
        let pool =
            PseudoPool::new(vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 2.0]], "t").unwrap();
        // Indices 0 and 2 are equally far from x; 1 wins outright, then 0.
        assert_eq!(pool.farthest(&[0.0, 1.0], 2).unwrap(), vec![1, 0]);
        let pool = PseudoPool::new(vec![vec![0.0, 1.0], vec![0.0, 3.0]], "t").unwrap();
        assert_eq!(pool.farthest(&[1.0, 0.0], 1).unwrap(), vec![0]);
    }

    #[test]
    fn degenerate_inputs() {
        let pool = unit_pool();
        assert!(matches!(
            baseline_anonymize(&pool, &[0.0, 0.0], 1),
            Err(Error::DegenerateVector(_))
        ));
        assert!(matches!(
            PseudoPool::new(vec![vec![0.0, 0.0]], "t"),
            Err(Error::DegenerateVector(_))
        ));
        assert!(baseline_anonymize(&pool, &[1.0, 0.0], 4).is_err());
        assert!(baseline_anonymize(&pool, &[1.0, 0.0, 0.0], 1).is_err());
    }

    fn zero_model(dim: usize) -> AanModel {
        let mut m = AanModel::with_init(AanDims::desk(dim, 2, 2, 2), 8.0, 0, Init::Zeros).unwrap();
        let last = m.decoder.len() - 1;
        m.decoder[last].bias = Array1::from_shape_fn(dim, |j| j as f64 + 0.5);
        m
    }

    #[test]
    fn zero_model_returns_decoder_bias() {
        let m = zero_model(2);
        let pool = unit_pool();
        for x in [[1.0, 0.0], [-3.0, 7.0]] {
            assert_eq!(anonymize_aan1(&m, &x).unwrap(), vec![0.5, 1.5]);
            assert_eq!(anonymize_aan2(&m, &pool, &x, 2).unwrap(), vec![0.5, 1.5]);
        }
    }

    #[test]
    fn singleton_pool_aan2_is_aan1_of_pool_vector() {
        let m = build_aan(AanDims::desk(3, 2, 2, 2), 8.0, 4).unwrap();
        let p = vec![0.3, -1.0, 2.0];
        let pool = PseudoPool::new(vec![p.clone()], "t").unwrap();
        assert_eq!(
            anonymize_aan2(&m, &pool, &[5.0, 1.0, 1.0], 1).unwrap(),
            anonymize_aan1(&m, &p).unwrap()
        );
    }

    #[test]
    fn aan1_rejects_wrong_width() {
        let m = build_aan(AanDims::desk(3, 2, 2, 2), 8.0, 4).unwrap();
        assert!(anonymize_aan1(&m, &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn baseline_scale_invariant(
            pool in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 6),
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            scale in 0.01f64..100.0,
            k in 1usize..=6,
        ) {
            prop_assume!(pool.iter().all(|v| v.iter().any(|c| c.abs() > 1e-3)));
            prop_assume!(x.iter().any(|c| c.abs() > 1e-3));
            let pool = PseudoPool::new(pool, "p").unwrap();
            let xs: Vec<f64> = x.iter().map(|v| v * scale).collect();
            let mut a = pool.farthest(&x, k).unwrap();
            let mut b = pool.farthest(&xs, k).unwrap();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
            prop_assert_eq!(baseline_anonymize(&pool, &x, k).unwrap(), baseline_anonymize(&pool, &xs, k).unwrap());
        }

        #[test]
        fn baseline_permutation_invariant(
            pool in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 3), 5),
            x in proptest::collection::vec(-3.0f64..3.0, 3),
            k in 1usize..=5,
            rot in 0usize..5,
        ) {
            prop_assume!(pool.iter().all(|v| v.iter().any(|c| c.abs() > 1e-3)));
            prop_assume!(x.iter().any(|c| c.abs() > 1e-3));
            let mut rotated = pool.clone();
            rotated.rotate_left(rot);
            let a = baseline_anonymize(&PseudoPool::new(pool, "p").unwrap(), &x, k).unwrap();
            let b = baseline_anonymize(&PseudoPool::new(rotated, "p").unwrap(), &x, k).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

use rand::Rng;

use super::glorot;
use crate::error::{Error, Result};
use crate::linalg::{
    compact_svd, kernel_complement_projection, CompactSvd, Matrix, ProjectionMatrix,
};
use crate::tensor::{Tensor, Var};

/// Compact SVD of `W_d` and its kernel-complement projection, tagged with
/// the number of parameter updates since it was computed.
#[derive(Clone, Debug)]
pub struct ProjectionCache {
    pub svd: CompactSvd,
    pub projection: ProjectionMatrix,
    pub age: usize,
}

/// Linear decoder `softmax(W_d·y + b)` with a cached projection onto the
/// complement of `ker(W_d)`.
#[derive(Clone, Debug)]
pub struct DecoderHead {
    weight: Tensor,
    bias: Tensor,
    cache: Option<ProjectionCache>,
}

impl DecoderHead {
    pub const WEIGHT: &'static str = "decoder.weight";
    pub const BIAS: &'static str = "decoder.bias";

    pub fn new<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::Config(format!(
                "decoder needs at least 2 classes and a non-empty representation, got {classes}×{dim}"
            )));
        }
        Ok(Self {
            weight: glorot(rng, vec![classes, dim], dim, classes)?,
            bias: Tensor::zeros([classes])?,
            cache: None,
        })
    }

    pub fn from_parameters(weight: Tensor, bias: Tensor) -> Result<Self> {
        let mut head = Self {
            weight: Tensor::scalar(0.0),
            bias: Tensor::scalar(0.0),
            cache: None,
        };
        head.set_parameters(weight, bias)?;
        Ok(head)
    }

    /// Replaces `(W_d, b)` and drops the projection cache.
    pub fn set_parameters(&mut self, weight: Tensor, bias: Tensor) -> Result<()> {
        match (weight.shape(), bias.shape()) {
            (&[c, _], &[cb]) if c == cb => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "decoder_parameters",
                    lhs: weight.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                })
            }
        }
        self.weight = weight;
        self.bias = bias;
        self.cache = None;
        Ok(())
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Mutable access for the optimizer. Does not touch the cache; call
    /// [`DecoderHead::mark_updated`] after each update.
    pub fn parameters_mut(&mut self) -> (&mut Tensor, &mut Tensor) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn mark_updated(&mut self) {
        if let Some(cache) = &mut self.cache {
            cache.age += 1;
        }
    }

    pub fn cache(&self) -> Option<&ProjectionCache> {
        self.cache.as_ref()
    }

    /// Recomputes the SVD and projection from the current `W_d`.
    pub fn refresh(&mut self, rank_tolerance: f64) -> Result<&ProjectionCache> {
        let svd = compact_svd(&Matrix::from_tensor(&self.weight)?, rank_tolerance)?;
        let projection = kernel_complement_projection(&svd);
        Ok(self.cache.insert(ProjectionCache {
            svd,
            projection,
            age: 0,
        }))
    }

    /// Projection computed at most `period` updates ago, refreshing if needed.
    pub fn projection(&mut self, period: usize, rank_tolerance: f64) -> Result<&ProjectionMatrix> {
        let stale = match &self.cache {
            Some(c) => c.age >= period.max(1) || c.svd.rank_tolerance != rank_tolerance,
            None => true,
        };
        if stale {
            self.refresh(rank_tolerance)?;
        }
        Ok(&self.cache.as_ref().expect("cache populated").projection)
    }

    /// `y·W_dᵀ + b` for a batch `y` of shape `[N, dim]`.
    pub fn logits<'t>(weight: Var<'t>, bias: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
        y.matmul(weight.transpose()?)?.add(bias)
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Class probabilities `softmax(W_d·h + b)` for the deterministic mean
/// encoding `h` of shape `[N, dim]`.
pub fn predict(head: &DecoderHead, h: &Tensor) -> Result<Tensor> {
    let logits = h.matmul(&head.weight.transpose()?)?;
    let classes = head.classes();
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks(classes) {
        let shifted: Vec<f64> = row
            .iter()
            .zip(head.bias.data())
            .map(|(l, b)| l + b)
            .collect();
        out.extend(softmax_row(&shifted));
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// `log softmax(logits)[n, labels[n]]` for each row, shape `[N]`.
pub fn log_softmax_at<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let &[n, classes] = shape.as_slice() else {
        return Err(Error::InvalidShape {
            shape,
            reason: "logits must be [N, classes]".into(),
        });
    };
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            op: "log_softmax_at",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let mut one_hot = vec![0.0; n * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        one_hot[i * classes + label] = 1.0;
    }
    let mask = logits.tape().constant(Tensor::new([n, classes], one_hot)?);
    let log_probs = logits.sub(logits.logsumexp(1, true)?)?;
    log_probs.mul(mask)?.sum_axis(1, false)
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(log_softmax_at(logits, labels)?.mean().neg())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tape;

    fn ce(logits: &[f64], label: usize) -> f64 {
        let tape = Tape::new();
        let l = tape.constant(Tensor::new([1, logits.len()], logits.to_vec()).unwrap());
        cross_entropy(l, &[label]).unwrap().item()
    }

    #[test]
    fn zero_decoder_predicts_uniform() {
        let head = DecoderHead::from_parameters(
            Tensor::zeros([4, 3]).unwrap(),
            Tensor::zeros([4]).unwrap(),
        )
        .unwrap();
        let p = predict(&head, &Tensor::from_rows(&[[1.0, -2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(p.data(), &[0.25; 4]);
    }

    #[test]
    fn large_bias_concentrates_mass() {
        let bias = Tensor::vector(vec![800.0, 0.0, 0.0]).unwrap();
        let head = DecoderHead::from_parameters(Tensor::zeros([3, 2]).unwrap(), bias).unwrap();
        let p = predict(&head, &Tensor::from_rows(&[[0.3, 0.1]]).unwrap()).unwrap();
        assert_eq!(p.data()[0], 1.0);
        assert!(p.all_finite());
    }

    #[test]
    fn softmax_of_ramp() {
        // exp(k)/(1 + e + e²) for k = 0, 1, 2
        let p = softmax_row(&[0.0, 1.0, 2.0]);
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((ce(&[0.0; 10], 3) - 10f64.ln()).abs() < 1e-15);
        assert!(ce(&[500.0, 0.0, 0.0], 0) < 1e-100);
        // logsumexp(0, 1, 2) − 2
        assert!((ce(&[0.0, 1.0, 2.0], 2) - 0.40760596444438).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros([1, 3]).unwrap());
        assert!(matches!(
            cross_entropy(l, &[3]),
            Err(Error::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn projection_cache_ages_and_refreshes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut head = DecoderHead::new(3, 8, &mut rng).unwrap();
        head.projection(2, 1e-7).unwrap();
        assert_eq!(head.cache().unwrap().age, 0);
        head.mark_updated();
        head.projection(2, 1e-7).unwrap();
        assert_eq!(head.cache().unwrap().age, 1);
        head.mark_updated();
        head.projection(2, 1e-7).unwrap();
        assert_eq!(head.cache().unwrap().age, 0);
    }

    proptest! {
        #[test]
        fn predict_rows_are_probability_vectors(
            seed in any::<u64>(),
            scale in 0.1f64..50.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = DecoderHead::new(5, 7, &mut rng).unwrap();
            let h = Tensor::new([4, 7], (0..28).map(|i| scale * ((i as f64) * 0.37).sin()).collect()).unwrap();
            let p = predict(&head, &h).unwrap();
            for row in p.data().chunks(5) {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn cross_entropy_is_shift_invariant(
            logits in prop::collection::vec(-20.0f64..20.0, 2..8),
            shift in -1000.0f64..1000.0,
            pick in any::<prop::sample::Index>(),
        ) {
            let label = pick.index(logits.len());
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            prop_assert!((ce(&logits, label) - ce(&shifted, label)).abs() <= 1e-10);
        }
    }
}

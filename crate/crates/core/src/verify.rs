//! Randomized property suites for the information-theoretic bounds, the
//! kernel-complement projection and the objective's gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::info::{
    cross_entropy_bound_check, decomposition_check, finite_difference_gradient, random_conditional,
    random_distribution, random_joint, random_positive_distribution, MarkovSystem,
};
use crate::linalg::{compact_svd, kernel_complement_projection, Matrix, DEFAULT_RANK_TOLERANCE};
use crate::nn::{cross_entropy, predict, Activation, DecoderHead, LayerSpec, Mode, Model};
use crate::reve::{reve_loss_frozen, total_objective, ReveConfig, ReveStep};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub trials: usize,
    /// Worst value of the checked quantity across trials.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {} trials, worst {:.3e} (tolerance {:e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.trials,
            self.worst,
            self.tolerance
        )
    }
}

/// `−Σ p log q ≥ H(p)` for random pairs with support at most 16, and
/// equality when `q = p`. `worst` is the most negative gap.
pub fn bound_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-12;
    let mut worst = f64::INFINITY;
    let mut passed = true;
    for _ in 0..trials {
        let n = rng.random_range(1..=16);
        let p = random_distribution(&mut rng, n);
        let q = if rng.random_bool(0.5) {
            random_positive_distribution(&mut rng, n)
        } else {
            random_distribution(&mut rng, n)
        };
        let check = cross_entropy_bound_check(&p, &q)?;
        let gap = check.cross_entropy - check.entropy;
        worst = worst.min(gap).min(check.gap);
        let same = cross_entropy_bound_check(&p, &p)?;
        passed &=
            (same.cross_entropy - same.entropy).abs() <= tolerance && same.gap.abs() <= tolerance;
    }
    Ok(SuiteReport {
        name: "cross-entropy bound",
        trials,
        worst,
        tolerance,
        passed: passed && worst >= -tolerance,
    })
}

/// `H(Z|C) = H(Z) − H(C) + H(C|Z)` on random joints up to 8×4.
pub fn decomposition_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-10;
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=4));
        let joint = random_joint(&mut rng, rows, cols);
        worst = worst.max(decomposition_check(&joint).residual);
    }
    Ok(SuiteReport {
        name: "entropy decomposition",
        trials,
        worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// `H(C|Z) ≤ −E log r(C|Z)` on random Markov systems `C ← X → Z` with a
/// random decoder `r`. `worst` is the smallest slack.
pub fn markov_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tolerance = 1e-12;
    let mut worst = f64::INFINITY;
    for _ in 0..trials {
        let (nx, nc, nz) = (
            rng.random_range(1..=6),
            rng.random_range(2..=4),
            rng.random_range(1..=6),
        );
        let system = MarkovSystem {
            p_x: random_distribution(&mut rng, nx),
            p_c_given_x: random_conditional(&mut rng, nx, nc),
            p_z_given_x: random_conditional(&mut rng, nx, nz),
        };
        let r = random_conditional(&mut rng, nz, nc);
        worst = worst.min(crate::info::markov_factorization_check(&system, &r)?.residual);
    }
    Ok(SuiteReport {
        name: "markov chain bound",
        trials,
        worst,
        tolerance,
        passed: worst >= -tolerance,
    })
}

/// Projection properties for random decoders with `|C| ∈ {2, 10}` and
/// `dim(Y) ∈ {4, 64}`. `worst` is the largest violation relative to its
/// tolerance, so the suite passes when it is at most 1.
pub fn projection_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let classes = [2, 10][t % 2];
        let dim = [4, 64][(t / 2) % 2];
        let mut w: Vec<f64> = (0..classes * dim)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        if t % 5 == 4 {
            // a repeated row makes the decoder rank deficient
            let (first, rest) = w.split_at_mut(dim);
            rest[..dim].copy_from_slice(first);
        }
        let wm = Matrix::new(classes, dim, w)?;
        let p = kernel_complement_projection(&compact_svd(&wm, DEFAULT_RANK_TOLERANCE)?);
        let pm = p.matrix();
        let idempotent = pm.matmul(pm)?.sub(pm)?.max_abs();
        let symmetric = pm.sub(&pm.transpose())?.max_abs();
        let complement = Matrix::identity(dim).sub(pm)?;
        let kernel = wm.matmul(&complement)?.max_abs() / wm.max_abs();

        let bias = Tensor::new(
            [classes],
            (0..classes).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )?;
        let head = DecoderHead::from_parameters(wm.to_tensor()?, bias)?;
        let y = Tensor::new(
            [8, dim],
            (0..8 * dim)
                .map(|_| 3.0 * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        )?;
        let z = y.matmul(&p.to_tensor()?)?;
        let (py, pz) = (predict(&head, &y)?, predict(&head, &z)?);
        let invariance = py
            .data()
            .iter()
            .zip(pz.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);

        worst = worst
            .max(idempotent / 1e-10)
            .max(symmetric / 1e-10)
            .max(kernel / 1e-8)
            .max(invariance / 1e-8);
    }
    Ok(SuiteReport {
        name: "kernel-complement projection",
        trials,
        worst,
        tolerance: 1.0,
        passed: worst <= 1.0,
    })
}

/// Central-difference check (`h = 10⁻⁵`) of every parameter gradient of the
/// total objective on a small network (input 4, hidden 6, `dim(Y)` 4, three
/// classes, `S = 3`) with noise, projection and `q` frozen. `worst` is the
/// largest relative error `|a − n| / max(|a|, |n|, 10⁻³)`.
pub fn gradient_check(seed: u64) -> Result<SuiteReport> {
    let tolerance = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = [
        LayerSpec::Dense {
            units: 6,
            activation: Activation::Tanh,
        },
        LayerSpec::Dense {
            units: 4,
            activation: Activation::Tanh,
        },
    ];
    let model = Model::new(&[4], &layers, 3, &mut rng)?;
    let config = ReveConfig {
        beta: 1.0,
        samples: 3,
        sigma2: 0.05,
        ..ReveConfig::default()
    };
    let x = Tensor::new(
        [5, 4],
        (0..20)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    let labels = [0, 1, 2, 1, 0];
    let mut head = model.head.clone();
    let projection = head.refresh(config.rank_tolerance)?.projection.clone();

    let tape = Tape::new();
    let bound = model.bind(&tape);
    let step = ReveStep {
        config: &config,
        projection: &projection,
        previous_q: None,
        rng: &mut rng,
    };
    let objective = total_objective(
        &model.encoder,
        &bound,
        tape.constant(x.clone()),
        &labels,
        Mode::Eval,
        Some(step),
    )?;
    let frozen = objective.reve.clone().expect("regularizer configured");
    let mut grads = tape.backward(objective.total)?;
    let analytic: Vec<Tensor> = bound
        .encoder
        .iter()
        .chain([&bound.weight, &bound.bias])
        .map(|&v| grads.take(v).expect("every parameter is a leaf"))
        .collect();

    let value = |m: &Model| -> f64 {
        let tape = Tape::new();
        let bound = m.bind(&tape);
        let run = || -> Result<f64> {
            let h = m
                .encoder
                .encode(&bound.encoder, tape.constant(x.clone()), Mode::Eval)?;
            let ce = cross_entropy(DecoderHead::logits(bound.weight, bound.bias, h)?, &labels)?;
            let omega =
                reve_loss_frozen(h, &labels, &bound, &projection, &frozen.noise, &frozen.q)?;
            Ok(ce.item() + config.beta * omega.item())
        };
        run().unwrap_or(f64::NAN)
    };

    let params = model.named_params();
    let mut worst: f64 = 0.0;
    for (k, (_, tensor)) in params.iter().enumerate() {
        let numeric = finite_difference_gradient(
            |theta| {
                let mut m = model.clone();
                let mut entries = params.clone();
                entries[k].1 =
                    Tensor::new(tensor.shape().to_vec(), theta.to_vec()).expect("same shape");
                m.load_named_params(&entries).expect("same architecture");
                value(&m)
            },
            tensor.data(),
            1e-5,
        )?;
        for (a, n) in analytic[k].data().iter().zip(&numeric) {
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-3));
        }
    }
    Ok(SuiteReport {
        name: "objective gradients",
        trials: params.iter().map(|(_, t)| t.len()).sum(),
        worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// Every suite with `trials` randomized cases each.
pub fn run_all(trials: usize, seed: u64) -> Result<Vec<SuiteReport>> {
    Ok(vec![
        bound_suite(trials, seed)?,
        decomposition_suite(trials, seed.wrapping_add(1))?,
        markov_suite(trials, seed.wrapping_add(2))?,
        projection_suite(trials, seed.wrapping_add(3))?,
        gradient_check(seed.wrapping_add(4))?,
    ])
}

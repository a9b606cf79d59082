//! Brute-force information-theory oracle.
//!
//! Exact entropies, conditional entropies and variational bounds over finite
//! supports, all in nats. These functions are the ground truth the
//! regularizer's inequalities are checked against, so they are written as
//! direct summations with no shortcuts shared with the training path.

use rand::Rng;

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-12;

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn validate(probs: &[f64], what: &str) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Data(format!("{what}: empty support")));
    }
    if let Some(bad) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
        return Err(Error::Data(format!("{what}: invalid probability {bad}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::Data(format!("{what}: probabilities sum to {total}")));
    }
    Ok(())
}

/// Probability vector over a finite support.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate(&probs, "distribution")?;
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Shannon entropy `−Σ p log p`, with `0 log 0 = 0`.
pub fn entropy(p: &DiscreteDistribution) -> f64 {
    -p.probs.iter().map(|&x| plogp(x)).sum::<f64>()
}

/// Result of bounding `H(p)` by the cross-entropy `−Σ p log q`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundCheck {
    pub entropy: f64,
    pub cross_entropy: f64,
    /// `KL(p‖q)`; `+∞` when `q` vanishes somewhere on `p`'s support.
    pub gap: f64,
}

pub fn cross_entropy_bound_check(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
) -> Result<BoundCheck> {
    if p.len() != q.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy_bound_check",
            lhs: vec![p.len()],
            rhs: vec![q.len()],
        });
    }
    let mut cross = 0.0;
    let mut kl = 0.0;
    for (&pi, &qi) in p.probs.iter().zip(&q.probs) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(BoundCheck {
                entropy: entropy(p),
                cross_entropy: f64::INFINITY,
                gap: f64::INFINITY,
            });
        }
        cross -= pi * qi.ln();
        kl += pi * (pi / qi).ln();
    }
    Ok(BoundCheck {
        entropy: entropy(p),
        cross_entropy: cross,
        gap: kl,
    })
}

/// Which conditional entropy to compute from a joint over (Z, C).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    /// `H(C | Z)`
    ClassGivenZ,
    /// `H(Z | C)`
    ZGivenClass,
}

/// Joint distribution `p(z, c)`: rows index the Z support, columns the classes.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteJoint {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if rows * cols != probs.len() {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("{} entries supplied", probs.len()),
            });
        }
        validate(&probs, "joint")?;
        Ok(Self { rows, cols, probs })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let probs: Vec<f64> = rows.iter().flat_map(|r| r.as_ref().to_vec()).collect();
        Self::new(rows.len(), cols, probs)
    }

    pub fn get(&self, z: usize, c: usize) -> f64 {
        self.probs[z * self.cols + c]
    }

    pub fn z_support(&self) -> usize {
        self.rows
    }

    pub fn classes(&self) -> usize {
        self.cols
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|z| (0..self.cols).map(|c| self.get(z, c)).sum())
            .collect()
    }

    pub fn marginal_c(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|z| self.get(z, c)).sum())
            .collect()
    }

    pub fn entropy_z(&self) -> f64 {
        -self.marginal_z().into_iter().map(plogp).sum::<f64>()
    }

    pub fn entropy_c(&self) -> f64 {
        -self.marginal_c().into_iter().map(plogp).sum::<f64>()
    }

    pub fn joint_entropy(&self) -> f64 {
        -self.probs.iter().map(|&p| plogp(p)).sum::<f64>()
    }
}

/// `−Σ p(z,c) log p(c|z)` or `−Σ p(z,c) log p(z|c)`; cells whose
/// conditioning marginal is zero contribute nothing.
#[allow(clippy::needless_range_loop)]
pub fn conditional_entropy(joint: &DiscreteJoint, conditioning: Conditioning) -> f64 {
    let pz = joint.marginal_z();
    let pc = joint.marginal_c();
    let mut h = 0.0;
    for z in 0..joint.rows {
        for c in 0..joint.cols {
            let p = joint.get(z, c);
            if p == 0.0 {
                continue;
            }
            let given = match conditioning {
                Conditioning::ClassGivenZ => pz[z],
                Conditioning::ZGivenClass => pc[c],
            };
            h -= p * (p / given).ln();
        }
    }
    h
}

/// `I(Z; C) = Σ p(z,c) log(p(z,c) / (p(z) p(c)))`
#[allow(clippy::needless_range_loop)]
pub fn mutual_information(joint: &DiscreteJoint) -> f64 {
    let pz = joint.marginal_z();
    let pc = joint.marginal_c();
    let mut mi = 0.0;
    for z in 0..joint.rows {
        for c in 0..joint.cols {
            let p = joint.get(z, c);
            if p > 0.0 {
                mi += p * (p / (pz[z] * pc[c])).ln();
            }
        }
    }
    mi
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    pub h_z: f64,
    pub h_c: f64,
    pub h_z_given_c: f64,
    pub h_c_given_z: f64,
    pub mutual_information: f64,
    /// `|H(Z|C) − H(Z) + H(C) − H(C|Z)|`
    pub residual: f64,
}

/// Evaluates every term of `H(Z|C) = H(Z) − H(C) + H(C|Z)` independently.
pub fn decomposition_check(joint: &DiscreteJoint) -> Decomposition {
    let h_z = joint.entropy_z();
    let h_c = joint.entropy_c();
    let h_z_given_c = conditional_entropy(joint, Conditioning::ZGivenClass);
    let h_c_given_z = conditional_entropy(joint, Conditioning::ClassGivenZ);
    Decomposition {
        h_z,
        h_c,
        h_z_given_c,
        h_c_given_z,
        mutual_information: mutual_information(joint),
        residual: (h_z_given_c - h_z + h_c - h_c_given_z).abs(),
    }
}

/// Row-stochastic matrix: each row is a conditional distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditional {
    rows: usize,
    cols: usize,
    probs: Vec<f64>,
}

impl Conditional {
    pub fn new(rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if rows * cols != probs.len() || rows == 0 || cols == 0 {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("{} entries supplied", probs.len()),
            });
        }
        for row in probs.chunks(cols) {
            validate(row, "conditional row")?;
        }
        Ok(Self { rows, cols, probs })
    }

    pub fn get(&self, given: usize, outcome: usize) -> f64 {
        self.probs[given * self.cols + outcome]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// A finite system `X → C` and `X → Z` with `C` and `Z` independent given `X`.
#[derive(Clone, Debug)]
pub struct MarkovSystem {
    pub p_x: DiscreteDistribution,
    /// `|X| × |C|`
    pub p_c_given_x: Conditional,
    /// `|X| × |Z|`
    pub p_z_given_x: Conditional,
}

impl MarkovSystem {
    /// `p(z, c) = Σ_x p(x) p(c|x) p(z|x)`
    pub fn joint(&self) -> Result<DiscreteJoint> {
        let nx = self.p_x.len();
        if self.p_c_given_x.rows != nx || self.p_z_given_x.rows != nx {
            return Err(Error::ShapeMismatch {
                op: "markov_joint",
                lhs: vec![self.p_c_given_x.rows, self.p_z_given_x.rows],
                rhs: vec![nx],
            });
        }
        let (nz, nc) = (self.p_z_given_x.cols, self.p_c_given_x.cols);
        let mut probs = vec![0.0; nz * nc];
        for x in 0..nx {
            let px = self.p_x.probs()[x];
            for z in 0..nz {
                for c in 0..nc {
                    probs[z * nc + c] +=
                        px * self.p_c_given_x.get(x, c) * self.p_z_given_x.get(x, z);
                }
            }
        }
        // renormalize the accumulated round-off before validation
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        DiscreteJoint::new(nz, nc, probs)
    }
}

#[derive(Clone, Debug)]
pub struct MarkovCheck {
    pub joint: DiscreteJoint,
    /// `H(C | Z)` of the induced joint.
    pub conditional_entropy: f64,
    /// `−Σ_{x,z,c} p(x) p(c|x) p(z|x) log r(c|z)`
    pub bound: f64,
    /// `bound − H(C|Z)`; never negative beyond round-off.
    pub residual: f64,
}

/// Checks `H(C|Z) ≤ −E log r(C|Z)` with the expectation taken through `X`.
pub fn markov_factorization_check(system: &MarkovSystem, r: &Conditional) -> Result<MarkovCheck> {
    let joint = system.joint()?;
    if r.rows != joint.rows || r.cols != joint.cols {
        return Err(Error::ShapeMismatch {
            op: "markov_factorization_check",
            lhs: vec![r.rows, r.cols],
            rhs: vec![joint.rows, joint.cols],
        });
    }
    let mut bound = 0.0;
    for x in 0..system.p_x.len() {
        let px = system.p_x.probs()[x];
        for z in 0..joint.rows {
            for c in 0..joint.cols {
                let w = px * system.p_c_given_x.get(x, c) * system.p_z_given_x.get(x, z);
                if w == 0.0 {
                    continue;
                }
                let rc = r.get(z, c);
                if rc == 0.0 {
                    bound = f64::INFINITY;
                } else {
                    bound -= w * rc.ln();
                }
            }
        }
    }
    let h = conditional_entropy(&joint, Conditioning::ClassGivenZ);
    Ok(MarkovCheck {
        joint,
        conditional_entropy: h,
        bound,
        residual: bound - h,
    })
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &[f64], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        point[i] = theta[i] + step;
        let plus = f(&point);
        point[i] = theta[i] - step;
        let minus = f(&point);
        point[i] = theta[i];
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite(format!(
                "finite difference at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Plug-in entropy of samples discretized on a fixed grid of width `bin_width`
/// anchored at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinnedEntropy {
    /// Entropy of the bin occupancy distribution (nats).
    pub discrete: f64,
    pub bin_width: f64,
    /// Number of dimensions the estimate spans.
    pub dims: usize,
    /// `discrete + dims · log(bin_width)`, the differential-entropy estimate.
    pub differential: f64,
}

pub fn binned_entropy(samples: &[f64], bin_width: f64) -> Result<BinnedEntropy> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(bin_width > 0.0) {
        return Err(Error::Config(format!(
            "bin width {bin_width} must be positive"
        )));
    }
    let mut bins: Vec<i64> = samples
        .iter()
        .map(|x| (x / bin_width).floor() as i64)
        .collect();
    bins.sort_unstable();
    let n = samples.len() as f64;
    let mut discrete = 0.0;
    let mut start = 0;
    while start < bins.len() {
        let end = start
            + bins[start..]
                .iter()
                .take_while(|&&b| b == bins[start])
                .count();
        discrete -= plogp((end - start) as f64 / n);
        start = end;
    }
    Ok(BinnedEntropy {
        discrete,
        bin_width,
        dims: 1,
        differential: discrete + bin_width.ln(),
    })
}

/// Sum of per-coordinate binned entropies of row-major `samples` with
/// `dims` columns (the mean-field entropy estimate).
pub fn mean_field_binned_entropy(
    samples: &[f64],
    dims: usize,
    bin_width: f64,
) -> Result<BinnedEntropy> {
    if dims == 0 || !samples.len().is_multiple_of(dims) {
        return Err(Error::InvalidShape {
            shape: vec![samples.len(), dims],
            reason: "sample count is not a multiple of the dimension".into(),
        });
    }
    let mut discrete = 0.0;
    for d in 0..dims {
        let column: Vec<f64> = samples.iter().skip(d).step_by(dims).copied().collect();
        discrete += binned_entropy(&column, bin_width)?.discrete;
    }
    Ok(BinnedEntropy {
        discrete,
        bin_width,
        dims,
        differential: discrete + dims as f64 * bin_width.ln(),
    })
}

/// Random probability vector; roughly one draw in four has zero entries.
pub fn random_distribution<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DiscreteDistribution {
    let sparse = rng.random_bool(0.25);
    let mut weights: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.3) {
                0.0
            } else {
                -rng.random::<f64>().max(f64::MIN_POSITIVE).ln()
            }
        })
        .collect();
    if weights.iter().all(|&w| w == 0.0) {
        weights[rng.random_range(0..n)] = 1.0;
    }
    DiscreteDistribution::from_weights(&weights).expect("positive total weight")
}

/// Strictly positive random probability vector.
pub fn random_positive_distribution<R: Rng + ?Sized>(
    rng: &mut R,
    n: usize,
) -> DiscreteDistribution {
    let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 1e-3).collect();
    DiscreteDistribution::from_weights(&weights).expect("positive total weight")
}

pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DiscreteJoint {
    let p = random_distribution(rng, rows * cols);
    DiscreteJoint::new(rows, cols, p.probs).expect("valid joint")
}

pub fn random_conditional<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Conditional {
    let probs = (0..rows)
        .flat_map(|_| random_distribution(rng, cols).probs)
        .collect();
    Conditional::new(rows, cols, probs).expect("valid conditional")
}

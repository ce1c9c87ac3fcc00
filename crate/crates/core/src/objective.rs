//! Margin loss on capsule lengths, masked reconstruction and their sum.

use serde::{Deserialize, Serialize};

use crate::caps::CapsTensor;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    /// Down-weighting of absent classes.
    pub lambda: f64,
    /// Scale of the mean-squared reconstruction error in the total loss.
    pub recon_weight: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda: 0.5,
            // 0.0005 * 784: a summed-L2 weight expressed for a mean-L2 loss.
            recon_weight: 0.392,
        }
    }
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0) {
            return Err(Error::Config(format!(
                "margins must satisfy 0 < m_minus < m_plus < 1, got {} / {}",
                self.m_minus, self.m_plus
            )));
        }
        if !(self.lambda > 0.0) || !(self.recon_weight >= 0.0) {
            return Err(Error::Config(format!(
                "lambda must be > 0 and recon_weight >= 0, got {} / {}",
                self.lambda, self.recon_weight
            )));
        }
        Ok(())
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    a.expect_rank(2, what)?;
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok((a.dim(0), a.dim(1)))
}

/// Per class `T max(0, m+ - ‖u‖)² + λ (1 - T) max(0, ‖u‖ - m-)²`, summed over
/// classes and averaged over the batch.
pub fn margin_loss<T: Scalar>(lengths: &Tensor<T>, targets: &Tensor<T>, cfg: &MarginConfig) -> Result<T> {
    let (n, _) = check_pair(lengths, targets, "margin loss")?;
    let (mp, mm, lambda) = (T::of(cfg.m_plus), T::of(cfg.m_minus), T::of(cfg.lambda));
    let total: T = lengths
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&len, &t)| {
            let present = (mp - len).max(T::zero());
            let absent = (len - mm).max(T::zero());
            t * present * present + lambda * (T::one() - t) * absent * absent
        })
        .sum();
    Ok(total / T::of(n as f64))
}

/// Gradient of [`margin_loss`] with respect to the lengths.
pub fn margin_loss_grad<T: Scalar>(
    lengths: &Tensor<T>,
    targets: &Tensor<T>,
    cfg: &MarginConfig,
) -> Result<Tensor<T>> {
    let (n, _) = check_pair(lengths, targets, "margin loss")?;
    let (mp, mm, lambda) = (T::of(cfg.m_plus), T::of(cfg.m_minus), T::of(cfg.lambda));
    let two_over_n = T::of(2.0 / n as f64);
    lengths.zip_map(targets, |len, t| {
        let present = (mp - len).max(T::zero());
        let absent = (len - mm).max(T::zero());
        two_over_n * (-t * present + lambda * (T::one() - t) * absent)
    })
}

/// Which capsule survives masking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CapsuleSelect {
    /// One class index per batch item.
    ByTarget(Vec<usize>),
    /// The longest capsule; ties go to the lowest index.
    ByLongest,
}

/// Index of the maximal entry; the lowest index wins ties.
pub fn argmax_lowest<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Zeroes every capsule but the selected one and flattens to `[N, n*d]`.
/// Returns the selected index per item alongside.
pub fn mask_capsules<T: Scalar>(caps: &CapsTensor<T>, select: &CapsuleSelect) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, count, d) = (caps.batch(), caps.count(), caps.dim());
    let chosen = match select {
        CapsuleSelect::ByTarget(targets) => {
            if targets.len() != n {
                return Err(Error::Argument(format!(
                    "{} mask targets for a batch of {n}",
                    targets.len()
                )));
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= count) {
                return Err(Error::Argument(format!(
                    "mask target {bad} out of range for {count} capsules"
                )));
            }
            targets.clone()
        }
        CapsuleSelect::ByLongest => {
            let lengths = caps.lengths();
            lengths.data().chunks_exact(count).map(argmax_lowest).collect()
        }
    };
    let mut out = vec![T::zero(); n * count * d];
    for (i, &k) in chosen.iter().enumerate() {
        let at = (i * count + k) * d;
        out[at..at + d].copy_from_slice(caps.capsule(i, k));
    }
    Ok((Tensor::new(&[n, count * d], out)?, chosen))
}

/// Routes the flattened masked gradient back onto the selected capsules.
pub fn mask_capsules_backward<T: Scalar>(
    caps: &CapsTensor<T>,
    chosen: &[usize],
    grad_masked: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, count, d) = (caps.batch(), caps.count(), caps.dim());
    if grad_masked.shape() != [n, count * d] || chosen.len() != n {
        return Err(dim_err!(
            "masked gradient {:?} does not match capsules [{n}, {count}, {d}]",
            grad_masked.shape()
        ));
    }
    let g = grad_masked.data();
    let mut out = vec![T::zero(); n * count * d];
    for (i, &k) in chosen.iter().enumerate() {
        let at = (i * count + k) * d;
        out[at..at + d].copy_from_slice(&g[at..at + d]);
    }
    Tensor::new(caps.values().shape(), out)
}

/// Mean over all `N*P` elements of the squared difference.
pub fn reconstruction_loss<T: Scalar>(decoded: &Tensor<T>, image: &Tensor<T>) -> Result<T> {
    check_pair(decoded, image, "reconstruction loss")?;
    let total: T = decoded
        .data()
        .iter()
        .zip(image.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(total / T::of(decoded.len() as f64))
}

pub fn reconstruction_loss_grad<T: Scalar>(decoded: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(decoded, image, "reconstruction loss")?;
    let scale = T::of(2.0 / decoded.len() as f64);
    decoded.zip_map(image, |a, b| scale * (a - b))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub margin: f64,
    /// Mean of the per-reconstruction errors, before weighting.
    pub recon: f64,
}

/// Weight applied to each reconstruction error when `count` reconstructions
/// share the regulariser (two for MultiMNIST, halving the weight).
pub fn recon_share(cfg: &MarginConfig, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        cfg.recon_weight / count as f64
    }
}

/// `margin + recon_weight / R * sum_r recon_r` over `R` (decoded, target) pairs.
pub fn total_loss<T: Scalar>(
    lengths: &Tensor<T>,
    targets: &Tensor<T>,
    reconstructions: &[(&Tensor<T>, &Tensor<T>)],
    cfg: &MarginConfig,
) -> Result<LossBreakdown> {
    let margin = margin_loss(lengths, targets, cfg)?.as_f64();
    let share = recon_share(cfg, reconstructions.len());
    let mut recon_sum = 0.0;
    for (decoded, image) in reconstructions {
        recon_sum += reconstruction_loss(decoded, image)?.as_f64();
    }
    let recon = if reconstructions.is_empty() {
        0.0
    } else {
        recon_sum / reconstructions.len() as f64
    };
    Ok(LossBreakdown {
        total: margin + share * recon_sum,
        margin,
        recon,
    })
}

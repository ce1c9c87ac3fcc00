//! Batch and instance normalisation over NHWC tensors.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const NORM_EPS: f64 = 1e-5;
pub const RUNNING_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Statistics over `(N, H, W)` per channel; running estimates for inference.
    Batch,
    /// Statistics over `(H, W)` per sample and channel, in every mode.
    Instance,
}

/// Exponential moving averages of batch statistics.
///
/// Averages start at zero and are bias-corrected by `1 - momentum^updates`,
/// so estimates are usable after a handful of steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::zero(); channels],
            updates: 0,
        }
    }

    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = T::of(RUNNING_MOMENTUM);
        let one_minus = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = m * *r + one_minus * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = m * *r + one_minus * b;
        }
        self.updates += 1;
    }

    /// Bias-corrected `(mean, var)`; identity statistics before any update.
    pub fn estimate(&self) -> (Vec<T>, Vec<T>) {
        if self.updates == 0 {
            return (
                vec![T::zero(); self.mean.len()],
                vec![T::one(); self.var.len()],
            );
        }
        let correction = T::one() / (T::one() - T::of(RUNNING_MOMENTUM.powi(self.updates.min(1 << 20) as i32)));
        (
            self.mean.iter().map(|&x| x * correction).collect(),
            self.var.iter().map(|&x| x * correction).collect(),
        )
    }
}

/// Values needed by [`normalize_backward`].
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    mode: NormMode,
    /// Whether the statistics were computed from this input (and so depend on it).
    batch_statistics: bool,
    xhat: Tensor<T>,
    /// One entry per normalisation group: `[C]` for batch, `[N*C]` for instance.
    inv_std: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct NormOutput<T> {
    pub output: Tensor<T>,
    pub cache: NormCache<T>,
    /// Batch-mode training statistics, for updating [`RunningStats`].
    pub batch_mean: Option<Vec<T>>,
    pub batch_var: Option<Vec<T>>,
}

fn channels_of<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<usize> {
    input.expect_rank(4, "normalize input")?;
    let c = input.dim(3);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!(
            "normalize: gamma {:?} / beta {:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(c)
}

/// Normalises then applies the per-channel affine transform `gamma * xhat + beta`.
///
/// Batch mode in inference (`training == false`) requires `running`.
pub fn normalize<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: NormMode,
    running: Option<&RunningStats<T>>,
    training: bool,
) -> Result<NormOutput<T>> {
    let c = channels_of(input, gamma, beta)?;
    let n = input.dim(0);
    let spatial = input.dim(1) * input.dim(2);
    let x = input.data();
    let eps = T::of(NORM_EPS);

    // groups: (mean, var) per group, group index of element = g(n, ch)
    let (means, vars, per_sample) = match (mode, training) {
        (NormMode::Instance, _) => {
            let count = T::of(spatial as f64);
            let mut means = vec![T::zero(); n * c];
            let mut vars = vec![T::zero(); n * c];
            for s in 0..n {
                let block = &x[s * spatial * c..(s + 1) * spatial * c];
                let m = &mut means[s * c..(s + 1) * c];
                for px in block.chunks_exact(c) {
                    m.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
                }
                m.iter_mut().for_each(|a| *a = *a / count);
                let v = &mut vars[s * c..(s + 1) * c];
                for px in block.chunks_exact(c) {
                    for ch in 0..c {
                        let d = px[ch] - m[ch];
                        v[ch] += d * d;
                    }
                }
                v.iter_mut().for_each(|a| *a = *a / count);
            }
            (means, vars, true)
        }
        (NormMode::Batch, true) => {
            let count = T::of((n * spatial) as f64);
            let mut mean = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(a, &v)| *a += v);
            }
            mean.iter_mut().for_each(|a| *a = *a / count);
            let mut var = vec![T::zero(); c];
            for px in x.chunks_exact(c) {
                for ch in 0..c {
                    let d = px[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|a| *a = *a / count);
            (mean, var, false)
        }
        (NormMode::Batch, false) => {
            let stats = running.ok_or_else(|| {
                Error::Argument("batch-norm inference requires running statistics".into())
            })?;
            if stats.mean.len() != c {
                return Err(dim_err!(
                    "running statistics cover {} channels, input has {c}",
                    stats.mean.len()
                ));
            }
            let (mean, var) = stats.estimate();
            (mean, var, false)
        }
    };

    let inv_std: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for s in 0..n {
        let base = if per_sample { s * c } else { 0 };
        let lo = s * spatial * c;
        let hi = lo + spatial * c;
        for ((px, xh), o) in x[lo..hi]
            .chunks_exact(c)
            .zip(xhat[lo..hi].chunks_exact_mut(c))
            .zip(out[lo..hi].chunks_exact_mut(c))
        {
            for ch in 0..c {
                let v = (px[ch] - means[base + ch]) * inv_std[base + ch];
                xh[ch] = v;
                o[ch] = g[ch] * v + b[ch];
            }
        }
    }

    let batch_stats = mode == NormMode::Batch && training;
    Ok(NormOutput {
        output: Tensor::new(input.shape(), out)?,
        cache: NormCache {
            mode,
            batch_statistics: batch_stats || mode == NormMode::Instance,
            xhat: Tensor::new(input.shape(), xhat)?,
            inv_std,
        },
        batch_mean: batch_stats.then(|| means.clone()),
        batch_var: batch_stats.then_some(vars),
    })
}

#[derive(Clone, Debug)]
pub struct NormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn normalize_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<NormGrads<T>> {
    cache.xhat.expect_same_shape(grad_out)?;
    let shape = grad_out.shape();
    let (n, spatial, c) = (shape[0], shape[1] * shape[2], shape[3]);
    if gamma.shape() != [c] {
        return Err(dim_err!("gamma must be [{c}], got {:?}", gamma.shape()));
    }
    let dy = grad_out.data();
    let xh = cache.xhat.data();
    let g = gamma.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (py, px) in dy.chunks_exact(c).zip(xh.chunks_exact(c)) {
        for ch in 0..c {
            dbeta[ch] += py[ch];
            dgamma[ch] += py[ch] * px[ch];
        }
    }

    let mut dx = vec![T::zero(); dy.len()];
    if !cache.batch_statistics {
        for (o, py) in dx.chunks_exact_mut(c).zip(dy.chunks_exact(c)) {
            for ch in 0..c {
                o[ch] = py[ch] * g[ch] * cache.inv_std[ch];
            }
        }
    } else {
        // dx = inv_std / m * (m * dxhat - sum(dxhat) - xhat * sum(dxhat * xhat)), dxhat = dy * gamma
        let groups: Vec<(usize, usize, usize)> = match cache.mode {
            NormMode::Batch => vec![(0, n * spatial * c, 0)],
            NormMode::Instance => (0..n)
                .map(|s| (s * spatial * c, (s + 1) * spatial * c, s * c))
                .collect(),
        };
        for (lo, hi, base) in groups {
            let m = T::of(((hi - lo) / c) as f64);
            let mut sum_d = vec![T::zero(); c];
            let mut sum_dx = vec![T::zero(); c];
            for (py, px) in dy[lo..hi].chunks_exact(c).zip(xh[lo..hi].chunks_exact(c)) {
                for ch in 0..c {
                    let d = py[ch] * g[ch];
                    sum_d[ch] += d;
                    sum_dx[ch] += d * px[ch];
                }
            }
            for ((o, py), px) in dx[lo..hi]
                .chunks_exact_mut(c)
                .zip(dy[lo..hi].chunks_exact(c))
                .zip(xh[lo..hi].chunks_exact(c))
            {
                for ch in 0..c {
                    let d = py[ch] * g[ch];
                    o[ch] = cache.inv_std[base + ch] / m * (m * d - sum_d[ch] - px[ch] * sum_dx[ch]);
                }
            }
        }
    }

    Ok(NormGrads {
        input: Tensor::new(shape, dx)?,
        gamma: Tensor::new(&[c], dgamma)?,
        beta: Tensor::new(&[c], dbeta)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(c: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::full(&[c], 1.0), Tensor::zeros(&[c]))
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let x = Tensor::full(&[2, 3, 3, 2], 4.0);
        let (g, b) = affine(2);
        for mode in [NormMode::Batch, NormMode::Instance] {
            let y = normalize(&x, &g, &b, mode, None, true).unwrap();
            assert!(y.output.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn standardises_pair() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![-1.0, 1.0]).unwrap();
        let (g, b) = affine(1);
        let y = normalize(&x, &g, &b, NormMode::Batch, None, true).unwrap();
        let scale = 1.0 / (1.0 + NORM_EPS).sqrt();
        assert!((y.output.data()[0] + scale).abs() < 1e-12);
        assert!((y.output.data()[1] - scale).abs() < 1e-12);
        assert_eq!(y.batch_mean.unwrap(), vec![0.0]);
        assert_eq!(y.batch_var.unwrap(), vec![1.0]);
    }

    #[test]
    fn training_output_is_standardised() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[4, 5, 5, 3], 3.0, &mut rng).map(|v| v + 2.0);
        let (g, b) = affine(3);
        let y = normalize(&x, &g, &b, NormMode::Batch, None, true).unwrap().output;
        for ch in 0..3 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(3).copied().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_mode_is_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let one = Tensor::<f64>::randn(&[1, 4, 4, 2], 1.0, &mut rng);
        let two = Tensor::stack(&[one.slice_outer(0), one.slice_outer(0)]).unwrap();
        let (g, b) = affine(2);
        let y1 = normalize(&one, &g, &b, NormMode::Instance, None, true).unwrap().output;
        let y2 = normalize(&two, &g, &b, NormMode::Instance, None, true).unwrap().output;
        assert_eq!(y2.slice_outer(0), y1.slice_outer(0));
        assert_eq!(y2.slice_outer(1), y1.slice_outer(0));
    }

    #[test]
    fn inference_needs_running_stats_and_matching_channels() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        let (g, b) = affine(2);
        assert!(normalize(&x, &g, &b, NormMode::Batch, None, false).is_err());
        let stats = RunningStats::<f64>::new(2);
        let y = normalize(&x, &g, &b, NormMode::Batch, Some(&stats), false).unwrap();
        assert!(y.output.data().iter().all(|&v| v == 0.0));
        let (g3, b3) = affine(3);
        assert!(normalize(&x, &g3, &b3, NormMode::Batch, None, true).is_err());
    }

    #[test]
    fn running_stats_are_debiased() {
        let mut stats = RunningStats::<f64>::new(1);
        stats.update(&[2.0], &[3.0]);
        let (m, v) = stats.estimate();
        assert!((m[0] - 2.0).abs() < 1e-12 && (v[0] - 3.0).abs() < 1e-12);
        for _ in 0..50 {
            stats.update(&[2.0], &[3.0]);
        }
        let (m, _) = stats.estimate();
        assert!((m[0] - 2.0).abs() < 1e-12);
    }
}

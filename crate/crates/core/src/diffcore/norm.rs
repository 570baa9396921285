use super::tape::{Op, Var};
use super::{Real, Tape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Statistics source for [`Tape::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalise with the statistics of the current batch.
    Train,
    /// Normalise with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel batch statistics produced in train mode, used to update the
/// running averages. `var` is the unbiased estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// Exponential moving average: `running = (1 - momentum) * running + momentum * batch`.
    pub fn fold_into(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

impl<T: Real> Tape<T> {
    /// Per-channel standardisation of `input [N,C,H,W]` followed by the
    /// affine map `gamma * xhat + beta`.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(input).nchw()?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).numel() != c {
                return Err(dim_err(
                    name,
                    format!("expected {c} values, got dims {:?}", self.value(v).dims()),
                ));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateVariance(count));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for sample in 0..n {
                        let off = (sample * c + ch) * plane;
                        s += x[off..off + plane].iter().copied().sum::<T>();
                    }
                    let m = s / T::lit(count as f64);
                    let mut sq = T::zero();
                    for sample in 0..n {
                        let off = (sample * c + ch) * plane;
                        sq += x[off..off + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::lit(count as f64);
                }
                let unbiased = T::lit(count as f64 / (count - 1) as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.iter().map(|&v| v * unbiased).collect(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err("running_stats", format!("expected {c} channels")));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for sample in 0..n {
            for ch in 0..c {
                let off = (sample * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: matches!(mode, BnMode::Train),
            },
            &[input, gamma, beta],
        );
        Ok((var, stats))
    }
}

pub(crate) fn batch_norm_backward<T: Real>(
    tape: &Tape<T>,
    (input, gamma, beta): (Var, Var, Var),
    xhat: &[T],
    inv_std: &[T],
    batch_stats: bool,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let dims = tape.value(input).dims();
    let (n, c, plane) = (dims[0], dims[1], dims[2] * dims[3]);
    let count = T::lit((n * plane) as f64);
    let g = tape.value(gamma).data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for sample in 0..n {
        for ch in 0..c {
            let off = (sample * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += grad[i];
                dgamma[ch] += grad[i] * xhat[i];
            }
        }
    }

    let mut out = Vec::new();
    if tape.needs(input) {
        let mut dx = vec![T::zero(); grad.len()];
        for sample in 0..n {
            for ch in 0..c {
                let off = (sample * c + ch) * plane;
                let scale = g[ch] * inv_std[ch];
                for i in off..off + plane {
                    dx[i] = if batch_stats {
                        scale / count * (count * grad[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                    } else {
                        scale * grad[i]
                    };
                }
            }
        }
        out.push((input, dx));
    }
    if tape.needs(gamma) {
        out.push((gamma, dgamma));
    }
    if tape.needs(beta) {
        out.push((beta, dbeta));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affine(tape: &mut Tape<f64>, c: usize) -> (Var, Var) {
        let gamma = tape.constant(Tensor::full(&[c], 1.0));
        let beta = tape.constant(Tensor::zeros(&[c]));
        (gamma, beta)
    }

    #[test]
    fn constant_input_normalises_to_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 3, 2, 2], 3.7));
        let gamma = tape.constant(Tensor::full(&[3], 1.0));
        let beta = tape.constant(Tensor::zeros(&[3]));
        let (y, _) = tape.batch_norm(x, gamma, beta, 1e-5, BnMode::Train).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 1e-3));
    }

    #[test]
    fn matches_two_pass_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::uniform(&[3, 2, 3, 4], -2.0, 5.0, &mut rng);
        let (n, c, h, w) = x.nchw().unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (gamma, beta) = affine(&mut tape, c);
        let (y, stats) = tape.batch_norm(xv, gamma, beta, 1e-5, BnMode::Train).unwrap();
        let stats = stats.unwrap();
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|s| (0..h).flat_map(move |i| (0..w).map(move |j| (s, i, j))))
                .map(|(s, i, j)| x.at4(s, ch, i, j))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let unbiased = var * vals.len() as f64 / (vals.len() - 1) as f64;
            assert!((stats.mean[ch] - mean).abs() < 1e-5);
            assert!((stats.var[ch] - unbiased).abs() < 1e-5);
            let mut out_mean = 0.0;
            let mut out_sq = 0.0;
            for s in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        let expected = (x.at4(s, ch, i, j) - mean) / (var + 1e-5).sqrt();
                        let got = tape.value(y).at4(s, ch, i, j);
                        assert!((got - expected).abs() < 1e-5);
                        out_mean += got;
                        out_sq += got * got;
                    }
                }
            }
            let m = vals.len() as f64;
            assert!((out_mean / m).abs() < 1e-6);
            assert!((out_sq / m - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_element_batch_is_degenerate_in_train_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
        let (gamma, beta) = affine(&mut tape, 2);
        let err = tape.batch_norm(x, gamma, beta, 1e-5, BnMode::Train).unwrap_err();
        assert!(matches!(err, Error::DegenerateVariance(1)));
        let mean = [0.0, 0.0];
        let var = [1.0, 1.0];
        assert!(tape
            .batch_norm(x, gamma, beta, 1e-5, BnMode::Eval { mean: &mean, var: &var })
            .is_ok());
    }

    #[test]
    fn running_stats_follow_ema() {
        let stats = BatchStats {
            mean: vec![1.0f64],
            var: vec![3.0],
        };
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        stats.fold_into(&mut rm, &mut rv, 0.1);
        assert!((rm[0] - 0.1).abs() < 1e-12);
        assert!((rv[0] - 1.2).abs() < 1e-12);
    }
}

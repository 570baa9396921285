use super::tape::{Op, Var};
use super::{Real, Tape, Tensor};
use crate::error::Result;

/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` before the log.
pub const LOG_CLAMP: f64 = 1e-7;

fn tv_value<T: Real>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> T {
    let mut acc = T::zero();
    for plane in x.chunks(h * w).take(n * c) {
        for i in 0..h {
            for j in 0..w {
                let v = plane[i * w + j];
                if j + 1 < w {
                    acc += (plane[i * w + j + 1] - v).abs();
                }
                if i + 1 < h {
                    acc += (plane[(i + 1) * w + j] - v).abs();
                }
            }
        }
    }
    acc / T::lit((n * c * h * w) as f64)
}

fn sign<T: Real>(d: T) -> T {
    if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Real> Tape<T> {
    /// Anisotropic L1 total variation of `image [N,C,H,W]`, normalised by
    /// the pixel count `N*C*H*W`.
    pub fn total_variation(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).nchw()?;
        let v = tv_value(self.value(input).data(), n, c, h, w);
        Ok(self.push(Tensor::scalar(v), Op::TotalVariation { input }, &[input]))
    }

    /// `-mean(log d)` over clamped probabilities.
    pub fn bce_real(&mut self, probs: Var) -> Var {
        self.bce(probs, true)
    }

    /// `-mean(log(1 - d))` over clamped probabilities.
    pub fn bce_fake(&mut self, probs: Var) -> Var {
        self.bce(probs, false)
    }

    fn bce(&mut self, input: Var, real: bool) -> Var {
        let eps = T::lit(LOG_CLAMP);
        let hi = T::one() - eps;
        let d = self.value(input).data();
        let total = d
            .iter()
            .map(|&p| {
                let p = p.max(eps).min(hi);
                if real {
                    p.ln()
                } else {
                    (T::one() - p).ln()
                }
            })
            .sum::<T>();
        let v = -total / T::lit(d.len() as f64);
        self.push(Tensor::scalar(v), Op::Bce { input, real }, &[input])
    }
}

pub(crate) fn total_variation_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    g: T,
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input);
    let (n, c, h, w) = x.nchw().expect("checked in forward");
    let scale = g / T::lit((n * c * h * w) as f64);
    let data = x.data();
    let mut dx = vec![T::zero(); data.len()];
    for (p, plane) in data.chunks(h * w).enumerate() {
        let off = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let here = i * w + j;
                if j + 1 < w {
                    let s = sign(plane[here + 1] - plane[here]) * scale;
                    dx[off + here + 1] += s;
                    dx[off + here] -= s;
                }
                if i + 1 < h {
                    let s = sign(plane[here + w] - plane[here]) * scale;
                    dx[off + here + w] += s;
                    dx[off + here] -= s;
                }
            }
        }
    }
    vec![(input, dx)]
}

pub(crate) fn bce_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    real: bool,
    g: T,
) -> Vec<(Var, Vec<T>)> {
    let eps = T::lit(LOG_CLAMP);
    let hi = T::one() - eps;
    let d = tape.value(input).data();
    let n = T::lit(d.len() as f64);
    let dx = d
        .iter()
        .map(|&p| {
            if p < eps || p > hi {
                T::zero()
            } else if real {
                -g / (n * p)
            } else {
                g / (n * (T::one() - p))
            }
        })
        .collect();
    vec![(input, dx)]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tv(dims: &[usize], data: Vec<f64>) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(dims, data).unwrap());
        let t = tape.total_variation(x).unwrap();
        tape.scalar(t)
    }

    fn bce(data: Vec<f64>, real: bool) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[data.len()], data).unwrap());
        let l = if real { tape.bce_real(x) } else { tape.bce_fake(x) };
        tape.scalar(l)
    }

    #[test]
    fn tv_hand_values() {
        assert_eq!(tv(&[1, 2, 3, 3], vec![0.25; 18]), 0.0);
        assert!((tv(&[1, 1, 1, 2], vec![0.3, -0.5]) - 0.4).abs() < 1e-12);
        assert!((tv(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce(vec![0.5; 5], true) - ln2).abs() < 1e-12);
        assert!((bce(vec![0.5; 5], false) - ln2).abs() < 1e-12);
        assert!(bce(vec![1.0 - 1e-9; 3], true) < 1e-6);
        let expected = -(0.9f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((bce(vec![0.9, 0.6], true) - expected).abs() < 1e-12);
        assert!((expected - 0.308).abs() < 1e-3);
    }

    #[test]
    fn bce_clamps_instead_of_diverging() {
        assert!(bce(vec![0.0], true).is_finite());
        assert!(bce(vec![1.0], false).is_finite());
    }
}

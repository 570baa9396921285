use super::tape::{Op, Var};
use super::{Real, Tape, Tensor};
use crate::error::{dim_err, Error, Result};

/// Element-wise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::lit(slope)
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => {
                if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                }
            }
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::lit(slope)
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn activation(&mut self, input: Var, kind: Activation) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::new(x.dims(), data).expect("same extents");
        self.push(value, Op::Activation { input, kind }, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    /// Joins `a [N,Ca,H,W]` and `b [N,Cb,H,W]` into `[N,Ca+Cb,H,W]`, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).nchw()?;
        let (nb, cb, hb, wb) = self.value(b).nchw()?;
        for (axis, x, y) in [("batch", n, nb), ("height", h, hb), ("width", w, wb)] {
            if x != y {
                return Err(dim_err(axis, format!("concat operands disagree: {x} vs {y}")));
            }
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Stacks `parts` along the leading axis; trailing extents must agree.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_batch needs at least one operand".into()))?;
        let dims = self.value(*first).dims().to_vec();
        if dims.is_empty() {
            return Err(dim_err("batch", "cannot concatenate scalars"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &v in parts {
            let t = self.value(v);
            if t.dims().len() != dims.len() || t.dims()[1..] != dims[1..] {
                return Err(dim_err(
                    "batch",
                    format!("concat operands disagree: {:?} vs {:?}", t.dims(), dims),
                ));
            }
            lead += t.dims()[0];
            data.extend_from_slice(t.data());
        }
        let mut out_dims = dims;
        out_dims[0] = lead;
        let value = Tensor::new(&out_dims, data)?;
        Ok(self.push(value, Op::ConcatBatch { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        let lead = *x.dims().first().ok_or_else(|| dim_err("batch", "cannot narrow a scalar"))?;
        if len == 0 || start + len > lead {
            return Err(dim_err(
                "batch",
                format!("rows {start}..{} outside 0..{lead}", start + len),
            ));
        }
        let row = x.numel() / lead;
        let mut dims = x.dims().to_vec();
        dims[0] = len;
        let value = Tensor::new(&dims, x.data()[start * row..(start + len) * row].to_vec())?;
        Ok(self.push(
            value,
            Op::NarrowBatch {
                input,
                offset: start * row,
            },
            &[input],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.dims() != tb.dims() {
            return Err(dim_err(
                "add",
                format!("operands {:?} and {:?} differ", ta.dims(), tb.dims()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.dims(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(x.dims(), data).expect("same extents");
        self.push(value, Op::Scale { input, factor }, &[input])
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().copied().sum::<T>() / T::lit(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    /// `sum(input * weights)` with constant weights.
    pub fn dot(&mut self, input: Var, weights: &[T]) -> Result<Var> {
        let x = self.value(input);
        if x.numel() != weights.len() {
            return Err(dim_err(
                "weights",
                format!("{} weights for {} values", weights.len(), x.numel()),
            ));
        }
        let s = x.data().iter().zip(weights).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            &[input],
        ))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }
}

pub(crate) fn activation_backward<T: Real>(
    tape: &Tape<T>,
    input: Var,
    output: &Tensor<T>,
    kind: Activation,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let x = tape.value(input).data();
    let dx = x
        .iter()
        .zip(output.data())
        .zip(grad)
        .map(|((&xi, &yi), &g)| g * kind.derivative(xi, yi))
        .collect();
    vec![(input, dx)]
}

pub(crate) fn concat_batch_backward<T: Real>(tape: &Tape<T>, parts: &[Var], grad: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut out = Vec::new();
    let mut at = 0;
    for &v in parts {
        let n = tape.value(v).numel();
        if tape.needs(v) {
            out.push((v, grad[at..at + n].to_vec()));
        }
        at += n;
    }
    out
}

pub(crate) fn narrow_batch_backward<T: Real>(tape: &Tape<T>, input: Var, offset: usize, grad: &[T]) -> Vec<(Var, Vec<T>)> {
    let mut g = vec![T::zero(); tape.value(input).numel()];
    g[offset..offset + grad.len()].copy_from_slice(grad);
    vec![(input, g)]
}

pub(crate) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    grad: &[T],
) -> Vec<(Var, Vec<T>)> {
    let da = tape.value(a).dims();
    let db = tape.value(b).dims();
    let (n, ca, cb, plane) = (da[0], da[1], db[1], da[2] * da[3]);
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    for s in 0..n {
        let base = s * (ca + cb) * plane;
        ga.extend_from_slice(&grad[base..base + ca * plane]);
        gb.extend_from_slice(&grad[base + ca * plane..base + (ca + cb) * plane]);
    }
    let mut out = Vec::new();
    if tape.needs(a) {
        out.push((a, ga));
    }
    if tape.needs(b) {
        out.push((b, gb));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_fixed_values() {
        assert_eq!(Activation::Tanh.apply(0.0f64), 0.0);
        assert!((Activation::LeakyRelu(0.2).apply(-1.0f64) + 0.2).abs() < 1e-15);
        assert_eq!(Activation::Sigmoid.apply(0.0f64), 0.5);
        assert_eq!(Activation::Relu.apply(-3.0f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let hi = Activation::Sigmoid.apply(100.0f32);
        let lo = Activation::Sigmoid.apply(-100.0f32);
        assert!(hi.is_finite() && lo.is_finite());
        assert!(hi <= 1.0 && lo >= 0.0);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[4]));
        let y = tape.tanh(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn concat_layout_and_gradient_split() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[1, 3, 4, 4], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[1, 7, 4, 4], |i| -(i as f64)));
        let y = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 10, 4, 4]);
        for j in 0..7 {
            for (h, w) in [(0, 0), (3, 2)] {
                assert_eq!(
                    tape.value(y).at4(0, 3 + j, h, w),
                    tape.value(b).at4(0, j, h, w)
                );
            }
        }
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().iter().all(|&g| g == 1.0));
        assert!(tape.grad(b).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn batch_concat_then_narrow_recovers_parts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 3], |i| 10.0 + i as f64));
        let y = tape.concat_batch(&[a, b, a]).unwrap();
        assert_eq!(tape.value(y).dims(), &[5, 3]);
        let mid = tape.narrow_batch(y, 2, 1).unwrap();
        assert_eq!(tape.value(mid).data(), tape.value(b).data());
        let tail = tape.narrow_batch(y, 3, 2).unwrap();
        assert_eq!(tape.value(tail).data(), tape.value(a).data());
        // `a` appears twice in the concat but only its second copy is kept.
        let s = tape.sum(tail);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn batch_ops_reject_bad_extents() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(tape.concat_batch(&[a, b]).is_err());
        assert!(tape.concat_batch(&[]).is_err());
        assert!(tape.narrow_batch(a, 1, 2).is_err());
        assert!(tape.narrow_batch(a, 0, 0).is_err());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 3, 4, 5]));
        let err = tape.concat_channels(a, b).unwrap_err().to_string();
        assert!(err.contains("width"), "{err}");
    }
}

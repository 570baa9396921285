//! Finite-difference audit of every differentiable operation and of both
//! discriminator networks, in 64-bit precision.
//!
//! Each case projects its output onto fixed random weights so that every
//! output coordinate contributes to the checked scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::age::{AgeGroup, NUM_GROUPS};
use crate::datagen::derive_seed;
use crate::diffcore::gradcheck::{check_gradients, GradCheck, FD_STEP, REL_TOL};
use crate::diffcore::{Activation, BnMode, Tape, Tensor, Var};
use crate::discriminators::{AgeDiscriminator, DiscriminatorConfig, TransitionDiscriminator, LEAKY_SLOPE};
use crate::error::Result;
use crate::nn::{Bound, Ctx, ParamStore, ResidualBlock};

/// Random instances per case.
pub const INSTANCES: usize = 3;
/// Coordinates probed per input tensor.
pub const MAX_COORDS: usize = 24;
/// Spatial extent for the full-network cases.
pub const NETWORK_SIZE: usize = 8;
/// Shared stack depth at [`NETWORK_SIZE`]; one more would shrink below 1x1.
/// Images per network instance. The last stacked layer is 1x1 at S = 8, so
/// batch norm there normalises `NETWORK_BATCH` values per channel; with 3
/// the curvature occasionally pushes central differences at the pinned step
/// past tolerance.
pub const NETWORK_BATCH: usize = 4;
pub const NETWORK_STACK_LAYERS: usize = 3;

/// Worst relative error of one case over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    /// Probes discarded for straddling a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= REL_TOL
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

/// Names of all cases, in execution order.
pub const CASES: &[&str] = &[
    "conv2d",
    "deconv2d",
    "relu",
    "leaky_relu",
    "tanh",
    "sigmoid",
    "batch_norm",
    "concat_channels",
    "concat_batch",
    "narrow_batch",
    "add",
    "scale",
    "residual_block",
    "total_variation",
    "bce_real",
    "bce_fake",
    "age_discriminator",
    "transition_discriminator",
];

fn case_fn(name: &str) -> Case {
    match name {
        "conv2d" => conv_case,
        "deconv2d" => deconv_case,
        "relu" => |r| activation_case(r, Activation::Relu),
        "leaky_relu" => |r| activation_case(r, Activation::LeakyRelu(LEAKY_SLOPE)),
        "tanh" => |r| activation_case(r, Activation::Tanh),
        "sigmoid" => |r| activation_case(r, Activation::Sigmoid),
        "batch_norm" => batch_norm_case,
        "concat_channels" => concat_case,
        "concat_batch" => concat_batch_case,
        "narrow_batch" => narrow_case,
        "add" => add_case,
        "scale" => scale_case,
        "residual_block" => residual_case,
        "total_variation" => tv_case,
        "bce_real" => |r| bce_case(r, true),
        "bce_fake" => |r| bce_case(r, false),
        "age_discriminator" => age_disc_case,
        "transition_discriminator" => trans_disc_case,
        other => unreachable!("unknown case {other}"),
    }
}

/// Runs every case with `INSTANCES` random instances each.
pub fn run_suite(seed: u64) -> Result<Vec<CaseReport>> {
    CASES.iter().map(|name| run_case(name, seed)).collect()
}

pub fn run_case(name: &'static str, seed: u64) -> Result<CaseReport> {
    let f = case_fn(name);
    let idx = CASES.iter().position(|c| *c == name).expect("known case") as u64;
    let mut report = CaseReport {
        name,
        instances: 0,
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for k in 0..INSTANCES as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, idx, k));
        let r = f(&mut rng)?;
        report.instances += 1;
        report.checked += r.checked;
        report.skipped += r.skipped;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::uniform(dims, -1.0, 1.0, rng)
}

/// Uniform values kept at least 0.05 away from zero, so that piecewise
/// linear activations are differentiable within the probe step.
fn off_kink(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, dims);
    for v in t.data_mut() {
        *v = v.signum() * (0.05 + 0.95 * v.abs());
    }
    t
}

fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.dot(out, &w)
}

fn check(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let proj_seed: u64 = rng.random();
    check_gradients(inputs, FD_STEP, MAX_COORDS, rng, |tape, v| {
        let out = f(tape, v)?;
        project(tape, out, proj_seed)
    })
}

fn conv_shape(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    let n = rng.random_range(1..=2);
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..k);
    let size = rng.random_range(k.max(3)..=6);
    (n, cin, cout, k, stride, pad, size)
}

fn conv_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (n, cin, cout, k, stride, pad, size) = conv_shape(rng);
    let inputs = [uniform(rng, &[n, cin, size, size]), uniform(rng, &[cout, cin, k, k]), uniform(rng, &[cout])];
    check(rng, &inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn deconv_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let (n, cin, cout, k, stride, pad, size) = conv_shape(rng);
    let pad = pad.min(k - 1);
    let inputs = [uniform(rng, &[n, cin, size, size]), uniform(rng, &[cin, cout, k, k]), uniform(rng, &[cout])];
    check(rng, &inputs, |t, v| t.deconv2d(v[0], v[1], Some(v[2]), stride, pad))
}

fn image_dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(2..=5),
        rng.random_range(2..=5),
    ]
}

fn activation_case(rng: &mut ChaCha8Rng, kind: Activation) -> Result<GradCheck> {
    let dims = image_dims(rng);
    let mut x = off_kink(rng, &dims);
    x.data_mut().iter_mut().for_each(|v| *v *= 3.0);
    check(rng, &[x], |t, v| Ok(t.activation(v[0], kind)))
}

fn batch_norm_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let [n, c, h, w] = image_dims(rng);
    let n = n.max(2);
    let normal = Normal::new(1.0, 0.3).expect("valid std");
    let gamma = Tensor::from_fn(&[c], |_| normal.sample(rng));
    let inputs = [uniform(rng, &[n, c, h, w]), gamma, uniform(rng, &[c])];
    check(rng, &inputs, |t, v| Ok(t.batch_norm(v[0], v[1], v[2], 1e-5, BnMode::Train)?.0))
}

fn concat_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let [n, ca, h, w] = image_dims(rng);
    let cb = rng.random_range(1..=3);
    let inputs = [uniform(rng, &[n, ca, h, w]), uniform(rng, &[n, cb, h, w])];
    check(rng, &inputs, |t, v| t.concat_channels(v[0], v[1]))
}

fn concat_batch_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let [na, c, h, w] = image_dims(rng);
    let nb = rng.random_range(1..=3);
    let inputs = [uniform(rng, &[na, c, h, w]), uniform(rng, &[nb, c, h, w])];
    check(rng, &inputs, |t, v| t.concat_batch(&[v[0], v[1], v[0]]))
}

fn narrow_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let [_, c, h, w] = image_dims(rng);
    let n = rng.random_range(2..=4);
    let start = rng.random_range(0..n);
    let len = rng.random_range(1..=n - start);
    let x = uniform(rng, &[n, c, h, w]);
    check(rng, &[x], move |t, v| t.narrow_batch(v[0], start, len))
}

fn add_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let dims = image_dims(rng);
    let inputs = [uniform(rng, &dims), uniform(rng, &dims)];
    check(rng, &inputs, |t, v| t.add(v[0], v[1]))
}

fn scale_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let dims = image_dims(rng);
    let s = rng.random_range(-2.0..2.0);
    let x = uniform(rng, &dims);
    check(rng, &[x], move |t, v| Ok(t.scale(v[0], s)))
}

fn tv_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let dims = image_dims(rng);
    let x = uniform(rng, &dims);
    check(rng, &[x], |t, v| t.total_variation(v[0]))
}

fn bce_case(rng: &mut ChaCha8Rng, real: bool) -> Result<GradCheck> {
    let n = rng.random_range(1..=8);
    let p = Tensor::uniform(&[n], 0.05, 0.95, rng);
    check(rng, &[p], move |t, v| Ok(if real { t.bce_real(v[0]) } else { t.bce_fake(v[0]) }))
}

/// Store weights perturbed away from their small initial scale, so the
/// checked gradients are well above the relative-error floor.
fn spread_weights(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let normal = Normal::new(0.0, 0.3).expect("valid std");
    store
        .weights()
        .into_iter()
        .map(|mut t| {
            for v in t.data_mut() {
                *v += normal.sample(rng);
            }
            t
        })
        .collect()
}

fn residual_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let n = 2;
    let cin = rng.random_range(1..=3);
    let cout = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let size = 4;
    let mut store = ParamStore::<f64>::new();
    let block = ResidualBlock::new(&mut store, rng, "rb", cin, cout, stride, true, Activation::LeakyRelu(LEAKY_SLOPE))?;
    let mut inputs = vec![uniform(rng, &[n, cin, size, size])];
    inputs.extend(spread_weights(&store, rng));
    check(rng, &inputs, |t, v| {
        let bound = Bound::from_vars(&store, &v[1..])?;
        let mut ctx = Ctx::new(t, &store, &bound, true);
        block.forward(&mut ctx, v[0])
    })
}

fn network_config(rng: &mut ChaCha8Rng) -> DiscriminatorConfig {
    DiscriminatorConfig {
        image_size: NETWORK_SIZE,
        base_channels: rng.random_range(2..=4),
        num_stack_layers: NETWORK_STACK_LAYERS,
        batch_norm: true,
    }
}

fn random_groups(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<AgeGroup> {
    (0..n)
        .map(|_| AgeGroup::new(rng.random_range(0..max)).expect("in range"))
        .collect()
}

fn age_disc_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let cfg = network_config(rng);
    let d = AgeDiscriminator::<f64>::new(&cfg, rng.random())?;
    let n = NETWORK_BATCH;
    let groups = random_groups(rng, n, NUM_GROUPS);
    let mut inputs = vec![uniform(rng, &[n, 3, NETWORK_SIZE, NETWORK_SIZE])];
    inputs.extend(spread_weights(&d.params, rng));
    check(rng, &inputs, |t, v| {
        let bound = Bound::from_vars(&d.params, &v[1..])?;
        let mut ctx = Ctx::new(t, &d.params, &bound, true);
        d.forward(&mut ctx, v[0], &groups)
    })
}

fn trans_disc_case(rng: &mut ChaCha8Rng) -> Result<GradCheck> {
    let cfg = network_config(rng);
    let d = TransitionDiscriminator::<f64>::new(&cfg, rng.random())?;
    let n = NETWORK_BATCH;
    let groups = random_groups(rng, n, NUM_GROUPS - 1);
    let dims = [n, 3, NETWORK_SIZE, NETWORK_SIZE];
    let mut inputs = vec![uniform(rng, &dims), uniform(rng, &dims)];
    inputs.extend(spread_weights(&d.params, rng));
    check(rng, &inputs, |t, v| {
        let bound = Bound::from_vars(&d.params, &v[2..])?;
        let mut ctx = Ctx::new(t, &d.params, &bound, true);
        d.forward(&mut ctx, v[0], v[1], &groups)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        for r in run_suite(7).unwrap() {
            assert_eq!(r.instances, INSTANCES);
            assert!(r.checked > 0);
            assert!(r.passed(), "{} max relative error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn cases_are_deterministic() {
        assert_eq!(run_case("conv2d", 3).unwrap(), run_case("conv2d", 3).unwrap());
    }
}

//! Conditional transformation network: an encoder of stride-2 residual
//! stages, a residual body, and a transposed-convolution decoder that fuses
//! same-resolution encoder features through skip connections.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::age::{encode_ages, AgeGroup, NUM_GROUPS};
use crate::diffcore::{Activation, Real, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{BatchNorm, Bound, Conv, ConvUnit, Ctx, Deconv, ParamStore, ResidualBlock};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub num_down_stages: usize,
    pub num_body_blocks: usize,
    pub batch_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            num_down_stages: 3,
            num_body_blocks: 2,
            batch_norm: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.num_down_stages == 0 {
            return Err(Error::Config(
                "generator needs at least one channel and one downsampling stage".into(),
            ));
        }
        let factor = 1usize << self.num_down_stages;
        if self.image_size < factor || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{} = {factor}",
                self.image_size, self.num_down_stages
            )));
        }
        Ok(())
    }

    /// Channel count of encoder feature `i` (0 = stem output).
    fn feature_channels(&self, i: usize) -> usize {
        self.base_channels << i.saturating_sub(1)
    }

    /// Spatial extents of the cached encoder features, stem first.
    pub fn feature_sizes(&self) -> Vec<usize> {
        (0..=self.num_down_stages).map(|i| self.image_size >> i).collect()
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    deconv: Deconv,
    bn: Option<BatchNorm>,
    fuse: ConvUnit,
}

/// Generator parameters together with the layer wiring that consumes them.
#[derive(Clone, Debug)]
pub struct Generator<T: Real = f32> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    stem: ConvUnit,
    down: Vec<ResidualBlock>,
    body: Vec<ResidualBlock>,
    up: Vec<UpStage>,
    out: Conv,
}

/// Allocates and initialises a generator; deterministic in `seed`.
pub fn build_generator<T: Real>(config: &GeneratorConfig, seed: u64) -> Result<Generator<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bn = config.batch_norm;
    let relu = Some(Activation::Relu);
    let base = config.base_channels;

    let stem = ConvUnit::new(&mut store, &mut rng, "stem", 3 + NUM_GROUPS, base, 7, 1, 3, bn, relu);
    let mut down = Vec::new();
    for i in 1..=config.num_down_stages {
        down.push(ResidualBlock::new(
            &mut store,
            &mut rng,
            &format!("down{i}"),
            config.feature_channels(i - 1),
            config.feature_channels(i),
            2,
            bn,
            Activation::Relu,
        )?);
    }
    let deepest = config.feature_channels(config.num_down_stages);
    let mut body = Vec::new();
    for i in 0..config.num_body_blocks {
        body.push(ResidualBlock::new(
            &mut store,
            &mut rng,
            &format!("body{i}"),
            deepest,
            deepest,
            1,
            bn,
            Activation::Relu,
        )?);
    }
    let mut up = Vec::new();
    let mut cur = deepest;
    for j in (0..config.num_down_stages).rev() {
        let skip = config.feature_channels(j);
        let name = format!("up{j}");
        let deconv = Deconv::new(&mut store, &mut rng, &format!("{name}.deconv"), cur, skip, 4, 2, 1, !bn);
        let dbn = bn.then(|| BatchNorm::new(&mut store, &format!("{name}.bn"), skip));
        let fuse = ConvUnit::new(&mut store, &mut rng, &format!("{name}.fuse"), 2 * skip, skip, 3, 1, 1, bn, relu);
        up.push(UpStage {
            deconv,
            bn: dbn,
            fuse,
        });
        cur = skip;
    }
    let out = Conv::new(&mut store, &mut rng, "out", cur, 3, 7, 1, 3, true);
    Ok(Generator {
        config: config.clone(),
        params: store,
        stem,
        down,
        body,
        up,
        out,
    })
}

impl<T: Real> Generator<T> {
    pub fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    /// Same wiring with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            down: self.down.clone(),
            body: self.body.clone(),
            up: self.up.clone(),
            out: self.out.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>, groups: &[AgeGroup]) -> Result<usize> {
        let (n, c, h, w) = x.nchw()?;
        let s = self.config.image_size;
        if c != 3 {
            return Err(dim_err("channels", format!("expected 3 image channels, got {c}")));
        }
        if h != s || w != s {
            return Err(Error::Contract(format!(
                "generator expects {s}x{s} images, got {h}x{w}"
            )));
        }
        if groups.len() != n && groups.len() != 1 {
            return Err(dim_err(
                "batch",
                format!("{} target groups for a batch of {n}", groups.len()),
            ));
        }
        Ok(n)
    }

    /// Records `G(x, groups)` on the context's tape. `groups` holds one
    /// target per sample, or a single target for the whole batch.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, groups: &[AgeGroup]) -> Result<Var> {
        let n = self.check_input(ctx.tape.value(x), groups)?;
        let s = self.config.image_size;
        let targets: Vec<AgeGroup> = if groups.len() == n {
            groups.to_vec()
        } else {
            vec![groups[0]; n]
        };
        let label = ctx.tape.constant(encode_ages(&targets, s, s)?);
        let input = ctx.tape.concat_channels(x, label)?;

        let mut feats = vec![self.stem.forward(ctx, input)?];
        for stage in &self.down {
            let prev = *feats.last().expect("stem feature");
            feats.push(stage.forward(ctx, prev)?);
        }
        let mut h = *feats.last().expect("encoder output");
        for block in &self.body {
            h = block.forward(ctx, h)?;
        }
        for (stage, skip) in self.up.iter().zip(feats.iter().rev().skip(1)) {
            h = stage.deconv.forward(ctx, h)?;
            if let Some(bn) = &stage.bn {
                h = bn.forward(ctx, h)?;
            }
            h = ctx.tape.relu(h);
            h = ctx.tape.concat_channels(h, *skip)?;
            h = stage.fuse.forward(ctx, h)?;
        }
        let h = self.out.forward(ctx, h)?;
        Ok(ctx.tape.tanh(h))
    }

    /// Inference: generated images for `x [N,3,S,S]` in `[-1,1]`, using
    /// running batch-norm statistics. Parameters are not modified.
    pub fn generate(&self, x: &Tensor<T>, groups: &[AgeGroup]) -> Result<Tensor<T>> {
        self.check_input(x, groups)?;
        let tol = T::lit(1e-6);
        if x.data().iter().any(|&v| !(v >= -T::one() - tol && v <= T::one() + tol)) {
            return Err(Error::Contract("generator input must lie in [-1, 1]".into()));
        }
        let mut tape = Tape::new();
        let bound: Bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, &self.params, &bound, false);
        let y = self.forward(&mut ctx, xv, groups)?;
        Ok(tape.value(y).clone())
    }
}

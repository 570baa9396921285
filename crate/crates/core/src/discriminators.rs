//! Age and transition discriminators.
//!
//! Both share one layout: an image entry convolution and a label entry
//! convolution whose outputs are concatenated, a stack of stride-2
//! convolutions with leaky ReLU, and a full-extent convolution to a single
//! logit followed by a sigmoid.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::age::{encode_ages, AgeGroup, NUM_GROUPS};
use crate::diffcore::{Activation, Real, Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::nn::{Bound, Conv, ConvUnit, Ctx, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    /// Number of stride-2 layers in the shared stack.
    pub num_stack_layers: usize,
    pub batch_norm: bool,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 32,
            num_stack_layers: 4,
            batch_norm: true,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 2 {
            return Err(Error::Config("discriminator base_channels must be at least 2".into()));
        }
        if self.num_stack_layers == 0 {
            return Err(Error::Config("discriminator needs at least one stack layer".into()));
        }
        let factor = 1usize << self.num_stack_layers;
        if self.image_size < factor || self.image_size % factor != 0 {
            return Err(Error::Config(format!(
                "image_size {} does not admit {} stride-2 layers",
                self.image_size, self.num_stack_layers
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layout {
    image_entry: ConvUnit,
    label_entry: ConvUnit,
    stack: Vec<ConvUnit>,
    head: Conv,
}

impl Layout {
    fn build<T: Real>(cfg: &DiscriminatorConfig, image_channels: usize, seed: u64, store: &mut ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaky = Some(Activation::LeakyRelu(LEAKY_SLOPE));
        let base = cfg.base_channels;
        let label_ch = base / 2;
        let image_ch = base - label_ch;
        let image_entry = ConvUnit::new(store, &mut rng, "image_entry", image_channels, image_ch, 3, 1, 1, false, leaky);
        let label_entry = ConvUnit::new(store, &mut rng, "label_entry", NUM_GROUPS, label_ch, 3, 1, 1, false, leaky);
        let mut stack = Vec::new();
        let mut cin = base;
        for i in 0..cfg.num_stack_layers {
            let cout = base << i;
            let bn = cfg.batch_norm && i > 0;
            stack.push(ConvUnit::new(store, &mut rng, &format!("stack{i}"), cin, cout, 4, 2, 1, bn, leaky));
            cin = cout;
        }
        let extent = cfg.image_size >> cfg.num_stack_layers;
        let head = Conv::new(store, &mut rng, "head", cin, 1, extent, 1, 0, true);
        Ok(Self {
            image_entry,
            label_entry,
            stack,
            head,
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var, groups: &[AgeGroup]) -> Result<Var> {
        let (n, _, h, w) = ctx.tape.value(image).nchw()?;
        if groups.len() != n {
            return Err(dim_err("batch", format!("{} labels for a batch of {n}", groups.len())));
        }
        let label = ctx.tape.constant(encode_ages(groups, h, w)?);
        let a = self.image_entry.forward(ctx, image)?;
        let b = self.label_entry.forward(ctx, label)?;
        let mut x = ctx.tape.concat_channels(a, b)?;
        for unit in &self.stack {
            x = unit.forward(ctx, x)?;
        }
        let logit = self.head.forward(ctx, x)?;
        let logit = ctx.tape.reshape(logit, &[n])?;
        Ok(ctx.tape.sigmoid(logit))
    }

    fn zero_head<T: Real>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.head.weight).data_mut().fill(T::zero());
        if let Some(b) = self.head.bias {
            store.get_mut(b).data_mut().fill(T::zero());
        }
    }
}

fn check_images<T: Real>(x: &Tensor<T>, channels: usize, size: usize) -> Result<()> {
    let (_, c, h, w) = x.nchw()?;
    if c != channels {
        return Err(dim_err("channels", format!("expected {channels} channels, got {c}")));
    }
    if h != size || w != size {
        return Err(Error::Contract(format!(
            "discriminator expects {size}x{size} images, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Scores whether an image is a real face of the stated age group.
#[derive(Clone, Debug)]
pub struct AgeDiscriminator<T: Real = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Scores whether an (younger, older) pair is a real one-step transition
/// from group `y` to `y + 1`.
#[derive(Clone, Debug)]
pub struct TransitionDiscriminator<T: Real = f32> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

impl<T: Real> AgeDiscriminator<T> {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = Layout::build(config, 3, seed, &mut params)?;
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn cast<U: Real>(&self) -> AgeDiscriminator<U> {
        AgeDiscriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Sets the final layer to zero so every output is exactly 0.5.
    pub fn zero_head(&mut self) {
        self.layout.zero_head(&mut self.params);
    }

    /// Probabilities `[N]` for images `x [N,3,S,S]` labelled `groups`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, x: Var, groups: &[AgeGroup]) -> Result<Var> {
        check_images(ctx.tape.value(x), 3, self.config.image_size)?;
        self.layout.forward(ctx, x, groups)
    }

    /// Inference with running statistics.
    pub fn score(&self, x: &Tensor<T>, groups: &[AgeGroup]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound: Bound = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut ctx = Ctx::new(&mut tape, &self.params, &bound, false);
        let p = self.forward(&mut ctx, xv, groups)?;
        Ok(tape.value(p).data().to_vec())
    }
}

impl<T: Real> TransitionDiscriminator<T> {
    pub fn new(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let layout = Layout::build(config, 6, seed, &mut params)?;
        Ok(Self {
            config: config.clone(),
            params,
            layout,
        })
    }

    pub fn cast<U: Real>(&self) -> TransitionDiscriminator<U> {
        TransitionDiscriminator {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn zero_head(&mut self) {
        self.layout.zero_head(&mut self.params);
    }

    /// Probabilities `[N]` for pairs `(younger, older)`, each `[N,3,S,S]`,
    /// where `younger[i]` belongs to `groups[i]` and `groups[i] < 6`.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, younger: Var, older: Var, groups: &[AgeGroup]) -> Result<Var> {
        if let Some(g) = groups.iter().find(|g| g.succ().is_none()) {
            return Err(Error::Domain(format!("no older group follows {g}")));
        }
        let s = self.config.image_size;
        check_images(ctx.tape.value(younger), 3, s)?;
        check_images(ctx.tape.value(older), 3, s)?;
        let pair = ctx.tape.concat_channels(younger, older)?;
        self.layout.forward(ctx, pair, groups)
    }

    pub fn score(&self, younger: &Tensor<T>, older: &Tensor<T>, groups: &[AgeGroup]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound: Bound = self.params.bind(&mut tape, false);
        let y = tape.constant(younger.clone());
        let o = tape.constant(older.clone());
        let mut ctx = Ctx::new(&mut tape, &self.params, &bound, false);
        let p = self.forward(&mut ctx, y, o, groups)?;
        Ok(tape.value(p).data().to_vec())
    }
}

//! Named parameter storage and the layer building blocks shared by the
//! generator and both discriminators.

use rand::Rng;

use crate::diffcore::{Activation, AdamConfig, AdamState, BatchStats, BnMode, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard deviation of the zero-mean normal weight initialisation.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised by gradient descent.
    Weight,
    /// Carried state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors belonging to one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Param<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, tensor, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every tensor on `tape`. Weights become gradient leaves when
    /// `trainable`, constants otherwise; buffers are never bound.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight => Some(tape.leaf(p.tensor.clone(), trainable)),
                ParamKind::Buffer => None,
            })
            .collect();
        Bound { vars }
    }

    /// Adds the tape gradients of bound weights into their gradient slots.
    /// Weights unreachable from the loss receive an explicit zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) -> Result<()> {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            let Some(var) = var else { continue };
            match tape.grad(*var) {
                Some(g) => p.tensor.accumulate_grad(g)?,
                None => p.tensor.accumulate_grad(&vec![T::zero(); p.tensor.numel()])?,
            }
        }
        Ok(())
    }

    /// Clones of every weight tensor, in store order.
    pub fn weights(&self) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.tensor.clone())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, updates: Vec<StatUpdate<T>>) {
        let momentum = T::lit(BN_MOMENTUM);
        for u in updates {
            let mut mean = self.get(u.running_mean).data().to_vec();
            let mut var = self.get(u.running_var).data().to_vec();
            u.stats.fold_into(&mut mean, &mut var, momentum);
            self.get_mut(u.running_mean).data_mut().copy_from_slice(&mean);
            self.get_mut(u.running_var).data_mut().copy_from_slice(&var);
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    kind: p.kind,
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.is_finite())
    }
}

/// Tape handles for one [`ParamStore`] binding.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Binding whose weights are the given tape values, in the order of
    /// [`ParamStore::weights`].
    pub fn from_vars<T: Real>(store: &ParamStore<T>, weights: &[Var]) -> Result<Self> {
        let mut it = weights.iter();
        let vars = store
            .iter()
            .map(|p| match p.kind {
                ParamKind::Weight => it
                    .next()
                    .copied()
                    .map(Some)
                    .ok_or_else(|| Error::Contract("too few weight vars for store".into())),
                ParamKind::Buffer => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        if it.next().is_some() {
            return Err(Error::Contract("too many weight vars for store".into()));
        }
        Ok(Self { vars })
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound to the tape")
    }
}

/// Pending running-statistics update from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate<T> {
    running_mean: ParamId,
    running_var: ParamId,
    stats: BatchStats<T>,
}

/// Forward-pass context: the tape, the bound parameters, and the
/// batch-norm mode.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: &'a Bound,
    train: bool,
    stats: Vec<StatUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, bound: &'a Bound, train: bool) -> Self {
        Self {
            tape,
            store,
            bound,
            train,
            stats: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bound.var(id)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Batch statistics gathered so far; pass to [`ParamStore::apply_stats`].
    pub fn into_stats(self) -> Vec<StatUpdate<T>> {
        self.stats
    }
}

/// Adam state for every weight of one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamGroup<T: Real = f32> {
    pub states: Vec<Option<AdamState<T>>>,
}

impl<T: Real> AdamGroup<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        Self {
            states: store
                .iter()
                .map(|p| (p.kind == ParamKind::Weight).then(|| AdamState::for_param(&p.tensor)))
                .collect(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.states.iter().flatten().map(|s| s.step).max().unwrap_or(0)
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, cfg: &AdamConfig) -> Result<()> {
        for (p, st) in store.iter_mut().zip(&mut self.states) {
            let Some(st) = st else { continue };
            if p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of {}", p.name)));
            }
            st.step(&mut p.tensor, cfg)?;
        }
        Ok(())
    }
}

fn normal_init<T: Real, R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(dims, INIT_STD, rng)
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(&[cout, cin, kernel, kernel], rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight)
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed-convolution layer.
#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_init(&[cin, cout, kernel, kernel], rng),
            ParamKind::Weight,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), ParamKind::Weight)
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = self.bias.map(|b| ctx.var(b));
        ctx.tape.deconv2d(x, w, b, self.stride, self.pad)
    }
}

/// Batch normalisation with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Weight,
            ),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamKind::Weight),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Tensor::zeros(&[channels]),
                ParamKind::Buffer,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                ParamKind::Buffer,
            ),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (ctx.var(self.gamma), ctx.var(self.beta));
        let eps = T::lit(BN_EPS);
        if ctx.train {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, eps, BnMode::Train)?;
            ctx.stats.push(StatUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats: stats.expect("train mode yields statistics"),
            });
            Ok(y)
        } else {
            let mean = ctx.store.get(self.running_mean).data();
            let var = ctx.store.get(self.running_var).data();
            let (y, _) = ctx
                .tape
                .batch_norm(x, gamma, beta, eps, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }
}

fn maybe_bn<T: Real>(bn: &Option<BatchNorm>, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    match bn {
        Some(bn) => bn.forward(ctx, x),
        None => Ok(x),
    }
}

/// Conv followed by optional batch norm and an activation.
#[derive(Clone, Debug)]
pub struct ConvUnit {
    pub conv: Conv,
    pub bn: Option<BatchNorm>,
    pub act: Option<Activation>,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        batch_norm: bool,
        act: Option<Activation>,
    ) -> Self {
        // A bias ahead of batch norm is cancelled by the mean subtraction.
        let conv = Conv::new(store, rng, name, cin, cout, kernel, stride, pad, !batch_norm);
        let bn = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn"), cout));
        Self { conv, bn, act }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = maybe_bn(&self.bn, ctx, y)?;
        Ok(match self.act {
            Some(a) => ctx.tape.activation(y, a),
            None => y,
        })
    }
}

/// Two 3x3 convolutions with batch norm plus a shortcut; the first
/// convolution carries the stride. The shortcut is the identity unless the
/// stride or channel count changes, in which case it is a 1x1 projection.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: Option<BatchNorm>,
    pub conv2: Conv,
    pub bn2: Option<BatchNorm>,
    pub shortcut: Option<Conv>,
    pub act: Activation,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        batch_norm: bool,
        act: Activation,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("residual stride must be 1 or 2, got {stride}")));
        }
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, stride, 1, !batch_norm);
        let bn1 = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn1"), cout));
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, 1, 1, !batch_norm);
        let bn2 = batch_norm.then(|| BatchNorm::new(store, &format!("{name}.bn2"), cout));
        let shortcut = (stride != 1 || cin != cout)
            .then(|| Conv::new(store, rng, &format!("{name}.proj"), cin, cout, 1, stride, 0, true));
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
            act,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = maybe_bn(&self.bn1, ctx, h)?;
        let h = ctx.tape.activation(h, self.act);
        let h = self.conv2.forward(ctx, h)?;
        let h = maybe_bn(&self.bn2, ctx, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.activation(sum, self.act))
    }
}

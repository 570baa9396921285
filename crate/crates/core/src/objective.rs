//! Adversarial losses for both discriminators and the combined generator
//! objective with total-variation smoothing.

use std::fmt;
use std::str::FromStr;

use crate::age::AgeGroup;
use crate::diffcore::{Real, Tape, Var};
use crate::discriminators::{AgeDiscriminator, TransitionDiscriminator};
use crate::error::{Error, Result};
use crate::nn::Ctx;

/// Weight of each generated-pair term in the transition loss.
pub const FAKE_PAIR_WEIGHT: f64 = 0.5;
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Age discriminator and generator are refined.
    A,
    /// Transition discriminator and generator are refined.
    T,
}

impl Phase {
    pub fn of_iteration(iteration: u64) -> Self {
        if iteration % 2 == 0 {
            Phase::A
        } else {
            Phase::T
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::T => "T",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossStyle {
    /// Generator minimises `mean(log(1 - D))`.
    Minimax,
    /// Generator minimises `-mean(log D)`.
    #[default]
    NonSaturating,
}

impl FromStr for LossStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minimax" => Ok(Self::Minimax),
            "non_saturating" => Ok(Self::NonSaturating),
            other => Err(Error::Config(format!(
                "loss style must be minimax or non_saturating, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for LossStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Minimax => "minimax",
            Self::NonSaturating => "non_saturating",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// TV weight.
    pub lambda: f64,
    pub style: LossStyle,
    /// Generator uses both adversarial terms every iteration instead of only
    /// the active phase's term.
    pub g_uses_both_terms: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            style: LossStyle::default(),
            g_uses_both_terms: false,
        }
    }
}

/// Scalar losses of one training iteration. Terms not evaluated in the
/// iteration are zero.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub iteration: u64,
    pub phase: Option<Phase>,
    pub d_age_loss: f64,
    pub d_trans_loss: f64,
    pub g_adv_age: f64,
    pub g_adv_trans: f64,
    pub g_tv: f64,
    pub g_total: f64,
}

impl LossReport {
    /// Name and value of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("d_age_loss", self.d_age_loss),
            ("d_trans_loss", self.d_trans_loss),
            ("g_adv_age", self.g_adv_age),
            ("g_adv_trans", self.g_adv_trans),
            ("g_tv", self.g_tv),
            ("g_total", self.g_total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// `bce_real(real) + bce_fake(fake)` on discriminator probabilities.
pub fn d_age_loss<T: Real>(tape: &mut Tape<T>, real: Var, fake: Var) -> Result<Var> {
    let r = tape.bce_real(real);
    let f = tape.bce_fake(fake);
    tape.add(r, f)
}

/// `bce_real(real) + w * bce_fake(older_fake) + w * bce_fake(younger_fake)`.
fn weighted_trans_loss<T: Real>(tape: &mut Tape<T>, real: Var, older_fake: Var, younger_fake: Var, w: f64) -> Result<Var> {
    let r = tape.bce_real(real);
    let o = tape.bce_fake(older_fake);
    let y = tape.bce_fake(younger_fake);
    let o = tape.scale(o, T::lit(w));
    let y = tape.scale(y, T::lit(w));
    let f = tape.add(o, y)?;
    tape.add(r, f)
}

/// Transition loss on discriminator probabilities, fake terms weighted ½.
pub fn d_trans_loss<T: Real>(tape: &mut Tape<T>, real: Var, older_fake: Var, younger_fake: Var) -> Result<Var> {
    weighted_trans_loss(tape, real, older_fake, younger_fake, FAKE_PAIR_WEIGHT)
}

/// Generator adversarial term against probabilities `probs` of its fakes.
pub fn generator_adversarial<T: Real>(tape: &mut Tape<T>, probs: Var, style: LossStyle) -> Result<Var> {
    match style {
        LossStyle::NonSaturating => Ok(tape.bce_real(probs)),
        LossStyle::Minimax => {
            let l = tape.bce_fake(probs);
            Ok(tape.scale(l, -T::one()))
        }
    }
}

/// Inputs of the age term: real images with true groups and generated
/// images with their target groups.
#[derive(Clone, Debug)]
pub struct AgeTerm {
    pub real: Var,
    pub real_groups: Vec<AgeGroup>,
    pub fake: Var,
    pub targets: Vec<AgeGroup>,
}

/// Inputs of the transition term.
///
/// The older construction scores `(older_src, older_fake, y)` with
/// `older_fake = G(older_src, y + 1)` and `y` in `older_groups`. The younger
/// construction scores `(younger_fake, younger_src, y - 1)` with
/// `younger_fake = G(younger_src, y - 1)` and `y` in `younger_groups`.
#[derive(Clone, Debug)]
pub struct TransTerm {
    pub younger: Var,
    pub older: Var,
    pub groups: Vec<AgeGroup>,
    pub older_src: Var,
    pub older_fake: Var,
    pub older_groups: Vec<AgeGroup>,
    pub younger_src: Var,
    pub younger_fake: Var,
    pub younger_groups: Vec<AgeGroup>,
}

/// Target groups `y + 1` for the older construction.
pub fn older_targets(groups: &[AgeGroup]) -> Result<Vec<AgeGroup>> {
    groups
        .iter()
        .map(|g| g.succ().ok_or_else(|| Error::Domain(format!("older fake needs y <= 5, got {g}"))))
        .collect()
}

/// Target groups `y - 1` for the younger construction.
pub fn younger_targets(groups: &[AgeGroup]) -> Result<Vec<AgeGroup>> {
    groups
        .iter()
        .map(|g| g.pred().ok_or_else(|| Error::Domain(format!("younger fake needs y >= 1, got {g}"))))
        .collect()
}

/// Splits `probs` into consecutive runs of the given lengths.
fn split<T: Real>(tape: &mut Tape<T>, probs: Var, lens: &[usize]) -> Result<Vec<Var>> {
    let mut at = 0;
    lens.iter()
        .map(|&n| {
            let v = tape.narrow_batch(probs, at, n)?;
            at += n;
            Ok(v)
        })
        .collect()
}

fn lead<T: Real>(tape: &Tape<T>, v: Var) -> usize {
    tape.value(v).dims()[0]
}

/// Real and fake probabilities from one discriminator pass, so batch norm
/// sees real and generated images in the same batch. Separate passes would
/// let the discriminator separate the two by batch statistics alone.
fn age_probs<T: Real>(ctx: &mut Ctx<'_, T>, da: &AgeDiscriminator<T>, term: &AgeTerm) -> Result<(Var, Var)> {
    let lens = [lead(ctx.tape, term.real), lead(ctx.tape, term.fake)];
    let x = ctx.tape.concat_batch(&[term.real, term.fake])?;
    let groups = [term.real_groups.as_slice(), &term.targets].concat();
    let p = da.forward(ctx, x, &groups)?;
    let parts = split(ctx.tape, p, &lens)?;
    Ok((parts[0], parts[1]))
}

/// Age discriminator loss; `ctx` binds the discriminator's parameters.
pub fn loss_d_age<T: Real>(ctx: &mut Ctx<'_, T>, da: &AgeDiscriminator<T>, term: &AgeTerm) -> Result<Var> {
    let (pr, pf) = age_probs(ctx, da, term)?;
    d_age_loss(ctx.tape, pr, pf)
}

/// Probabilities of the real, older-fake and younger-fake pairs from one
/// discriminator pass.
fn trans_probs<T: Real>(ctx: &mut Ctx<'_, T>, dt: &TransitionDiscriminator<T>, term: &TransTerm) -> Result<(Var, Var, Var)> {
    older_targets(&term.older_groups)?;
    let yg = younger_targets(&term.younger_groups)?;
    let lens = [
        lead(ctx.tape, term.younger),
        lead(ctx.tape, term.older_src),
        lead(ctx.tape, term.younger_fake),
    ];
    let younger = ctx.tape.concat_batch(&[term.younger, term.older_src, term.younger_fake])?;
    let older = ctx.tape.concat_batch(&[term.older, term.older_fake, term.younger_src])?;
    let groups = [term.groups.as_slice(), &term.older_groups, &yg].concat();
    let p = dt.forward(ctx, younger, older, &groups)?;
    let parts = split(ctx.tape, p, &lens)?;
    Ok((parts[0], parts[1], parts[2]))
}

/// Transition discriminator loss; `ctx` binds the discriminator's parameters.
pub fn loss_d_trans<T: Real>(ctx: &mut Ctx<'_, T>, dt: &TransitionDiscriminator<T>, term: &TransTerm) -> Result<Var> {
    let (pr, po, py) = trans_probs(ctx, dt, term)?;
    d_trans_loss(ctx.tape, pr, po, py)
}

/// Scalar parts of the generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLoss {
    pub adv_age: f64,
    pub adv_trans: f64,
    pub tv: f64,
    pub total: f64,
}

/// Generator objective for `phase`.
///
/// Both discriminators are bound to `tape` as constants, so gradients reach
/// only the generator through the fake images. Each discriminator sees the
/// same real-plus-fake batch as in its own step; batch statistics are used
/// but not recorded.
pub fn loss_generator<T: Real>(
    tape: &mut Tape<T>,
    phase: Phase,
    da: &AgeDiscriminator<T>,
    dt: &TransitionDiscriminator<T>,
    age: Option<&AgeTerm>,
    trans: Option<&TransTerm>,
    cfg: &ObjectiveConfig,
) -> Result<(Var, GeneratorLoss)> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be a nonnegative real, got {}", cfg.lambda)));
    }
    let use_age = phase == Phase::A || cfg.g_uses_both_terms;
    let use_trans = phase == Phase::T || cfg.g_uses_both_terms;
    let mut parts: Vec<Var> = Vec::new();
    let mut tv_parts: Vec<Var> = Vec::new();
    let mut report = GeneratorLoss::default();

    if use_age {
        let term = age.ok_or_else(|| Error::Contract("age term required for this phase".into()))?;
        let bound = da.params.bind(tape, false);
        let mut ctx = Ctx::new(tape, &da.params, &bound, true);
        let (_, p) = age_probs(&mut ctx, da, term)?;
        let adv = generator_adversarial(tape, p, cfg.style)?;
        report.adv_age = tape.scalar(adv).as_f64();
        parts.push(adv);
        tv_parts.push(tape.total_variation(term.fake)?);
    }
    if use_trans {
        let term = trans.ok_or_else(|| Error::Contract("transition term required for this phase".into()))?;
        let bound = dt.params.bind(tape, false);
        let mut ctx = Ctx::new(tape, &dt.params, &bound, true);
        let (_, po, py) = trans_probs(&mut ctx, dt, term)?;
        let ao = generator_adversarial(tape, po, cfg.style)?;
        let ay = generator_adversarial(tape, py, cfg.style)?;
        let ao = tape.scale(ao, T::lit(FAKE_PAIR_WEIGHT));
        let ay = tape.scale(ay, T::lit(FAKE_PAIR_WEIGHT));
        let adv = tape.add(ao, ay)?;
        report.adv_trans = tape.scalar(adv).as_f64();
        parts.push(adv);
        tv_parts.push(tape.total_variation(term.older_fake)?);
        tv_parts.push(tape.total_variation(term.younger_fake)?);
    }

    let mut tv = tv_parts[0];
    for &v in &tv_parts[1..] {
        tv = tape.add(tv, v)?;
    }
    report.tv = tape.scalar(tv).as_f64();
    let mut total = tape.scale(tv, T::lit(cfg.lambda));
    for v in parts {
        total = tape.add(v, total)?;
    }
    report.total = tape.scalar(total).as_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::discriminators::DiscriminatorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    fn probs(tape: &mut Tape<f64>, p: &[f64]) -> Var {
        tape.constant(Tensor::new(&[p.len()], p.to_vec()).unwrap())
    }

    #[test]
    fn ignorant_fixed_points() {
        let mut tape = Tape::<f64>::new();
        let h = probs(&mut tape, &[0.5, 0.5, 0.5]);
        let a = d_age_loss(&mut tape, h, h).unwrap();
        assert!((tape.scalar(a) - 2.0 * LN2).abs() < 1e-12);
        let t = d_trans_loss(&mut tape, h, h, h).unwrap();
        assert!((tape.scalar(t) - 2.0 * LN2).abs() < 1e-12);
        let g = generator_adversarial(&mut tape, h, LossStyle::NonSaturating).unwrap();
        assert!((tape.scalar(g) - LN2).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_values() {
        let mut tape = Tape::<f64>::new();
        let r = probs(&mut tape, &[0.9, 0.8]);
        let f = probs(&mut tape, &[0.2, 0.1]);
        let a = d_age_loss(&mut tape, r, f).unwrap();
        let want = -(0.9f64.ln() + 0.8f64.ln()) / 2.0 - (0.8f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((tape.scalar(a) - want).abs() < 1e-12);
        assert!((tape.scalar(a) - 0.3285).abs() < 1e-4);

        let r = probs(&mut tape, &[0.8]);
        let o = probs(&mut tape, &[0.3]);
        let y = probs(&mut tape, &[0.4]);
        let t = d_trans_loss(&mut tape, r, o, y).unwrap();
        let want = -(0.8f64.ln()) - 0.5 * 0.7f64.ln() - 0.5 * 0.6f64.ln();
        assert!((tape.scalar(t) - want).abs() < 1e-12);
        assert!((tape.scalar(t) - 0.6568).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_is_near_zero() {
        let mut tape = Tape::<f64>::new();
        let one = probs(&mut tape, &[1.0, 1.0]);
        let zero = probs(&mut tape, &[0.0, 0.0]);
        let a = d_age_loss(&mut tape, one, zero).unwrap();
        assert!(tape.scalar(a) < 1e-6);
        let t = d_trans_loss(&mut tape, one, zero, zero).unwrap();
        assert!(tape.scalar(t) < 1e-6);
    }

    #[test]
    fn fake_pair_weights_are_constants() {
        let mut tape = Tape::<f64>::new();
        let r = probs(&mut tape, &[0.7, 0.6]);
        let o = probs(&mut tape, &[0.35, 0.2]);
        let y = probs(&mut tape, &[0.15, 0.55]);
        let half = weighted_trans_loss(&mut tape, r, o, y, 0.5).unwrap();
        let full = weighted_trans_loss(&mut tape, r, o, y, 1.0).unwrap();
        let bo = tape.bce_fake(o);
        let by = tape.bce_fake(y);
        let diff = tape.scalar(full) - tape.scalar(half);
        assert!((diff - 0.5 * (tape.scalar(bo) + tape.scalar(by))).abs() < 1e-12);
    }

    #[test]
    fn minimax_is_negated_fake_bce() {
        let mut tape = Tape::<f64>::new();
        let p = probs(&mut tape, &[0.3, 0.6]);
        let m = generator_adversarial(&mut tape, p, LossStyle::Minimax).unwrap();
        let want = (0.7f64.ln() + 0.4f64.ln()) / 2.0;
        assert!((tape.scalar(m) - want).abs() < 1e-12);
    }

    #[test]
    fn boundary_groups_are_domain_errors() {
        let six = [AgeGroup::new(6).unwrap()];
        let zero = [AgeGroup::new(0).unwrap()];
        assert!(matches!(older_targets(&six), Err(Error::Domain(_))));
        assert!(matches!(younger_targets(&zero), Err(Error::Domain(_))));
        assert_eq!(older_targets(&zero).unwrap()[0].index(), 1);
        assert_eq!(younger_targets(&six).unwrap()[0].index(), 5);
    }

    #[test]
    fn joint_pass_matches_separate_passes_without_batch_statistics() {
        let cfg_d = DiscriminatorConfig {
            image_size: 16,
            base_channels: 4,
            num_stack_layers: 3,
            batch_norm: true,
        };
        let da = AgeDiscriminator::<f64>::new(&cfg_d, 4).unwrap();
        let dt = TransitionDiscriminator::<f64>::new(&cfg_d, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = |i: &[usize]| -> Vec<AgeGroup> { i.iter().map(|&k| AgeGroup::new(k).unwrap()).collect() };
        let mut img = |n: usize| Tensor::uniform(&[n, 3, 16, 16], -1.0, 1.0, &mut rng);
        let (real, fake) = (img(2), img(3));
        let pairs: Vec<Tensor<f64>> = (0..6).map(|_| img(2)).collect();

        let mut tape = Tape::<f64>::new();
        let bound = da.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &da.params, &bound, false);
        let term = AgeTerm {
            real: ctx.tape.constant(real),
            real_groups: g(&[0, 6]),
            fake: ctx.tape.constant(fake),
            targets: g(&[1, 2, 3]),
        };
        let joint = loss_d_age(&mut ctx, &da, &term).unwrap();
        let pr = da.forward(&mut ctx, term.real, &term.real_groups).unwrap();
        let pf = da.forward(&mut ctx, term.fake, &term.targets).unwrap();
        let separate = d_age_loss(ctx.tape, pr, pf).unwrap();
        assert!((tape.scalar(joint) - tape.scalar(separate)).abs() < 1e-12);

        let mut tape = Tape::<f64>::new();
        let bound = dt.params.bind(&mut tape, false);
        let mut ctx = Ctx::new(&mut tape, &dt.params, &bound, false);
        let v: Vec<Var> = pairs.into_iter().map(|t| ctx.tape.constant(t)).collect();
        let term = TransTerm {
            younger: v[0],
            older: v[1],
            groups: g(&[0, 4]),
            older_src: v[2],
            older_fake: v[3],
            older_groups: g(&[2, 5]),
            younger_src: v[4],
            younger_fake: v[5],
            younger_groups: g(&[1, 6]),
        };
        let joint = loss_d_trans(&mut ctx, &dt, &term).unwrap();
        let pr = dt.forward(&mut ctx, v[0], v[1], &term.groups).unwrap();
        let po = dt.forward(&mut ctx, v[2], v[3], &term.older_groups).unwrap();
        let py = dt.forward(&mut ctx, v[5], v[4], &g(&[0, 5])).unwrap();
        let separate = d_trans_loss(ctx.tape, pr, po, py).unwrap();
        assert!((tape.scalar(joint) - tape.scalar(separate)).abs() < 1e-12);
    }

    #[test]
    fn generator_loss_lambda_and_constant_image() {
        let cfg_d = DiscriminatorConfig {
            image_size: 16,
            base_channels: 4,
            num_stack_layers: 3,
            batch_norm: true,
        };
        let mut da = AgeDiscriminator::<f64>::new(&cfg_d, 1).unwrap();
        da.zero_head();
        let dt = TransitionDiscriminator::<f64>::new(&cfg_d, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups: Vec<_> = [1, 4].iter().map(|&i| AgeGroup::new(i).unwrap()).collect();

        let mut tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng));
        let fake = tape.constant(Tensor::uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng));
        let term = AgeTerm {
            real,
            real_groups: groups.clone(),
            fake,
            targets: groups.clone(),
        };
        let zero = ObjectiveConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (_, r) = loss_generator(&mut tape, Phase::A, &da, &dt, Some(&term), None, &zero).unwrap();
        assert_eq!(r.total, r.adv_age);
        assert!((r.adv_age - LN2).abs() < 1e-12);

        let flat = tape.constant(Tensor::full(&[2, 3, 16, 16], 0.25));
        let term = AgeTerm { fake: flat, ..term };
        let (_, r) = loss_generator(&mut tape, Phase::A, &da, &dt, Some(&term), None, &ObjectiveConfig::default()).unwrap();
        assert_eq!(r.tv, 0.0);
        assert_eq!(r.total, r.adv_age);

        assert!(matches!(
            loss_generator(&mut tape, Phase::T, &da, &dt, Some(&term), None, &zero),
            Err(Error::Contract(_))
        ));
    }
}

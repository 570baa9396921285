//! Alternating adversarial optimisation.
//!
//! Even iterations refine the age discriminator and the generator; odd
//! iterations refine the transition discriminator and the generator. The
//! generator's fakes are computed once per iteration: the discriminator step
//! sees their detached values and the generator step backpropagates through
//! the freshly updated, frozen discriminator.

mod checkpoint;
mod config;
mod metrics;

pub use checkpoint::{encode_checkpoint, load_checkpoint, load_checkpoint_as, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{parse_kv, TrainConfig, TRAIN_KEYS};
pub use metrics::{MetricsWriter, METRICS_HEADER};

use std::path::Path;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::age::{AgeGroup, NUM_GROUPS};
use crate::datagen::{derive_seed, Dataset, FaceSample};
use crate::diffcore::{Tape, Tensor};
use crate::discriminators::{AgeDiscriminator, TransitionDiscriminator};
use crate::error::{Error, Result};
use crate::generator::{build_generator, Generator};
use crate::nn::{AdamGroup, Ctx};
use crate::objective::{
    loss_d_age, loss_d_trans, loss_generator, older_targets, younger_targets, AgeTerm, LossReport, Phase, TransTerm,
};

const STREAM_G_INIT: u64 = 10;
const STREAM_DA_INIT: u64 = 11;
const STREAM_DT_INIT: u64 = 12;
const STREAM_BATCH: u64 = 13;

/// All three networks, their optimiser state, and the iteration counter.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub generator: Generator,
    pub d_age: AgeDiscriminator,
    pub d_trans: TransitionDiscriminator,
    pub adam_g: AdamGroup,
    pub adam_da: AdamGroup,
    pub adam_dt: AdamGroup,
    pub iteration: u64,
}

impl ModelBundle {
    /// Freshly initialised networks; deterministic in `config.seed`.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(&config.generator(), derive_seed(config.seed, STREAM_G_INIT, 0))?;
        let d_age = AgeDiscriminator::new(&config.discriminator(), derive_seed(config.seed, STREAM_DA_INIT, 0))?;
        let d_trans = TransitionDiscriminator::new(&config.discriminator(), derive_seed(config.seed, STREAM_DT_INIT, 0))?;
        Ok(Self {
            adam_g: AdamGroup::for_store(&generator.params),
            adam_da: AdamGroup::for_store(&d_age.params),
            adam_dt: AdamGroup::for_store(&d_trans.params),
            config: config.clone(),
            generator,
            d_age,
            d_trans,
            iteration: 0,
        })
    }
}

/// Singles with their true groups and uniformly drawn target groups.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeBatch {
    /// `[B,3,S,S]`.
    pub images: Tensor,
    pub groups: Vec<AgeGroup>,
    pub targets: Vec<AgeGroup>,
}

/// Real adjacent pairs plus the sources of both generated-pair terms.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub younger: Tensor,
    pub older: Tensor,
    /// Group of each younger image.
    pub groups: Vec<AgeGroup>,
    /// Images of groups `older_groups`, each in `[0, 5]`.
    pub older_src: Tensor,
    pub older_groups: Vec<AgeGroup>,
    /// Images of groups `younger_groups`, each in `[1, 6]`.
    pub younger_src: Tensor,
    pub younger_groups: Vec<AgeGroup>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub age: AgeBatch,
    pub pairs: PairBatch,
}

/// Stacks `[3,S,S]` images into `[B,3,S,S]`.
pub fn stack_images(samples: &[&FaceSample]) -> Result<Tensor> {
    let parts: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let t = Tensor::stack(&parts)?;
    let (s, n) = (samples[0].size(), samples.len());
    t.reshape(&[n, 3, s, s])
}

/// Draws both batches for `iteration`; deterministic in `(config.seed,
/// iteration)`.
pub fn sample_batches(dataset: &Dataset, iteration: u64, config: &TrainConfig) -> Result<Batches> {
    if dataset.singles.is_empty() {
        return Err(Error::Data("no single samples to draw from".into()));
    }
    if dataset.pairs.is_empty() {
        return Err(Error::Data("no adjacent pairs to draw from".into()));
    }
    let mut by_group: Vec<Vec<&FaceSample>> = vec![Vec::new(); NUM_GROUPS];
    for s in &dataset.singles {
        by_group[s.group.index()].push(s);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_BATCH, iteration));
    let b = config.batch_size;

    let singles: Vec<&FaceSample> = (0..b).map(|_| dataset.singles.choose(&mut rng).expect("non-empty")).collect();
    let targets = (0..b)
        .map(|_| AgeGroup::new(rng.random_range(0..NUM_GROUPS)))
        .collect::<Result<Vec<_>>>()?;
    let age = AgeBatch {
        images: stack_images(&singles)?,
        groups: singles.iter().map(|s| s.group).collect(),
        targets,
    };

    let pairs: Vec<_> = (0..b).map(|_| dataset.pairs.choose(&mut rng).expect("non-empty")).collect();
    let mut pick = |lo: usize, hi: usize| -> Result<&FaceSample> {
        let g = rng.random_range(lo..=hi);
        by_group[g]
            .choose(&mut rng)
            .copied()
            .ok_or_else(|| Error::Data(format!("no single of group {g} to build a fake pair from")))
    };
    let older_src = (0..b).map(|_| pick(0, NUM_GROUPS - 2)).collect::<Result<Vec<_>>>()?;
    let younger_src = (0..b).map(|_| pick(1, NUM_GROUPS - 1)).collect::<Result<Vec<_>>>()?;
    let youngers: Vec<&FaceSample> = pairs.iter().map(|p| &p.younger).collect();
    let olders: Vec<&FaceSample> = pairs.iter().map(|p| &p.older).collect();
    let pairs = PairBatch {
        younger: stack_images(&youngers)?,
        older: stack_images(&olders)?,
        groups: youngers.iter().map(|s| s.group).collect(),
        older_src: stack_images(&older_src)?,
        older_groups: older_src.iter().map(|s| s.group).collect(),
        younger_src: stack_images(&younger_src)?,
        younger_groups: younger_src.iter().map(|s| s.group).collect(),
    };
    Ok(Batches { age, pairs })
}

fn finite(value: f64, term: &str, iteration: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("{term} = {value} at iteration {iteration}")))
    }
}

/// One discriminator step (or `d_steps_per_g` of them) followed by one
/// generator step, for the phase of `bundle.iteration`.
pub fn train_iteration(bundle: &mut ModelBundle, batches: &Batches, config: &TrainConfig) -> Result<LossReport> {
    let it = bundle.iteration;
    let phase = Phase::of_iteration(it);
    let both = config.objective.g_uses_both_terms;
    let need_age = phase == Phase::A || both;
    let need_trans = phase == Phase::T || both;
    let mut report = LossReport {
        iteration: it,
        phase: Some(phase),
        ..Default::default()
    };

    // Generator forward passes, kept on one tape for the generator step.
    let mut gtape = Tape::new();
    let gbound = bundle.generator.params.bind(&mut gtape, true);
    let mut gctx = Ctx::new(&mut gtape, &bundle.generator.params, &gbound, true);
    let age_term = if need_age {
        let a = &batches.age;
        let x = gctx.tape.constant(a.images.clone());
        let fake = bundle.generator.forward(&mut gctx, x, &a.targets)?;
        Some(AgeTerm {
            real: x,
            real_groups: a.groups.clone(),
            fake,
            targets: a.targets.clone(),
        })
    } else {
        None
    };
    let trans_term = if need_trans {
        let p = &batches.pairs;
        let younger = gctx.tape.constant(p.younger.clone());
        let older = gctx.tape.constant(p.older.clone());
        let older_src = gctx.tape.constant(p.older_src.clone());
        let older_fake = bundle
            .generator
            .forward(&mut gctx, older_src, &older_targets(&p.older_groups)?)?;
        let younger_src = gctx.tape.constant(p.younger_src.clone());
        let younger_fake = bundle
            .generator
            .forward(&mut gctx, younger_src, &younger_targets(&p.younger_groups)?)?;
        Some(TransTerm {
            younger,
            older,
            groups: p.groups.clone(),
            older_src,
            older_fake,
            older_groups: p.older_groups.clone(),
            younger_src,
            younger_fake,
            younger_groups: p.younger_groups.clone(),
        })
    } else {
        None
    };
    let g_stats = gctx.into_stats();

    // Discriminator step on detached fakes.
    for k in 0..config.d_steps_per_g {
        let loss = match phase {
            Phase::A => {
                let term = age_term.as_ref().expect("age term in phase A");
                d_step_age(bundle, &gtape, term, config)?
            }
            Phase::T => {
                let term = trans_term.as_ref().expect("transition term in phase T");
                d_step_trans(bundle, &gtape, term, config)?
            }
        };
        if k == 0 {
            match phase {
                Phase::A => report.d_age_loss = finite(loss, "d_age_loss", it)?,
                Phase::T => report.d_trans_loss = finite(loss, "d_trans_loss", it)?,
            }
        }
    }

    // Generator step against the updated discriminators, held constant.
    let (total, parts) = loss_generator(
        &mut gtape,
        phase,
        &bundle.d_age,
        &bundle.d_trans,
        age_term.as_ref(),
        trans_term.as_ref(),
        &config.objective,
    )?;
    report.g_adv_age = finite(parts.adv_age, "g_adv_age", it)?;
    report.g_adv_trans = finite(parts.adv_trans, "g_adv_trans", it)?;
    report.g_tv = finite(parts.tv, "g_tv", it)?;
    report.g_total = finite(parts.total, "g_total", it)?;
    gtape.backward(total)?;
    bundle.generator.params.collect_grads(&gtape, &gbound)?;
    bundle.adam_g.step(&mut bundle.generator.params, &config.adam)?;
    bundle.generator.params.apply_stats(g_stats);
    if !bundle.generator.params.all_finite() {
        return Err(Error::NonFinite(format!("generator parameters after iteration {it}")));
    }
    bundle.iteration += 1;
    Ok(report)
}

fn d_step_age(bundle: &mut ModelBundle, gtape: &Tape<f32>, g: &AgeTerm, config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let d = &bundle.d_age;
    let bound = d.params.bind(&mut tape, true);
    let term = AgeTerm {
        real: tape.constant(gtape.value(g.real).clone()),
        real_groups: g.real_groups.clone(),
        fake: tape.constant(gtape.value(g.fake).clone()),
        targets: g.targets.clone(),
    };
    let mut ctx = Ctx::new(&mut tape, &d.params, &bound, true);
    let loss = loss_d_age(&mut ctx, d, &term)?;
    let stats = ctx.into_stats();
    let value = tape.scalar(loss) as f64;
    finite(value, "d_age_loss", bundle.iteration)?;
    tape.backward(loss)?;
    let d = &mut bundle.d_age;
    d.params.collect_grads(&tape, &bound)?;
    bundle.adam_da.step(&mut d.params, &config.adam)?;
    d.params.apply_stats(stats);
    Ok(value)
}

fn d_step_trans(bundle: &mut ModelBundle, gtape: &Tape<f32>, g: &TransTerm, config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let d = &bundle.d_trans;
    let bound = d.params.bind(&mut tape, true);
    let mut c = |v| tape.constant(gtape.value(v).clone());
    let term = TransTerm {
        younger: c(g.younger),
        older: c(g.older),
        groups: g.groups.clone(),
        older_src: c(g.older_src),
        older_fake: c(g.older_fake),
        older_groups: g.older_groups.clone(),
        younger_src: c(g.younger_src),
        younger_fake: c(g.younger_fake),
        younger_groups: g.younger_groups.clone(),
    };
    let mut ctx = Ctx::new(&mut tape, &d.params, &bound, true);
    let loss = loss_d_trans(&mut ctx, d, &term)?;
    let stats = ctx.into_stats();
    let value = tape.scalar(loss) as f64;
    finite(value, "d_trans_loss", bundle.iteration)?;
    tape.backward(loss)?;
    let d = &mut bundle.d_trans;
    d.params.collect_grads(&tape, &bound)?;
    bundle.adam_dt.step(&mut d.params, &config.adam)?;
    d.params.apply_stats(stats);
    Ok(value)
}

/// Iterations in a full run: `epochs` passes over the singles.
pub fn total_iterations(dataset: &Dataset, config: &TrainConfig) -> u64 {
    let per_epoch = (dataset.singles.len() / config.batch_size).max(1);
    (config.epochs * per_epoch) as u64
}

/// File name of the checkpoint written after `iteration` iterations.
pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.cgan")
}

pub const FINAL_CHECKPOINT: &str = "final.cgan";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug)]
pub struct TrainOutcome {
    pub bundle: ModelBundle,
    pub reports: Vec<LossReport>,
}

/// Runs [`total_iterations`] iterations from a fresh bundle.
///
/// With `out_dir`, appends one metrics row per iteration to
/// `metrics.csv`, writes a checkpoint every `checkpoint_every` iterations
/// and `final.cgan` at the end. `on_report` observes every iteration.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_report: impl FnMut(&LossReport),
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.size != config.image_size {
        return Err(Error::Config(format!(
            "dataset images are {}x{0} but image_size is {}",
            dataset.size, config.image_size
        )));
    }
    let mut bundle = ModelBundle::new(config)?;
    let total = total_iterations(dataset, config);
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(MetricsWriter::create(&dir.join(METRICS_FILE))?)
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(total as usize);
    let mut run = |bundle: &mut ModelBundle, metrics: &mut Option<MetricsWriter>, reports: &mut Vec<LossReport>| -> Result<()> {
        while bundle.iteration < total {
            let start = Instant::now();
            let batches = sample_batches(dataset, bundle.iteration, config)?;
            let report = train_iteration(bundle, &batches, config)?;
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            if let Some(m) = metrics.as_mut() {
                m.write(&report, wall_ms)?;
            }
            on_report(&report);
            reports.push(report);
            if let Some(dir) = out_dir {
                if bundle.iteration % config.checkpoint_every == 0 {
                    save_checkpoint(bundle, &dir.join(checkpoint_name(bundle.iteration)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            save_checkpoint(bundle, &dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(())
    };
    let result = run(&mut bundle, &mut metrics, &mut reports);
    if let Some(m) = metrics.as_mut() {
        m.flush()?;
    }
    result?;
    Ok(TrainOutcome { bundle, reports })
}

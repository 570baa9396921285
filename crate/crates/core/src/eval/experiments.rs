use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::report::generate_all;
use super::verification::{eer, far_frr_curve, FarFrrCurve, VerificationScores};
use crate::age::AgeGroup;
use crate::datagen::{oracle_identity, AdjacentPair, Dataset, FaceSample};
use crate::diffcore::{AdamConfig, Tape, Tensor};
use crate::discriminators::{DiscriminatorConfig, TransitionDiscriminator};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{AdamGroup, Ctx};
use crate::trainer::stack_images;

/// Minimum group gap between the two faces of a verification pair.
pub const MIN_AGE_GAP: usize = 2;

fn identity_features(image: &Tensor) -> Result<[f64; 4]> {
    let id = oracle_identity(image)?.identity;
    Ok([id.skin_tone[0], id.skin_tone[1], id.skin_tone[2], id.eye_spacing])
}

/// Negative Euclidean distance between oracle identity estimates.
fn similarity(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug)]
pub struct VerificationOutcome {
    /// Younger face compared as rendered.
    pub original: VerificationScores,
    /// Younger face first aged to the older face's group.
    pub aged: VerificationScores,
    pub original_curve: FarFrrCurve,
    pub aged_curve: FarFrrCurve,
    pub eer_original: f64,
    pub eer_aged: f64,
}

/// Builds `n` genuine and `n` impostor (younger, older) pairs with group
/// gap at least [`MIN_AGE_GAP`] from `test`'s sequences and scores them
/// with and without aging the younger face to the older face's group.
pub fn verification_experiment(generator: &Generator, test: &Dataset, n: usize, seed: u64) -> Result<VerificationOutcome> {
    let mut genuine: Vec<(&FaceSample, &FaceSample)> = Vec::new();
    for seq in &test.sequences {
        for (i, a) in seq.iter().enumerate() {
            for b in &seq[i + 1..] {
                if b.group.index() >= a.group.index() + MIN_AGE_GAP {
                    genuine.push((a, b));
                }
            }
        }
    }
    if genuine.len() < n || test.sequences.len() < 2 {
        return Err(Error::Data(format!(
            "need {n} same-identity pairs with gap >= {MIN_AGE_GAP} from two or more identities, found {}",
            genuine.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    genuine.shuffle(&mut rng);
    genuine.truncate(n);

    // Impostor: a genuine pair's younger face against an older face of
    // another identity at a group still at least MIN_AGE_GAP above.
    let olders: Vec<&FaceSample> = test.sequences.iter().flatten().collect();
    let mut impostor = Vec::with_capacity(n);
    for &(young, _) in &genuine {
        let candidates: Vec<&FaceSample> = olders
            .iter()
            .copied()
            .filter(|o| o.identity != young.identity && o.group.index() >= young.group.index() + MIN_AGE_GAP)
            .collect();
        let old = candidates
            .choose(&mut rng)
            .ok_or_else(|| Error::Data("no impostor partner for a verification pair".into()))?;
        impostor.push((young, *old));
    }

    let score_all = |pairs: &[(&FaceSample, &FaceSample)]| -> Result<(Vec<f64>, Vec<f64>)> {
        let youngs: Vec<&FaceSample> = pairs.iter().map(|p| p.0).collect();
        let targets: Vec<AgeGroup> = pairs.iter().map(|p| p.1.group).collect();
        let aged = generate_all(generator, &youngs, &targets, 16)?;
        let (mut orig, mut agd) = (Vec::new(), Vec::new());
        for ((y, o), a) in pairs.iter().zip(&aged) {
            let fo = identity_features(&o.image)?;
            orig.push(similarity(&identity_features(&y.image)?, &fo));
            agd.push(similarity(&identity_features(a)?, &fo));
        }
        Ok((orig, agd))
    };
    let (g_orig, g_aged) = score_all(&genuine)?;
    let (i_orig, i_aged) = score_all(&impostor)?;
    let original = VerificationScores {
        genuine: g_orig,
        impostor: i_orig,
    };
    let aged = VerificationScores {
        genuine: g_aged,
        impostor: i_aged,
    };
    let original_curve = far_frr_curve(&original)?;
    let aged_curve = far_frr_curve(&aged)?;
    Ok(VerificationOutcome {
        eer_original: eer(&original_curve),
        eer_aged: eer(&aged_curve),
        original,
        aged,
        original_curve,
        aged_curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    /// Real pairs per step; as many shuffled pairs join them.
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 16,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeOutcome {
    pub heldout_accuracy: f64,
    pub heldout_pairs: usize,
}

/// A real pair and a same-groups pair whose older face belongs to another
/// identity.
fn real_and_shuffled<'a, R: Rng>(pairs: &'a [AdjacentPair], rng: &mut R) -> Result<(&'a AdjacentPair, &'a FaceSample)> {
    for _ in 0..64 {
        let p = pairs.choose(rng).ok_or_else(|| Error::Data("no pairs".into()))?;
        let q = pairs.choose(rng).expect("non-empty");
        if q.group() == p.group() && q.older.identity != p.younger.identity {
            return Ok((p, &q.older));
        }
    }
    // Deterministic fallback for sparse groups.
    let p = pairs.choose(rng).expect("non-empty");
    pairs
        .iter()
        .find(|q| q.group() == p.group() && q.older.identity != p.younger.identity)
        .map(|q| (p, &q.older))
        .ok_or_else(|| Error::Data(format!("group {} has a single identity; cannot shuffle", p.group())))
}

struct ProbeBatch {
    younger: Tensor,
    older: Tensor,
    shuffled: Tensor,
    groups: Vec<AgeGroup>,
}

fn probe_batch<R: Rng>(pairs: &[AdjacentPair], n: usize, rng: &mut R) -> Result<ProbeBatch> {
    let (mut ys, mut os, mut ss, mut gs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let (p, other) = real_and_shuffled(pairs, rng)?;
        ys.push(&p.younger);
        os.push(&p.older);
        ss.push(other);
        gs.push(p.group());
    }
    Ok(ProbeBatch {
        younger: stack_images(&ys)?,
        older: stack_images(&os)?,
        shuffled: stack_images(&ss)?,
        groups: gs,
    })
}

/// Trains a fresh transition discriminator to tell real adjacent pairs from
/// identity-shuffled ones and reports its accuracy on `heldout`'s pairs.
pub fn transition_probe(
    train: &Dataset,
    heldout: &Dataset,
    disc: &DiscriminatorConfig,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::Config("probe batch size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dt = TransitionDiscriminator::new(disc, rng.random())?;
    let mut adam = AdamGroup::for_store(&dt.params);
    for _ in 0..cfg.steps {
        let b = probe_batch(&train.pairs, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let bound = dt.params.bind(&mut tape, true);
        let n = b.groups.len();
        // Real and shuffled pairs share one pass so batch statistics carry no label.
        let y = tape.constant(b.younger);
        let o = tape.constant(b.older);
        let s = tape.constant(b.shuffled);
        let y2 = tape.concat_batch(&[y, y])?;
        let os = tape.concat_batch(&[o, s])?;
        let groups = [b.groups.as_slice(), &b.groups].concat();
        let mut ctx = Ctx::new(&mut tape, &dt.params, &bound, true);
        let p = dt.forward(&mut ctx, y2, os, &groups)?;
        let stats = ctx.into_stats();
        let pr = tape.narrow_batch(p, 0, n)?;
        let pf = tape.narrow_batch(p, n, n)?;
        let lr = tape.bce_real(pr);
        let lf = tape.bce_fake(pf);
        let loss = tape.add(lr, lf)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite("transition probe loss".into()));
        }
        tape.backward(loss)?;
        dt.params.collect_grads(&tape, &bound)?;
        adam.step(&mut dt.params, &cfg.adam)?;
        dt.params.apply_stats(stats);
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (mut correct, mut total) = (0, 0);
    let rounds = heldout.pairs.len().div_ceil(cfg.batch_size).max(1);
    for _ in 0..rounds {
        let b = probe_batch(&heldout.pairs, cfg.batch_size, &mut eval_rng)?;
        let real = dt.score(&b.younger, &b.older, &b.groups)?;
        let fake = dt.score(&b.younger, &b.shuffled, &b.groups)?;
        correct += real.iter().filter(|&&p| p > 0.5).count() + fake.iter().filter(|&&p| p <= 0.5).count();
        total += real.len() + fake.len();
    }
    Ok(ProbeOutcome {
        heldout_accuracy: correct as f64 / total as f64,
        heldout_pairs: total,
    })
}

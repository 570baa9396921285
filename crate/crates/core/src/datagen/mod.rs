//! Procedural aging faces with recoverable ground truth.
//!
//! A face is an axis-aligned ellipse on an exact gray (0.0) background. Its
//! size grows with age up to group 3; from group 3 on, a horizontal
//! sinusoidal wrinkle texture of growing amplitude appears instead.

mod manifest;
mod oracle;

pub use manifest::{ManifestRecord, SampleKind, MANIFEST_HEADER};
pub use oracle::{oracle_age, oracle_age_detail, oracle_identity, AgeEstimate, IdentityEstimate};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::age::{AgeGroup, NUM_GROUPS};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const MIN_IMAGE_SIZE: usize = 16;
pub const SKIN_RANGE: (f64, f64) = (0.2, 0.8);
pub const EYE_SPACING_RANGE: (f64, f64) = (0.25, 0.40);
pub const FACE_ASPECT_RANGE: (f64, f64) = (0.8, 1.2);

/// Face semi-axis (fraction of S) at group 0 and its per-group growth.
pub const FACE_RADIUS_BASE: f64 = 0.22;
pub const FACE_RADIUS_STEP: f64 = 0.035;
/// Last group whose face is larger than the previous one.
pub const SHAPE_PLATEAU: usize = 3;
/// Wrinkle amplitude per group past [`WRINKLE_ONSET`].
pub const WRINKLE_STEP: f64 = 0.05;
pub const WRINKLE_ONSET: usize = 2;
/// Wrinkle period is `S / WRINKLE_PERIOD_DIV` pixels.
pub const WRINKLE_PERIOD_DIV: usize = 8;
pub const SKIN_NOISE_STD: f64 = 0.02;
/// Eye radius as a fraction of S.
pub const EYE_RADIUS: f64 = 0.04;
pub const EYE_VALUE: f64 = -0.8;
const EYE_SUPERSAMPLE: usize = 4;

/// Face semi-axis `r(g)` as a fraction of the image size.
pub fn face_radius(group: AgeGroup) -> f64 {
    FACE_RADIUS_BASE + FACE_RADIUS_STEP * group.index().min(SHAPE_PLATEAU) as f64
}

/// Wrinkle amplitude `w(g)`.
pub fn wrinkle_amplitude(group: AgeGroup) -> f64 {
    WRINKLE_STEP * group.index().saturating_sub(WRINKLE_ONSET) as f64
}

/// Wrinkle profile at row `i` of an `S`-pixel image, unit amplitude.
pub fn wrinkle_wave(i: usize, size: usize) -> f64 {
    let period = size as f64 / WRINKLE_PERIOD_DIV as f64;
    (std::f64::consts::TAU * (i as f64 + 0.5) / period).sin()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Identity {
    pub skin_tone: [f64; 3],
    /// Distance between eye centres as a fraction of the image width.
    pub eye_spacing: f64,
    /// Vertical over horizontal semi-axis.
    pub face_aspect: f64,
}

impl Identity {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let (lo, hi) = SKIN_RANGE;
        let skin_tone = [rng.random_range(lo..=hi), rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
        Self {
            skin_tone,
            eye_spacing: rng.random_range(EYE_SPACING_RANGE.0..=EYE_SPACING_RANGE.1),
            face_aspect: rng.random_range(FACE_ASPECT_RANGE.0..=FACE_ASPECT_RANGE.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        if !self.skin_tone.iter().all(|&s| within(s, SKIN_RANGE))
            || !within(self.eye_spacing, EYE_SPACING_RANGE)
            || !within(self.face_aspect, FACE_ASPECT_RANGE)
        {
            return Err(Error::Domain(format!("identity out of range: {self:?}")));
        }
        Ok(())
    }

    /// Skin L1 distance plus absolute eye-spacing difference.
    pub fn drift(&self, other: &Identity) -> f64 {
        let skin: f64 = self.skin_tone.iter().zip(&other.skin_tone).map(|(a, b)| (a - b).abs()).sum();
        skin + (self.eye_spacing - other.eye_spacing).abs()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaceSample {
    /// `[3, S, S]` in `[-1, 1]`.
    pub image: Tensor<f32>,
    pub identity: Identity,
    pub group: AgeGroup,
    pub seed: u64,
}

impl FaceSample {
    pub fn size(&self) -> usize {
        self.image.dims()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdjacentPair {
    pub younger: FaceSample,
    pub older: FaceSample,
}

impl AdjacentPair {
    pub fn new(younger: FaceSample, older: FaceSample) -> Result<Self> {
        let pair = Self { younger, older };
        pair.validate()?;
        Ok(pair)
    }

    /// Group of the younger image.
    pub fn group(&self) -> AgeGroup {
        self.younger.group
    }

    pub fn validate(&self) -> Result<()> {
        if self.younger.identity != self.older.identity {
            return Err(Error::Data("pair images have different identities".into()));
        }
        if self.younger.group.succ() != Some(self.older.group) {
            return Err(Error::Data(format!(
                "pair groups {} and {} are not adjacent",
                self.younger.group, self.older.group
            )));
        }
        Ok(())
    }
}

/// splitmix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(base) ^ stream) ^ index)
}

/// Renders one face; deterministic in all arguments.
pub fn render_face(identity: &Identity, group: AgeGroup, size: usize, seed: u64) -> Result<FaceSample> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {size} is below the minimum of {MIN_IMAGE_SIZE}"
        )));
    }
    identity.validate()?;
    let s = size as f64;
    let c = s / 2.0;
    let ax = face_radius(group) * s;
    let ay = ax * identity.face_aspect;
    let w = wrinkle_amplitude(group);
    let eye_r = EYE_RADIUS * s;
    let eye_dx = identity.eye_spacing * s / 2.0;
    let eyes = [(c - eye_dx, c), (c + eye_dx, c)];
    let noise = Normal::new(0.0, SKIN_NOISE_STD).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..size {
        let y = i as f64 + 0.5;
        let wrinkle = w * wrinkle_wave(i, size);
        for j in 0..size {
            let x = j as f64 + 0.5;
            let (dx, dy) = ((x - c) / ax, (y - c) / ay);
            if dx * dx + dy * dy > 1.0 {
                continue;
            }
            let cover = eye_coverage(j, i, &eyes, eye_r);
            for ch in 0..3 {
                let skin = identity.skin_tone[ch] + noise.sample(&mut rng) + wrinkle;
                let v = (1.0 - cover) * skin + cover * EYE_VALUE;
                data[ch * plane + i * size + j] = v.clamp(-1.0, 1.0) as f32;
            }
        }
    }
    Ok(FaceSample {
        image: Tensor::new(&[3, size, size], data)?,
        identity: *identity,
        group,
        seed,
    })
}

/// Fraction of the pixel `(j, i)` covered by either eye disc.
fn eye_coverage(j: usize, i: usize, eyes: &[(f64, f64); 2], r: f64) -> f64 {
    let n = EYE_SUPERSAMPLE;
    let mut hits = 0;
    for a in 0..n {
        let y = i as f64 + (a as f64 + 0.5) / n as f64;
        for b in 0..n {
            let x = j as f64 + (b as f64 + 0.5) / n as f64;
            if eyes.iter().any(|&(ex, ey)| (x - ex).powi(2) + (y - ey).powi(2) <= r * r) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * n) as f64
}

/// Sequential (paired) and non-sequential samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub size: usize,
    /// Consecutive-group renders of one identity each.
    pub sequences: Vec<Vec<FaceSample>>,
    pub pairs: Vec<AdjacentPair>,
    pub singles: Vec<FaceSample>,
}

const STREAM_SEQ_IDENTITY: u64 = 1;
const STREAM_SEQ_RENDER: u64 = 2;
const STREAM_SINGLE_IDENTITY: u64 = 3;
const STREAM_SINGLE_RENDER: u64 = 4;
const STREAM_SHUFFLE: u64 = 5;

/// Builds `n_identities` sequences of `groups_per_identity` consecutive
/// groups (start groups balanced round-robin) and as many singles, each a
/// fresh identity, with groups assigned round-robin and then shuffled.
pub fn make_dataset(n_identities: usize, groups_per_identity: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n_identities == 0 {
        return Err(Error::Config("n_identities must be at least 1".into()));
    }
    if !(1..=NUM_GROUPS).contains(&groups_per_identity) {
        return Err(Error::Config(format!(
            "groups_per_identity must be in [1, {NUM_GROUPS}], got {groups_per_identity}"
        )));
    }
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {size} is below the minimum of {MIN_IMAGE_SIZE}"
        )));
    }
    let starts = NUM_GROUPS - groups_per_identity + 1;
    let sequences: Vec<Vec<FaceSample>> = (0..n_identities)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SEQ_IDENTITY, k as u64));
            let identity = Identity::sample(&mut rng);
            let start = k % starts;
            (start..start + groups_per_identity)
                .map(|g| {
                    let idx = (k * NUM_GROUPS + g) as u64;
                    render_face(&identity, AgeGroup::new(g)?, size, derive_seed(seed, STREAM_SEQ_RENDER, idx))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let pairs = sequences
        .iter()
        .flat_map(|seq| seq.windows(2))
        .map(|w| AdjacentPair::new(w[0].clone(), w[1].clone()))
        .collect::<Result<Vec<_>>>()?;

    let n_singles = n_identities * groups_per_identity;
    let mut singles: Vec<FaceSample> = (0..n_singles)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SINGLE_IDENTITY, k as u64));
            let identity = Identity::sample(&mut rng);
            let group = AgeGroup::new(k % NUM_GROUPS)?;
            render_face(&identity, group, size, derive_seed(seed, STREAM_SINGLE_RENDER, k as u64))
        })
        .collect::<Result<_>>()?;
    singles.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_SHUFFLE, 0)));

    Ok(Dataset {
        size,
        sequences,
        pairs,
        singles,
    })
}

impl Dataset {
    /// Reassembles a dataset from loaded samples. Sequence members must be
    /// given in group order per identity.
    pub fn from_parts(size: usize, sequences: Vec<Vec<FaceSample>>, singles: Vec<FaceSample>) -> Result<Self> {
        let pairs = sequences
            .iter()
            .flat_map(|seq| seq.windows(2))
            .map(|w| AdjacentPair::new(w[0].clone(), w[1].clone()))
            .collect::<Result<Vec<_>>>()?;
        for s in sequences.iter().flatten().chain(&singles) {
            if s.image.dims() != [3, size, size] {
                return Err(Error::Data(format!(
                    "sample image dims {:?} do not match size {size}",
                    s.image.dims()
                )));
            }
        }
        Ok(Self {
            size,
            sequences,
            pairs,
            singles,
        })
    }

    /// Number of singles per group.
    pub fn single_histogram(&self) -> [usize; NUM_GROUPS] {
        let mut h = [0; NUM_GROUPS];
        for s in &self.singles {
            h[s.group.index()] += 1;
        }
        h
    }

    /// Checks every pair's invariants.
    pub fn validate(&self) -> Result<()> {
        self.pairs.iter().try_for_each(AdjacentPair::validate)
    }

    /// Manifest records for every sample, sequences first. Image paths are
    /// `images/<id>.ppm`.
    pub fn manifest(&self) -> Vec<ManifestRecord> {
        let mut out = Vec::new();
        for (k, seq) in self.sequences.iter().enumerate() {
            for s in seq {
                out.push(ManifestRecord::for_sample(out.len(), SampleKind::Sequence, k, s));
            }
        }
        let base = self.sequences.len();
        for (k, s) in self.singles.iter().enumerate() {
            out.push(ManifestRecord::for_sample(out.len(), SampleKind::Single, base + k, s));
        }
        out
    }
}

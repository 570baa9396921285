use rayon::prelude::*;

use crate::age::{AgeGroup, NUM_GROUPS};
use crate::datagen::{oracle_age, oracle_identity, Dataset, FaceSample};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::trainer::{stack_images, ModelBundle};

pub const REPORT_HEADER: &str = "source_group,target_group,n,age_hit_rate,identity_drift,mean_tv,valid";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Source images per group; every target group reuses them.
    pub max_per_cell: usize,
    /// Generator batch size.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_per_cell: 24,
            batch_size: 16,
        }
    }
}

/// One (source group, target group) cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellReport {
    pub source: AgeGroup,
    pub target: AgeGroup,
    pub n: usize,
    /// Oracle estimate equals the target; undecidable estimates count as
    /// misses.
    pub age_hit_rate: f64,
    /// Mean drift against the source identity over images whose identity
    /// the oracle could read; NaN when there are none.
    pub identity_drift: f64,
    pub mean_tv: f64,
    /// Images on which either oracle was undecidable.
    pub undecidable: usize,
    /// False when more than half the cell was undecidable.
    pub valid: bool,
}

/// Source × target grid, row-major by source group.
#[derive(Clone, Debug, PartialEq)]
pub struct AgingReport {
    pub cells: Vec<CellReport>,
}

impl AgingReport {
    pub fn cell(&self, source: AgeGroup, target: AgeGroup) -> &CellReport {
        &self.cells[source.index() * NUM_GROUPS + target.index()]
    }

    /// Hit rate averaged over all cells, invalid ones included.
    pub fn mean_hit_rate(&self) -> f64 {
        self.cells.iter().map(|c| c.age_hit_rate).sum::<f64>() / self.cells.len() as f64
    }

    /// Hit rate averaged over cells with `|source - target| = 1`.
    pub fn adjacent_hit_rate(&self) -> f64 {
        let adj: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.source.index().abs_diff(c.target.index()) == 1)
            .map(|c| c.age_hit_rate)
            .collect();
        adj.iter().sum::<f64>() / adj.len() as f64
    }

    /// Count-weighted drift over cells with a finite drift.
    pub fn mean_identity_drift(&self) -> f64 {
        let (sum, n) = self
            .cells
            .iter()
            .filter(|c| c.identity_drift.is_finite())
            .fold((0.0, 0usize), |(s, n), c| {
                let k = c.n - c.undecidable;
                (s + c.identity_drift * k as f64, n + k)
            });
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.source.index(),
                c.target.index(),
                c.n,
                c.age_hit_rate,
                c.identity_drift,
                c.mean_tv,
                c.valid
            ));
        }
        s
    }
}

/// All samples of the dataset, sequences first, bucketed by group.
pub(crate) fn by_group(test: &Dataset) -> Vec<Vec<&FaceSample>> {
    let mut out: Vec<Vec<&FaceSample>> = vec![Vec::new(); NUM_GROUPS];
    for s in test.sequences.iter().flatten().chain(&test.singles) {
        out[s.group.index()].push(s);
    }
    out
}

fn image_tv(image: &Tensor) -> Result<f64> {
    let s = image.dims()[1];
    let mut tape = Tape::new();
    let x = tape.constant(image.clone().reshape(&[1, 3, s, s])?);
    let tv = tape.total_variation(x)?;
    Ok(tape.scalar(tv) as f64)
}

/// `generator` applied to each source in batches, one target for all.
pub(crate) fn generate_all(
    generator: &Generator,
    sources: &[&FaceSample],
    targets: &[AgeGroup],
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(sources.len());
    for (chunk, tchunk) in sources.chunks(batch_size).zip(targets.chunks(batch_size)) {
        let x = stack_images(chunk)?;
        let y = generator.generate(&x, tchunk)?;
        let s = generator.config.image_size;
        out.extend((0..chunk.len()).map(|i| {
            let img = y.sample(i);
            img.reshape(&[3, s, s]).expect("sample of a [N,3,S,S] batch")
        }));
    }
    Ok(out)
}

fn cell(generator: &Generator, source: AgeGroup, target: AgeGroup, sources: &[&FaceSample], cfg: &EvalConfig) -> Result<CellReport> {
    let targets = vec![target; sources.len()];
    let images = generate_all(generator, sources, &targets, cfg.batch_size)?;
    let (mut hits, mut undecidable, mut drift, mut drift_n, mut tv) = (0, 0, 0.0, 0, 0.0);
    for (img, src) in images.iter().zip(sources) {
        tv += image_tv(img)?;
        let age = match oracle_age(img) {
            Ok(g) => Some(g),
            Err(Error::Undecidable(_)) => None,
            Err(e) => return Err(e),
        };
        let id = match oracle_identity(img) {
            Ok(est) if est.eyes_detected => Some(est.identity),
            Ok(_) | Err(Error::Undecidable(_)) => None,
            Err(e) => return Err(e),
        };
        if age == Some(target) {
            hits += 1;
        }
        if let Some(id) = id {
            drift += id.drift(&src.identity);
            drift_n += 1;
        }
        if age.is_none() || id.is_none() {
            undecidable += 1;
        }
    }
    let n = sources.len();
    Ok(CellReport {
        source,
        target,
        n,
        age_hit_rate: hits as f64 / n as f64,
        identity_drift: if drift_n == 0 { f64::NAN } else { drift / drift_n as f64 },
        mean_tv: tv / n as f64,
        undecidable,
        valid: 2 * undecidable <= n,
    })
}

/// Ages up to `max_per_cell` held-out samples of every group to every
/// group and scores the results with the oracles. Read-only on `bundle`.
pub fn evaluate_model(bundle: &ModelBundle, test: &Dataset, cfg: &EvalConfig) -> Result<AgingReport> {
    evaluate_generator(&bundle.generator, test, cfg)
}

pub fn evaluate_generator(generator: &Generator, test: &Dataset, cfg: &EvalConfig) -> Result<AgingReport> {
    if cfg.max_per_cell == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("max_per_cell and batch_size must be positive".into()));
    }
    if test.size != generator.config.image_size {
        return Err(Error::Config(format!(
            "test images are {}x{0}, generator expects {}",
            test.size, generator.config.image_size
        )));
    }
    let buckets = by_group(test);
    if let Some(g) = buckets.iter().position(|b| b.is_empty()) {
        return Err(Error::Data(format!("test set has no sample of group {g}")));
    }
    let jobs: Vec<(AgeGroup, AgeGroup)> = AgeGroup::all()
        .flat_map(|s| AgeGroup::all().map(move |t| (s, t)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(s, t)| {
            let src = &buckets[s.index()];
            cell(generator, s, t, &src[..src.len().min(cfg.max_per_cell)], cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AgingReport { cells })
}

/// Mean identity drift of the oracle on the real renders themselves.
pub fn oracle_roundtrip_error(samples: &[&FaceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to measure the oracle on".into()));
    }
    let mut total = 0.0;
    for s in samples {
        total += oracle_identity(&s.image)?.identity.drift(&s.identity);
    }
    Ok(total / samples.len() as f64)
}

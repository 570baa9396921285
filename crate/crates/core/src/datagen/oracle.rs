//! Closed-form inverses of the renderer: age group from face size and
//! wrinkle amplitude, identity from skin level and eye positions.

use super::{
    face_radius, wrinkle_wave, Identity, EYE_RADIUS, SHAPE_PLATEAU, WRINKLE_ONSET, WRINKLE_PERIOD_DIV, WRINKLE_STEP,
};
use crate::age::{AgeGroup, NUM_GROUPS};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Blurred intensity a pixel needs to seed the face mask.
const ROUGH_THRESHOLD: f64 = 0.1;
/// Darkness below the row level that counts as eye evidence.
const EYE_DARKNESS: f64 = 0.15;
/// Minimum accumulated darkness for an eye to count as detected.
const EYE_MIN_WEIGHT: f64 = 0.5;
const MIN_ROW_PIXELS: usize = 3;
/// Pixels this far below the face level are eye, not wrinkle, evidence.
const TEXTURE_DARK_CUT: f64 = 0.3;

struct Planes {
    size: usize,
    /// Per-channel values, `[3][S*S]`.
    ch: Vec<Vec<f64>>,
    /// Channel mean.
    mean: Vec<f64>,
}

fn planes(image: &Tensor<f32>) -> Result<Planes> {
    let dims = image.dims();
    let (c, h, w) = match *dims {
        [c, h, w] => (c, h, w),
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Dimension {
                axis: "image".into(),
                detail: format!("expected [3,S,S], got {dims:?}"),
            })
        }
    };
    if c != 3 || h != w {
        return Err(Error::Dimension {
            axis: "image".into(),
            detail: format!("expected [3,S,S], got {dims:?}"),
        });
    }
    let plane = h * w;
    let ch: Vec<Vec<f64>> = (0..3)
        .map(|k| image.data()[k * plane..(k + 1) * plane].iter().map(|&v| v as f64).collect())
        .collect();
    let mean = (0..plane).map(|p| (ch[0][p] + ch[1][p] + ch[2][p]) / 3.0).collect();
    Ok(Planes { size: h, ch, mean })
}

struct FaceMask {
    inside: Vec<bool>,
    area: usize,
    cx: f64,
    /// Median channel mean over the mask.
    level: f64,
    var_x: f64,
    var_y: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Face region: pixels brighter than half the median face level whose 3x3
/// neighbourhood is also bright, filled along rows and columns (the face is
/// convex). The blurred seed rejects isolated noise; the raw test keeps
/// background pixels next to the outline out.
fn face_mask(p: &Planes) -> Result<FaceMask> {
    let s = p.size;
    let mut blur = vec![0.0; s * s];
    for i in 0..s {
        for j in 0..s {
            let (mut acc, mut n) = (0.0, 0);
            for di in i.saturating_sub(1)..=(i + 1).min(s - 1) {
                for dj in j.saturating_sub(1)..=(j + 1).min(s - 1) {
                    acc += p.mean[di * s + dj].abs();
                    n += 1;
                }
            }
            blur[i * s + j] = acc / n as f64;
        }
    }
    let mut rough: Vec<f64> = blur.iter().copied().filter(|&b| b > ROUGH_THRESHOLD).collect();
    if rough.is_empty() {
        return Err(Error::Undecidable("no face pixels in image".into()));
    }
    let level = median(&mut rough);
    let mut inside: Vec<bool> = blur
        .iter()
        .zip(&p.mean)
        .map(|(&b, &m)| m.abs() > level / 2.0 && b > level / 3.0)
        .collect();
    for i in 0..s {
        let row = &mut inside[i * s..(i + 1) * s];
        if let (Some(a), Some(b)) = (row.iter().position(|&v| v), row.iter().rposition(|&v| v)) {
            row[a..=b].fill(true);
        }
    }
    for j in 0..s {
        let col: Vec<usize> = (0..s).filter(|&i| inside[i * s + j]).collect();
        if let (Some(&a), Some(&b)) = (col.first(), col.last()) {
            for i in a..=b {
                inside[i * s + j] = true;
            }
        }
    }
    let coords: Vec<(f64, f64)> = (0..s * s)
        .filter(|&k| inside[k])
        .map(|k| ((k % s) as f64 + 0.5, (k / s) as f64 + 0.5))
        .collect();
    let area = coords.len();
    let n = area as f64;
    let cx = coords.iter().map(|c| c.0).sum::<f64>() / n;
    let cy = coords.iter().map(|c| c.1).sum::<f64>() / n;
    let mut vals: Vec<f64> = (0..s * s).filter(|&k| inside[k]).map(|k| p.mean[k]).collect();
    let level = median(&mut vals);
    let var_x = coords.iter().map(|c| (c.0 - cx).powi(2)).sum::<f64>() / n;
    let var_y = coords.iter().map(|c| (c.1 - cy).powi(2)).sum::<f64>() / n;
    Ok(FaceMask {
        inside,
        area,
        cx,
        level,
        var_x,
        var_y,
    })
}

impl FaceMask {
    /// Mask pixel whose four neighbours are also in the mask.
    fn interior(&self, s: usize, i: usize, j: usize) -> bool {
        let at = |i: usize, j: usize| self.inside[i * s + j];
        at(i, j) && i > 0 && j > 0 && i + 1 < s && j + 1 < s && at(i - 1, j) && at(i + 1, j) && at(i, j - 1) && at(i, j + 1)
    }

    /// Horizontal semi-axis and vertical/horizontal aspect of the mask.
    fn ellipse(&self) -> (f64, f64) {
        let aspect = if self.var_x > 0.0 {
            (self.var_y / self.var_x).sqrt()
        } else {
            1.0
        };
        ((self.area as f64 / (std::f64::consts::PI * aspect)).sqrt(), aspect)
    }
}

/// Wrinkle profile shifted by a quarter period.
fn quadrature_wave(i: usize, size: usize) -> f64 {
    let period = size as f64 / WRINKLE_PERIOD_DIV as f64;
    (std::f64::consts::TAU * (i as f64 + 0.5) / period).cos()
}

/// Least-squares fit of `v = s + a·sin + b·cos` to `(row, value)` samples,
/// returning `(s, a, b)`.
fn fit_wave(samples: &[(usize, f64)], size: usize) -> Option<(f64, f64, f64)> {
    let mut ata = [[0.0f64; 3]; 3];
    let mut atb = [0.0f64; 3];
    for &(i, v) in samples {
        let row = [1.0, wrinkle_wave(i, size), quadrature_wave(i, size)];
        for r in 0..3 {
            for c in 0..3 {
                ata[r][c] += row[r] * row[c];
            }
            atb[r] += row[r] * v;
        }
    }
    solve3(ata, atb).map(|x| (x[0], x[1], x[2]))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let piv = (col..3).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let tail: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - tail) / a[r][r];
    }
    Some(x)
}

/// Per-row median of the channel mean over mask pixels. `interior_only`
/// also drops the outline and pixels dark enough to belong to an eye.
fn row_levels(p: &Planes, mask: &FaceMask, interior_only: bool) -> Vec<Option<f64>> {
    let s = p.size;
    let dark = mask.level - TEXTURE_DARK_CUT;
    (0..s)
        .map(|i| {
            let mut v: Vec<f64> = (0..s)
                .filter(|&j| {
                    if interior_only {
                        mask.interior(s, i, j) && p.mean[i * s + j] > dark
                    } else {
                        mask.inside[i * s + j]
                    }
                })
                .map(|j| p.mean[i * s + j])
                .collect();
            (v.len() >= MIN_ROW_PIXELS).then(|| median(&mut v))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgeEstimate {
    pub group: AgeGroup,
    /// Nearest group by face size alone, at most group 3.
    pub shape_group: AgeGroup,
    /// Estimated horizontal semi-axis as a fraction of S.
    pub radius: f64,
    /// Estimated wrinkle amplitude.
    pub wrinkle: f64,
    pub face_pixels: usize,
}

/// Full age measurement of an image `[3,S,S]`.
pub fn oracle_age_detail(image: &Tensor<f32>) -> Result<AgeEstimate> {
    let p = planes(image)?;
    let s = p.size;
    let mask = face_mask(&p)?;
    let (a, _) = mask.ellipse();
    let radius = a / s as f64;
    let shape_group = (0..=SHAPE_PLATEAU)
        .map(|g| AgeGroup::new(g).expect("shape group in range"))
        .min_by(|x, y| (face_radius(*x) - radius).abs().total_cmp(&(face_radius(*y) - radius).abs()))
        .expect("non-empty range");

    let rows: Vec<(usize, f64)> = row_levels(&p, &mask, true)
        .into_iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|v| (i, v)))
        .collect();
    let wrinkle = if rows.len() >= 4 {
        fit_wave(&rows, s).map(|(_, a, b)| a.hypot(b)).unwrap_or(0.0)
    } else {
        0.0
    };
    let steps = ((wrinkle / WRINKLE_STEP).round() as usize).min(NUM_GROUPS - 1 - WRINKLE_ONSET);
    let group = if steps >= 1 {
        AgeGroup::new(WRINKLE_ONSET + steps)?
    } else {
        AgeGroup::new(shape_group.index().min(WRINKLE_ONSET))?
    };
    Ok(AgeEstimate {
        group,
        shape_group,
        radius,
        wrinkle,
        face_pixels: mask.area,
    })
}

/// Estimated age group; `Undecidable` when the image has no face pixels.
pub fn oracle_age(image: &Tensor<f32>) -> Result<AgeGroup> {
    oracle_age_detail(image).map(|e| e.group)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityEstimate {
    /// `eye_spacing` is 0 when the eyes were not detected.
    pub identity: Identity,
    pub eyes_detected: bool,
    /// 1 for a clean fit, falling to 0 as the skin residual reaches 0.1.
    pub skin_confidence: f64,
    /// Accumulated darkness of the weaker eye, capped at 1.
    pub eye_confidence: f64,
}

/// Estimates the identity parameters of a face image `[3,S,S]`. Missing
/// features are flagged rather than reported as errors.
pub fn oracle_identity(image: &Tensor<f32>) -> Result<IdentityEstimate> {
    let p = planes(image)?;
    let s = p.size;
    let mask = match face_mask(&p) {
        Ok(m) => m,
        Err(Error::Undecidable(_)) => {
            return Ok(IdentityEstimate {
                identity: Identity {
                    skin_tone: [0.0; 3],
                    eye_spacing: 0.0,
                    face_aspect: 1.0,
                },
                eyes_detected: false,
                skin_confidence: 0.0,
                eye_confidence: 0.0,
            })
        }
        Err(e) => return Err(e),
    };
    let (_, aspect) = mask.ellipse();
    let levels = row_levels(&p, &mask, false);

    // Darkness-weighted eye centroids on either side of the face centre.
    let mut acc = [(0.0f64, 0.0f64, 0.0f64); 2];
    for i in 0..s {
        let Some(level) = levels[i] else { continue };
        for j in 0..s {
            if !mask.inside[i * s + j] {
                continue;
            }
            let w = (level - p.mean[i * s + j] - EYE_DARKNESS).max(0.0);
            let x = j as f64 + 0.5;
            let side = usize::from(x >= mask.cx);
            acc[side].0 += w;
            acc[side].1 += w * x;
            acc[side].2 += w * (i as f64 + 0.5);
        }
    }
    let weakest = acc[0].0.min(acc[1].0);
    let eyes_detected = weakest >= EYE_MIN_WEIGHT;
    let eyes: Option<[(f64, f64); 2]> =
        eyes_detected.then(|| [0, 1].map(|k| (acc[k].1 / acc[k].0, acc[k].2 / acc[k].0)));
    let eye_spacing = eyes.map_or(0.0, |e| (e[1].0 - e[0].0) / s as f64);

    // Skin level per channel, fitting out the wrinkle wave and skipping eyes.
    let keep = EYE_RADIUS * s as f64 + 1.5;
    let pixels: Vec<(usize, usize)> = (0..s)
        .flat_map(|i| (0..s).map(move |j| (i, j)))
        .filter(|&(i, j)| mask.interior(s, i, j))
        .filter(|&(i, j)| match eyes {
            Some(e) => e.iter().all(|&(ex, ey)| {
                (j as f64 + 0.5 - ex).hypot(i as f64 + 0.5 - ey) > keep
            }),
            None => levels[i].is_none_or(|l| l - p.mean[i * s + j] < EYE_DARKNESS),
        })
        .collect();
    let mut skin_tone = [0.0; 3];
    let mut sq_resid = 0.0;
    for (c, tone) in skin_tone.iter_mut().enumerate() {
        let samples: Vec<(usize, f64)> = pixels.iter().map(|&(i, j)| (i, p.ch[c][i * s + j])).collect();
        if let Some((level, a, b)) = fit_wave(&samples, s) {
            *tone = level;
            for &(i, v) in &samples {
                sq_resid += (v - level - a * wrinkle_wave(i, s) - b * quadrature_wave(i, s)).powi(2);
            }
        }
    }
    let rms = if pixels.is_empty() {
        f64::INFINITY
    } else {
        (sq_resid / (3 * pixels.len()) as f64).sqrt()
    };
    Ok(IdentityEstimate {
        identity: Identity {
            skin_tone,
            eye_spacing,
            face_aspect: aspect,
        },
        eyes_detected,
        skin_confidence: (1.0 - rms / 0.1).clamp(0.0, 1.0),
        eye_confidence: (weakest / 2.0).min(1.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::render_face;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gray_image_is_undecidable_and_eyeless() {
        let gray = Tensor::zeros(&[3, 32, 32]);
        assert!(matches!(oracle_age(&gray), Err(Error::Undecidable(_))));
        let est = oracle_identity(&gray).unwrap();
        assert!(!est.eyes_detected);
    }

    #[test]
    fn solver_recovers_known_wave() {
        let samples: Vec<(usize, f64)> = (0..32).map(|i| (i, 0.4 + 0.1 * wrinkle_wave(i, 32))).collect();
        let (s, a, b) = fit_wave(&samples, 32).unwrap();
        assert!((s - 0.4).abs() < 1e-12 && (a - 0.1).abs() < 1e-12 && b.abs() < 1e-12);
    }

    #[test]
    fn round_trip_on_one_face_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let id = Identity::sample(&mut rng);
        for g in AgeGroup::all() {
            let f = render_face(&id, g, 32, 5).unwrap();
            assert_eq!(oracle_age(&f.image).unwrap(), g);
            let est = oracle_identity(&f.image).unwrap();
            assert!(est.eyes_detected);
            assert!((est.identity.eye_spacing - id.eye_spacing).abs() <= 0.02);
        }
    }
}

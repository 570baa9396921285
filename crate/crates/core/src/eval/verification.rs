use crate::error::{Error, Result};

/// Similarity scores of same-identity and different-identity pairs; higher
/// means more similar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerificationScores {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Fraction of impostor scores `>= threshold`.
    pub far: f64,
    /// Fraction of genuine scores `< threshold`.
    pub frr: f64,
}

/// FAR/FRR over ascending thresholds; FAR is non-increasing and FRR
/// non-decreasing along it. Only [`far_frr_curve`] builds one.
#[derive(Clone, Debug, PartialEq)]
pub struct FarFrrCurve {
    points: Vec<CurvePoint>,
}

impl FarFrrCurve {
    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,far,frr\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{}\n", p.threshold, p.far, p.frr));
        }
        s
    }
}

/// Fractions of `sorted` strictly below `t` and at or above it.
fn split(sorted: &[f64], t: f64) -> (f64, f64) {
    let k = sorted.partition_point(|&v| v < t);
    let n = sorted.len();
    (k as f64 / n as f64, (n - k) as f64 / n as f64)
}

/// `(FAR, FRR)` at threshold `t`.
pub fn rates_at(scores: &VerificationScores, t: f64) -> (f64, f64) {
    let frac = |v: &[f64], f: &dyn Fn(f64) -> bool| v.iter().filter(|&&x| f(x)).count() as f64 / v.len() as f64;
    (frac(&scores.impostor, &|x| x >= t), frac(&scores.genuine, &|x| x < t))
}

/// Sweeps the union of observed scores under "accept iff score >= t".
pub fn far_frr_curve(scores: &VerificationScores) -> Result<FarFrrCurve> {
    if scores.genuine.is_empty() || scores.impostor.is_empty() {
        return Err(Error::Contract("far/frr curve needs genuine and impostor scores".into()));
    }
    if scores.genuine.iter().chain(&scores.impostor).any(|v| !v.is_finite()) {
        return Err(Error::Domain("verification scores must be finite".into()));
    }
    let sort = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (gen, imp) = (sort(&scores.genuine), sort(&scores.impostor));
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let points = thresholds
        .into_iter()
        .map(|t| CurvePoint {
            threshold: t,
            far: split(&imp, t).1,
            frr: split(&gen, t).0,
        })
        .collect();
    Ok(FarFrrCurve { points })
}

/// Error rate where FAR meets FRR, interpolating linearly between the
/// bracketing thresholds. Past the last threshold everything is rejected
/// (FAR 0, FRR 1), so a crossing always exists.
pub fn eer(curve: &FarFrrCurve) -> f64 {
    let end = CurvePoint {
        threshold: f64::INFINITY,
        far: 0.0,
        frr: 1.0,
    };
    let mut prev: Option<CurvePoint> = None;
    for p in curve.points.iter().copied().chain([end]) {
        let d = p.far - p.frr;
        if d == 0.0 {
            return p.far;
        }
        if d < 0.0 {
            let Some(q) = prev else { return p.far.max(p.frr) };
            let d0 = q.far - q.frr;
            let a = d0 / (d0 - d);
            return q.far + a * (p.far - q.far);
        }
        prev = Some(p);
    }
    unreachable!("the sentinel point has FAR < FRR")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(g: &[f64], i: &[f64]) -> VerificationScores {
        VerificationScores {
            genuine: g.to_vec(),
            impostor: i.to_vec(),
        }
    }

    #[test]
    fn separated_lists() {
        let s = scores(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(rates_at(&s, 0.5), (0.0, 0.0));
        assert_eq!(eer(&far_frr_curve(&s).unwrap()), 0.0);
    }

    #[test]
    fn four_score_hand_case() {
        let s = scores(&[0.9, 0.4], &[0.6, 0.1]);
        assert_eq!(rates_at(&s, 0.5), (0.5, 0.5));
        let c = far_frr_curve(&s).unwrap();
        for p in c.points() {
            assert_eq!((p.far, p.frr), rates_at(&s, p.threshold));
        }
        assert_eq!(eer(&c), 0.5);
    }

    #[test]
    fn identical_lists_sit_at_chance() {
        let v = [0.3, 0.7];
        assert_eq!(eer(&far_frr_curve(&scores(&v, &v)).unwrap()), 0.5);
        let v: Vec<f64> = (0..50).map(|k| (k * 37 % 50) as f64).collect();
        let e = eer(&far_frr_curve(&scores(&v, &v)).unwrap());
        assert!((e - 0.5).abs() <= 1.0 / 50.0, "{e}");
    }

    #[test]
    fn empty_or_non_finite_lists_are_rejected() {
        assert!(matches!(far_frr_curve(&scores(&[], &[0.1])), Err(Error::Contract(_))));
        assert!(matches!(far_frr_curve(&scores(&[0.1], &[])), Err(Error::Contract(_))));
        assert!(far_frr_curve(&scores(&[f64::NAN], &[0.1])).is_err());
    }

    #[test]
    fn inverted_lists_have_unit_error() {
        assert_eq!(eer(&far_frr_curve(&scores(&[0.1], &[0.9])).unwrap()), 1.0);
    }

    proptest! {
        #[test]
        fn rates_are_monotone_and_eer_bounded(
            g in prop::collection::vec(-5.0f64..5.0, 1..40),
            i in prop::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let c = far_frr_curve(&scores(&g, &i)).unwrap();
            for w in c.points().windows(2) {
                prop_assert!(w[0].threshold < w[1].threshold);
                prop_assert!(w[1].far <= w[0].far);
                prop_assert!(w[1].frr >= w[0].frr);
            }
            let e = eer(&c);
            prop_assert!((0.0..=1.0).contains(&e));
            let separated = g.iter().cloned().fold(f64::INFINITY, f64::min)
                > i.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(e == 0.0, separated);
        }
    }
}

use std::fmt;
use std::str::FromStr;

use super::{FaceSample, Identity};
use crate::age::AgeGroup;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str =
    "# sample_id kind identity skin_r skin_g skin_b eye_spacing face_aspect group seed path";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleKind {
    /// Member of a consecutive-group sequence.
    Sequence,
    Single,
}

impl fmt::Display for SampleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleKind::Sequence => "seq",
            SampleKind::Single => "single",
        })
    }
}

impl FromStr for SampleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" => Ok(Self::Sequence),
            "single" => Ok(Self::Single),
            other => Err(Error::Data(format!("unknown sample kind {other:?}"))),
        }
    }
}

/// One line of a dataset manifest. Floats use shortest round-trip
/// formatting, so parsing a written record reproduces it exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub sample_id: usize,
    pub kind: SampleKind,
    pub identity_id: usize,
    pub identity: Identity,
    pub group: AgeGroup,
    pub seed: u64,
    /// Image path relative to the dataset directory.
    pub path: String,
}

impl ManifestRecord {
    pub fn for_sample(sample_id: usize, kind: SampleKind, identity_id: usize, s: &FaceSample) -> Self {
        Self {
            sample_id,
            kind,
            identity_id,
            identity: s.identity,
            group: s.group,
            seed: s.seed,
            path: format!("images/{sample_id:06}.ppm"),
        }
    }
}

impl fmt::Display for ManifestRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let id = &self.identity;
        write!(
            f,
            "{} {} {} {} {} {} {} {} {} {} {}",
            self.sample_id,
            self.kind,
            self.identity_id,
            id.skin_tone[0],
            id.skin_tone[1],
            id.skin_tone[2],
            id.eye_spacing,
            id.face_aspect,
            self.group.index(),
            self.seed,
            self.path
        )
    }
}

impl FromStr for ManifestRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(Error::Data(format!(
                "manifest line has {} fields, expected 11: {line:?}",
                fields.len()
            )));
        }
        fn num<T: FromStr>(s: &str, what: &str) -> Result<T> {
            s.parse().map_err(|_| Error::Data(format!("bad {what} {s:?} in manifest")))
        }
        Ok(Self {
            sample_id: num(fields[0], "sample_id")?,
            kind: fields[1].parse()?,
            identity_id: num(fields[2], "identity")?,
            identity: Identity {
                skin_tone: [num(fields[3], "skin_r")?, num(fields[4], "skin_g")?, num(fields[5], "skin_b")?],
                eye_spacing: num(fields[6], "eye_spacing")?,
                face_aspect: num(fields[7], "face_aspect")?,
            },
            group: AgeGroup::new(num(fields[8], "group")?).map_err(|e| Error::Data(e.to_string()))?,
            seed: num(fields[9], "seed")?,
            path: fields[10].to_string(),
        })
    }
}

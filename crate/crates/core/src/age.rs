use std::fmt;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

pub const NUM_GROUPS: usize = 7;

const LABELS: [&str; NUM_GROUPS] = ["0-10", "11-18", "19-29", "30-39", "40-49", "50-59", "60+"];

/// One of the seven age categories, `0` (0-10) through `6` (60+).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_GROUPS {
            Ok(Self(index as u8))
        } else {
            Err(Error::Domain(format!(
                "age group index {index} outside [0, {}]",
                NUM_GROUPS - 1
            )))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Next older group; `None` for 60+.
    pub fn succ(self) -> Option<Self> {
        Self::new(self.index() + 1).ok()
    }

    /// Next younger group; `None` for 0-10.
    pub fn pred(self) -> Option<Self> {
        self.index().checked_sub(1).map(|i| Self(i as u8))
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..NUM_GROUPS as u8).map(AgeGroup)
    }

    pub fn label(self) -> &'static str {
        LABELS[self.index()]
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.0, self.label())
    }
}

/// Broadcasts the one-hot label to a `[1, 7, height, width]` tensor with
/// `+1` on the group's channel and `-1` elsewhere.
pub fn encode_age<T: Real>(group: AgeGroup, height: usize, width: usize) -> Result<Tensor<T>> {
    encode_ages(&[group], height, width)
}

/// Per-sample label broadcast, `[groups.len(), 7, height, width]`.
pub fn encode_ages<T: Real>(groups: &[AgeGroup], height: usize, width: usize) -> Result<Tensor<T>> {
    if height == 0 || width == 0 {
        return Err(Error::Domain(format!(
            "label map must be at least 1x1, got {height}x{width}"
        )));
    }
    if groups.is_empty() {
        return Err(Error::Contract("no age groups to encode".into()));
    }
    let plane = height * width;
    let mut data = vec![-T::one(); groups.len() * NUM_GROUPS * plane];
    for (s, g) in groups.iter().enumerate() {
        let off = (s * NUM_GROUPS + g.index()) * plane;
        data[off..off + plane].fill(T::one());
    }
    Tensor::new(&[groups.len(), NUM_GROUPS, height, width], data)
}

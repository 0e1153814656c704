//! Dataset ingestion, preprocessing, augmentation and stratified splitting.

mod image;
mod manifest;
mod split;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use self::image::{preprocess_dynamic, preprocess_image, rotate_image, INPUT_SIZE};
pub use manifest::{read_manifest, scan_dataset, write_manifest, Entry, Manifest, Sample};
pub use split::{allocate_counts, stratified_split, SplitRatios};

use crate::engine::Tensor;
use crate::error::{Error, Result};

/// Class labels in one-hot column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "COVID")]
    Covid,
    #[serde(rename = "Normal")]
    Normal,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Covid, Label::Normal];

    pub fn index(self) -> usize {
        match self {
            Label::Covid => 0,
            Label::Normal => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Self::ALL.get(index).copied()
    }

    /// Directory name under the dataset root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Label::Covid => "COVID",
            Label::Normal => "Normal",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.dir_name() == s)
            .ok_or_else(|| Error::invalid("label", format!("unknown label {s:?}")))
    }
}

/// `[1, 0]` for COVID, `[0, 1]` for Normal.
pub fn one_hot(label: Label) -> Tensor {
    let mut t = Tensor::zeros(&[Label::ALL.len()]);
    t.data_mut()[label.index()] = 1.0;
    t
}

/// A preprocessed `3 x S x S` image and its class.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: Label,
}

/// Decodes and preprocesses `samples` in parallel, keeping their order.
pub fn load_labeled<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    size: usize,
) -> Result<Vec<LabeledImage>> {
    let samples: Vec<&Sample> = samples.into_iter().collect();
    samples
        .par_iter()
        .map(|s| {
            Ok(LabeledImage {
                image: preprocess_image(&s.path, size)?,
                label: s.label,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Validation,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Test, Split::Validation];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::invalid("split", format!("unknown split {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_columns() {
        assert_eq!(one_hot(Label::Covid).data(), &[1.0, 0.0]);
        assert_eq!(one_hot(Label::Normal).data(), &[0.0, 1.0]);
        for l in Label::ALL {
            let v = one_hot(l);
            let argmax = v
                .data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(argmax, l.index());
            assert_eq!(v.data().iter().filter(|&&x| x == 1.0).count(), 1);
        }
    }

    #[test]
    fn names_round_trip() {
        for l in Label::ALL {
            assert_eq!(l.to_string().parse::<Label>().unwrap(), l);
        }
        for s in Split::ALL {
            assert_eq!(s.to_string().parse::<Split>().unwrap(), s);
        }
        assert!("covid".parse::<Label>().is_err());
    }
}

//! Serde adapters for the 1-based index convention used in files.
//!
//! Internally every item, class, and pattern index is 0-based; JSON artifacts
//! and CSV-adjacent metadata present them 1-based.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub mod one_based {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[usize], s: S) -> Result<S::Ok, S::Error> {
        let shifted: Vec<usize> = v.iter().map(|&i| i + 1).collect();
        shifted.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<usize>, D::Error> {
        let shifted = Vec::<usize>::deserialize(d)?;
        shifted
            .into_iter()
            .map(|i| {
                i.checked_sub(1)
                    .ok_or_else(|| serde::de::Error::custom("indices in files are 1-based; found 0"))
            })
            .collect()
    }
}

pub mod one_based_nested {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[Vec<usize>], s: S) -> Result<S::Ok, S::Error> {
        let shifted: Vec<Vec<usize>> = v
            .iter()
            .map(|group| group.iter().map(|&i| i + 1).collect())
            .collect();
        shifted.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<usize>>, D::Error> {
        let shifted = Vec::<Vec<usize>>::deserialize(d)?;
        shifted
            .into_iter()
            .map(|group| {
                group
                    .into_iter()
                    .map(|i| {
                        i.checked_sub(1).ok_or_else(|| {
                            serde::de::Error::custom("indices in files are 1-based; found 0")
                        })
                    })
                    .collect()
            })
            .collect()
    }
}

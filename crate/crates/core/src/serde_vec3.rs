//! `Vec<Vec3>` as a JSON array of `[x, y, z]` triples.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::kernel::Vec3;

pub fn serialize<S: Serializer>(v: &[Vec3], s: S) -> Result<S::Ok, S::Error> {
    let raw: Vec<[f64; 3]> = v.iter().map(|p| [p.x, p.y, p.z]).collect();
    raw.serialize(s)
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec3>, D::Error> {
    let raw: Vec<[f64; 3]> = Vec::deserialize(d)?;
    Ok(raw.into_iter().map(|[x, y, z]| Vec3::new(x, y, z)).collect())
}

//! Serializes `Array1<f64>` as a plain JSON list.

use ndarray::Array1;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
    match a.as_slice() {
        Some(v) => v.serialize(s),
        None => a.to_vec().serialize(s),
    }
}

pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
    Vec::<f64>::deserialize(d).map(Array1::from)
}

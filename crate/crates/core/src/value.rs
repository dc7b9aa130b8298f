//! Schema-typed property values.

use std::fmt;

use serde::{Deserialize, Serialize};

/// WGS-84 coordinate pair used by geospatial properties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

/// A property value as it travels on the wire.
///
/// Integers and floats are kept apart so that an integer-schema property
/// rejects `3.5` and also `3.0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Point(GeoPoint),
}

impl Value {
    /// Numeric view used for range checks.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::Int(v) => Some(v as f64),
            Value::Float(v) => Some(v),
            Value::Point(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::Int(v) => Some(v),
            _ => None,
        }
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}

impl From<GeoPoint> for Value {
    fn from(v: GeoPoint) -> Self {
        Value::Point(v)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Float(v) => write!(f, "{v}"),
            Value::Point(p) => write!(f, "({}, {})", p.lat, p.lon),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shapes() {
        assert_eq!(serde_json::to_string(&Value::Int(7)).unwrap(), "7");
        assert_eq!(serde_json::to_string(&Value::Float(3.0)).unwrap(), "3.0");
        let p = Value::Point(GeoPoint { lat: 1.5, lon: -2.0 });
        assert_eq!(serde_json::to_string(&p).unwrap(), r#"{"lat":1.5,"lon":-2.0}"#);
        assert_eq!(serde_json::from_str::<Value>("3.0").unwrap(), Value::Float(3.0));
        assert_eq!(serde_json::from_str::<Value>("3").unwrap(), Value::Int(3));
        assert_eq!(serde_json::from_str::<Value>(r#"{"lat":1.5,"lon":-2.0}"#).unwrap(), p);
    }
}

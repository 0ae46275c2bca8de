//! Canonical serialization and digests.
//!
//! Every persisted or hashed value goes through [`canonical_json`]: JSON with
//! lexicographically sorted object keys, no insignificant whitespace, UTF-8.
//! Digests are SHA-256 rendered as lowercase hex.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Name of the digest algorithm recorded alongside every audit record.
pub const DIGEST_ALGORITHM: &str = "sha256";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CanonicalError {
    #[error("empty definition")]
    EmptyDefinition,
    #[error("invalid digest: {0}")]
    InvalidDigest(String),
    #[error("serialization failed: {0}")]
    Serialization(String),
}

/// A 256-bit digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    /// The all-zero sentinel used as the genesis `prev_hash`.
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Self {
        let out = Sha256::digest(bytes);
        let mut buf = [0u8; 32];
        buf.copy_from_slice(&out);
        Digest(buf)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for Digest {
    type Err = CanonicalError;

    /// Only the canonical form is accepted: exactly 64 lowercase hex characters.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(CanonicalError::InvalidDigest(s.to_string()));
        }
        let mut buf = [0u8; 32];
        hex::decode_to_slice(s, &mut buf).map_err(|e| CanonicalError::InvalidDigest(e.to_string()))?;
        Ok(Digest(buf))
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Serializes `value` as canonical JSON (sorted keys, compact).
///
/// Going through `serde_json::Value` sorts every object's keys, since the
/// default `Map` is ordered.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String, CanonicalError> {
    let v = serde_json::to_value(value).map_err(|e| CanonicalError::Serialization(e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| CanonicalError::Serialization(e.to_string()))
}

/// Digest of the canonical JSON form of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> Result<Digest, CanonicalError> {
    Ok(Digest::of(canonical_json(value)?.as_bytes()))
}

/// Canonical bytes of an agent definition.
///
/// Structured (JSON) definitions are re-serialized with sorted keys after
/// collapsing whitespace runs inside every string. Anything that is not JSON
/// is treated as text and whitespace-normalized the same way.
pub fn canonicalize_definition(definition: &[u8]) -> Result<Vec<u8>, CanonicalError> {
    if definition.is_empty() {
        return Err(CanonicalError::EmptyDefinition);
    }
    match serde_json::from_slice::<serde_json::Value>(definition) {
        Ok(mut value) => {
            normalize_strings(&mut value);
            Ok(canonical_json(&value)?.into_bytes())
        }
        Err(_) => {
            let text = String::from_utf8_lossy(definition);
            let normalized = normalize_whitespace(&text);
            if normalized.is_empty() {
                return Err(CanonicalError::EmptyDefinition);
            }
            Ok(normalized.into_bytes())
        }
    }
}

/// `h(A)`: SHA-256 over the canonicalized definition.
pub fn canonical_hash(definition: &[u8]) -> Result<Digest, CanonicalError> {
    Ok(Digest::of(&canonicalize_definition(definition)?))
}

/// Hash of a structured definition value.
pub fn canonical_hash_value(definition: &serde_json::Value) -> Result<Digest, CanonicalError> {
    let bytes = serde_json::to_vec(definition).map_err(|e| CanonicalError::Serialization(e.to_string()))?;
    canonical_hash(&bytes)
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn normalize_strings(value: &mut serde_json::Value) {
    use serde_json::Value;
    match value {
        Value::String(s) => *s = normalize_whitespace(s),
        Value::Array(items) => items.iter_mut().for_each(normalize_strings),
        Value::Object(map) => map.values_mut().for_each(normalize_strings),
        _ => {}
    }
}

/// RFC 3339 UTC timestamps with millisecond precision (`2026-01-05T09:00:00.000Z`).
pub mod rfc3339 {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn format(ts: &DateTime<Utc>) -> String {
        ts.to_rfc3339_opts(SecondsFormat::Millis, true)
    }

    pub fn parse(s: &str) -> Result<DateTime<Utc>, chrono::ParseError> {
        DateTime::parse_from_rfc3339(s).map(|d| d.with_timezone(&Utc))
    }

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format(ts))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse(&s).map_err(serde::de::Error::custom)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(ts: &Option<DateTime<Utc>>, serializer: S) -> Result<S::Ok, S::Error> {
            match ts {
                Some(ts) => serializer.serialize_some(&format(ts)),
                None => serializer.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<Option<DateTime<Utc>>, D::Error> {
            let s = Option::<String>::deserialize(deserializer)?;
            s.map(|s| parse(&s).map_err(serde::de::Error::custom)).transpose()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_are_sorted() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"z":2,"y":3}}"#).unwrap();
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":{"y":3,"z":2},"b":1}"#);
    }

    #[test]
    fn same_definition_same_digest() {
        let def = br#"{"prompt":"be helpful","tools":["db_read"]}"#;
        assert_eq!(canonical_hash(def).unwrap(), canonical_hash(def).unwrap());
    }

    #[test]
    fn one_character_change_changes_digest() {
        let a = br#"{"prompt":"be helpful","tools":["db_read"]}"#;
        let b = br#"{"prompt":"be helpfui","tools":["db_read"]}"#;
        // Oracle: SHA-256 over the hand-canonicalized forms.
        let oracle_a = Digest::of(br#"{"prompt":"be helpful","tools":["db_read"]}"#);
        let oracle_b = Digest::of(br#"{"prompt":"be helpfui","tools":["db_read"]}"#);
        assert_eq!(canonical_hash(a).unwrap(), oracle_a);
        assert_eq!(canonical_hash(b).unwrap(), oracle_b);
        assert_ne!(oracle_a, oracle_b);
    }

    #[test]
    fn field_order_and_whitespace_do_not_matter() {
        let a = br#"{"tools":["db_read"],"prompt":"be   helpful"}"#;
        let b = b"{ \"prompt\" : \"be helpful\\n\",\n \"tools\": [\"db_read\"] }";
        assert_eq!(canonical_hash(a).unwrap(), canonical_hash(b).unwrap());
        assert_eq!(
            canonical_hash(a).unwrap(),
            Digest::of(br#"{"prompt":"be helpful","tools":["db_read"]}"#)
        );
    }

    #[test]
    fn empty_definition_rejected() {
        assert_eq!(canonical_hash(b""), Err(CanonicalError::EmptyDefinition));
        assert_eq!(canonical_hash(b"   \n"), Err(CanonicalError::EmptyDefinition));
    }

    #[test]
    fn known_sha256_vector() {
        assert_eq!(
            Digest::of(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn digest_parsing_is_strict() {
        let d = Digest::of(b"x");
        assert_eq!(d.to_hex().parse::<Digest>().unwrap(), d);
        assert!(d.to_hex().to_uppercase().parse::<Digest>().is_err());
        assert!("00".parse::<Digest>().is_err());
        assert_eq!(Digest::ZERO.to_hex(), "0".repeat(64));
    }

    #[test]
    fn timestamps_round_trip() {
        let s = "2026-01-05T09:00:00.250Z";
        let ts = rfc3339::parse(s).unwrap();
        assert_eq!(rfc3339::format(&ts), s);
    }
}

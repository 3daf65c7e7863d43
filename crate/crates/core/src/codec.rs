//! Canonical byte forms shared by every signed or hashed structure.
//!
//! Canonical JSON here means: object keys sorted by name, no insignificant
//! whitespace, UTF-8, and every binary field rendered as base58 text.

use serde::de::DeserializeOwned;
use serde::Serialize;

/// Serializes `value` into its canonical JSON bytes.
///
/// Going through `serde_json::Value` sorts object keys, since its map type
/// is ordered when the `preserve_order` feature is off.
pub fn to_canonical_vec<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("canonical value");
    serde_json::to_vec(&value).expect("canonical bytes")
}

pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    String::from_utf8(to_canonical_vec(value)).expect("canonical json is utf-8")
}

pub fn from_json_slice<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, serde_json::Error> {
    serde_json::from_slice(bytes)
}

pub fn b58(bytes: &[u8]) -> String {
    bs58::encode(bytes).into_string()
}

pub fn from_b58(text: &str) -> Option<Vec<u8>> {
    bs58::decode(text).into_vec().ok()
}

/// Declares a fixed-size byte newtype that serializes as base58 text.
macro_rules! b58_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }

            pub fn from_slice(bytes: &[u8]) -> Option<Self> {
                <[u8; $len]>::try_from(bytes).ok().map(Self)
            }

            pub fn to_b58(&self) -> String {
                $crate::codec::b58(&self.0)
            }

            pub fn random<R: rand::RngCore + ?Sized>(rng: &mut R) -> Self {
                let mut out = [0u8; $len];
                rng.fill_bytes(&mut out);
                Self(out)
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl std::fmt::Debug for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_b58())
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(&self.to_b58())
            }
        }

        impl serde::Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_b58())
            }
        }

        impl<'de> serde::Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                use serde::de::Error;
                let text = String::deserialize(d)?;
                let raw = $crate::codec::from_b58(&text)
                    .ok_or_else(|| D::Error::custom("invalid base58"))?;
                Self::from_slice(&raw).ok_or_else(|| {
                    D::Error::custom(format!("expected {} bytes, got {}", $len, raw.len()))
                })
            }
        }
    };
}

pub(crate) use b58_bytes;

/// Serde adapter for variable-length byte fields, rendered as base58.
pub mod b58_vec {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::b58(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        use serde::de::Error;
        let text = String::deserialize(d)?;
        super::from_b58(&text).ok_or_else(|| D::Error::custom("invalid base58"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn keys_are_sorted_and_compact() {
        let mut map = HashMap::new();
        map.insert("zeta", 1);
        map.insert("alpha", 2);
        map.insert("mid", 3);
        assert_eq!(to_canonical_string(&map), r#"{"alpha":2,"mid":3,"zeta":1}"#);
    }

    #[test]
    fn nested_structs_are_sorted() {
        #[derive(Serialize)]
        struct Inner {
            y: u8,
            x: u8,
        }
        #[derive(Serialize)]
        struct Outer {
            b: Inner,
            a: &'static str,
        }
        let out = to_canonical_string(&Outer { b: Inner { y: 1, x: 2 }, a: "q" });
        assert_eq!(out, r#"{"a":"q","b":{"x":2,"y":1}}"#);
    }
}

//! Flat `key = value` settings shared by configs, dataset headers, and the CLI.

use crate::error::{Error, Result};

/// A settings struct addressable by dotted keys.
pub trait KeyValues {
    /// All keys with their current values, in a fixed order.
    fn entries(&self) -> Vec<(String, String)>;

    /// Sets one key. Returns `Ok(false)` when the key is not recognized.
    fn set_key(&mut self, key: &str, value: &str) -> Result<bool>;
}

pub(crate) fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse::<T>()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for key `{key}`")))
}

/// Implements [`KeyValues`] for a struct of scalar fields under a key prefix.
macro_rules! impl_key_values {
    ($ty:ty, $prefix:literal, { $($field:ident),* $(,)? }) => {
        impl $crate::kv::KeyValues for $ty {
            fn entries(&self) -> Vec<(String, String)> {
                vec![$((format!("{}.{}", $prefix, stringify!($field)), self.$field.to_string())),*]
            }

            fn set_key(&mut self, key: &str, value: &str) -> $crate::error::Result<bool> {
                let Some(rest) = key.strip_prefix(concat!($prefix, ".")) else {
                    return Ok(false);
                };
                match rest {
                    $(stringify!($field) => {
                        self.$field = $crate::kv::parse_value(key, value)?;
                        Ok(true)
                    })*
                    _ => Ok(false),
                }
            }
        }
    };
}

pub(crate) use impl_key_values;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(i + 1, format!("expected `key = value`, got `{line}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::parse(i + 1, "empty key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn format_kv_text(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(v);
        s.push('\n');
    }
    s
}

//! Checked-in prompt templates and single-pass placeholder filling.

use sha2::{Digest, Sha256};

pub const QUERY_GENERATION: &str = include_str!("../assets/query_generation.txt");
pub const SYNTHETIC_RCT: &str = include_str!("../assets/synthetic_rct.txt");
/// The forecasting prompt exactly as rendered with the default exemplars and
/// the reference training statistics; the renderer slices its fixed parts
/// from this text.
pub const FORECAST_REFERENCE: &str = include_str!("../assets/forecast_reference.txt");

pub fn sha256_hex(text: &str) -> String {
    sha256_bytes(text.as_bytes())
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Replaces each `{name}` whose name is listed in `vars`. Substituted text is
/// never rescanned, and unknown `{...}` sequences are left untouched.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_is_single_pass() {
        let t = "a {x} b {y} {z} {";
        assert_eq!(fill(t, &[("x", "{y}"), ("y", "2")]), "a {y} b 2 {z} {");
    }

    #[test]
    fn assets_have_their_placeholders() {
        for name in ["{intervention_description}", "{outcome_description}", "{sector}"] {
            assert_eq!(QUERY_GENERATION.matches(name).count(), 1, "{name}");
        }
        assert_eq!(SYNTHETIC_RCT.matches("{query}").count(), 1);
        assert_eq!(FORECAST_REFERENCE.matches("{query}").count(), 1);
    }
}

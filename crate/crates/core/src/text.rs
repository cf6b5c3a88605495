//! Shared text utilities: tokenization, hashing, fingerprints.

use sha2::{Digest, Sha256};

/// Lowercases and splits on non-alphanumeric runs. This is the single
/// tokenizer used for token counting, the token-hash embedder, and the
/// classifier's input encoding, so token budgets mean the same thing
/// everywhere.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Number of tokens produced by [`tokenize`].
pub fn token_count(text: &str) -> usize {
    tokenize(text).len()
}

/// FNV-1a 64-bit hash. Used wherever a stable, platform-independent seed
/// is derived from text (mock embedders, retry jitter).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hex-encoded SHA-256 over the given parts, separated by a unit
/// separator byte so `["ab","c"]` and `["a","bc"]` hash differently.
pub fn fingerprint(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_and_lowercases() {
        assert_eq!(
            tokenize("I DONT ALWAYS sleep, at-night!"),
            vec!["i", "dont", "always", "sleep", "at", "night"]
        );
    }

    #[test]
    fn tokenize_handles_markers() {
        assert_eq!(tokenize("<|ocr_text|>"), vec!["ocr", "text"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(tokenize("  ..  "), Vec::<String>::new());
    }

    #[test]
    fn fnv_matches_known_vector() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn fingerprint_separator_prevents_collisions() {
        assert_ne!(fingerprint(&["ab", "c"]), fingerprint(&["a", "bc"]));
        assert_eq!(fingerprint(&["x", "y"]), fingerprint(&["x", "y"]));
    }
}

//! Name normalization shared by every identity comparison in the crate.

/// Identity key for entity, relation and node names: typographic quotes
/// folded to ASCII, whitespace trimmed and collapsed, lowercased.
pub fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for word in s.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        for c in word.chars() {
            match c {
                '\u{2018}' | '\u{2019}' | '\u{201B}' | '\u{2032}' => out.push('\''),
                '\u{201C}' | '\u{201D}' => out.push('"'),
                _ => out.extend(c.to_lowercase()),
            }
        }
    }
    out
}

/// Collapses runs of whitespace to single spaces and trims, preserving case.
pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn folds_case_quotes_and_space() {
        assert_eq!(normalize_name("  Alzheimer\u{2019}s   Disease "), "alzheimer's disease");
        assert_eq!(normalize_name("APOE"), normalize_name("apoe"));
        assert_eq!(normalize_name(""), "");
    }

    #[test]
    fn collapse_keeps_case() {
        assert_eq!(collapse_whitespace(" FORM \t BY\n"), "FORM BY");
    }
}

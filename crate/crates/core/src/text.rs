//! Tokenization shared by the lexical index and the answer metrics.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercases `text`, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace runs.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len());
    for c in text.chars() {
        if c.is_whitespace() {
            cleaned.push(' ');
        } else if c.is_alphanumeric() {
            cleaned.extend(c.to_lowercase());
        }
    }
    cleaned.split_whitespace().map(String::from).collect()
}

/// Substitutes `{key}` slots in one left-to-right pass. Substituted values are
/// never rescanned, and unknown `{...}` spans are copied through untouched.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let filled = after.find('}').and_then(|close| {
            let key = &after[..close];
            slots
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (*v, close))
        });
        match filled {
            Some((value, close)) => {
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

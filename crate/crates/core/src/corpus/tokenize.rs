/// Splits text into lowercase tokens.
///
/// ASCII letters and digits form runs; whitespace and punctuation separate
/// runs. Any other alphanumeric character (CJK and the like) becomes a
/// single-character token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut run = String::new();
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() {
            run.push(ch.to_ascii_lowercase());
            continue;
        }
        if !run.is_empty() {
            tokens.push(std::mem::take(&mut run));
        }
        if !ch.is_ascii() && ch.is_alphanumeric() {
            tokens.push(single_char_token(ch));
        }
    }
    if !run.is_empty() {
        tokens.push(run);
    }
    tokens
}

// Lowercase only when the mapping is one char to one alphanumeric char, so
// the emitted token tokenizes back to itself.
fn single_char_token(ch: char) -> String {
    let mut lower = ch.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) if l.is_alphanumeric() && l.to_lowercase().eq(std::iter::once(l)) => {
            l.to_string()
        }
        _ => ch.to_string(),
    }
}

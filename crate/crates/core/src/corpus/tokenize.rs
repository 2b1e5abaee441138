#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Lower,
    Upper,
    Digit,
    Other,
}

fn class(c: char) -> Class {
    if c.is_ascii_digit() || (c.is_numeric() && !c.is_alphabetic()) {
        Class::Digit
    } else if c.is_uppercase() {
        Class::Upper
    } else if c.is_alphanumeric() {
        Class::Lower
    } else {
        Class::Other
    }
}

/// Split an identifier on snake_case and CamelCase boundaries.
///
/// Non-alphanumeric characters separate pieces, a lower→upper transition starts
/// a new piece, the last capital of an acronym run starts the following word
/// (`HTTPServer` → `http`, `server`) and digit runs stand on their own.
/// Pieces are lowercased. Input without any alphanumeric character is
/// returned lowercased as a single piece.
pub fn split_identifier(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw.chars().collect();
    let mut pieces = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        let cls = class(c);
        if cls == Class::Other {
            flush(&mut current, &mut pieces);
            continue;
        }
        if let Some(&prev) = i.checked_sub(1).and_then(|j| chars.get(j)) {
            let pc = class(prev);
            let next_lower = chars.get(i + 1).map(|&n| class(n) == Class::Lower).unwrap_or(false);
            let boundary = match (pc, cls) {
                (Class::Lower, Class::Upper) => true,
                (Class::Upper, Class::Upper) => next_lower,
                (Class::Digit, Class::Digit) => false,
                (Class::Digit, _) | (_, Class::Digit) => true,
                _ => false,
            };
            if boundary {
                flush(&mut current, &mut pieces);
            }
        }
        current.extend(c.to_lowercase());
    }
    flush(&mut current, &mut pieces);
    if pieces.is_empty() {
        pieces.push(raw.to_lowercase());
    }
    pieces
}

fn flush(current: &mut String, pieces: &mut Vec<String>) {
    if !current.is_empty() {
        pieces.push(std::mem::take(current));
    }
}

/// Lowercased whitespace tokens, the summary-side tokenizer.
pub fn summary_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

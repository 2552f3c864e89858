//! Word-boundary phrase matching over normalized text.

/// Lowercase, map every non-alphanumeric run to a single space, trim.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.extend(c.to_lowercase());
        } else {
            pending_space = true;
        }
    }
    out
}

/// Byte spans of whole-word occurrences of `needle` in `haystack`; both
/// must already be normalized.
fn occurrences(haystack: &str, needle: &str) -> Vec<(usize, usize)> {
    if needle.is_empty() {
        return Vec::new();
    }
    let bytes = haystack.as_bytes();
    let mut spans = Vec::new();
    let mut from = 0;
    while let Some(pos) = haystack[from..].find(needle) {
        let start = from + pos;
        let end = start + needle.len();
        let left_ok = start == 0 || bytes[start - 1] == b' ';
        let right_ok = end == bytes.len() || bytes[end] == b' ';
        if left_ok && right_ok {
            spans.push((start, end));
        }
        from = start + 1;
        while !haystack.is_char_boundary(from) {
            from += 1;
        }
    }
    spans
}

/// Indices of `phrases` mentioned in `text`. A match lying inside a longer
/// match of another phrase does not count, so "front left" does not also
/// report "front" or "left". Phrases are normalized before matching.
pub fn mentioned(text: &str, phrases: &[&str]) -> Vec<usize> {
    let hay = normalize(text);
    let spans: Vec<Vec<(usize, usize)>> = phrases.iter().map(|p| occurrences(&hay, &normalize(p))).collect();
    let mut out = Vec::new();
    for (i, own) in spans.iter().enumerate() {
        let free = own.iter().any(|&(s, e)| {
            !spans
                .iter()
                .enumerate()
                .any(|(j, other)| j != i && other.iter().any(|&(os, oe)| os <= s && e <= oe && (oe - os) > (e - s)))
        });
        if free {
            out.push(i);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize("  (2) Front-Left!! "), "2 front left");
        assert_eq!(normalize("Close-up."), "close up");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn subsumed_matches_are_dropped() {
        let names = ["Front", "Front Left", "Left", "Back"];
        assert_eq!(mentioned("It faces front-left.", &names), vec![1]);
        assert_eq!(mentioned("front or back", &names), vec![0, 3]);
        assert_eq!(mentioned("front left, then left", &names), vec![1, 2]);
        assert_eq!(mentioned("the frontier", &names), Vec::<usize>::new());
    }
}

use super::{sentence_id, CharRange, Document, Sentence};

/// Tokens ending in a period that never terminate a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "mm.", "cm.", "km.", "kg.", "mg.", "ml.", "e.g.", "i.e.", "etc.", "approx.", "ca.", "cf.",
    "vs.", "fig.", "figs.", "no.", "nos.", "sp.", "spp.", "var.", "subsp.", "dr.", "mr.", "mrs.",
    "ms.", "prof.", "st.",
];

const CLOSERS: &[char] = &['"', '\'', ')', ']', '”', '’', '»'];
const OPENERS: &[char] = &['"', '\'', '(', '[', '“', '‘', '«'];

/// Rule-based segmentation. A sentence ends at `.`, `!` or `?` (plus any
/// closing quotes or brackets) when followed by whitespace and then an
/// uppercase letter or digit, unless the period closes a token from
/// [`ABBREVIATIONS`]. Line breaks always end a sentence.
pub fn split_sentences(doc: &Document) -> Vec<Sentence> {
    sentence_ranges(&doc.body.chars().collect::<Vec<_>>())
        .into_iter()
        .enumerate()
        .map(|(i, range)| Sentence {
            sent_id: sentence_id(&doc.doc_id, i),
            doc_id: doc.doc_id.clone(),
            text: doc.slice(range).to_string(),
            char_range: range,
        })
        .collect()
}

pub(crate) fn sentence_ranges(chars: &[char]) -> Vec<CharRange> {
    let mut out = Vec::new();
    let mut line_start = 0;
    while line_start < chars.len() {
        let line_end = chars[line_start..]
            .iter()
            .position(|&c| c == '\n')
            .map_or(chars.len(), |p| line_start + p);
        split_line(chars, line_start, line_end, &mut out);
        line_start = line_end + 1;
    }
    out
}

fn split_line(chars: &[char], start: usize, end: usize, out: &mut Vec<CharRange>) {
    let mut sent_start = start;
    let mut i = start;
    while i < end {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < end && CLOSERS.contains(&chars[j]) {
                j += 1;
            }
            if j < end && chars[j].is_whitespace() {
                let mut k = j;
                while k < end && chars[k].is_whitespace() {
                    k += 1;
                }
                if k < end && starts_sentence(chars, k, end) && !(c == '.' && is_abbreviation(chars, start, i)) {
                    push_trimmed(chars, sent_start, j, out);
                    sent_start = k;
                    i = k;
                    continue;
                }
            }
            i = j;
        } else {
            i += 1;
        }
    }
    push_trimmed(chars, sent_start, end, out);
}

fn starts_sentence(chars: &[char], mut k: usize, end: usize) -> bool {
    while k < end && OPENERS.contains(&chars[k]) {
        k += 1;
    }
    k < end && (chars[k].is_uppercase() || chars[k].is_ascii_digit())
}

/// Whether the word ending with the period at `dot` is a known abbreviation.
fn is_abbreviation(chars: &[char], line_start: usize, dot: usize) -> bool {
    let mut s = dot;
    while s > line_start && !chars[s - 1].is_whitespace() {
        s -= 1;
    }
    while s < dot && OPENERS.contains(&chars[s]) {
        s += 1;
    }
    let token: String = chars[s..=dot].iter().flat_map(|c| c.to_lowercase()).collect();
    ABBREVIATIONS.contains(&token.as_str())
}

fn push_trimmed(chars: &[char], mut start: usize, mut end: usize, out: &mut Vec<CharRange>) {
    while start < end && chars[start].is_whitespace() {
        start += 1;
    }
    while end > start && chars[end - 1].is_whitespace() {
        end -= 1;
    }
    if start < end {
        out.push(CharRange::new(start, end));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest_document;
    use proptest::prelude::*;

    fn texts(body: &str) -> Vec<String> {
        let doc = ingest_document(body.as_bytes(), "t.txt").unwrap();
        split_sentences(&doc).into_iter().map(|s| s.text).collect()
    }

    #[test]
    fn example_one_has_two_sentences() {
        let s = texts("Adults are 3–5 mm long, metallic blue-black or light brown. They have long antennae, large hind legs and jump when disturbed.");
        assert_eq!(
            s,
            vec![
                "Adults are 3–5 mm long, metallic blue-black or light brown.",
                "They have long antennae, large hind legs and jump when disturbed.",
            ]
        );
    }

    #[test]
    fn trailing_sentence_without_period() {
        assert_eq!(
            texts("They can reach 6 mm in length when mature"),
            vec!["They can reach 6 mm in length when mature"]
        );
    }

    #[test]
    fn unlisted_initial_splits() {
        assert_eq!(texts("A. B."), vec!["A.", "B."]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(
            texts("Eggs are 0.5 mm. Wide, e.g. Brassica napus, i.e. Oilseed rape. Larvae hatch."),
            vec!["Eggs are 0.5 mm. Wide, e.g. Brassica napus, i.e. Oilseed rape.", "Larvae hatch."]
        );
    }

    #[test]
    fn lowercase_continuation_does_not_split() {
        assert_eq!(texts("Approx. 5 per plant. then more."), vec!["Approx. 5 per plant. then more."]);
    }

    #[test]
    fn closing_quotes_stay_with_sentence() {
        assert_eq!(
            texts("He said \"stop.\" Then left! Why? 3 eggs."),
            vec!["He said \"stop.\"", "Then left!", "Why?", "3 eggs."]
        );
    }

    #[test]
    fn paragraphs_end_sentences() {
        assert_eq!(texts("First line\n\nSecond line"), vec!["First line", "Second line"]);
    }

    proptest! {
        #[test]
        fn ranges_round_trip_and_are_ordered(body in "[A-Za-z0-9 .!?\n]{1,200}") {
            prop_assume!(!body.trim().is_empty());
            let doc = ingest_document(body.as_bytes(), "p.txt").unwrap();
            let sentences = split_sentences(&doc);
            let mut prev_end = 0;
            for s in &sentences {
                prop_assert!(!s.text.is_empty());
                prop_assert!(s.char_range.start >= prev_end);
                prop_assert_eq!(doc.slice(s.char_range), s.text.as_str());
                prev_end = s.char_range.end;
            }
        }
    }
}

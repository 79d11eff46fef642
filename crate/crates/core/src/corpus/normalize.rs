use std::sync::LazyLock;

use regex::Regex;

static COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<!--.*?-->").unwrap());
static HEAD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)<head\b.*?</head\s*>").unwrap());
static SCRIPT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<script\b.*?</script\s*>").unwrap());
static STYLE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?is)<style\b.*?</style\s*>").unwrap());
static TITLE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)<title\b[^>]*>(.*?)</title\s*>").unwrap());
static BLOCK_TAG: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)</?(p|div|br|hr|li|ul|ol|dl|dt|dd|h[1-6]|tr|td|th|table|thead|tbody|section|article|header|footer|nav|aside|main|blockquote|pre|figure|figcaption)\b[^>]*>",
    )
    .unwrap()
});
static ANY_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?s)<[^>]*>").unwrap());
static ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"&(#[0-9]{1,7}|#[xX][0-9a-fA-F]{1,6}|[a-zA-Z]{2,8});").unwrap());

/// Reduces HTML to plain text. Block elements become paragraph breaks,
/// everything inside `<head>`, `<script>` and `<style>` is dropped.
pub fn strip_html(html: &str) -> String {
    let text = COMMENT.replace_all(html, "");
    let text = HEAD.replace_all(&text, "");
    let text = SCRIPT.replace_all(&text, "");
    let text = STYLE.replace_all(&text, "");
    let text = BLOCK_TAG.replace_all(&text, "\n\n");
    let text = ANY_TAG.replace_all(&text, "");
    decode_entities(&text)
}

pub(crate) fn html_title(html: &str) -> Option<String> {
    let raw = TITLE.captures(html)?.get(1)?.as_str();
    let title = decode_entities(&ANY_TAG.replace_all(raw, ""));
    let title = title.split_whitespace().collect::<Vec<_>>().join(" ");
    (!title.is_empty()).then_some(title)
}

fn decode_entities(text: &str) -> String {
    ENTITY
        .replace_all(text, |caps: &regex::Captures| {
            let name = &caps[1];
            let decoded = if let Some(hex) = name.strip_prefix("#x").or(name.strip_prefix("#X")) {
                u32::from_str_radix(hex, 16).ok().and_then(char::from_u32)
            } else if let Some(dec) = name.strip_prefix('#') {
                dec.parse::<u32>().ok().and_then(char::from_u32)
            } else {
                match name {
                    "amp" => Some('&'),
                    "lt" => Some('<'),
                    "gt" => Some('>'),
                    "quot" => Some('"'),
                    "apos" => Some('\''),
                    "nbsp" => Some(' '),
                    "ndash" => Some('–'),
                    "mdash" => Some('—'),
                    "lsquo" => Some('‘'),
                    "rsquo" => Some('’'),
                    "ldquo" => Some('“'),
                    "rdquo" => Some('”'),
                    "hellip" => Some('…'),
                    "deg" => Some('°'),
                    "times" => Some('×'),
                    _ => None,
                }
            };
            match decoded {
                Some(c) => c.to_string(),
                None => caps[0].to_string(),
            }
        })
        .into_owned()
}

/// Canonical body form: unified line endings, control characters removed,
/// whitespace runs inside a paragraph collapsed to one space, and every
/// paragraph terminated by a single `\n`.
///
/// Paragraphs are separated by blank lines. A line that opens a markdown
/// block (heading, bullet, numbered item) also starts a new paragraph, and
/// a heading line is always a paragraph of its own.
pub fn normalize_text(text: &str) -> String {
    let text = text.replace("\r\n", "\n").replace('\r', "\n");
    let cleaned: String = text
        .chars()
        .filter_map(|c| match c {
            '\n' => Some('\n'),
            '\t' => Some(' '),
            c if c.is_control() => None,
            // zero-width characters and the BOM
            '\u{200b}' | '\u{200c}' | '\u{200d}' | '\u{feff}' => None,
            c => Some(c),
        })
        .collect();

    let mut paragraphs: Vec<String> = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    let flush = |current: &mut Vec<&str>, paragraphs: &mut Vec<String>| {
        if !current.is_empty() {
            let joined = current
                .iter()
                .flat_map(|l| l.split_whitespace())
                .collect::<Vec<_>>()
                .join(" ");
            if !joined.is_empty() {
                paragraphs.push(joined);
            }
            current.clear();
        }
    };
    for line in cleaned.split('\n') {
        let trimmed = line.trim();
        if trimmed.is_empty() {
            flush(&mut current, &mut paragraphs);
            continue;
        }
        if opens_block(trimmed) {
            flush(&mut current, &mut paragraphs);
        }
        current.push(trimmed);
        if trimmed.starts_with('#') {
            flush(&mut current, &mut paragraphs);
        }
    }
    flush(&mut current, &mut paragraphs);

    let mut body = String::with_capacity(cleaned.len());
    for p in paragraphs {
        body.push_str(&p);
        body.push('\n');
    }
    body
}

fn opens_block(line: &str) -> bool {
    if line.starts_with('#') || line.starts_with("- ") || line.starts_with("* ") || line.starts_with("+ ") {
        return true;
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    digits > 0 && digits < 4 && line[digits..].starts_with(". ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitespace_collapses_inside_paragraphs() {
        assert_eq!(
            normalize_text("Adults  are\n3–5 mm\tlong.\n\n\nLarvae are white."),
            "Adults are 3–5 mm long.\nLarvae are white.\n"
        );
    }

    #[test]
    fn control_characters_are_removed() {
        assert_eq!(normalize_text("a\u{0007}b\u{200b}c\r\n"), "abc\n");
    }

    #[test]
    fn markdown_blocks_split_paragraphs() {
        assert_eq!(
            normalize_text("## Identification\nAdults are small.\n- long antennae\n- large hind legs\n1. first"),
            "## Identification\nAdults are small.\n- long antennae\n- large hind legs\n1. first\n"
        );
    }

    #[test]
    fn entities_decode() {
        assert_eq!(strip_html("a &amp; b &#8211; c &#x41; &bogus;"), "a & b – c A &bogus;");
    }
}

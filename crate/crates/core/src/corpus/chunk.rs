use serde::{Deserialize, Serialize};

use super::sentence::sentence_ranges;
use super::{chunk_id, CharRange, Chunk, CorpusError, Document};

pub const MIN_CHUNK_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkPolicy {
    pub max_chunk_chars: usize,
    pub overlap_chars: usize,
}

impl Default for ChunkPolicy {
    fn default() -> Self {
        Self {
            max_chunk_chars: 2000,
            overlap_chars: 200,
        }
    }
}

impl ChunkPolicy {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_chunk_chars < MIN_CHUNK_CHARS {
            return Err(CorpusError::InvalidPolicy(format!(
                "max_chunk_chars must be at least {MIN_CHUNK_CHARS}, got {}",
                self.max_chunk_chars
            )));
        }
        if self.overlap_chars >= self.max_chunk_chars {
            return Err(CorpusError::InvalidPolicy(format!(
                "overlap_chars ({}) must be smaller than max_chunk_chars ({})",
                self.overlap_chars, self.max_chunk_chars
            )));
        }
        Ok(())
    }
}

/// Splits a document body into overlapping chunks of at most
/// `max_chunk_chars` characters.
///
/// Each cut is placed at the last paragraph boundary inside the window; if
/// there is none, at the last sentence boundary; otherwise exactly at the
/// window limit. The next chunk starts `overlap_chars` before the cut.
/// Boundaries closer to the chunk start than `max(overlap + 1, max / 4)`
/// are ignored so every chunk makes progress.
pub fn chunk_document(doc: &Document, policy: &ChunkPolicy) -> Result<Vec<Chunk>, CorpusError> {
    policy.validate()?;
    let chars: Vec<char> = doc.body.chars().collect();
    let n = chars.len();
    let max = policy.max_chunk_chars;
    let overlap = policy.overlap_chars;

    let paragraph_cuts: Vec<usize> = (1..n).filter(|&i| chars[i - 1] == '\n').collect();
    let sentence_cuts: Vec<usize> = sentence_ranges(&chars)
        .iter()
        .map(|r| r.start)
        .filter(|&s| s > 0)
        .collect();

    let mut ranges = Vec::new();
    let mut start = 0;
    loop {
        if n - start <= max {
            ranges.push(CharRange::new(start, n));
            break;
        }
        let limit = start + max;
        let floor = start + (overlap + 1).max(max / 4);
        let cut = last_in(&paragraph_cuts, floor, limit)
            .or_else(|| last_in(&sentence_cuts, floor, limit))
            .unwrap_or(limit);
        ranges.push(CharRange::new(start, cut));
        start = cut - overlap;
    }

    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(seq, range)| Chunk {
            chunk_id: chunk_id(&doc.doc_id, seq),
            doc_id: doc.doc_id.clone(),
            text: chars[range.start..range.end].iter().collect(),
            char_range: range,
            seq,
        })
        .collect())
}

/// Largest element of the sorted `cuts` within `[lo, hi]`.
fn last_in(cuts: &[usize], lo: usize, hi: usize) -> Option<usize> {
    let idx = cuts.partition_point(|&c| c <= hi);
    cuts[..idx].last().copied().filter(|&c| c >= lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest_document;
    use proptest::prelude::*;

    fn doc(body: &str) -> Document {
        ingest_document(body.as_bytes(), "chunk.txt").unwrap()
    }

    fn policy(max: usize, overlap: usize) -> ChunkPolicy {
        ChunkPolicy {
            max_chunk_chars: max,
            overlap_chars: overlap,
        }
    }

    /// Independent coverage oracle: stitching chunks back together, skipping
    /// the overlapping prefix of each, must rebuild the body exactly.
    fn restitch(chunks: &[Chunk]) -> String {
        let mut out: Vec<char> = Vec::new();
        for c in chunks {
            let skip = out.len() - c.char_range.start;
            out.extend(c.text.chars().skip(skip));
        }
        out.into_iter().collect()
    }

    #[test]
    fn policy_validation() {
        assert!(policy(199, 0).validate().is_err());
        assert!(policy(1000, 1000).validate().is_err());
        assert!(policy(200, 199).validate().is_ok());
        assert!(ChunkPolicy::default().validate().is_ok());
    }

    #[test]
    fn short_document_is_one_chunk() {
        let body = "x".repeat(99);
        let d = doc(&body);
        assert_eq!(d.char_len(), 100);
        let chunks = chunk_document(&d, &policy(1000, 100)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.body);
        assert_eq!(chunks[0].char_range, CharRange::new(0, 100));
    }

    #[test]
    fn five_paragraphs_cut_on_boundaries() {
        let para = |i: usize| {
            let mut p = format!("Paragraph {i} begins here.");
            while p.chars().count() < 495 {
                p.push_str(" More words follow.");
            }
            p.truncate(494);
            p.push('.');
            p
        };
        let body: String = (0..5).map(|i| format!("{}\n\n", para(i))).collect();
        let d = doc(&body);
        assert_eq!(d.char_len(), 2480);
        let chunks = chunk_document(&d, &policy(1000, 100)).unwrap();
        assert!(chunks.len() >= 3, "{} chunks", chunks.len());
        assert_eq!(restitch(&chunks), d.body);
        let chars: Vec<char> = d.body.chars().collect();
        for c in &chunks[..chunks.len() - 1] {
            assert!(c.text.chars().count() <= 1000);
            assert_eq!(chars[c.char_range.end - 1], '\n', "chunk {} ends mid-paragraph", c.seq);
        }
        for pair in chunks.windows(2) {
            assert_eq!(pair[0].char_range.end - pair[1].char_range.start, 100);
        }
    }

    #[test]
    fn sentence_boundary_used_when_no_paragraph_break() {
        let sentence = "The larvae feed inside the petioles and stems. ";
        let body = sentence.repeat(40);
        let d = doc(&body);
        let chunks = chunk_document(&d, &policy(1000, 100)).unwrap();
        let chars: Vec<char> = d.body.chars().collect();
        for c in &chunks[..chunks.len() - 1] {
            // the cut sits at the start of the next sentence
            assert_eq!(chars[c.char_range.end], 'T');
            assert_eq!(chars[c.char_range.end - 2], '.');
        }
        assert_eq!(restitch(&chunks), d.body);
    }

    #[test]
    fn unbroken_paragraph_is_hard_cut() {
        let body = "ab".repeat(1500);
        let d = doc(&body);
        let chunks = chunk_document(&d, &policy(1000, 100)).unwrap();
        let ranges: Vec<_> = chunks.iter().map(|c| (c.char_range.start, c.char_range.end)).collect();
        assert_eq!(ranges, vec![(0, 1000), (900, 1900), (1800, 2800), (2700, 3001)]);
        assert_eq!(restitch(&chunks), d.body);
    }

    #[test]
    fn chunk_ids_are_ordered() {
        let d = doc(&"word ".repeat(1000));
        let chunks = chunk_document(&d, &policy(300, 50)).unwrap();
        assert!(chunks.len() > 10);
        for pair in chunks.windows(2) {
            assert!(pair[0].chunk_id < pair[1].chunk_id);
            assert_eq!(pair[0].seq + 1, pair[1].seq);
        }
    }

    proptest! {
        #[test]
        fn chunk_invariants(
            body in "[a-zA-Z .\n]{1,3000}",
            max in 200usize..800,
            overlap_frac in 0.0f64..0.9,
        ) {
            prop_assume!(!body.trim().is_empty());
            let overlap = (max as f64 * overlap_frac) as usize;
            let d = doc(&body);
            let chunks = chunk_document(&d, &policy(max, overlap)).unwrap();
            prop_assert_eq!(chunks[0].char_range.start, 0);
            prop_assert_eq!(chunks.last().unwrap().char_range.end, d.char_len());
            for c in &chunks {
                prop_assert!(c.char_range.len() <= max);
                prop_assert_eq!(d.slice(c.char_range), c.text.as_str());
            }
            for pair in chunks.windows(2) {
                prop_assert!(pair[1].char_range.start > pair[0].char_range.start);
                prop_assert!(pair[1].char_range.start <= pair[0].char_range.end);
                prop_assert!(pair[0].char_range.end - pair[1].char_range.start <= overlap);
            }
            prop_assert_eq!(restitch(&chunks), d.body.clone());
            prop_assert_eq!(chunk_document(&d, &policy(max, overlap)).unwrap(), chunks);
        }
    }
}

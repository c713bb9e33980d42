//! Sentence-boundary counting on the literal `'.'` delimiter.
//!
//! Every `'.'` counts, including ones inside abbreviations and decimals.
//! Whitespace after a boundary belongs to the next chunk.

pub const DELIMITER: char = '.';

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSplit<'a> {
    pub chunk: &'a str,
    pub remainder: &'a str,
    pub boundaries_found: usize,
}

pub fn count_boundaries(text: &str) -> usize {
    text.bytes().filter(|&b| b == DELIMITER as u8).count()
}

/// Splits `text` right after its `period`-th delimiter. With fewer
/// delimiters than `period` the whole text is the chunk.
pub fn truncate_after_boundaries(text: &str, period: usize) -> ChunkSplit<'_> {
    debug_assert!(period >= 1);
    let mut found = 0;
    for (pos, _) in text.match_indices(DELIMITER) {
        found += 1;
        if found == period {
            let (chunk, remainder) = text.split_at(pos + DELIMITER.len_utf8());
            return ChunkSplit {
                chunk,
                remainder,
                boundaries_found: found,
            };
        }
    }
    ChunkSplit {
        chunk: text,
        remainder: "",
        boundaries_found: found,
    }
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `n` whitespace-separated words and the whitespace before
/// them.
pub fn truncate_words(text: &str, n: usize) -> &str {
    let mut count = 0;
    let mut in_word = false;
    let mut end = 0;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_word = false;
        } else {
            if !in_word {
                in_word = true;
                count += 1;
                if count > n {
                    return &text[..end];
                }
            }
            end = i + c.len_utf8();
        }
    }
    text
}

//! Object mention extraction from caption text.
//!
//! The offline extractor is driven by a [`Lexicon`]: a table from surface
//! forms (synonyms and plural variants) to canonical object labels. Captions
//! are tokenized on non-alphabetic characters and only whole tokens match.
//!
//! Lexicon file format, one record per line:
//!
//! ```text
//! # comment
//! person: man, men, woman, women, child, children
//! cat
//! ```
//!
//! Regular plurals (`+s`, `+es`, `y -> ies`) of every listed form are added
//! automatically unless the file maps them explicitly.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rewards::ObjectMention;

/// Turns caption text into object mentions.
pub trait MentionExtractor: Send + Sync {
    /// Mentions in first-occurrence order, deduplicated by canonical label.
    fn extract(&self, caption: &str) -> Vec<ObjectMention>;

    /// Canonical label for a single word, or `None` when it names no object.
    fn canonicalize(&self, word: &str) -> Option<String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    surfaces: HashMap<String, String>,
    canonicals: BTreeSet<String>,
}

fn plural_variants(word: &str) -> Vec<String> {
    let mut out = vec![format!("{word}s"), format!("{word}es")];
    if let Some(stem) = word.strip_suffix('y') {
        if !stem.ends_with(['a', 'e', 'i', 'o', 'u']) {
            out.push(format!("{stem}ies"));
        }
    }
    out
}

fn check_word(word: &str) -> std::result::Result<String, String> {
    let word = word.trim();
    if word.is_empty() || !word.chars().all(char::is_alphabetic) {
        return Err(format!("{word:?} is not a single alphabetic word"));
    }
    Ok(word.to_lowercase())
}

impl Lexicon {
    /// Builds a lexicon from `(canonical, synonyms)` groups.
    pub fn from_groups<I, S>(groups: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<S>)>,
        S: AsRef<str>,
    {
        let groups = groups
            .into_iter()
            .enumerate()
            .map(|(i, (canonical, surfaces))| {
                let canonical = check_word(canonical.as_ref());
                let surfaces: std::result::Result<Vec<_>, _> =
                    surfaces.iter().map(|s| check_word(s.as_ref())).collect();
                match (canonical, surfaces) {
                    (Ok(c), Ok(s)) => Ok((c, s)),
                    (Err(m), _) | (_, Err(m)) => Err(Error::Parse {
                        path: "<lexicon>".into(),
                        line: i + 1,
                        message: m,
                    }),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::build(groups))
    }

    /// One group per label with no synonyms.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self::from_groups(labels.into_iter().map(|l| (l, Vec::new())))
    }

    fn build(groups: Vec<(String, Vec<String>)>) -> Self {
        let mut surfaces = HashMap::new();
        let mut canonicals = BTreeSet::new();
        for (canonical, _) in &groups {
            canonicals.insert(canonical.clone());
            surfaces.insert(canonical.clone(), canonical.clone());
        }
        for (canonical, syns) in &groups {
            for s in syns {
                surfaces.entry(s.clone()).or_insert_with(|| canonical.clone());
            }
        }
        for (canonical, syns) in &groups {
            for form in std::iter::once(canonical).chain(syns) {
                for plural in plural_variants(form) {
                    surfaces.entry(plural).or_insert_with(|| canonical.clone());
                }
            }
        }
        Lexicon { surfaces, canonicals }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut groups = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: "<lexicon>".into(),
                line: idx + 1,
                message,
            };
            let (canonical, rest) = line.split_once(':').unwrap_or((line, ""));
            let canonical = check_word(canonical).map_err(err)?;
            let syns = rest
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(check_word)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(err)?;
            groups.push((canonical, syns));
        }
        Ok(Self::build(groups))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.display().to_string(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn canonical_labels(&self) -> &BTreeSet<String> {
        &self.canonicals
    }

    pub fn is_empty(&self) -> bool {
        self.canonicals.is_empty()
    }
}

impl MentionExtractor for Lexicon {
    fn extract(&self, caption: &str) -> Vec<ObjectMention> {
        extract_object_mentions(caption, self)
    }

    fn canonicalize(&self, word: &str) -> Option<String> {
        canonicalize(word, self)
    }
}

pub fn canonicalize(word: &str, lexicon: &Lexicon) -> Option<String> {
    lexicon.surfaces.get(&word.to_lowercase()).cloned()
}

pub fn extract_object_mentions(caption: &str, lexicon: &Lexicon) -> Vec<ObjectMention> {
    let mut seen = BTreeSet::new();
    caption
        .split(|c: char| !c.is_alphabetic())
        .filter(|tok| !tok.is_empty())
        .filter_map(|tok| {
            let canonical = canonicalize(tok, lexicon)?;
            seen.insert(canonical.clone())
                .then(|| ObjectMention::new(tok, canonical))
        })
        .collect()
}

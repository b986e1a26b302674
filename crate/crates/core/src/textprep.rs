//! Tweet normalization, the minimum-length filter and corpus statistics.
//!
//! The normalizer applies, in order: HTML entity decoding, URL replacement
//! (`HTTPURL`), mention replacement (`@USER`), emoji textualization,
//! whitespace collapsing and encoding normalization (NFC, control characters
//! removed). The full pass is repeated until the text stops changing, so the
//! result is a fixed point and normalization is idempotent.

use std::collections::HashSet;
use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

pub const URL_TOKEN: &str = "HTTPURL";
pub const USER_TOKEN: &str = "@USER";
pub const DEFAULT_MIN_TOKENS: usize = 10;

/// Passes needed in practice are 1 or 2; the cap only guards against a
/// pathological oscillation.
const MAX_PASSES: usize = 8;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TextError {
    #[error("input bytes cannot be repaired to UTF-8 (first bad byte at offset {offset})")]
    IrreparableEncoding { offset: usize },
}

/// One raw tweet as ingested.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTweet(String);

impl RawTweet {
    pub fn new(text: impl Into<String>) -> Self {
        RawTweet(text.into())
    }

    /// Decodes raw bytes. Valid UTF-8 passes through. Byte sequences that
    /// encode UTF-16 surrogate halves (CESU-8 / WTF-8 style `ED A0..BF xx`)
    /// are unpaired surrogates and get stripped; anything else that is not
    /// UTF-8 is rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TextError> {
        match std::str::from_utf8(bytes) {
            Ok(s) => return Ok(RawTweet(s.to_owned())),
            Err(_) => {}
        }
        let mut cleaned = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == 0xED
                && i + 2 < bytes.len()
                && (0xA0..=0xBF).contains(&bytes[i + 1])
                && (0x80..=0xBF).contains(&bytes[i + 2])
            {
                i += 3;
                continue;
            }
            cleaned.push(bytes[i]);
            i += 1;
        }
        String::from_utf8(cleaned)
            .map(RawTweet)
            .map_err(|e| TextError::IrreparableEncoding {
                offset: e.utf8_error().valid_up_to(),
            })
    }

    /// Parses one line of a raw corpus file, where the producer escaped
    /// in-tweet newlines as a literal backslash-n.
    pub fn from_corpus_line(line: &str) -> Self {
        RawTweet(line.replace("\\n", "\n"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A normalized tweet. Only obtainable through [`preprocess_tweet`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CleanTweet(String);

impl CleanTweet {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }

    pub fn token_count(&self) -> usize {
        self.0.split_whitespace().count()
    }
}

impl fmt::Display for CleanTweet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CleanTweet {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn url_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)(?:https?://|www\.)\S+").unwrap())
}

fn mention_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w{1,15}\b").unwrap())
}

/// Spans of `text` that are URLs under the normalizer's URL rule.
pub fn find_urls(text: &str) -> Vec<(usize, usize)> {
    url_regex().find_iter(text).map(|m| (m.start(), m.end())).collect()
}

/// Spans of `text` that are @-mentions: `@` plus 1 to 15 word characters,
/// not glued to a preceding word character (so e-mail addresses are left
/// alone) and not followed by one (so over-long handles are left alone).
pub fn find_mentions(text: &str) -> Vec<(usize, usize)> {
    mention_regex()
        .find_iter(text)
        .filter(|m| {
            !text[..m.start()]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric() || c == '_')
        })
        .map(|m| (m.start(), m.end()))
        .collect()
}

fn replace_spans(text: &str, spans: &[(usize, usize)], with: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for &(s, e) in spans {
        out.push_str(&text[last..s]);
        out.push_str(with);
        last = e;
    }
    out.push_str(&text[last..]);
    out
}

fn decode_entities(text: &str) -> String {
    let mut cur = text.to_owned();
    // `&amp;amp;` needs two rounds.
    loop {
        let next = html_escape::decode_html_entities(&cur).into_owned();
        if next == cur {
            return cur;
        }
        cur = next;
    }
}

fn is_pictographic(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF
        | 0x2600..=0x27BF
        | 0x2B00..=0x2BFF
        | 0x1FC00..=0x1FFFD
        | 0xE0020..=0xE007F
        | 0x200D
        | 0xFE0F)
}

/// `:grinning_face:` style textual form of an emoji name.
fn emoji_text(name: &str) -> String {
    let words: Vec<&str> = name
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .collect();
    format!(":{}:", words.join("_"))
}

fn textualize_emoji(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for g in text.graphemes(true) {
        let starts_pictographic = g.chars().next().is_some_and(is_pictographic);
        let known = emojis::get(g).or_else(|| {
            let bare: String = g.chars().filter(|&c| c != '\u{FE0F}').collect();
            emojis::get(&bare)
        });
        match known {
            // Plain ASCII such as `#` or digits only count when keycapped.
            Some(e) if !g.is_ascii() => out.push_str(&emoji_text(e.name())),
            _ if starts_pictographic => {}
            _ => out.push_str(g),
        }
    }
    out
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fix_encoding(text: &str) -> String {
    text.nfc()
        .filter(|c| !c.is_control() && *c != '\u{FFFD}')
        .collect()
}

fn normalize_pass(text: &str) -> String {
    let s = decode_entities(text);
    let s = replace_spans(&s, &find_urls(&s), URL_TOKEN);
    let spans: Vec<_> = find_mentions(&s);
    let s = replace_spans(&s, &spans, USER_TOKEN);
    let s = textualize_emoji(&s);
    let s = collapse_whitespace(&s);
    fix_encoding(&s)
}

/// Normalizes one tweet.
pub fn preprocess_tweet(raw: &RawTweet) -> CleanTweet {
    preprocess_str(raw.as_str())
}

pub fn preprocess_str(text: &str) -> CleanTweet {
    let mut cur = normalize_pass(text);
    for _ in 1..MAX_PASSES {
        let next = normalize_pass(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    CleanTweet(cur)
}

/// True iff the tweet has strictly more than `min_tokens` whitespace tokens.
pub fn passes_length_filter(t: &CleanTweet, min_tokens: usize) -> bool {
    t.token_count() > min_tokens
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    #[serde(rename = "tokens")]
    pub token_count: u64,
    #[serde(rename = "sentences")]
    pub sentence_count: u64,
    #[serde(rename = "unique_tokens")]
    pub unique_token_count: u64,
}

/// Number of sentences: segments ended by `.`, `!` or `?` followed by
/// whitespace or end of text, counting only segments that contain a letter
/// or digit.
pub fn count_sentences(text: &str) -> u64 {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut has_content = false;
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            has_content = true;
        }
        let terminal = matches!(c, '.' | '!' | '?')
            && chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if terminal && has_content {
            count += 1;
            has_content = false;
        }
    }
    if has_content {
        count += 1;
    }
    count
}

/// Running statistics; `merge` is associative and commutative so shards can
/// be aggregated in any grouping.
#[derive(Debug, Clone, Default)]
pub struct StatsAccumulator {
    tokens: u64,
    sentences: u64,
    vocab: HashSet<String>,
}

impl StatsAccumulator {
    pub fn add(&mut self, text: &str) {
        for tok in text.split_whitespace() {
            self.tokens += 1;
            if !self.vocab.contains(tok) {
                self.vocab.insert(tok.to_owned());
            }
        }
        self.sentences += count_sentences(text);
    }

    pub fn merge(mut self, mut other: StatsAccumulator) -> StatsAccumulator {
        if other.vocab.len() > self.vocab.len() {
            std::mem::swap(&mut self.vocab, &mut other.vocab);
        }
        self.vocab.extend(other.vocab);
        self.tokens += other.tokens;
        self.sentences += other.sentences;
        self
    }

    pub fn finish(&self) -> CorpusStats {
        CorpusStats {
            token_count: self.tokens,
            sentence_count: self.sentences,
            unique_token_count: self.vocab.len() as u64,
        }
    }
}

pub fn corpus_stats<I, S>(corpus: I) -> CorpusStats
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut acc = StatsAccumulator::default();
    for t in corpus {
        acc.add(t.as_ref());
    }
    acc.finish()
}

/// Sharded version of [`corpus_stats`] over an in-memory corpus.
pub fn corpus_stats_parallel<S: AsRef<str> + Sync>(corpus: &[S]) -> CorpusStats {
    corpus
        .par_iter()
        .fold(StatsAccumulator::default, |mut acc, t| {
            acc.add(t.as_ref());
            acc
        })
        .reduce(StatsAccumulator::default, StatsAccumulator::merge)
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pp(s: &str) -> String {
        preprocess_str(s).into_string()
    }

    #[test]
    fn replaces_urls_mentions_and_entities() {
        assert_eq!(
            pp("Quake near city! https://t.co/abc @john &amp; family safe"),
            "Quake near city! HTTPURL @USER & family safe"
        );
    }

    #[test]
    fn identity_on_clean_text() {
        assert_eq!(pp("already clean text"), "already clean text");
    }

    #[test]
    fn collapses_whitespace() {
        assert_eq!(pp("a\n\nb   c"), "a b c");
        assert_eq!(pp("  lead\ttrail \r\n"), "lead trail");
    }

    #[test]
    fn bare_www_and_http() {
        assert_eq!(pp("see www.example.org/x now"), "see HTTPURL now");
        assert_eq!(pp("HTTP://A.B"), "HTTPURL");
    }

    #[test]
    fn mentions_respect_handle_rules() {
        assert_eq!(pp("mail a@b.com"), "mail a@b.com");
        assert_eq!(pp("@abcdefghijklmnopqrs hi"), "@abcdefghijklmnopqrs hi");
        assert_eq!(pp("@abcdefghijklmno hi"), "@USER hi");
        assert_eq!(pp("cc @x_y, @z"), "cc @USER, @USER");
    }

    #[test]
    fn nested_entities_fully_decoded() {
        assert_eq!(pp("fish &amp;amp; chips &lt;3"), "fish & chips <3");
    }

    #[test]
    fn emoji_textualized() {
        assert_eq!(pp("safe 😀"), "safe :grinning_face:");
        assert_eq!(pp("ok👍🏽"), "ok:thumbs_up_medium_skin_tone:");
        // digits and `#` are not emoji on their own
        assert_eq!(pp("#help 911"), "#help 911");
    }

    #[test]
    fn unknown_pictograph_dropped() {
        // unassigned code point in the pictographic block
        assert_eq!(pp("x \u{1FAFF} y"), "x y");
    }

    #[test]
    fn encoding_fix_applies_nfc_and_drops_controls() {
        assert_eq!(pp("cafe\u{301}"), "caf\u{e9}");
        assert_eq!(pp("a\u{0}b"), "ab");
    }

    #[test]
    fn control_between_spaces_leaves_single_space() {
        assert_eq!(pp("a \u{1} b"), "a b");
    }

    #[test]
    fn repairs_surrogate_bytes_and_rejects_garbage() {
        let mut bytes = b"ok ".to_vec();
        bytes.extend_from_slice(&[0xED, 0xA0, 0xBD]);
        bytes.extend_from_slice(b"!");
        assert_eq!(RawTweet::from_bytes(&bytes).unwrap().as_str(), "ok !");
        assert_eq!(
            RawTweet::from_bytes(&[b'a', 0xFF, b'b']),
            Err(TextError::IrreparableEncoding { offset: 1 })
        );
    }

    #[test]
    fn corpus_line_unescapes_newlines() {
        let raw = RawTweet::from_corpus_line("a\\nb");
        assert_eq!(pp(raw.as_str()), "a b");
    }

    #[test]
    fn length_filter_is_strict() {
        let eleven = preprocess_str("one two three four five six seven eight nine ten eleven");
        let ten = preprocess_str("one two three four five six seven eight nine ten");
        assert!(passes_length_filter(&eleven, 10));
        assert!(!passes_length_filter(&ten, 10));
        assert!(!passes_length_filter(&preprocess_str(""), 10));
    }

    #[test]
    fn stats_examples() {
        let s = corpus_stats(["a b. c d"]);
        assert_eq!((s.token_count, s.sentence_count, s.unique_token_count), (4, 2, 4));
        let s = corpus_stats(Vec::<String>::new());
        assert_eq!(s, CorpusStats::default());
        let s = corpus_stats(["x x x"]);
        assert_eq!((s.token_count, s.sentence_count, s.unique_token_count), (3, 1, 1));
    }

    #[test]
    fn sentence_rule() {
        assert_eq!(count_sentences("Hi!!! there"), 2);
        assert_eq!(count_sentences("v1.2 released."), 1);
        assert_eq!(count_sentences(""), 0);
        assert_eq!(count_sentences(". . ."), 0);
    }

    #[test]
    fn stats_json_field_names() {
        let j = serde_json::to_value(corpus_stats(["a"])).unwrap();
        assert_eq!(j, serde_json::json!({"tokens": 1, "sentences": 1, "unique_tokens": 1}));
    }

    #[test]
    fn parallel_stats_match_serial() {
        let corpus: Vec<String> = (0..500)
            .map(|i| format!("w{} w{} shared. end{}!", i % 7, i % 13, i % 3))
            .collect();
        assert_eq!(corpus_stats(&corpus), corpus_stats_parallel(&corpus));
    }
}

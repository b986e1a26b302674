//! Synthetic topic-clustered corpora for tests and examples.
//!
//! Each topic owns a disjoint set of invented words grouped into fixed
//! phrases. A sentence strings together phrases from one topic, joined by
//! shared function words. Both phrases and function words follow Zipf-like
//! frequencies. Phrases make masked tokens predictable from their
//! neighbours. Disjoint topic vocabularies make topics separable, and a
//! masked word is predictable from the topic of its surrounding document.

use std::collections::HashSet;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicCorpusConfig {
    pub topics: usize,
    pub phrases_per_topic: usize,
    /// Inclusive range of words per phrase.
    pub phrase_len: (usize, usize),
    pub function_words: usize,
    /// Inclusive range of phrases per sentence.
    pub sentence_phrases: (usize, usize),
    /// Phrase `r` (1-based) of a topic is drawn with weight `r^-s`.
    pub zipf_exponent: f64,
    pub seed: u64,
}

impl Default for TopicCorpusConfig {
    fn default() -> Self {
        TopicCorpusConfig {
            topics: 4,
            phrases_per_topic: 10,
            phrase_len: (2, 4),
            function_words: 24,
            sentence_phrases: (2, 5),
            zipf_exponent: 1.5,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TopicCorpus {
    config: TopicCorpusConfig,
    phrases: Vec<Vec<Vec<String>>>,
    function_words: Vec<String>,
    function_dist: WeightedIndex<f64>,
    phrase_dist: WeightedIndex<f64>,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

fn invent_word(rng: &mut impl Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), VOWELS.choose(rng).unwrap()))
        .collect()
}

impl TopicCorpus {
    pub fn new(config: TopicCorpusConfig) -> Self {
        assert!(config.topics >= 1 && config.phrases_per_topic >= 1 && config.function_words >= 1);
        assert!(config.phrase_len.0 >= 1 && config.phrase_len.0 <= config.phrase_len.1);
        assert!(config.sentence_phrases.0 >= 1 && config.sentence_phrases.0 <= config.sentence_phrases.1);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut seen = HashSet::new();
        let mut fresh = |rng: &mut ChaCha8Rng, syllables: usize| loop {
            let w = invent_word(rng, syllables);
            if seen.insert(w.clone()) {
                return w;
            }
        };
        let function_words: Vec<String> = (0..config.function_words).map(|_| fresh(&mut rng, 1)).collect();
        let phrases = (0..config.topics)
            .map(|_| {
                (0..config.phrases_per_topic)
                    .map(|_| {
                        let n = rng.gen_range(config.phrase_len.0..=config.phrase_len.1);
                        (0..n)
                            .map(|_| {
                                let syllables = rng.gen_range(2..=3);
                                fresh(&mut rng, syllables)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let zipf = |n: usize, s: f64| {
            WeightedIndex::new((1..=n).map(|r| (r as f64).powf(-s))).expect("positive weights")
        };
        let function_dist = zipf(config.function_words, 1.0);
        let phrase_dist = zipf(config.phrases_per_topic, config.zipf_exponent);
        TopicCorpus { config, phrases, function_words, function_dist, phrase_dist }
    }

    pub fn config(&self) -> &TopicCorpusConfig {
        &self.config
    }

    pub fn num_topics(&self) -> usize {
        self.config.topics
    }

    /// Distinct words across all topics and function words.
    pub fn vocabulary_size(&self) -> usize {
        self.function_words.len() + self.phrases.iter().flatten().map(Vec::len).sum::<usize>()
    }

    /// One sentence on `topic`.
    pub fn sentence(&self, topic: usize, rng: &mut impl Rng) -> String {
        let (lo, hi) = self.config.sentence_phrases;
        let n = rng.gen_range(lo..=hi);
        let mut words: Vec<&str> = Vec::new();
        for i in 0..n {
            if i > 0 || rng.gen_bool(0.5) {
                words.push(&self.function_words[self.function_dist.sample(rng)]);
            }
            let phrase = &self.phrases[topic][self.phrase_dist.sample(rng)];
            words.extend(phrase.iter().map(String::as_str));
        }
        words.join(" ")
    }

    /// `sentences` sentences on one topic joined by spaces.
    pub fn document(&self, topic: usize, sentences: usize, rng: &mut impl Rng) -> String {
        (0..sentences).map(|_| self.sentence(topic, rng)).collect::<Vec<_>>().join(" ")
    }

    /// `n` single-topic documents of `sentences` sentences, topics drawn
    /// uniformly.
    pub fn documents(&self, n: usize, sentences: usize, rng: &mut impl Rng) -> Vec<(usize, String)> {
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0..self.config.topics);
                (t, self.document(t, sentences, rng))
            })
            .collect()
    }

    /// `n` sentences with uniformly drawn topics, returned with their topic.
    pub fn labeled_sentences(&self, n: usize, rng: &mut impl Rng) -> Vec<(usize, String)> {
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0..self.config.topics);
                (t, self.sentence(t, rng))
            })
            .collect()
    }

    /// `per_topic` sentences of every topic, topics interleaved.
    pub fn balanced_sentences(&self, per_topic: usize, rng: &mut impl Rng) -> Vec<(usize, String)> {
        (0..per_topic)
            .flat_map(|_| (0..self.config.topics).collect::<Vec<_>>())
            .map(|t| (t, self.sentence(t, rng)))
            .collect()
    }

    /// `(anchor, positive, negative)` with anchor and positive on one topic
    /// and the negative on a different one.
    pub fn triplets(&self, n: usize, rng: &mut impl Rng) -> Vec<(String, String, String)> {
        assert!(self.config.topics >= 2, "triplets need at least two topics");
        (0..n)
            .map(|_| {
                let t = rng.gen_range(0..self.config.topics);
                let mut o = rng.gen_range(0..self.config.topics - 1);
                if o >= t {
                    o += 1;
                }
                (self.sentence(t, rng), self.sentence(t, rng), self.sentence(o, rng))
            })
            .collect()
    }
}

//! `vocab.json` + `merges.txt` persistence.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{TokenizerError, TokenizerModel, BASE_VOCAB, NUM_SPECIAL};
use crate::util::write_atomic;

impl TokenizerModel {
    pub fn vocab_json(&self) -> String {
        let map: Map<String, Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), Value::from(i as u64)))
            .collect();
        let mut s = serde_json::to_string_pretty(&Value::Object(map)).unwrap();
        s.push('\n');
        s
    }

    pub fn merges_txt(&self) -> String {
        let mut s = String::new();
        for (a, b) in self.merges() {
            s.push_str(a);
            s.push(' ');
            s.push_str(b);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("vocab.json"), self.vocab_json().as_bytes())?;
        write_atomic(&dir.join("merges.txt"), self.merges_txt().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        let vocab = fs::read_to_string(dir.join("vocab.json"))?;
        let merges = fs::read_to_string(dir.join("merges.txt"))?;
        Self::from_parts(&vocab, &merges)
    }

    /// Rebuilds a model from file contents, checking that ids are a
    /// bijection onto `0..V`, that the specials and byte tokens sit at their
    /// reserved ids, and that every merge output is in the vocabulary.
    pub fn from_parts(vocab_json: &str, merges_txt: &str) -> Result<Self, TokenizerError> {
        let bad = |m: String| TokenizerError::Malformed(m);
        let map: Map<String, Value> = serde_json::from_str(vocab_json)?;
        let mut slots: Vec<Option<String>> = vec![None; map.len()];
        for (tok, v) in &map {
            let id = v
                .as_u64()
                .ok_or_else(|| bad(format!("id for {tok:?} is not an integer")))?
                as usize;
            let slot = slots
                .get_mut(id)
                .ok_or_else(|| bad(format!("id {id} outside 0..{}", map.len())))?;
            if slot.replace(tok.clone()).is_some() {
                return Err(bad(format!("id {id} assigned twice")));
            }
        }
        let tokens: Vec<String> = slots.into_iter().map(|s| s.unwrap()).collect();
        let base = TokenizerModel::base();
        if tokens.len() < BASE_VOCAB || tokens[..BASE_VOCAB] != base.tokens[..] {
            return Err(bad("special and byte tokens must occupy ids 0..261 in canonical order".into()));
        }

        let mut model = base;
        for (lineno, line) in merges_txt.lines().enumerate() {
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| bad(format!("merges line {}: expected two tokens", lineno + 1)))?;
            let (ia, ib) = match (model.id(a), model.id(b)) {
                (Some(ia), Some(ib)) if ia as usize >= NUM_SPECIAL && ib as usize >= NUM_SPECIAL => {
                    (ia, ib)
                }
                _ => return Err(bad(format!("merges line {}: unknown token", lineno + 1))),
            };
            let id = model.push_merge(ia, ib);
            if tokens.get(id as usize).map(String::as_str) != model.token(id) {
                return Err(bad(format!(
                    "merges line {}: output {:?} does not match vocab.json",
                    lineno + 1,
                    model.token(id).unwrap()
                )));
            }
        }
        if model.vocab_size() != tokens.len() {
            return Err(bad(format!(
                "vocab.json has {} tokens but merges produce {}",
                tokens.len(),
                model.vocab_size()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::super::train_bpe;
    use super::*;

    #[test]
    fn file_round_trip() {
        let m = train_bpe(["the cat sat on the mat", "the hat"], BASE_VOCAB + 12).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = TokenizerModel::load(dir.path()).unwrap();
        assert_eq!(back, m);
        let merges = std::fs::read_to_string(dir.path().join("merges.txt")).unwrap();
        assert_eq!(merges.lines().count(), m.num_merges());
    }

    #[test]
    fn rejects_inconsistent_files() {
        let m = train_bpe(["abab"], BASE_VOCAB + 2).unwrap();
        let vocab = m.vocab_json();
        assert!(TokenizerModel::from_parts(&vocab, "a b\n").is_err());
        assert!(TokenizerModel::from_parts(&vocab, "").is_err());
        assert!(TokenizerModel::from_parts("{\"a\": 0}", "").is_err());
        assert!(TokenizerModel::from_parts(&vocab, &m.merges_txt()).is_ok());
    }
}

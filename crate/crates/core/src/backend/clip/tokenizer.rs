//! Byte-pair tokenizer matching the public CLIP scheme: lowercased,
//! whitespace-collapsed text is split by a word pattern, bytes are mapped
//! through the stable byte-to-unicode table, and merges ranked by
//! `merges.txt` are applied with a `</w>` marker on the word-final symbol.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SOT_TOKEN: &str = "<|startoftext|>";
pub const EOT_TOKEN: &str = "<|endoftext|>";

/// The GPT-2/CLIP byte-to-unicode table: printable bytes map to themselves,
/// the rest to code points 256+.
fn bytes_to_unicode() -> Vec<char> {
    let mut bs: Vec<u32> = (b'!'..=b'~').map(u32::from).collect();
    bs.extend((0xa1u32)..=0xac);
    bs.extend((0xaeu32)..=0xff);
    let mut table = vec![None::<char>; 256];
    for b in &bs {
        table[*b as usize] = char::from_u32(*b);
    }
    let mut n = 0u32;
    for b in 0..256u32 {
        if table[b as usize].is_none() {
            table[b as usize] = char::from_u32(256 + n);
            n += 1;
        }
    }
    table.into_iter().map(|c| c.unwrap()).collect()
}

pub struct BpeTokenizer {
    encoder: HashMap<String, usize>,
    ranks: HashMap<(String, String), usize>,
    byte_table: Vec<char>,
    pub sot_id: usize,
    pub eot_id: usize,
}

impl BpeTokenizer {
    /// Load `vocab.json` (token -> id) and `merges.txt` (one merge per line,
    /// highest priority first) from the model directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.json");
        let encoder: HashMap<String, usize> = serde_json::from_str(
            &fs::read_to_string(&vocab_path)
                .map_err(|e| Error::io(vocab_path.display().to_string(), e))?,
        )
        .map_err(|e| Error::Json {
            path: vocab_path.display().to_string(),
            source: e,
        })?;
        let merges_path = dir.join("merges.txt");
        let merges_text = fs::read_to_string(&merges_path)
            .map_err(|e| Error::io(merges_path.display().to_string(), e))?;
        let mut ranks = HashMap::new();
        for (i, line) in merges_text
            .lines()
            .filter(|l| !l.is_empty() && !l.starts_with("#version"))
            .enumerate()
        {
            let mut parts = line.split_whitespace();
            let (a, b) = (parts.next(), parts.next());
            if let (Some(a), Some(b)) = (a, b) {
                ranks.insert((a.to_string(), b.to_string()), i);
            }
        }
        Self::new(encoder, ranks)
    }

    pub fn new(
        encoder: HashMap<String, usize>,
        ranks: HashMap<(String, String), usize>,
    ) -> Result<Self> {
        let sot_id = *encoder
            .get(SOT_TOKEN)
            .ok_or_else(|| Error::format("vocab.json", format!("missing {SOT_TOKEN}")))?;
        let eot_id = *encoder
            .get(EOT_TOKEN)
            .ok_or_else(|| Error::format("vocab.json", format!("missing {EOT_TOKEN}")))?;
        Ok(BpeTokenizer {
            encoder,
            ranks,
            byte_table: bytes_to_unicode(),
            sot_id,
            eot_id,
        })
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mapped: String = word.bytes().map(|b| self.byte_table[b as usize]).collect();
        let chars: Vec<String> = mapped.chars().map(|c| c.to_string()).collect();
        if chars.is_empty() {
            return vec![];
        }
        let mut parts = chars;
        let last = parts.len() - 1;
        parts[last] = format!("{}</w>", parts[last]);
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..parts.len().saturating_sub(1) {
                if let Some(rank) = self
                    .ranks
                    .get(&(parts[i].clone(), parts[i + 1].clone()))
                {
                    if best.map_or(true, |(r, _)| *rank < r) {
                        best = Some((*rank, i));
                    }
                }
            }
            match best {
                Some((_, i)) => {
                    let merged = format!("{}{}", parts[i], parts[i + 1]);
                    parts.splice(i..=i + 1, [merged]);
                }
                None => break,
            }
            if parts.len() == 1 {
                break;
            }
        }
        parts
    }

    /// Split cleaned text into word pieces (the CLIP word pattern, spelled
    /// out without a regex engine: contractions, letter runs, single digits,
    /// punctuation runs).
    fn split_words(text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut words = Vec::new();
        let mut i = 0;
        let contractions = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            if c == '\'' {
                let rest: String = chars[i..].iter().collect();
                if let Some(m) = contractions.iter().find(|p| rest.starts_with(**p)) {
                    words.push(m.to_string());
                    i += m.chars().count();
                    continue;
                }
            }
            if c.is_alphabetic() {
                let start = i;
                while i < chars.len() && chars[i].is_alphabetic() {
                    i += 1;
                }
                words.push(chars[start..i].iter().collect());
                continue;
            }
            if c.is_numeric() {
                words.push(c.to_string());
                i += 1;
                continue;
            }
            // punctuation run
            let start = i;
            while i < chars.len()
                && !chars[i].is_whitespace()
                && !chars[i].is_alphabetic()
                && !chars[i].is_numeric()
            {
                i += 1;
            }
            words.push(chars[start..i].iter().collect());
        }
        words
    }

    fn clean(text: &str) -> String {
        text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
    }

    /// Token ids of the cleaned text, without start/end markers.
    pub fn encode_text(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for word in Self::split_words(&Self::clean(text)) {
            for piece in self.bpe(&word) {
                match self.encoder.get(&piece) {
                    Some(id) => ids.push(*id),
                    None => {
                        return Err(Error::validation(format!(
                            "token piece '{piece}' missing from vocabulary"
                        )))
                    }
                }
            }
        }
        Ok(ids)
    }

    /// Full prompt encoding: `[SOT] text [EOT]`.
    pub fn encode_prompt(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![self.sot_id];
        ids.extend(self.encode_text(text)?);
        ids.push(self.eot_id);
        Ok(ids)
    }
}

impl BpeTokenizer {
    /// Small ASCII vocabulary (single characters plus a few merges) for
    /// synthetic backends and tests; no external files needed.
    pub fn ascii_test_vocabulary() -> BpeTokenizer {
        let mut encoder = HashMap::new();
        let mut id = 0;
        let mut put = |s: String, encoder: &mut HashMap<String, usize>| {
            let next = id;
            encoder.insert(s, next);
            id += 1;
        };
        for c in 'a'..='z' {
            put(c.to_string(), &mut encoder);
            put(format!("{c}</w>"), &mut encoder);
        }
        for s in [
            "at</w>",
            "ing</w>",
            "in",
            "ng</w>",
            "dr",
            "iv",
            SOT_TOKEN,
            EOT_TOKEN,
            ".</w>",
            "'s</w>",
        ] {
            put(s.to_string(), &mut encoder);
        }
        let merges = [
            ("a", "t</w>"),
            ("i", "n"),
            ("n", "g</w>"),
            ("in", "g</w>"),
            ("d", "r"),
            ("i", "v"),
        ];
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.to_string(), b.to_string()), i))
            .collect();
        BpeTokenizer::new(encoder, ranks).expect("test vocabulary is complete")
    }

    /// Persist the vocabulary files next to a converted model (test
    /// fixtures and tooling).
    pub fn save_ascii_test_vocabulary(dir: &Path) -> Result<()> {
        let tok = Self::ascii_test_vocabulary();
        let vocab_path = dir.join("vocab.json");
        std::fs::write(&vocab_path, serde_json::to_string(&tok.encoder).unwrap())
            .map_err(|e| Error::io(vocab_path.display().to_string(), e))?;
        let mut merges: Vec<(&(String, String), &usize)> = tok.ranks.iter().collect();
        merges.sort_by_key(|(_, rank)| **rank);
        let text: String = merges
            .iter()
            .map(|((a, b), _)| format!("{a} {b}\n"))
            .collect();
        let merges_path = dir.join("merges.txt");
        std::fs::write(&merges_path, text)
            .map_err(|e| Error::io(merges_path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_tokenizer() -> BpeTokenizer {
        BpeTokenizer::ascii_test_vocabulary()
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let table = bytes_to_unicode();
        let mut seen = std::collections::HashSet::new();
        for c in &table {
            assert!(seen.insert(*c));
        }
        assert_eq!(table[b'a' as usize], 'a');
    }

    #[test]
    fn merges_apply_in_rank_order() {
        let tok = tiny_tokenizer();
        // "at" -> ["a", "t</w>"] -> merge rank 0 -> ["at</w>"]
        assert_eq!(tok.bpe("at"), vec!["at</w>".to_string()]);
        // "ing" -> i n g</w> -> "in" + "g</w>" -> "ing</w>"
        assert_eq!(tok.bpe("ing"), vec!["ing</w>".to_string()]);
    }

    #[test]
    fn cleaning_and_splitting() {
        let words = BpeTokenizer::split_words(&BpeTokenizer::clean("  Driving   at Night's end. "));
        assert_eq!(
            words,
            vec!["driving", "at", "night", "'s", "end", "."]
        );
    }

    #[test]
    fn prompt_encoding_brackets_with_sot_eot() {
        let tok = tiny_tokenizer();
        let ids = tok.encode_prompt("at").unwrap();
        assert_eq!(ids.first(), Some(&tok.sot_id));
        assert_eq!(ids.last(), Some(&tok.eot_id));
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn unknown_piece_is_an_error() {
        let tok = tiny_tokenizer();
        // digits are not in the tiny vocabulary
        assert!(tok.encode_text("42").is_err());
    }
}

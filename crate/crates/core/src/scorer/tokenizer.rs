use std::collections::HashMap;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: usize = 4;

/// Character-level tokenizer. Ids `0..4` are `<pad>`, `<bos>`, `<eos>`,
/// `<unk>`; the alphabet follows in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    alphabet: Vec<char>,
    index: HashMap<char, usize>,
}

impl Tokenizer {
    pub fn new(alphabet: &str) -> Self {
        let mut chars = Vec::new();
        let mut index = HashMap::new();
        for ch in alphabet.chars() {
            if let std::collections::hash_map::Entry::Vacant(e) = index.entry(ch) {
                e.insert(SPECIALS + chars.len());
                chars.push(ch);
            }
        }
        Tokenizer {
            alphabet: chars,
            index,
        }
    }

    /// Space through tilde.
    pub fn printable_ascii() -> Self {
        Tokenizer::new(&(b' '..=b'~').map(char::from).collect::<String>())
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.alphabet.len()
    }

    pub fn alphabet(&self) -> String {
        self.alphabet.iter().collect()
    }

    /// Out-of-alphabet characters map to `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIALS)
            .filter_map(|&id| self.alphabet.get(id - SPECIALS))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn specials_and_unknowns() {
        let t = Tokenizer::new("ab");
        assert_eq!(t.vocab_size(), 6);
        assert_eq!(t.encode("abz"), vec![4, 5, UNK]);
        assert_eq!(t.decode(&[BOS, 4, 5, EOS]), "ab");
    }

    proptest! {
        #[test]
        fn round_trip(text in "[ -~]{0,40}") {
            let t = Tokenizer::printable_ascii();
            let ids = t.encode(&text);
            prop_assert!(ids.iter().all(|&i| i < t.vocab_size()));
            prop_assert_eq!(t.decode(&ids), text);
        }
    }
}

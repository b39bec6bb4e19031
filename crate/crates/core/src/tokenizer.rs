//! Sub-word tokenization: vocabulary induction by likelihood-scored pair
//! merging, greedy longest-match encoding, and decoding. A character-level
//! mode exists for the tokenization ablation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const SOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

pub const UNK_TOKEN: &str = "[UNK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const SOS_TOKEN: &str = "[SOS]";
pub const EOS_TOKEN: &str = "[EOS]";

/// Continuation prefix carried by non-initial word pieces.
pub const CONT_PREFIX: &str = "##";

/// Word separator token used by the character-level mode.
pub const SPACE_TOKEN: &str = "\u{2581}";

const SPECIALS: [&str; 4] = [UNK_TOKEN, PAD_TOKEN, SOS_TOKEN, EOS_TOKEN];

/// Canonical text form: lowercase, punctuation stripped, whitespace collapsed.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            for lc in c.to_lowercase() {
                out.push(lc);
            }
        } else {
            pending_space = true;
        }
    }
    out
}

/// A token sequence bracketed by start/end sentinels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    /// Wrap content ids in SOS/EOS sentinels.
    pub fn bracket(content: Vec<u32>) -> Self {
        let mut ids = Vec::with_capacity(content.len() + 2);
        ids.push(SOS_ID);
        ids.extend(content);
        ids.push(EOS_ID);
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids with leading SOS and trailing EOS removed.
    pub fn content(&self) -> &[u32] {
        let mut s = self.ids.as_slice();
        if s.first() == Some(&SOS_ID) {
            s = &s[1..];
        }
        if s.last() == Some(&EOS_ID) {
            s = &s[..s.len() - 1];
        }
        s
    }
}

/// Ordered token list; line index in the vocab file is the token id.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 4 || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::format(0, "vocab must start with [UNK] [PAD] [SOS] [EOS]"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::format(0, format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::data(format!("token id {} out of range {}", id, self.tokens.len())))
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.tokens.join("\n") + "\n";
        crate::io::write_atomic(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = body.lines().map(|l| l.to_string()).collect();
        Vocab::from_tokens(tokens)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerKind {
    WordPiece,
    Chars,
}

/// A vocab plus the encoding discipline that goes with it.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub vocab: Vocab,
    pub kind: TokenizerKind,
}

impl Tokenizer {
    pub fn new(vocab: Vocab, kind: TokenizerKind) -> Self {
        Tokenizer { vocab, kind }
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        match self.kind {
            TokenizerKind::WordPiece => encode_wordpiece(text, &self.vocab),
            TokenizerKind::Chars => encode_chars(text, &self.vocab),
        }
    }

    pub fn decode(&self, seq: &TokenSequence) -> Result<String> {
        match self.kind {
            TokenizerKind::WordPiece => decode_wordpiece(seq, &self.vocab),
            TokenizerKind::Chars => decode_chars(seq, &self.vocab),
        }
    }
}

/// Greedy pair-merge vocabulary induction. Merges are scored by
/// `count(pair) / (count(left) * count(right))`; ties break toward the
/// lexicographically smaller pair, so induction is deterministic.
pub fn train_vocab(corpus: &[String], target_size: usize) -> Result<Vocab> {
    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for line in corpus {
        for w in normalize(line).split_whitespace() {
            *word_counts.entry(w.to_string()).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::config("empty training corpus"));
    }

    // initial segmentation: first char plain, the rest with the prefix
    let mut segs: Vec<(Vec<String>, u64)> = Vec::new();
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for (w, c) in &word_counts {
        let chars: Vec<char> = w.chars().collect();
        let mut units = Vec::with_capacity(chars.len());
        for (i, ch) in chars.iter().enumerate() {
            let u = if i == 0 { ch.to_string() } else { format!("{CONT_PREFIX}{ch}") };
            alphabet.insert(u.clone());
            units.push(u);
        }
        segs.push((units, *c));
    }

    let base = SPECIALS.len() + alphabet.len();
    if target_size < base {
        return Err(Error::config(format!(
            "target vocab size {} below alphabet + specials = {}",
            target_size, base
        )));
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().cloned());

    while tokens.len() < target_size {
        // current unit and adjacent-pair counts under the working segmentation
        let mut unit_counts: BTreeMap<&str, u64> = BTreeMap::new();
        let mut pair_counts: BTreeMap<(&str, &str), u64> = BTreeMap::new();
        for (units, c) in &segs {
            for u in units {
                *unit_counts.entry(u).or_insert(0) += c;
            }
            for pair in units.windows(2) {
                *pair_counts.entry((&pair[0], &pair[1])).or_insert(0) += c;
            }
        }
        // argmax of count(pair) / (count(left) * count(right)) via exact
        // cross-multiplication; ties prefer the lexicographically smaller pair
        let mut best: Option<((&str, &str), u64, u128)> = None;
        for (&(l, r), &c) in &pair_counts {
            if c < 2 {
                continue;
            }
            let denom = unit_counts[l] as u128 * unit_counts[r] as u128;
            let better = match &best {
                None => true,
                Some((bp, bc, bdenom)) => {
                    let lhs = c as u128 * bdenom;
                    let rhs = *bc as u128 * denom;
                    lhs > rhs || (lhs == rhs && (l, r) < *bp)
                }
            };
            if better {
                best = Some(((l, r), c, denom));
            }
        }
        let Some(((left, right), _, _)) = best else { break };
        let merged = format!("{}{}", left, right.strip_prefix(CONT_PREFIX).unwrap_or(right));
        let (left, right) = (left.to_string(), right.to_string());
        tokens.push(merged.clone());
        for (units, _) in segs.iter_mut() {
            let mut i = 0;
            while i + 1 < units.len() {
                if units[i] == left && units[i + 1] == right {
                    units[i] = merged.clone();
                    units.remove(i + 1);
                } else {
                    i += 1;
                }
            }
        }
    }
    Vocab::from_tokens(tokens)
}

/// Character-level vocabulary over the corpus alphabet.
pub fn char_vocab(corpus: &[String]) -> Result<Vocab> {
    let mut alphabet: BTreeSet<char> = BTreeSet::new();
    for line in corpus {
        for c in normalize(line).chars() {
            if c != ' ' {
                alphabet.insert(c);
            }
        }
    }
    if alphabet.is_empty() {
        return Err(Error::config("empty training corpus"));
    }
    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.push(SPACE_TOKEN.to_string());
    tokens.extend(alphabet.into_iter().map(|c| c.to_string()));
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match-first segmentation; a word with no full segmentation
/// collapses to a single UNK.
pub fn encode_wordpiece(text: &str, vocab: &Vocab) -> TokenSequence {
    let normalized = normalize(text);
    let mut content = Vec::new();
    for word in normalized.split_whitespace() {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut pos = 0;
        'outer: while pos < chars.len() {
            let mut len = chars.len() - pos;
            while len > 0 {
                let frag: String = chars[pos..pos + len].iter().collect();
                let cand =
                    if pos == 0 { frag } else { format!("{CONT_PREFIX}{frag}") };
                if let Some(id) = vocab.id(&cand) {
                    pieces.push(id);
                    pos += len;
                    continue 'outer;
                }
                len -= 1;
            }
            pieces.clear();
            pieces.push(UNK_ID);
            break;
        }
        content.extend(pieces);
    }
    TokenSequence::bracket(content)
}

fn encode_chars(text: &str, vocab: &Vocab) -> TokenSequence {
    let normalized = normalize(text);
    let mut content = Vec::new();
    for (wi, word) in normalized.split_whitespace().enumerate() {
        if wi > 0 {
            content.push(vocab.id(SPACE_TOKEN).unwrap_or(UNK_ID));
        }
        for c in word.chars() {
            content.push(vocab.id(&c.to_string()).unwrap_or(UNK_ID));
        }
    }
    TokenSequence::bracket(content)
}

/// Strip sentinels, merge continuation pieces, join words with single spaces.
/// UNK renders as a literal placeholder word.
pub fn decode_wordpiece(seq: &TokenSequence, vocab: &Vocab) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    for &id in &seq.ids {
        if id == PAD_ID || id == SOS_ID || id == EOS_ID {
            continue;
        }
        let tok = vocab.token(id)?;
        if id == UNK_ID {
            words.push(UNK_TOKEN.to_string());
        } else if let Some(cont) = tok.strip_prefix(CONT_PREFIX) {
            match words.last_mut() {
                Some(w) => w.push_str(cont),
                None => words.push(cont.to_string()),
            }
        } else {
            words.push(tok.to_string());
        }
    }
    Ok(words.join(" "))
}

fn decode_chars(seq: &TokenSequence, vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in &seq.ids {
        if id == PAD_ID || id == SOS_ID || id == EOS_ID {
            continue;
        }
        let tok = vocab.token(id)?;
        if id == UNK_ID {
            out.push_str(UNK_TOKEN);
        } else if tok == SPACE_TOKEN {
            out.push(' ');
        } else {
            out.push_str(tok);
        }
    }
    Ok(out)
}

/// Set of characters that can be segmented by the vocab (for UNK checks).
pub fn vocab_alphabet(vocab: &Vocab) -> HashSet<char> {
    vocab
        .tokens()
        .iter()
        .skip(SPECIALS.len())
        .flat_map(|t| t.strip_prefix(CONT_PREFIX).unwrap_or(t).chars())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wp(corpus: &[&str], size: usize) -> Tokenizer {
        let lines: Vec<String> = corpus.iter().map(|s| s.to_string()).collect();
        Tokenizer::new(train_vocab(&lines, size).unwrap(), TokenizerKind::WordPiece)
    }

    #[test]
    fn repeated_bigram_word_gets_merged() {
        let tok = wp(&["aa aa aa"], 8);
        assert!(tok.vocab.id("aa").is_some(), "vocab: {:?}", tok.vocab.tokens());
    }

    #[test]
    fn single_char_corpus_yields_alphabet_plus_specials() {
        let tok = wp(&["a b a"], 16);
        assert_eq!(tok.vocab.tokens(), &["[UNK]", "[PAD]", "[SOS]", "[EOS]", "a", "b"]);
    }

    #[test]
    fn training_is_deterministic() {
        let lines: Vec<String> =
            ["the cat sat", "the bat sat", "a cat sat there"].map(String::from).to_vec();
        let v1 = train_vocab(&lines, 24).unwrap();
        let v2 = train_vocab(&lines, 24).unwrap();
        assert_eq!(v1.tokens(), v2.tokens());
    }

    #[test]
    fn target_size_below_alphabet_is_config_error() {
        let lines = vec!["abcdefgh".to_string()];
        assert!(matches!(train_vocab(&lines, 5), Err(Error::Config(_))));
    }

    #[test]
    fn maxmatch_splits_into_longest_pieces() {
        // hand-built vocab exercising longest-match-first
        let tokens: Vec<String> =
            ["[UNK]", "[PAD]", "[SOS]", "[EOS]", "hel", "##lo", "lo", "h", "##e", "##l", "##o"]
                .map(String::from)
                .to_vec();
        let vocab = Vocab::from_tokens(tokens).unwrap();
        let seq = encode_wordpiece("hello", &vocab);
        let hel = vocab.id("hel").unwrap();
        let lo = vocab.id("##lo").unwrap();
        assert_eq!(seq.ids, vec![SOS_ID, hel, lo, EOS_ID]);
    }

    #[test]
    fn whole_word_in_vocab_is_single_token() {
        let tok = wp(&["banana banana banana banana"], 32);
        let seq = tok.encode("banana");
        assert_eq!(seq.ids.len(), 3, "{:?}", seq.ids);
    }

    #[test]
    fn unknown_character_maps_word_to_unk() {
        let tok = wp(&["ab ab"], 16);
        let seq = tok.encode("ab zq ab");
        let unks = seq.ids.iter().filter(|&&i| i == UNK_ID).count();
        assert_eq!(unks, 1);
        let text = tok.decode(&seq).unwrap();
        assert_eq!(text, "ab [UNK] ab");
    }

    #[test]
    fn decode_of_sentinels_only_is_empty() {
        let tok = wp(&["ab"], 16);
        let seq = TokenSequence::new(vec![SOS_ID, EOS_ID]);
        assert_eq!(tok.decode(&seq).unwrap(), "");
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let tok = wp(&["ab"], 16);
        let seq = TokenSequence::new(vec![SOS_ID, 9999, EOS_ID]);
        assert!(tok.decode(&seq).is_err());
    }

    #[test]
    fn round_trip_on_corpus_sentences() {
        let corpus = ["the cat sat on the mat", "a cat and a bat", "the mat sat there"];
        let tok = wp(&corpus, 48);
        for s in corpus {
            let norm = normalize(s);
            let seq = tok.encode(&norm);
            assert_eq!(tok.decode(&seq).unwrap(), norm, "round trip of {s:?}");
        }
    }

    #[test]
    fn encoding_is_prefix_stable_per_word() {
        let corpus = ["walk walked walking", "talk talked talking"];
        let tok = wp(&corpus, 40);
        let a = tok.encode("walked talking");
        let b = tok.encode("talking walked");
        let a1 = tok.encode("walked");
        // walked pieces appear identically wherever the word occurs
        let pieces: Vec<u32> = a1.content().to_vec();
        assert!(a.content().starts_with(&pieces));
        assert!(b.content().ends_with(&pieces));
    }

    #[test]
    fn wordpiece_is_shorter_than_chars_on_average() {
        let corpus: Vec<String> = [
            "the quick brown fox jumps",
            "the lazy dog sleeps",
            "quick brown dogs jump over the fox",
        ]
        .map(String::from)
        .to_vec();
        let wp_tok = Tokenizer::new(train_vocab(&corpus, 64).unwrap(), TokenizerKind::WordPiece);
        let ch_tok = Tokenizer::new(char_vocab(&corpus).unwrap(), TokenizerKind::Chars);
        let mean = |t: &Tokenizer| -> f64 {
            corpus.iter().map(|s| t.encode(s).ids.len() as f64).sum::<f64>() / corpus.len() as f64
        };
        assert!(mean(&wp_tok) < mean(&ch_tok));
    }

    #[test]
    fn char_mode_round_trips() {
        let corpus: Vec<String> = vec!["tok maz bil".to_string()];
        let tok = Tokenizer::new(char_vocab(&corpus).unwrap(), TokenizerKind::Chars);
        let seq = tok.encode("maz bil tok");
        assert_eq!(tok.decode(&seq).unwrap(), "maz bil tok");
    }

    #[test]
    fn normalization_lowers_and_collapses() {
        assert_eq!(normalize("  The CAT,  sat!! "), "the cat sat");
    }
}

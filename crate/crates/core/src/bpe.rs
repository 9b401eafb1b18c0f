//! Byte-level byte-pair encoding.
//!
//! The base alphabet is the 256 byte values, so any UTF-8 input (long s,
//! tilde vowels, combining marks) encodes without unknown tokens and decodes
//! back to the same bytes. There is no whitespace pre-splitting: merges are
//! learned over whole document byte strings and can span word boundaries.
//! They never span documents.
//!
//! Id layout: five special tokens first, then the 256 bytes, then one id per
//! merge in training order.

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const PAD: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const MASK: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;
pub const BYTE_OFFSET: TokenId = NUM_SPECIALS as TokenId;
/// Smallest possible vocabulary: specials plus the 256 bytes.
pub const BASE_VOCAB: usize = NUM_SPECIALS + 256;
pub const DEFAULT_MAX_LEN: usize = 512;

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<s>", "<pad>", "</s>", "<unk>", "<MASK>"];

pub const VOCAB_FILE: &str = "vocab";
pub const MERGES_FILE: &str = "merges";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: TokenId,
    pub eos: TokenId,
    pub mask: TokenId,
    pub pad: TokenId,
    pub unk: TokenId,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos: BOS,
            eos: EOS,
            mask: MASK,
            pad: PAD,
            unk: UNK,
        }
    }
}

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

/// Token ids of one encoded text.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_max_len(&self, max: usize) -> Result<()> {
        if self.ids.len() > max {
            return Err(Error::SequenceTooLong {
                len: self.ids.len(),
                max,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum TokenKind {
    Special,
    Byte,
    Merge(TokenId, TokenId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    bytes: Vec<Vec<u8>>,
    kinds: Vec<TokenKind>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), TokenId>,
    specials: SpecialTokens,
}

impl BpeModel {
    /// The zero-merge model: specials plus raw bytes.
    pub fn byte_level() -> Self {
        let mut bytes = Vec::with_capacity(BASE_VOCAB);
        let mut kinds = Vec::with_capacity(BASE_VOCAB);
        for _ in 0..NUM_SPECIALS {
            bytes.push(Vec::new());
            kinds.push(TokenKind::Special);
        }
        for b in 0..=255u8 {
            bytes.push(vec![b]);
            kinds.push(TokenKind::Byte);
        }
        Self {
            bytes,
            kinds,
            merges: Vec::new(),
            ranks: HashMap::new(),
            specials: SpecialTokens::default(),
        }
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let id = self.bytes.len() as TokenId;
        let mut joined = self.bytes[left as usize].clone();
        joined.extend_from_slice(&self.bytes[right as usize]);
        self.bytes.push(joined);
        self.kinds.push(TokenKind::Merge(left, right));
        self.merges.push((left, right));
        self.ranks.insert((left, right), id);
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.bytes.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    /// Byte content of a token; empty for specials.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.bytes.get(id as usize).map(Vec::as_slice)
    }

    pub fn byte_token(b: u8) -> TokenId {
        BYTE_OFFSET + TokenId::from(b)
    }

    /// The same model keeping only its first `n` merges.
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = Self::byte_level();
        for &(l, r) in self.merges.iter().take(n) {
            out.push_merge(l, r);
        }
        out
    }

    /// Ids for `text` without the sequence framing tokens.
    pub fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        let mut ids: Vec<TokenId> = text.iter().map(|&b| Self::byte_token(b)).collect();
        if self.merges.is_empty() {
            return ids;
        }
        // Repeatedly merge every occurrence of the lowest-ranked pair. This is
        // the same as applying the merge list in order: a merge can only
        // create pairs involving its new token, which rank later.
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&id| (id, w[0], w[1])))
                .min();
            let Some((new_id, left, right)) = best else {
                break;
            };
            let mut out = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == left && ids[i + 1] == right {
                    out.push(new_id);
                    i += 2;
                } else {
                    out.push(ids[i]);
                    i += 1;
                }
            }
            ids = out;
        }
        ids
    }

    /// `<s>` + byte-pair ids of `text` + `</s>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let body = self.encode_bytes(text.as_bytes());
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(self.specials.bos);
        ids.extend(body);
        ids.push(self.specials.eos);
        TokenSequence { ids }
    }

    /// Concatenated bytes of all non-special tokens.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len() * 2);
        for &id in ids {
            let bytes = self.bytes.get(id as usize).ok_or(Error::InvalidTokenId {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes)
            .map_err(|e| Error::InvalidInput(format!("decoded bytes are not UTF-8: {e}")))
    }

    pub fn token_display(&self, id: TokenId) -> String {
        match self.kinds.get(id as usize) {
            Some(TokenKind::Special) => SPECIAL_NAMES[id as usize].to_string(),
            Some(_) => String::from_utf8_lossy(&self.bytes[id as usize]).into_owned(),
            None => format!("<invalid:{id}>"),
        }
    }
}

/// Ordering used to pick the merge among pairs of equal frequency: the pair
/// whose (left bytes, right bytes) is lexicographically smallest wins.
fn pair_key(model: &BpeModel, pair: (TokenId, TokenId)) -> (Vec<u8>, Vec<u8>) {
    (
        model.bytes[pair.0 as usize].clone(),
        model.bytes[pair.1 as usize].clone(),
    )
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: u64,
    key: Reverse<(Vec<u8>, Vec<u8>)>,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| self.key.cmp(&other.key))
            .then_with(|| other.pair.cmp(&self.pair))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn count_pairs(seq: &[TokenId]) -> HashMap<(TokenId, TokenId), u64> {
    let mut counts = HashMap::new();
    for w in seq.windows(2) {
        *counts.entry((w[0], w[1])).or_insert(0) += 1;
    }
    counts
}

fn merge_in_place(seq: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) -> bool {
    let mut changed = false;
    let mut w = 0;
    let mut r = 0;
    while r < seq.len() {
        if r + 1 < seq.len() && seq[r] == pair.0 && seq[r + 1] == pair.1 {
            seq[w] = new_id;
            r += 2;
            changed = true;
        } else {
            seq[w] = seq[r];
            r += 1;
        }
        w += 1;
    }
    seq.truncate(w);
    changed
}

/// Learns merges until the vocabulary reaches `target_vocab` or no adjacent
/// pair occurs at least twice. At each step the most frequent pair is merged;
/// ties go to the lexicographically smallest byte pair. Pair counting runs on
/// the current rayon pool; the result does not depend on its size.
pub fn train_bpe<'a, I>(corpus: I, target_vocab: usize) -> Result<BpeModel>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_vocab < BASE_VOCAB {
        return Err(Error::InvalidInput(format!(
            "target vocabulary {target_vocab} is below the base size {BASE_VOCAB}"
        )));
    }
    let mut seqs: Vec<Vec<TokenId>> = corpus
        .into_iter()
        .filter(|t| !t.is_empty())
        .map(|t| t.bytes().map(BpeModel::byte_token).collect())
        .collect();
    if seqs.is_empty() {
        return Err(Error::InvalidInput("cannot train BPE on an empty corpus".into()));
    }

    let mut model = BpeModel::byte_level();
    let per_doc: Vec<HashMap<(TokenId, TokenId), u64>> =
        seqs.par_iter().map(|s| count_pairs(s)).collect();
    let mut counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
    let mut occurs_in: HashMap<(TokenId, TokenId), BTreeSet<usize>> = HashMap::new();
    for (doc, local) in per_doc.into_iter().enumerate() {
        for (pair, n) in local {
            *counts.entry(pair).or_insert(0) += n;
            occurs_in.entry(pair).or_default().insert(doc);
        }
    }

    let mut heap: BinaryHeap<Candidate> = counts
        .iter()
        .map(|(&pair, &count)| Candidate {
            count,
            key: Reverse(pair_key(&model, pair)),
            pair,
        })
        .collect();

    while model.vocab_size() < target_vocab {
        let best = loop {
            match heap.pop() {
                None => break None,
                Some(c) if counts.get(&c.pair).copied().unwrap_or(0) == c.count => break Some(c),
                Some(_) => continue,
            }
        };
        let Some(best) = best else { break };
        if best.count < 2 {
            break;
        }
        let pair = best.pair;
        let new_id = model.push_merge(pair.0, pair.1);

        let docs: Vec<usize> = occurs_in.remove(&pair).unwrap_or_default().into_iter().collect();
        let updates: Vec<(usize, Vec<TokenId>, HashMap<(TokenId, TokenId), i64>)> = docs
            .par_iter()
            .filter_map(|&d| {
                let mut seq = seqs[d].clone();
                if !merge_in_place(&mut seq, pair, new_id) {
                    return None;
                }
                let mut delta: HashMap<(TokenId, TokenId), i64> = HashMap::new();
                for (p, n) in count_pairs(&seqs[d]) {
                    *delta.entry(p).or_insert(0) -= n as i64;
                }
                for (p, n) in count_pairs(&seq) {
                    *delta.entry(p).or_insert(0) += n as i64;
                }
                delta.retain(|_, v| *v != 0);
                Some((d, seq, delta))
            })
            .collect();

        let mut touched: BTreeSet<(TokenId, TokenId)> = BTreeSet::new();
        for (d, seq, delta) in updates {
            seqs[d] = seq;
            for (p, change) in delta {
                let entry = counts.entry(p).or_insert(0);
                *entry = (*entry as i64 + change) as u64;
                if change > 0 {
                    occurs_in.entry(p).or_default().insert(d);
                }
                touched.insert(p);
            }
        }
        counts.remove(&pair);
        for p in touched {
            match counts.get(&p).copied() {
                Some(0) => {
                    counts.remove(&p);
                }
                Some(count) => heap.push(Candidate {
                    count,
                    key: Reverse(pair_key(&model, p)),
                    pair: p,
                }),
                None => {}
            }
        }
    }
    Ok(model)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelConfig {
    vocab_size: usize,
    num_merges: usize,
    byte_offset: TokenId,
    specials: SpecialTokens,
}

impl BpeModel {
    /// Writes `vocab`, `merges` and `config.toml` into `dir`.
    ///
    /// `merges` holds one merge per line as two space-separated base64 byte
    /// strings. `vocab` lists every id with its kind; merge entries also name
    /// their component ids, which keeps the model exact even when two merges
    /// spell the same bytes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

        let mut merges = String::new();
        for &(l, r) in &self.merges {
            let _ = writeln!(
                merges,
                "{} {}",
                B64.encode(&self.bytes[l as usize]),
                B64.encode(&self.bytes[r as usize])
            );
        }

        let mut vocab = String::new();
        for (id, kind) in self.kinds.iter().enumerate() {
            let _ = match kind {
                TokenKind::Special => writeln!(vocab, "{id}\tspecial\t{}", SPECIAL_NAMES[id]),
                TokenKind::Byte => writeln!(vocab, "{id}\tbyte\t{:02x}", self.bytes[id][0]),
                TokenKind::Merge(l, r) => writeln!(
                    vocab,
                    "{id}\tmerge\t{l} {r}\t{}",
                    B64.encode(&self.bytes[id])
                ),
            };
        }

        let config = ModelConfig {
            vocab_size: self.vocab_size(),
            num_merges: self.merges.len(),
            byte_offset: BYTE_OFFSET,
            specials: self.specials,
        };
        let config = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;

        for (name, content) in [(VOCAB_FILE, vocab), (MERGES_FILE, merges), (CONFIG_FILE, config)] {
            let path = dir.join(name);
            std::fs::write(&path, content).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
        };
        let config: ModelConfig =
            toml::from_str(&read(CONFIG_FILE)?).map_err(|e| Error::parse(CONFIG_FILE, e))?;
        if config.specials != SpecialTokens::default() || config.byte_offset != BYTE_OFFSET {
            return Err(Error::parse(CONFIG_FILE, "unsupported token id layout"));
        }

        let mut model = Self::byte_level();
        for (n, line) in read(VOCAB_FILE)?.lines().enumerate() {
            let ctx = || format!("{VOCAB_FILE}:{}", n + 1);
            let fields: Vec<&str> = line.split('\t').collect();
            let id: usize = fields
                .first()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| Error::parse(ctx(), "bad id"))?;
            if id != n {
                return Err(Error::parse(ctx(), "ids must be consecutive"));
            }
            match fields.get(1).copied() {
                Some("special") | Some("byte") if id < BASE_VOCAB => {}
                Some("merge") if id >= BASE_VOCAB => {
                    let parts: Vec<TokenId> = fields
                        .get(2)
                        .map(|s| s.split(' ').filter_map(|x| x.parse().ok()).collect())
                        .unwrap_or_default();
                    let [l, r] = parts[..] else {
                        return Err(Error::parse(ctx(), "merge entry needs two component ids"));
                    };
                    if l as usize >= id || r as usize >= id || is_special(l) || is_special(r) {
                        return Err(Error::parse(ctx(), "merge refers to an undefined token"));
                    }
                    model.push_merge(l, r);
                }
                _ => return Err(Error::parse(ctx(), "unexpected token kind")),
            }
        }
        if model.vocab_size() != config.vocab_size || model.merges.len() != config.num_merges {
            return Err(Error::parse(VOCAB_FILE, "size disagrees with config"));
        }

        let merges_text = read(MERGES_FILE)?;
        let lines: Vec<&str> = merges_text.lines().filter(|l| !l.is_empty()).collect();
        if lines.len() != model.merges.len() {
            return Err(Error::parse(MERGES_FILE, "merge count disagrees with vocab"));
        }
        for (n, (line, &(l, r))) in lines.iter().zip(&model.merges).enumerate() {
            let ctx = || format!("{MERGES_FILE}:{}", n + 1);
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(ctx(), "expected two fields"))?;
            let a = B64.decode(a).map_err(|e| Error::parse(ctx(), e))?;
            let b = B64.decode(b).map_err(|e| Error::parse(ctx(), e))?;
            if a != model.bytes[l as usize] || b != model.bytes[r as usize] {
                return Err(Error::parse(ctx(), "merge disagrees with vocab"));
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent reference trainer: full recount every step, ties by
    /// lexicographic byte order of the pair.
    pub(crate) fn naive_train(corpus: &[&str], target: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
        let mut seqs: Vec<Vec<Vec<u8>>> = corpus
            .iter()
            .map(|t| t.bytes().map(|b| vec![b]).collect())
            .collect();
        let mut merges = Vec::new();
        while BASE_VOCAB + merges.len() < target {
            let mut counts: Vec<((Vec<u8>, Vec<u8>), u64)> = Vec::new();
            for s in &seqs {
                for i in 0..s.len().saturating_sub(1) {
                    let p = (s[i].clone(), s[i + 1].clone());
                    match counts.iter_mut().find(|(q, _)| *q == p) {
                        Some((_, c)) => *c += 1,
                        None => counts.push((p, 1)),
                    }
                }
            }
            let Some(best) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
                .cloned()
            else {
                break;
            };
            if best.1 < 2 {
                break;
            }
            let (l, r) = best.0;
            for s in seqs.iter_mut() {
                let mut out = Vec::new();
                let mut i = 0;
                while i < s.len() {
                    if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                        out.push([l.clone(), r.clone()].concat());
                        i += 2;
                    } else {
                        out.push(s[i].clone());
                        i += 1;
                    }
                }
                *s = out;
            }
            merges.push((l, r));
        }
        merges
    }

    fn merge_bytes(model: &BpeModel) -> Vec<(Vec<u8>, Vec<u8>)> {
        model
            .merges()
            .iter()
            .map(|&(l, r)| {
                (
                    model.token_bytes(l).unwrap().to_vec(),
                    model.token_bytes(r).unwrap().to_vec(),
                )
            })
            .collect()
    }

    pub(crate) const FIXTURE: &[&str] = &[
        "Surquoy, SIRE, s’il plaiſt à voſtre Maieſté de ſe ſouuenir des miſeres de ſon Eſtat,",
        "dõt au moins ell’a tiré cét aduantage, qu’en vne grande ieuneſſe ell’a acquis vne grande experiẽce,",
        "elle verra que tous les mal-heurs de sõ bas âge ont pris leur commencement en ſemblables occaſions;",
        "Sur quoi, SIRE, s’il plaît à votre Majesté de se souvenir des misères de son état,",
        "dont au moins elle a tiré cet avantage, qu’en une grande jeunesse elle a acquis une grande expérience,",
        "elle verra que tous les malheurs de son bas âge ont pris leur commencement en semblables occasions;",
        "Le Cid, tragedie. Rodrigue, as-tu du cœur ? Tout autre que mon pere l’eprouueroit ſur l’heure.",
        "Ie ne ſçay ce que c’eſt, mais ie ſçay bien que vous eſtes vne perſonne fort ſage.",
    ];

    #[test]
    fn first_merge_on_repeated_pair() {
        let corpus = "abababab";
        let model = train_bpe([corpus], BASE_VOCAB + 1).unwrap();
        // brute-force pair frequencies over the byte string
        let bytes = corpus.as_bytes();
        let mut best: Option<((u8, u8), usize)> = None;
        for i in 0..bytes.len() - 1 {
            let p = (bytes[i], bytes[i + 1]);
            let n = bytes.windows(2).filter(|w| (w[0], w[1]) == p).count();
            if best.is_none_or(|(q, m)| n > m || (n == m && p < q)) {
                best = Some((p, n));
            }
        }
        let ((l, r), n) = best.unwrap();
        assert_eq!((l, r, n), (b'a', b'b', 4));
        assert_eq!(model.merges(), &[(BpeModel::byte_token(l), BpeModel::byte_token(r))]);
    }

    #[test]
    fn no_budget_means_no_merges() {
        let model = train_bpe(["abababab"], BASE_VOCAB).unwrap();
        assert!(model.merges().is_empty());
        assert_eq!(model.vocab_size(), BASE_VOCAB);
        let seq = model.encode("ſ");
        let mut expected = vec![BOS];
        expected.extend("ſ".bytes().map(BpeModel::byte_token));
        expected.push(EOS);
        assert_eq!(seq.ids, expected);
    }

    #[test]
    fn errors() {
        assert!(train_bpe(Vec::<&str>::new(), 600).is_err());
        assert!(train_bpe([""], 600).is_err());
        assert!(train_bpe(["abc"], BASE_VOCAB - 1).is_err());
        let model = BpeModel::byte_level();
        assert!(matches!(
            model.decode(&[9999]),
            Err(Error::InvalidTokenId { id: 9999, .. })
        ));
    }

    #[test]
    fn matches_reference_trainer_on_fixture() {
        let model = train_bpe(FIXTURE.iter().copied(), 600).unwrap();
        let reference = naive_train(FIXTURE, 600);
        assert!(!reference.is_empty());
        assert_eq!(merge_bytes(&model), reference);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let model = train_bpe(["abcdef"], 1000).unwrap();
        assert!(model.merges().is_empty());
    }

    #[test]
    fn overlapping_runs() {
        for corpus in [&["aaaaaaa", "aaab", "baaa"][..], &["ababa", "aba", "bab"][..]] {
            let model = train_bpe(corpus.iter().copied(), 270).unwrap();
            assert_eq!(merge_bytes(&model), naive_train(corpus, 270));
        }
    }

    #[test]
    fn framing_and_round_trip() {
        let model = train_bpe(FIXTURE.iter().copied(), 600).unwrap();
        assert_eq!(model.encode("").ids, vec![BOS, EOS]);
        assert_eq!(model.decode(&[BOS, EOS]).unwrap(), "");
        for s in ["miſeres", "dõt", "vne grande ieuneſſe", "e\u{0301}\u{0303}"] {
            let seq = model.encode(s);
            assert_eq!(model.decode(&seq.ids).unwrap(), s);
        }
        let seq = model.encode("vne grande ieuneſſe");
        assert!(seq.len() < "vne grande ieuneſſe".len() + 2);
    }

    #[test]
    fn save_load_round_trip() {
        let model = train_bpe(FIXTURE.iter().copied(), 420).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = BpeModel::load(dir.path()).unwrap();
        assert_eq!(back, model);
        let merges = std::fs::read_to_string(dir.path().join(MERGES_FILE)).unwrap();
        assert_eq!(merges.lines().count(), model.merges().len());
        assert!(merges.lines().all(|l| l.split(' ').count() == 2));
    }

    #[test]
    fn thread_count_does_not_change_merges() {
        let pool = |n| rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap();
        let a = pool(1).install(|| train_bpe(FIXTURE.iter().copied(), 700).unwrap());
        let b = pool(4).install(|| train_bpe(FIXTURE.iter().copied(), 700).unwrap());
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn prop_round_trip(s in "\\PC{0,60}") {
            let model = train_bpe(FIXTURE.iter().copied(), 500).unwrap();
            prop_assert_eq!(model.decode(&model.encode(&s).ids).unwrap(), s);
        }

        #[test]
        fn prop_more_merges_never_longer(s in "[a-eſõ ’]{0,40}", k in 0usize..200) {
            let full = train_bpe(FIXTURE.iter().copied(), 600).unwrap();
            let fewer = full.truncated(k.min(full.merges().len()));
            prop_assert!(full.encode(&s).len() <= fewer.encode(&s).len());
        }
    }
}

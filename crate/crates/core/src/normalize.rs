//! Rule-based graphemic normalization of Early Modern French spellings.
//!
//! A [`RuleSet`] is applied word by word, in a fixed order:
//!
//! 1. exception lexicon (whole-word replacement, wins over everything else)
//! 2. single-character map (`ſ` → `s`, ...)
//! 3. tilde abbreviations: a vowel carrying a tilde becomes the vowel plus a
//!    nasal consonant, `m` before `b`/`p`/`m` and `n` otherwise (`dõt` → `dont`)
//! 4. ordered u/v positional rules (`vne` → `une`)
//!
//! Only letters are rewritten. Whitespace and punctuation around and between
//! words pass through byte for byte, and unknown characters are left alone.
//! Lexical changes such as etymological letters or word welding are not
//! expressible as rules here; they belong in the exception lexicon.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const COMBINING_TILDE: char = '\u{0303}';

/// Rules shipped with the crate, also available as `configs/normalize_rules.toml`.
pub const DEFAULT_RULES_TOML: &str = include_str!("../../../configs/normalize_rules.toml");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum UvRule {
    /// Word-initial `v` followed by a consonant other than `r` becomes `u`.
    InitialVBeforeConsonant,
    /// `u` between two vowels becomes `v`, but only for words listed in the
    /// confirmation lexicon (`oui` must stay `oui`). A `u` directly followed by
    /// another `u` is left alone, so `souuenir` gives `souvenir`.
    IntervocalicUToV {
        #[serde(default)]
        lexicon: BTreeSet<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub char_map: BTreeMap<char, String>,
    /// Tilde-marked vowel → bare vowel. The nasal consonant is chosen from
    /// the following letter.
    #[serde(default)]
    pub tilde: BTreeMap<char, char>,
    #[serde(default, rename = "uv_rule")]
    pub uv_rules: Vec<UvRule>,
    #[serde(default)]
    pub exceptions: BTreeMap<String, String>,
}

impl RuleSet {
    pub fn from_toml(text: &str) -> Result<Self> {
        let rules: RuleSet = toml::from_str(text).map_err(|e| Error::parse("rule set", e))?;
        rules.validate()?;
        Ok(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.char_map.keys().find(|c| self.tilde.contains_key(c)) {
            return Err(Error::Config(format!(
                "{c:?} appears in both the character map and the tilde table"
            )));
        }
        Ok(())
    }

    pub fn normalize_word(&self, word: &str) -> String {
        let (lead, core, trail) = split_affixes(word);
        if core.is_empty() {
            return word.to_string();
        }
        let mut out = String::with_capacity(word.len() + 4);
        out.push_str(lead);
        match self.lookup_exception(core) {
            Some(fixed) => out.push_str(&fixed),
            None => out.extend(self.apply_rules(core)),
        }
        out.push_str(trail);
        out
    }

    /// Word-wise normalization; every non-word byte is copied through.
    pub fn normalize_text(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len() + text.len() / 16);
        let mut word_start = None;
        for (i, c) in text.char_indices() {
            if c.is_whitespace() {
                if let Some(start) = word_start.take() {
                    out.push_str(&self.normalize_word(&text[start..i]));
                }
                out.push(c);
            } else if word_start.is_none() {
                word_start = Some(i);
            }
        }
        if let Some(start) = word_start {
            out.push_str(&self.normalize_word(&text[start..]));
        }
        out
    }

    fn lookup_exception(&self, core: &str) -> Option<String> {
        if let Some(fixed) = self.exceptions.get(core) {
            return Some(fixed.clone());
        }
        let lower = core.to_lowercase();
        let fixed = self.exceptions.get(&lower)?;
        let starts_upper = core.chars().next().is_some_and(char::is_uppercase);
        Some(if starts_upper {
            capitalize(fixed)
        } else {
            fixed.clone()
        })
    }

    fn apply_rules(&self, core: &str) -> Vec<char> {
        let mapped = self.map_chars(core);
        let mut chars = self.expand_tildes(&mapped);
        for rule in &self.uv_rules {
            match rule {
                UvRule::InitialVBeforeConsonant => initial_v_to_u(&mut chars),
                UvRule::IntervocalicUToV { lexicon } => {
                    let lower: String = chars.iter().flat_map(|c| c.to_lowercase()).collect();
                    if lexicon.contains(&lower) {
                        intervocalic_u_to_v(&mut chars);
                    }
                }
            }
        }
        chars
    }

    fn map_chars(&self, core: &str) -> Vec<char> {
        let mut out = Vec::with_capacity(core.len());
        for c in core.chars() {
            if let Some(rep) = self.char_map.get(&c) {
                out.extend(rep.chars());
                continue;
            }
            let lower = single_lower(c);
            match self.char_map.get(&lower) {
                Some(rep) if lower != c => {
                    let mut it = rep.chars();
                    if let Some(first) = it.next() {
                        out.extend(first.to_uppercase());
                    }
                    out.extend(it);
                }
                _ => out.push(c),
            }
        }
        out
    }

    fn tilde_base(&self, c: char) -> Option<char> {
        if let Some(&v) = self.tilde.get(&c) {
            return Some(v);
        }
        let lower = single_lower(c);
        if lower == c {
            return None;
        }
        self.tilde
            .get(&lower)
            .map(|&v| v.to_uppercase().next().unwrap_or(v))
    }

    fn expand_tildes(&self, chars: &[char]) -> Vec<char> {
        let mut out = Vec::with_capacity(chars.len() + 2);
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let (vowel, consumed) = if let Some(v) = self.tilde_base(c) {
                (Some(v), 1)
            } else if is_vowel(c) && chars.get(i + 1) == Some(&COMBINING_TILDE) {
                (Some(c), 2)
            } else {
                (None, 1)
            };
            match vowel {
                Some(v) => {
                    let next = chars.get(i + consumed).copied();
                    let nasal = match next.map(single_lower) {
                        Some('b' | 'p' | 'm') => 'm',
                        _ => 'n',
                    };
                    let upper_context = v.is_uppercase()
                        && match next {
                            Some(n) => n.is_uppercase(),
                            None => i > 0 && chars[i - 1].is_uppercase(),
                        };
                    out.push(v);
                    out.push(if upper_context {
                        nasal.to_ascii_uppercase()
                    } else {
                        nasal
                    });
                }
                None => out.push(c),
            }
            i += consumed;
        }
        out
    }
}

impl std::str::FromStr for RuleSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::from_toml(s)
    }
}

/// The shipped default rules.
pub fn default_rules() -> RuleSet {
    RuleSet::from_toml(DEFAULT_RULES_TOML).expect("shipped normalization rules are valid")
}

pub(crate) fn is_combining_mark(c: char) -> bool {
    matches!(c, '\u{0300}'..='\u{036F}' | '\u{1AB0}'..='\u{1AFF}' | '\u{1DC0}'..='\u{1DFF}' | '\u{20D0}'..='\u{20FF}')
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_combining_mark(c)
}

fn split_affixes(word: &str) -> (&str, &str, &str) {
    let start = word
        .char_indices()
        .find(|&(_, c)| is_word_char(c))
        .map_or(word.len(), |(i, _)| i);
    let end = word
        .char_indices()
        .rev()
        .find(|&(_, c)| is_word_char(c))
        .map_or(start, |(i, c)| i + c.len_utf8());
    (&word[..start], &word[start..end], &word[end..])
}

fn single_lower(c: char) -> char {
    let mut it = c.to_lowercase();
    match (it.next(), it.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

fn capitalize(s: &str) -> String {
    let mut it = s.chars();
    match it.next() {
        Some(first) => first.to_uppercase().chain(it).collect(),
        None => String::new(),
    }
}

fn is_vowel(c: char) -> bool {
    matches!(
        single_lower(c),
        'a' | 'e'
            | 'i'
            | 'o'
            | 'u'
            | 'y'
            | 'à'
            | 'â'
            | 'ä'
            | 'é'
            | 'è'
            | 'ê'
            | 'ë'
            | 'î'
            | 'ï'
            | 'ô'
            | 'ö'
            | 'ù'
            | 'û'
            | 'ü'
    )
}

fn is_consonant(c: char) -> bool {
    c.is_alphabetic() && !is_vowel(c)
}

fn is_word_boundary(c: char) -> bool {
    matches!(c, '\'' | '’' | '-')
}

fn initial_v_to_u(chars: &mut [char]) {
    for i in 0..chars.len() {
        let initial = i == 0 || is_word_boundary(chars[i - 1]);
        if !initial {
            continue;
        }
        let (c, next) = match (chars.get(i), chars.get(i + 1)) {
            (Some(&c), Some(&n)) => (c, n),
            _ => continue,
        };
        if !matches!(c, 'v' | 'V') || !is_consonant(next) || single_lower(next) == 'r' {
            continue;
        }
        chars[i] = if c == 'V' { 'U' } else { 'u' };
    }
}

fn intervocalic_u_to_v(chars: &mut [char]) {
    let original = chars.to_vec();
    for i in 1..original.len().saturating_sub(1) {
        let c = original[i];
        if !matches!(c, 'u' | 'U') {
            continue;
        }
        let (prev, next) = (original[i - 1], original[i + 1]);
        if is_vowel(prev) && is_vowel(next) && single_lower(next) != 'u' {
            chars[i] = if c == 'U' { 'V' } else { 'v' };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cited_examples() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("dõt"), "dont");
        assert_eq!(rules.normalize_word("vne"), "une");
        assert_eq!(rules.normalize_word("miſeres"), "miseres");
        assert_eq!(rules.normalize_word("chat"), "chat");
        assert_eq!(rules.normalize_text("dõt vne"), "dont une");
        assert_eq!(rules.normalize_text(""), "");
    }

    #[test]
    fn nasal_consonant_follows_labials() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("cõbien"), "combien");
        assert_eq!(rules.normalize_word("tẽps"), "temps");
        assert_eq!(rules.normalize_word("experiẽce"), "experience");
        assert_eq!(rules.normalize_word("sõ"), "son");
        // decomposed tilde
        assert_eq!(rules.normalize_word("do\u{0303}t"), "dont");
    }

    #[test]
    fn first_letter_case_is_kept() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("Vne"), "Une");
        assert_eq!(rules.normalize_word("Dõt"), "Dont");
        assert_eq!(rules.normalize_word("Surquoy"), "Sur quoi");
        assert_eq!(rules.normalize_word("SIRE,"), "SIRE,");
    }

    #[test]
    fn punctuation_is_peeled_off() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("«vne,"), "«une,");
        assert_eq!(rules.normalize_word("l’vne"), "l’une");
        assert_eq!(rules.normalize_word("..."), "...");
    }

    #[test]
    fn v_before_r_is_kept() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("vray"), "vray");
        assert_eq!(rules.normalize_word("vers"), "vers");
    }

    #[test]
    fn intervocalic_rule_needs_lexicon() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("ſouuenir"), "souvenir");
        assert_eq!(rules.normalize_word("auoir"), "avoir");
        assert_eq!(rules.normalize_word("oui"), "oui");
        assert_eq!(rules.normalize_word("louer"), "louer");
    }

    #[test]
    fn exceptions_take_priority() {
        let mut rules = default_rules();
        rules.exceptions.insert("vne".into(), "VNE!".into());
        assert_eq!(rules.normalize_word("vne"), "VNE!");
        assert_eq!(rules.normalize_word("voſtre"), "votre");
    }

    #[test]
    fn overlapping_tables_are_rejected() {
        let text = "[char_map]\n\"õ\" = \"o\"\n[tilde]\n\"õ\" = \"o\"\n";
        assert!(RuleSet::from_toml(text).is_err());
    }

    #[test]
    fn unknown_characters_pass_through() {
        let rules = default_rules();
        assert_eq!(rules.normalize_word("ꝑ"), "ꝑ");
        assert_eq!(rules.normalize_text("a\t\tb\n"), "a\t\tb\n");
    }

    fn strip_letters(s: &str) -> String {
        s.chars()
            .filter(|&c| !(c.is_alphabetic() || is_combining_mark(c)))
            .collect()
    }

    const ALPHABET: &[char] = &[
        'a', 'e', 'i', 'o', 'u', 'v', 'n', 'b', 'p', 'd', 't', 'r', 's', 'ſ', 'õ', 'ã', 'ẽ',
        'V', 'Õ', 'é', '\u{0303}', ' ', ' ', '\n', '\t', ',', '.', ';', '’', '\'', '-', '«',
        '!', '1',
    ];

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(proptest::sample::select(ALPHABET), 0..80)
            .prop_map(|cs| cs.into_iter().collect())
    }

    proptest! {
        #[test]
        fn prop_non_letters_preserved(s in text_strategy()) {
            let rules = default_rules();
            let out = rules.normalize_text(&s);
            prop_assert_eq!(strip_letters(&s), strip_letters(&out));
        }

        #[test]
        fn prop_idempotent(s in text_strategy()) {
            let rules = default_rules();
            let once = rules.normalize_text(&s);
            prop_assert_eq!(rules.normalize_text(&once), once.clone());
        }

        #[test]
        fn prop_exception_wins(word in "[a-zſõv]{1,8}", target in "[a-z]{1,8}") {
            let mut rules = default_rules();
            rules.exceptions.insert(word.clone(), target.clone());
            prop_assert_eq!(rules.normalize_word(&word), target);
        }
    }
}

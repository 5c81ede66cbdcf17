//! Lexicon-driven noun-phrase chunker.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WordClass {
    Determiner,
    Adjective,
    Noun,
    Pronoun,
    Adverb,
    Verb,
    Preposition,
    Conjunction,
    Interrogative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NounPhrase {
    pub text: String,
    pub contains_pronoun: bool,
    pub contains_adverb: bool,
}

impl NounPhrase {
    pub fn is_eligible(&self) -> bool {
        !self.contains_pronoun && !self.contains_adverb
    }
}

/// Shallow tagger producing every noun phrase in an utterance, eligible or not.
pub trait NounPhraseTagger: Send + Sync {
    fn noun_phrases(&self, utterance: &str) -> Vec<NounPhrase>;
}

/// Eligible phrases in order of appearance, case-insensitive duplicates dropped.
pub fn extract_query_noun_phrases(tagger: &dyn NounPhraseTagger, utterance: &str) -> Vec<NounPhrase> {
    let mut seen = HashSet::new();
    tagger
        .noun_phrases(utterance)
        .into_iter()
        .filter(|np| np.is_eligible() && seen.insert(np.text.to_lowercase()))
        .collect()
}

const LEXICONS: [(WordClass, &str); 8] = [
    (WordClass::Pronoun, include_str!("../../data/lexicon/pronouns.txt")),
    (WordClass::Interrogative, include_str!("../../data/lexicon/interrogatives.txt")),
    (WordClass::Determiner, include_str!("../../data/lexicon/determiners.txt")),
    (WordClass::Preposition, include_str!("../../data/lexicon/prepositions.txt")),
    (WordClass::Conjunction, include_str!("../../data/lexicon/conjunctions.txt")),
    (WordClass::Adverb, include_str!("../../data/lexicon/adverbs.txt")),
    (WordClass::Adjective, include_str!("../../data/lexicon/adjectives.txt")),
    (WordClass::Verb, include_str!("../../data/lexicon/verbs.txt")),
];

/// Chunks `Det* (Adv|Adj)* Noun+` sequences and lone pronouns. Words not in
/// any lexicon are nouns, except lowercase `-ed`/`-ing` forms, which are
/// verbs. Numbers act as determiners.
#[derive(Debug, Clone)]
pub struct LexiconChunker {
    classes: HashMap<String, WordClass>,
}

impl Default for LexiconChunker {
    fn default() -> Self {
        let mut classes = HashMap::new();
        // Earlier lexicons win when a word is listed twice.
        for (class, text) in LEXICONS {
            for word in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
                classes.entry(word.to_string()).or_insert(class);
            }
        }
        LexiconChunker { classes }
    }
}

#[derive(Debug, Clone)]
struct Word {
    text: String,
    class: WordClass,
    /// Punctuation after the word closes any open phrase.
    boundary: bool,
}

fn normalize_apostrophes(s: &str) -> String {
    s.replace('\u{2019}', "'")
}

impl LexiconChunker {
    pub fn classify(&self, word: &str) -> WordClass {
        let lower = normalize_apostrophes(&word.to_lowercase());
        if let Some(c) = self.classes.get(&lower) {
            return *c;
        }
        if lower.chars().all(|c| c.is_ascii_digit() || c == ',' || c == '.') {
            return WordClass::Determiner;
        }
        let lowercase_initial = word.chars().next().is_some_and(char::is_lowercase);
        if lowercase_initial && lower.chars().count() > 4 && (lower.ends_with("ed") || lower.ends_with("ing")) {
            return WordClass::Verb;
        }
        WordClass::Noun
    }

    fn words(&self, utterance: &str) -> Vec<Word> {
        let mut out: Vec<Word> = Vec::new();
        for raw in utterance.split_whitespace() {
            let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
            let boundary = raw.ends_with(|c: char| !c.is_alphanumeric() && c != '\'');
            if trimmed.is_empty() {
                if let Some(last) = out.last_mut() {
                    last.boundary = true;
                }
                continue;
            }
            out.push(Word {
                text: trimmed.to_string(),
                class: self.classify(trimmed),
                boundary,
            });
        }
        out
    }
}

impl NounPhraseTagger for LexiconChunker {
    fn noun_phrases(&self, utterance: &str) -> Vec<NounPhrase> {
        let words = self.words(utterance);
        let mut phrases = Vec::new();
        let mut i = 0;
        while i < words.len() {
            if words[i].class == WordClass::Pronoun {
                phrases.push(NounPhrase {
                    text: words[i].text.clone(),
                    contains_pronoun: true,
                    contains_adverb: false,
                });
                i += 1;
                continue;
            }
            let start = i;
            let mut j = i;
            while j < words.len() && words[j].class == WordClass::Determiner && !words[j].boundary {
                j += 1;
            }
            let body = j;
            while j < words.len()
                && matches!(words[j].class, WordClass::Adverb | WordClass::Adjective)
                && !words[j].boundary
            {
                j += 1;
            }
            let nouns = j;
            while j < words.len() && words[j].class == WordClass::Noun {
                j += 1;
                if words[j - 1].boundary {
                    break;
                }
            }
            if j > nouns {
                let span = &words[body..j];
                phrases.push(NounPhrase {
                    text: span.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" "),
                    contains_pronoun: false,
                    contains_adverb: span.iter().any(|w| w.class == WordClass::Adverb),
                });
                i = j;
            } else {
                i = start + 1;
            }
        }
        phrases
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eligible(utterance: &str) -> Vec<String> {
        extract_query_noun_phrases(&LexiconChunker::default(), utterance)
            .into_iter()
            .map(|np| np.text)
            .collect()
    }

    #[test]
    fn pronoun_phrase_is_excluded() {
        assert_eq!(eligible("What other countries are around it?"), ["countries"]);
    }

    #[test]
    fn history_utterances() {
        assert_eq!(
            eligible("I think a lot of young people are addicted to social media platforms."),
            ["young people", "social media platforms"]
        );
        assert_eq!(
            eligible("I sometimes check Facebook and post photos there but I don't use it very often."),
            ["Facebook", "photos"]
        );
        assert_eq!(eligible("Do you know when was Facebook first launched?"), ["Facebook"]);
    }

    #[test]
    fn only_closed_class_words() {
        assert!(eligible("it there they very often").is_empty());
        assert!(eligible("").is_empty());
    }

    #[test]
    fn adverb_inside_phrase_taints_it() {
        let all = LexiconChunker::default().noun_phrases("a very old house");
        assert_eq!(all.len(), 1);
        assert!(all[0].contains_adverb && !all[0].is_eligible());
    }

    #[test]
    fn duplicates_keep_first_spelling() {
        assert_eq!(eligible("Paris and paris and PARIS"), ["Paris"]);
    }

    #[test]
    fn punctuation_splits_phrases() {
        assert_eq!(eligible("apples, oranges"), ["apples", "oranges"]);
    }
}

//! Synthetic corpora with a known optimal predictor.
//!
//! Every lemma has `k` senses. The gloss of each sense carries one marker
//! token `mark{j}`, a per-lemma permutation of `0..k`. A sentence holds the
//! target lemma, filler words, and either the marker of the gold sense (with
//! probability `signal_strength`) or the neutral token `plain`, which no
//! gloss contains. Picking the gloss that shares the sentence's marker is
//! therefore Bayes-optimal, and exact when `signal_strength = 1`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusToken, GoldKeys, WsdCorpus, WsdSentence};
use crate::eval::{Prediction, Predictions};
use crate::lexicon::{GlossLexicon, PartOfSpeech, SenseEntry};
use crate::objectives::Target;
use crate::seed;
use crate::tokenizer::{tokenize, TokenSequence, Vocabulary, AGG, SEP};
use crate::train::LabeledSequence;

pub const NEUTRAL_MARKER: &str = "plain";

#[derive(Debug, Error, PartialEq)]
pub enum FixtureError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_lemmas: usize,
    pub senses_per_lemma: usize,
    pub n_sentences: usize,
    /// Number of distinct filler words.
    pub vocab_size: usize,
    pub signal_strength: f64,
    pub seed: u64,
    /// Filler words per sentence, besides target and marker.
    pub context_len: usize,
    /// Filler words per gloss, besides the marker.
    pub gloss_len: usize,
    /// Corpus name; also the prefix of sentence and instance ids.
    pub name: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_lemmas: 50,
            senses_per_lemma: 4,
            n_sentences: 1000,
            vocab_size: 200,
            signal_strength: 1.0,
            seed: 0,
            context_len: 6,
            gloss_len: 4,
            name: "synthetic".into(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), FixtureError> {
        let fail = |m: &str| Err(FixtureError::InvalidSpec(m.into()));
        if self.n_lemmas == 0 || self.n_sentences == 0 || self.vocab_size == 0 {
            return fail("n_lemmas, n_sentences and vocab_size must be positive");
        }
        if self.senses_per_lemma < 2 {
            return fail("senses_per_lemma must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return fail("signal_strength must lie in [0, 1]");
        }
        if self.name.is_empty() || self.name.chars().any(|c| !c.is_ascii_alphanumeric()) {
            return fail("name must be non-empty ASCII alphanumeric");
        }
        Ok(())
    }

    pub fn instance_id(&self, sentence: usize) -> String {
        format!("{}.s{sentence:05}.t0", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub lexicon: GlossLexicon,
    pub corpus: WsdCorpus,
    pub gold: GoldKeys,
}

fn lemma_pos(i: usize) -> PartOfSpeech {
    PartOfSpeech::ALL[i % PartOfSpeech::ALL.len()]
}

fn ss_digit(pos: PartOfSpeech) -> u8 {
    match pos {
        PartOfSpeech::Noun => 1,
        PartOfSpeech::Verb => 2,
        PartOfSpeech::Adjective => 3,
        PartOfSpeech::Adverb => 4,
    }
}

pub fn sense_key(lemma: usize, sense: usize) -> String {
    format!("lem{lemma}%{}:00:{sense:02}::", ss_digit(lemma_pos(lemma)))
}

fn filler(rng: &mut ChaCha8Rng, spec: &SyntheticSpec) -> String {
    format!("w{}", rng.random_range(0..spec.vocab_size))
}

fn word(surface: String) -> CorpusToken {
    CorpusToken {
        lemma: Some(surface.clone()),
        surface,
        tag: Some("X".into()),
        pos: None,
        instance_id: None,
    }
}

/// The lexicon depends only on `(seed, n_lemmas, k, vocab_size, gloss_len)`,
/// so corpora generated with different sentence counts or names share it.
pub fn generate_lexicon(spec: &SyntheticSpec) -> Result<GlossLexicon, FixtureError> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, &["synthetic".into(), "lexicon".into()]);
    let k = spec.senses_per_lemma;
    let mut entries = Vec::with_capacity(spec.n_lemmas * k);
    for l in 0..spec.n_lemmas {
        let mut markers: Vec<usize> = (0..k).collect();
        markers.shuffle(&mut rng);
        for (j, &marker) in markers.iter().enumerate() {
            let mut words: Vec<String> = (0..spec.gloss_len).map(|_| filler(&mut rng, spec)).collect();
            let at = rng.random_range(0..=words.len());
            words.insert(at, format!("mark{marker}"));
            entries.push(SenseEntry {
                sense_key: sense_key(l, j),
                lemma: format!("lem{l}"),
                pos: lemma_pos(l),
                gloss: words.join(" "),
                sense_rank: j as u32 + 1,
            });
        }
    }
    Ok(GlossLexicon::from_entries(entries).expect("generated entries are consistent"))
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData, FixtureError> {
    let lexicon = generate_lexicon(spec)?;
    let mut rng = seed::stream(spec.seed, &["synthetic".into(), "corpus".into(), spec.name.as_str().into()]);
    let k = spec.senses_per_lemma;
    let mut sentences = Vec::with_capacity(spec.n_sentences);
    let mut gold = BTreeMap::new();
    for s in 0..spec.n_sentences {
        let l = rng.random_range(0..spec.n_lemmas);
        let sense = rng.random_range(0..k);
        let signal = rng.random::<f64>() < spec.signal_strength;
        let mut tokens: Vec<CorpusToken> = (0..spec.context_len).map(|_| word(filler(&mut rng, spec))).collect();
        let marker = if signal {
            let entry = &lexicon.candidate_senses(&format!("lem{l}"), lemma_pos(l))[sense];
            entry
                .gloss
                .split(' ')
                .find(|w| w.starts_with("mark"))
                .expect("every gloss has a marker")
                .to_string()
        } else {
            NEUTRAL_MARKER.to_string()
        };
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, word(marker));
        let id = spec.instance_id(s);
        let target = CorpusToken {
            surface: format!("lem{l}"),
            lemma: Some(format!("lem{l}")),
            tag: Some(lemma_pos(l).tag().into()),
            pos: Some(lemma_pos(l)),
            instance_id: Some(id.clone()),
        };
        let at = rng.random_range(0..=tokens.len());
        tokens.insert(at, target);
        sentences.push(WsdSentence {
            sentence_id: format!("{}.s{s:05}", spec.name),
            tokens,
        });
        gold.insert(id, BTreeSet::from([sense_key(l, sense)]));
    }
    let corpus = WsdCorpus::new(spec.name.clone(), sentences).expect("generated corpus is consistent");
    Ok(SyntheticData {
        lexicon,
        corpus,
        gold: GoldKeys(gold),
    })
}

/// Predicts the candidate whose gloss shares a token with the sentence's
/// marker; falls back to the rank-1 sense when the sentence has none.
pub fn marker_oracle(corpus: &WsdCorpus, lexicon: &GlossLexicon) -> Predictions {
    let mut out = Predictions::default();
    for inst in corpus.instances() {
        let candidates = lexicon.candidate_senses(inst.lemma, inst.pos);
        if candidates.is_empty() {
            out.skipped.push((inst.id.to_string(), "no candidates".into()));
            continue;
        }
        let context: BTreeSet<&str> = inst
            .sentence
            .tokens
            .iter()
            .map(|t| t.surface.as_str())
            .filter(|w| w.starts_with("mark"))
            .collect();
        let chosen = candidates
            .iter()
            .find(|c| c.gloss.split(' ').any(|w| context.contains(w)))
            .unwrap_or(&candidates[0]);
        out.predictions.push(Prediction {
            instance_id: inst.id.to_string(),
            sense_key: chosen.sense_key.clone(),
        });
    }
    out.predictions.sort();
    out
}

/// Sentence-pair classification: label 1 iff both sentences contain the same
/// keyword. Returns the vocabulary over fillers and keywords plus the items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairTaskSpec {
    pub n_items: usize,
    pub n_keywords: usize,
    pub vocab_size: usize,
    pub sentence_len: usize,
    pub seed: u64,
}

impl Default for PairTaskSpec {
    fn default() -> Self {
        PairTaskSpec {
            n_items: 1000,
            n_keywords: 4,
            vocab_size: 50,
            sentence_len: 4,
            seed: 0,
        }
    }
}

pub fn pair_task_vocabulary(spec: &PairTaskSpec) -> Vocabulary {
    let words = (0..spec.vocab_size)
        .map(|i| format!("w{i}"))
        .chain((0..spec.n_keywords).map(|i| format!("key{i}")));
    Vocabulary::from_tokens(words)
}

pub fn generate_pair_task(spec: &PairTaskSpec, vocab: &Vocabulary) -> Result<Vec<LabeledSequence>, FixtureError> {
    if spec.n_keywords < 2 || spec.vocab_size == 0 {
        return Err(FixtureError::InvalidSpec("need at least 2 keywords and 1 filler".into()));
    }
    let mut rng = seed::stream(spec.seed, &["pair_task".into()]);
    let sentence = |rng: &mut ChaCha8Rng, keyword: usize| -> Vec<u32> {
        let mut words: Vec<String> = (0..spec.sentence_len)
            .map(|_| format!("w{}", rng.random_range(0..spec.vocab_size)))
            .collect();
        let at = rng.random_range(0..=words.len());
        words.insert(at, format!("key{keyword}"));
        vocab.encode(&tokenize(&words.join(" ")))
    };
    let mut items = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let label = i % 2 == 0;
        let a = rng.random_range(0..spec.n_keywords);
        let b = if label {
            a
        } else {
            (a + rng.random_range(1..spec.n_keywords)) % spec.n_keywords
        };
        let first = sentence(&mut rng, a);
        let second = sentence(&mut rng, b);
        let mut ids = vec![AGG];
        ids.extend(first);
        ids.push(SEP);
        let seg0 = ids.len();
        ids.extend(second);
        ids.push(SEP);
        let mut segment_ids = vec![0u8; seg0];
        segment_ids.resize(ids.len(), 1);
        items.push(LabeledSequence {
            sequence: TokenSequence { ids, segment_ids },
            target: Target::Class(usize::from(label)),
        });
    }
    items.shuffle(&mut rng);
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::compute_stats;
    use crate::eval::score;

    #[test]
    fn oracle_is_perfect_with_full_signal() {
        for k in [2, 4, 7] {
            let spec = SyntheticSpec {
                senses_per_lemma: k,
                n_sentences: 300,
                ..Default::default()
            };
            let d = generate(&spec).unwrap();
            let p = marker_oracle(&d.corpus, &d.lexicon);
            let s = score(&p.predictions, &d.gold, &d.corpus).unwrap().overall;
            assert_eq!(s.f1, 1.0, "k={k}");
        }
    }

    #[test]
    fn no_signal_means_chance() {
        // Monte Carlo over seeds: a random guess scores about 1/k.
        let k = 4;
        let mut f1s = Vec::new();
        for seed in 0..20 {
            let spec = SyntheticSpec {
                signal_strength: 0.0,
                n_sentences: 500,
                seed,
                ..Default::default()
            };
            let d = generate(&spec).unwrap();
            let mut rng = seed::stream(seed, &["guess".into()]);
            let guesses: Vec<Prediction> = d
                .corpus
                .instances()
                .map(|inst| {
                    let c = d.lexicon.candidate_senses(inst.lemma, inst.pos);
                    Prediction {
                        instance_id: inst.id.into(),
                        sense_key: c[rng.random_range(0..c.len())].sense_key.clone(),
                    }
                })
                .collect();
            f1s.push(score(&guesses, &d.gold, &d.corpus).unwrap().overall.f1);
            // the oracle sees no markers and falls back to rank 1
            assert!(d.corpus.sentences().iter().all(|s| s.tokens.iter().all(|t| !t.surface.starts_with("mark"))));
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        // 10000 Bernoulli(1/4) draws: standard error ~0.0043
        assert!((mean - 1.0 / k as f64).abs() < 0.02, "{mean}");
    }

    #[test]
    fn deterministic_and_consistent() {
        let spec = SyntheticSpec {
            n_sentences: 100,
            ..Default::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut xa = Vec::new();
        let mut xb = Vec::new();
        a.corpus.write_xml(&mut xa).unwrap();
        b.corpus.write_xml(&mut xb).unwrap();
        assert_eq!(xa, xb);

        let stats = compute_stats(&a.corpus, &a.gold, &a.lexicon).unwrap();
        assert_eq!(stats.total, 100);
        assert_eq!(stats.positive_pairs, 100);
        assert_eq!(stats.negative_pairs, 100 * 3);
        assert_eq!(stats.unresolvable, 0);

        // different sentence counts and names share the lexicon
        let other = SyntheticSpec {
            n_sentences: 7,
            name: "heldout".into(),
            ..spec
        };
        assert_eq!(generate(&other).unwrap().lexicon, a.lexicon);
    }

    #[test]
    fn round_trips_through_files() {
        let d = generate(&SyntheticSpec {
            n_sentences: 20,
            ..Default::default()
        })
        .unwrap();
        let mut xml = Vec::new();
        d.corpus.write_xml(&mut xml).unwrap();
        let back = crate::corpus::parse_framework_xml(std::str::from_utf8(&xml).unwrap(), "x").unwrap();
        assert_eq!(back.instance_count(), 20);
        let mut tsv = Vec::new();
        d.lexicon.write_tsv(&mut tsv).unwrap();
        assert_eq!(crate::lexicon::read_tsv_lexicon(tsv.as_slice()).unwrap(), d.lexicon);
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticSpec {
            senses_per_lemma: 1,
            ..Default::default()
        };
        assert!(matches!(generate(&bad), Err(FixtureError::InvalidSpec(_))));
        let bad = SyntheticSpec {
            signal_strength: 1.5,
            ..Default::default()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn pair_task_is_balanced() {
        let spec = PairTaskSpec::default();
        let vocab = pair_task_vocabulary(&spec);
        let items = generate_pair_task(&spec, &vocab).unwrap();
        let positives = items.iter().filter(|i| i.target == Target::Class(1)).count();
        assert_eq!(positives, 500);
        assert!(items.iter().all(|i| i.sequence.ids.iter().all(|&id| (id as usize) < vocab.len())));
    }
}

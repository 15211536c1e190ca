//! Compiles annotated instances into sentence-gloss inputs.
//!
//! Every candidate sense of an instance yields one sequence
//!
//! ```text
//! [AGG] left context [TGT] target [/TGT] right context [SEP] lemma gloss [SEP]
//! ```
//!
//! with segment 0 up to and including the first `[SEP]`. The `k` sequences of
//! an instance form a [`CandidateGroup`] that is scored jointly with a softmax.
//! [`apply_masking`] derives the masked-language-model variant, which only
//! ever masks context words.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldKeys, Instance, WsdCorpus, WsdSentence};
use crate::lexicon::{GlossLexicon, SenseEntry};
use crate::seed;
use crate::tokenizer::{
    lemma_text, tokenize, Special, TokenSequence, Vocabulary, AGG, MASK, SEP, TGT_BEGIN, TGT_END,
};

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("target of {len} tokens cannot fit in max_len {max_len}")]
    TargetTruncated { len: usize, max_len: usize },
    #[error("instance {0} has no candidate senses")]
    NoCandidates(String),
    #[error("no gold key of instance {0} is among its candidate senses")]
    GoldNotInInventory(String),
    #[error("instance {0} has no gold keys")]
    MissingGold(String),
    #[error("invalid builder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum GroupFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    SchemaError { line: usize, message: String },
}

/// Replacement distribution for selected context tokens.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSplit {
    pub mask: f64,
    pub random: f64,
    pub keep: f64,
}

impl Default for MaskSplit {
    fn default() -> Self {
        MaskSplit {
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuilderConfig {
    pub max_len: usize,
    pub mask_prob: f64,
    pub mask_split: MaskSplit,
    pub seed: u64,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        BuilderConfig {
            max_len: 160,
            mask_prob: 0.15,
            mask_split: MaskSplit::default(),
            seed: 0,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<(), BuildError> {
        if self.max_len < 8 {
            return Err(BuildError::InvalidConfig(format!("max_len {} < 8", self.max_len)));
        }
        let MaskSplit { mask, random, keep } = self.mask_split;
        let probs = [self.mask_prob, mask, random, keep];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(BuildError::InvalidConfig("probabilities must lie in [0, 1]".into()));
        }
        if ((mask + random + keep) - 1.0).abs() > 1e-9 {
            return Err(BuildError::InvalidConfig("mask split must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentenceGlossPair {
    pub sequence: TokenSequence,
    /// Index of the first target token (just after `[TGT]`).
    pub target_position: usize,
    pub label: bool,
}

impl SentenceGlossPair {
    /// Index of the first `[SEP]`, the end of segment 0.
    pub fn first_sep(&self) -> usize {
        self.sequence
            .ids
            .iter()
            .position(|&id| id == SEP)
            .expect("pair layout has a separator")
    }

    /// Index of `[/TGT]`.
    pub fn target_end(&self) -> usize {
        self.target_position
            + self.sequence.ids[self.target_position..]
                .iter()
                .position(|&id| id == TGT_END)
                .expect("pair layout has a closing target marker")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateGroup {
    pub instance_id: String,
    /// One pair per candidate sense, in sense-rank order.
    pub pairs: Vec<SentenceGlossPair>,
    /// Sorted indices of the pairs whose sense is gold.
    pub gold_indices: Vec<usize>,
    /// The lowest-ranked gold candidate; the single training target.
    pub primary_gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskedPosition {
    pub pair: usize,
    pub index: usize,
    pub original: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedGroup {
    pub base: CandidateGroup,
    pub masked_sequences: Vec<TokenSequence>,
    pub masked_positions: Vec<MaskedPosition>,
}

fn encode_words<'a, I: IntoIterator<Item = &'a str>>(words: I, vocab: &Vocabulary) -> Vec<u32> {
    let mut ids = Vec::new();
    for w in words {
        ids.extend(vocab.encode(&tokenize(w)));
    }
    ids
}

/// Builds the sequence for one candidate sense. Over-long inputs lose gloss
/// tail tokens first, then context tokens from whichever side of the target
/// is longer; specials, the target, and the lemma are always kept.
pub fn build_pair(
    sentence: &WsdSentence,
    token_index: usize,
    sense: &SenseEntry,
    gold: Option<&BTreeSet<String>>,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<SentenceGlossPair, BuildError> {
    let tokens = &sentence.tokens;
    let left = encode_words(tokens[..token_index].iter().map(|t| t.surface.as_str()), vocab);
    let target = encode_words([tokens[token_index].surface.as_str()], vocab);
    let right = encode_words(tokens[token_index + 1..].iter().map(|t| t.surface.as_str()), vocab);
    let lemma = encode_words([lemma_text(&sense.lemma).as_str()], vocab);
    let gloss = encode_words([sense.gloss.as_str()], vocab);
    let label = gold.is_some_and(|g| g.contains(&sense.sense_key));
    assemble(&left, &target, &right, &lemma, &gloss, label, config.max_len)
}

fn assemble(
    left: &[u32],
    target: &[u32],
    right: &[u32],
    lemma: &[u32],
    gloss: &[u32],
    label: bool,
    max_len: usize,
) -> Result<SentenceGlossPair, BuildError> {
    let fixed = 5 + target.len() + lemma.len();
    if fixed > max_len {
        return Err(BuildError::TargetTruncated {
            len: target.len() + lemma.len(),
            max_len,
        });
    }
    let budget = max_len - fixed;
    let mut excess = (left.len() + right.len() + gloss.len()).saturating_sub(budget);

    let cut_gloss = excess.min(gloss.len());
    let gloss = &gloss[..gloss.len() - cut_gloss];
    excess -= cut_gloss;

    let (mut left_start, mut right_end) = (0, right.len());
    while excess > 0 {
        let left_len = left.len() - left_start;
        if right_end >= left_len && right_end > 0 {
            right_end -= 1;
        } else {
            left_start += 1;
        }
        excess -= 1;
    }
    let left = &left[left_start..];
    let right = &right[..right_end];

    let mut ids = Vec::with_capacity(max_len);
    ids.push(AGG);
    ids.extend_from_slice(left);
    ids.push(TGT_BEGIN);
    let target_position = ids.len();
    ids.extend_from_slice(target);
    ids.push(TGT_END);
    ids.extend_from_slice(right);
    ids.push(SEP);
    let seg0 = ids.len();
    ids.extend_from_slice(lemma);
    ids.extend_from_slice(gloss);
    ids.push(SEP);
    let mut segment_ids = vec![0u8; seg0];
    segment_ids.resize(ids.len(), 1);
    debug_assert!(ids.len() <= max_len);

    Ok(SentenceGlossPair {
        sequence: TokenSequence { ids, segment_ids },
        target_position,
        label,
    })
}

/// Candidate pairs for an instance without gold information, used at
/// prediction time. Returns the pairs with their sense entries.
pub fn build_candidates<'l>(
    instance: &Instance<'_>,
    lexicon: &'l GlossLexicon,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<(Vec<SentenceGlossPair>, &'l [SenseEntry]), BuildError> {
    let candidates = lexicon.candidate_senses(instance.lemma, instance.pos);
    if candidates.is_empty() {
        return Err(BuildError::NoCandidates(instance.id.to_string()));
    }
    let pairs = candidates
        .iter()
        .map(|s| build_pair(instance.sentence, instance.token_index, s, None, vocab, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pairs, candidates))
}

pub fn build_group(
    instance: &Instance<'_>,
    lexicon: &GlossLexicon,
    gold: &GoldKeys,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<CandidateGroup, BuildError> {
    let keys = gold
        .get(instance.id)
        .ok_or_else(|| BuildError::MissingGold(instance.id.to_string()))?;
    let candidates = lexicon.candidate_senses(instance.lemma, instance.pos);
    if candidates.is_empty() {
        return Err(BuildError::NoCandidates(instance.id.to_string()));
    }
    let gold_indices: Vec<usize> = candidates
        .iter()
        .enumerate()
        .filter(|(_, s)| keys.contains(&s.sense_key))
        .map(|(i, _)| i)
        .collect();
    let Some(&primary_gold) = gold_indices.first() else {
        return Err(BuildError::GoldNotInInventory(instance.id.to_string()));
    };
    let pairs = candidates
        .iter()
        .map(|s| build_pair(instance.sentence, instance.token_index, s, Some(keys), vocab, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CandidateGroup {
        instance_id: instance.id.to_string(),
        pairs,
        gold_indices,
        primary_gold,
    })
}

/// Result of compiling a corpus: groups ordered by instance id, plus the
/// instances that could not be compiled.
#[derive(Debug, Default)]
pub struct Compiled {
    pub groups: Vec<CandidateGroup>,
    pub skipped: Vec<(String, String)>,
}

pub fn compile_corpus(
    corpus: &WsdCorpus,
    lexicon: &GlossLexicon,
    gold: &GoldKeys,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<Compiled, BuildError> {
    config.validate()?;
    let instances: Vec<Instance<'_>> = corpus.instances().collect();
    let results: Vec<Result<CandidateGroup, BuildError>> = instances
        .par_iter()
        .map(|inst| build_group(inst, lexicon, gold, vocab, config))
        .collect();
    let mut compiled = Compiled::default();
    for (inst, result) in instances.iter().zip(results) {
        match result {
            Ok(group) => compiled.groups.push(group),
            Err(e @ BuildError::TargetTruncated { .. }) => return Err(e),
            Err(e) => compiled.skipped.push((inst.id.to_string(), e.to_string())),
        }
    }
    compiled.groups.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    compiled.skipped.sort();
    Ok(compiled)
}

/// Pair length before truncation.
pub fn untruncated_len(sentence: &WsdSentence, sense: &SenseEntry, vocab: &Vocabulary) -> usize {
    let words = sentence.tokens.iter().map(|t| t.surface.as_str());
    5 + encode_words(words, vocab).len()
        + encode_words([lemma_text(&sense.lemma).as_str()], vocab).len()
        + encode_words([sense.gloss.as_str()], vocab).len()
}

/// How many compiled pairs fit in `max_len` tokens without truncation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub max_len: usize,
    pub pairs: usize,
    pub fitting: usize,
    pub longest: usize,
}

impl LengthStats {
    pub fn fraction_fitting(&self) -> f64 {
        if self.pairs == 0 {
            1.0
        } else {
            self.fitting as f64 / self.pairs as f64
        }
    }
}

/// Length statistics over the pairs of every instance that compiles into a
/// group (gold present and among the candidates).
pub fn length_stats(
    corpus: &WsdCorpus,
    lexicon: &GlossLexicon,
    gold: &GoldKeys,
    vocab: &Vocabulary,
    max_len: usize,
) -> LengthStats {
    let mut stats = LengthStats {
        max_len,
        ..Default::default()
    };
    for inst in corpus.instances() {
        let Some(keys) = gold.get(inst.id) else { continue };
        let candidates = lexicon.candidate_senses(inst.lemma, inst.pos);
        if !candidates.iter().any(|c| keys.contains(&c.sense_key)) {
            continue;
        }
        for sense in candidates {
            let len = untruncated_len(inst.sentence, sense, vocab);
            stats.pairs += 1;
            stats.fitting += usize::from(len <= max_len);
            stats.longest = stats.longest.max(len);
        }
    }
    stats
}

/// Positions of a pair that masking may touch: segment-0 tokens that are
/// neither specials nor part of the bracketed target.
pub fn maskable_positions(pair: &SentenceGlossPair) -> Vec<usize> {
    let sep = pair.first_sep();
    let tgt_begin = pair.target_position - 1;
    let tgt_end = pair.target_end();
    (1..sep)
        .filter(|&i| !(tgt_begin..=tgt_end).contains(&i))
        .filter(|&i| !Special::is_special(pair.sequence.ids[i]))
        .collect()
}

/// Selects each maskable context token with probability `mask_prob` and
/// replaces it with `[MASK]`, a random regular token, or itself according to
/// `mask_split`. Each pair draws from its own stream derived from
/// `(seed, instance_id, pair index)`.
pub fn apply_masking(group: &CandidateGroup, vocab_size: usize, config: &BuilderConfig) -> MaskedGroup {
    let mut masked_sequences = Vec::with_capacity(group.pairs.len());
    let mut masked_positions = Vec::new();
    let regular = vocab_size.saturating_sub(Special::COUNT as usize);
    for (p, pair) in group.pairs.iter().enumerate() {
        let mut rng = seed::stream(
            config.seed,
            &["mask".into(), group.instance_id.as_str().into(), p.into()],
        );
        let mut seq = pair.sequence.clone();
        for i in maskable_positions(pair) {
            if rng.random::<f64>() >= config.mask_prob {
                continue;
            }
            let original = seq.ids[i];
            let u: f64 = rng.random();
            if u < config.mask_split.mask {
                seq.ids[i] = MASK;
            } else if u < config.mask_split.mask + config.mask_split.random {
                if regular > 0 {
                    seq.ids[i] = Special::COUNT + rng.random_range(0..regular as u32);
                }
            }
            masked_positions.push(MaskedPosition {
                pair: p,
                index: i,
                original,
            });
        }
        masked_sequences.push(seq);
    }
    MaskedGroup {
        base: group.clone(),
        masked_sequences,
        masked_positions,
    }
}

impl MaskedGroup {
    /// Masked positions belonging to pair `p`.
    pub fn positions_of(&self, p: usize) -> impl Iterator<Item = &MaskedPosition> {
        self.masked_positions.iter().filter(move |m| m.pair == p)
    }
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    ids: Vec<u32>,
    segments: Vec<u8>,
    label: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GroupRecord {
    instance_id: String,
    pairs: Vec<PairRecord>,
    gold: Vec<usize>,
    primary_gold: usize,
}

impl From<&CandidateGroup> for GroupRecord {
    fn from(g: &CandidateGroup) -> Self {
        GroupRecord {
            instance_id: g.instance_id.clone(),
            pairs: g
                .pairs
                .iter()
                .map(|p| PairRecord {
                    ids: p.sequence.ids.clone(),
                    segments: p.sequence.segment_ids.clone(),
                    label: p.label,
                })
                .collect(),
            gold: g.gold_indices.clone(),
            primary_gold: g.primary_gold,
        }
    }
}

fn pair_from_record(r: PairRecord) -> Result<SentenceGlossPair, String> {
    if r.ids.len() != r.segments.len() {
        return Err("ids and segments differ in length".into());
    }
    if r.ids.first() != Some(&AGG) || r.ids.last() != Some(&SEP) {
        return Err("sequence must start with [AGG] and end with [SEP]".into());
    }
    let count = |id| r.ids.iter().filter(|&&x| x == id).count();
    if count(TGT_BEGIN) != 1 || count(TGT_END) != 1 || count(SEP) != 2 {
        return Err("expected one [TGT], one [/TGT] and two [SEP]".into());
    }
    let begin = r.ids.iter().position(|&x| x == TGT_BEGIN).unwrap();
    let end = r.ids.iter().position(|&x| x == TGT_END).unwrap();
    let sep = r.ids.iter().position(|&x| x == SEP).unwrap();
    if !(begin < end && end < sep) {
        return Err("target markers must precede the first [SEP]".into());
    }
    if r.segments.iter().enumerate().any(|(i, &s)| s != u8::from(i > sep)) {
        return Err("segment ids do not match the separator layout".into());
    }
    Ok(SentenceGlossPair {
        sequence: TokenSequence {
            ids: r.ids,
            segment_ids: r.segments,
        },
        target_position: begin + 1,
        label: r.label,
    })
}

fn group_from_record(r: GroupRecord) -> Result<CandidateGroup, String> {
    if r.pairs.is_empty() {
        return Err("group has no pairs".into());
    }
    let pairs = r
        .pairs
        .into_iter()
        .map(pair_from_record)
        .collect::<Result<Vec<_>, _>>()?;
    let gold: BTreeSet<usize> = r.gold.iter().copied().collect();
    if gold.is_empty() || gold.len() != r.gold.len() || r.gold.windows(2).any(|w| w[0] >= w[1]) {
        return Err("gold must be a non-empty sorted set".into());
    }
    if pairs.iter().enumerate().any(|(i, p)| p.label != gold.contains(&i)) {
        return Err("pair labels disagree with gold indices".into());
    }
    if !gold.contains(&r.primary_gold) || Some(&r.primary_gold) != gold.first() {
        return Err("primary_gold must be the first gold index".into());
    }
    Ok(CandidateGroup {
        instance_id: r.instance_id,
        pairs,
        gold_indices: r.gold,
        primary_gold: r.primary_gold,
    })
}

pub fn write_groups<W: Write>(groups: &[CandidateGroup], mut out: W) -> io::Result<()> {
    for g in groups {
        serde_json::to_writer(&mut out, &GroupRecord::from(g))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_groups<R: BufRead>(reader: R) -> Result<Vec<CandidateGroup>, GroupFileError> {
    let mut groups = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| GroupFileError::SchemaError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| GroupFileError::SchemaError { line: i + 1, message };
        let record: GroupRecord = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
        groups.push(group_from_record(record).map_err(schema)?);
    }
    Ok(groups)
}

pub fn export_groups(groups: &[CandidateGroup], path: &Path) -> Result<(), GroupFileError> {
    let io_err = |e| GroupFileError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
    write_groups(groups, &mut out).and_then(|_| out.flush()).map_err(io_err)
}

pub fn import_groups(path: &Path) -> Result<Vec<CandidateGroup>, GroupFileError> {
    let file = File::open(path).map_err(|e| GroupFileError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_groups(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_framework_xml, read_gold_keys};
    use crate::lexicon::{read_tsv_lexicon, PartOfSpeech};
    use crate::tokenizer::{build_vocab_from_texts, decode};
    use proptest::prelude::*;

    fn sense(key: &str, lemma: &str, rank: u32, gloss: &str) -> SenseEntry {
        SenseEntry {
            sense_key: key.into(),
            lemma: lemma.into(),
            pos: PartOfSpeech::Noun,
            gloss: gloss.into(),
            sense_rank: rank,
        }
    }

    fn sentence(words: &[&str]) -> WsdSentence {
        let xml: String = words
            .iter()
            .enumerate()
            .map(|(i, w)| format!(r#"<instance id="t{i}" lemma="{w}" pos="NOUN">{w}</instance>"#))
            .collect();
        let c = parse_framework_xml(&format!("<sentence>{xml}</sentence>"), "x").unwrap();
        c.sentences()[0].clone()
    }

    #[test]
    fn layout_matches_contract() {
        let vocab = build_vocab_from_texts(["the cell divides a small room"], 1, None);
        let s = sentence(&["the", "cell", "divides"]);
        let pair = build_pair(
            &s,
            1,
            &sense("cell%1:06:03::", "cell", 1, "a small room"),
            None,
            &vocab,
            &BuilderConfig::default(),
        )
        .unwrap();
        let toks = decode(&pair.sequence.ids, &vocab).unwrap();
        assert_eq!(
            toks,
            vec!["[AGG]", "the", "[TGT]", "cell", "[/TGT]", "divides", "[SEP]", "cell", "a", "small", "room", "[SEP]"]
        );
        assert_eq!(pair.sequence.segment_ids, [vec![0u8; 7], vec![1u8; 5]].concat());
        assert_eq!(pair.target_position, 3);
        assert!(!pair.label);
    }

    #[test]
    fn long_gloss_truncated_to_max_len() {
        let vocab = build_vocab_from_texts(["the cell divides g"], 1, None);
        let s = sentence(&["the", "cell", "divides"]);
        let gloss = vec!["g"; 400].join(" ");
        let pair = build_pair(&s, 1, &sense("c%1:00:00::", "cell", 1, &gloss), None, &vocab, &BuilderConfig::default())
            .unwrap();
        assert_eq!(pair.sequence.len(), 160);
        // context and target intact
        assert_eq!(&pair.sequence.ids[..7], &decode_ids(&vocab, &["[AGG]", "the", "[TGT]", "cell", "[/TGT]", "divides", "[SEP]"]));
        assert_eq!(*pair.sequence.ids.last().unwrap(), SEP);
    }

    #[test]
    fn length_stats_count_pairs_over_the_limit() {
        let xml = r#"<sentence><wf lemma="the" pos="DET">the</wf><instance id="a" lemma="cell" pos="NOUN">cell</instance></sentence>"#;
        let corpus = parse_framework_xml(xml, "x").unwrap();
        let lexicon = read_tsv_lexicon(
            "cell%1:06:00::\tcell\tNOUN\t1\ta small room\ncell%1:03:00::\tcell\tNOUN\t2\tthe basic unit of life in every organism\n"
                .as_bytes(),
        )
        .unwrap();
        let gold = read_gold_keys("a cell%1:06:00::\n".as_bytes()).unwrap();
        let vocab = build_vocab_from_texts(["the cell a small room basic unit of life in every organism"], 1, None);
        // lengths: 5 + 2 + 1 + 3 = 11 and 5 + 2 + 1 + 8 = 16
        let s = length_stats(&corpus, &lexicon, &gold, &vocab, 12);
        assert_eq!((s.pairs, s.fitting, s.longest), (2, 1, 16));
        assert_eq!(s.fraction_fitting(), 0.5);
        let unresolvable = read_gold_keys("a cell%1:99:00::\n".as_bytes()).unwrap();
        assert_eq!(length_stats(&corpus, &lexicon, &unresolvable, &vocab, 12).pairs, 0);
    }

    fn decode_ids(vocab: &Vocabulary, toks: &[&str]) -> Vec<u32> {
        toks.iter().map(|t| vocab.id(t).unwrap()).collect()
    }

    #[test]
    fn context_trimmed_symmetrically_after_gloss() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let vocab = build_vocab_from_texts([words.join(" ").as_str()], 1, None);
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let s = sentence(&refs);
        let config = BuilderConfig { max_len: 16, ..Default::default() };
        let pair = build_pair(&s, 5, &sense("w5%1:00:00::", "w5", 1, "w1 w2 w3"), None, &vocab, &config).unwrap();
        assert_eq!(pair.sequence.len(), 16);
        let toks = decode(&pair.sequence.ids, &vocab).unwrap();
        // fixed: AGG TGT w5 /TGT SEP w5 SEP = 7, leaving 9 context tokens and no gloss;
        // the longer right side is cut back until the sides balance
        assert_eq!(
            toks,
            vec!["[AGG]", "w0", "w1", "w2", "w3", "w4", "[TGT]", "w5", "[/TGT]", "w6", "w7", "w8", "w9", "[SEP]", "w5", "[SEP]"]
        );
    }

    #[test]
    fn target_too_long_is_an_error() {
        let vocab = build_vocab_from_texts(["a"], 1, None);
        let mut s = sentence(&["x"]);
        s.tokens[0].surface = vec!["a"; 10].join(" ");
        let config = BuilderConfig { max_len: 8, ..Default::default() };
        assert!(matches!(
            build_pair(&s, 0, &sense("a%1:00:00::", "a", 1, "a"), None, &vocab, &config),
            Err(BuildError::TargetTruncated { .. })
        ));
    }

    fn cell_fixture() -> (WsdCorpus, GlossLexicon, GoldKeys, Vocabulary) {
        let lex = read_tsv_lexicon(
            "cell%1:06:03::\tcell\tNOUN\t1\ta small room\n\
             cell%1:03:00::\tcell\tNOUN\t2\tthe basic unit of life\n\
             cell%1:06:00::\tcell\tNOUN\t3\ta device that delivers current\n\
             cell%1:14:00::\tcell\tNOUN\t4\ta small unit of an organization\n\
             divide%2:41:00::\tdivide\tVERB\t1\tseparate into parts\n"
                .as_bytes(),
        )
        .unwrap();
        let corpus = parse_framework_xml(
            r#"<sentence id="s0"><wf lemma="the" pos="DET">The</wf><instance id="s0.t0" lemma="cell" pos="NOUN">cell</instance><instance id="s0.t1" lemma="divide" pos="VERB">divides</instance></sentence>"#,
            "tiny",
        )
        .unwrap();
        let gold = read_gold_keys("s0.t0 cell%1:03:00::\ns0.t1 divide%2:41:00::\n".as_bytes()).unwrap();
        let vocab = crate::tokenizer::build_vocab(&[&corpus], &lex, 1, None);
        (corpus, lex, gold, vocab)
    }

    #[test]
    fn group_for_rank_two_gold() {
        let (corpus, lex, gold, vocab) = cell_fixture();
        let inst = corpus.instance("s0.t0").unwrap();
        let g = build_group(&inst, &lex, &gold, &vocab, &BuilderConfig::default()).unwrap();
        assert_eq!(g.pairs.len(), 4);
        assert_eq!(g.primary_gold, 1);
        assert_eq!(g.gold_indices, vec![1]);
        let labels: Vec<bool> = g.pairs.iter().map(|p| p.label).collect();
        assert_eq!(labels, vec![false, true, false, false]);
    }

    #[test]
    fn monosemous_group() {
        let (corpus, lex, gold, vocab) = cell_fixture();
        let inst = corpus.instance("s0.t1").unwrap();
        let g = build_group(&inst, &lex, &gold, &vocab, &BuilderConfig::default()).unwrap();
        assert_eq!(g.pairs.len(), 1);
        assert_eq!(g.gold_indices, vec![0]);
    }

    #[test]
    fn group_errors() {
        let (corpus, lex, _, vocab) = cell_fixture();
        let inst = corpus.instance("s0.t0").unwrap();
        let wrong = read_gold_keys("s0.t0 cell%1:99:99::\n".as_bytes()).unwrap();
        assert!(matches!(
            build_group(&inst, &lex, &wrong, &vocab, &BuilderConfig::default()),
            Err(BuildError::GoldNotInInventory(_))
        ));
        let empty = GlossLexicon::default();
        let gold = read_gold_keys("s0.t0 cell%1:03:00::\n".as_bytes()).unwrap();
        assert!(matches!(
            build_group(&inst, &empty, &gold, &vocab, &BuilderConfig::default()),
            Err(BuildError::NoCandidates(_))
        ));
    }

    #[test]
    fn masking_extremes() {
        let (corpus, lex, gold, vocab) = cell_fixture();
        let inst = corpus.instance("s0.t0").unwrap();
        let g = build_group(&inst, &lex, &gold, &vocab, &BuilderConfig::default()).unwrap();

        let off = BuilderConfig { mask_prob: 0.0, ..Default::default() };
        let m = apply_masking(&g, vocab.len(), &off);
        assert!(m.masked_positions.is_empty());
        for (seq, pair) in m.masked_sequences.iter().zip(&g.pairs) {
            assert_eq!(seq, &pair.sequence);
        }

        let all = BuilderConfig {
            mask_prob: 1.0,
            mask_split: MaskSplit { mask: 1.0, random: 0.0, keep: 0.0 },
            ..Default::default()
        };
        let m = apply_masking(&g, vocab.len(), &all);
        for (p, (seq, pair)) in m.masked_sequences.iter().zip(&g.pairs).enumerate() {
            let eligible = maskable_positions(pair);
            assert_eq!(eligible.len(), 2); // "the", "divides"
            for i in 0..seq.len() {
                if eligible.contains(&i) {
                    assert_eq!(seq.ids[i], MASK);
                } else {
                    assert_eq!(seq.ids[i], pair.sequence.ids[i]);
                }
            }
            assert_eq!(m.positions_of(p).count(), 2);
        }
    }

    #[test]
    fn export_round_trip_and_schema_errors() {
        let (corpus, lex, gold, vocab) = cell_fixture();
        let compiled = compile_corpus(&corpus, &lex, &gold, &vocab, &BuilderConfig::default()).unwrap();
        assert_eq!(compiled.groups.len(), 2);
        let mut buf = Vec::new();
        write_groups(&compiled.groups, &mut buf).unwrap();
        let back = read_groups(buf.as_slice()).unwrap();
        assert_eq!(back, compiled.groups);

        let mut again = Vec::new();
        write_groups(&back, &mut again).unwrap();
        assert_eq!(buf, again);

        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() - 10];
        match read_groups(truncated.as_bytes()) {
            Err(GroupFileError::SchemaError { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(BuilderConfig::default().validate().is_ok());
        assert!(BuilderConfig { max_len: 7, ..Default::default() }.validate().is_err());
        assert!(BuilderConfig { mask_prob: 1.5, ..Default::default() }.validate().is_err());
        let bad_split = MaskSplit { mask: 0.5, random: 0.1, keep: 0.1 };
        assert!(BuilderConfig { mask_split: bad_split, ..Default::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn pair_invariants(
            left in 0usize..120, right in 0usize..120, target in 1usize..4,
            lemma in 1usize..3, gloss in 0usize..200, max_len in 12usize..200,
        ) {
            let ids = |n: usize, base: u32| (0..n as u32).map(|i| base + i % 50).collect::<Vec<u32>>();
            let pair = assemble(&ids(left, 10), &ids(target, 100), &ids(right, 200), &ids(lemma, 300), &ids(gloss, 400), true, max_len).unwrap();
            let seq = &pair.sequence;
            prop_assert!(seq.len() <= max_len);
            prop_assert_eq!(seq.ids.iter().filter(|&&x| x == TGT_BEGIN).count(), 1);
            prop_assert_eq!(seq.ids.iter().filter(|&&x| x == TGT_END).count(), 1);
            prop_assert_eq!(pair.target_position - 1 + target + 1, pair.target_end());
            prop_assert_eq!(&seq.ids[pair.target_position..pair.target_end()], &ids(target, 100)[..]);
            let sep = pair.first_sep();
            prop_assert!(seq.segment_ids.iter().enumerate().all(|(i, &s)| s == u8::from(i > sep)));
            let full = 5 + left + right + target + lemma + gloss;
            prop_assert_eq!(seq.len(), full.min(max_len));
        }

        #[test]
        fn masking_never_touches_protected_tokens(seed in any::<u64>(), prob in 0.0f64..1.0) {
            let (corpus, lex, gold, vocab) = cell_fixture();
            let inst = corpus.instance("s0.t0").unwrap();
            let g = build_group(&inst, &lex, &gold, &vocab, &BuilderConfig::default()).unwrap();
            let config = BuilderConfig { mask_prob: prob, seed, ..Default::default() };
            let m = apply_masking(&g, vocab.len(), &config);
            for (seq, pair) in m.masked_sequences.iter().zip(&g.pairs) {
                let eligible = maskable_positions(pair);
                for i in 0..seq.len() {
                    if !eligible.contains(&i) {
                        prop_assert_eq!(seq.ids[i], pair.sequence.ids[i]);
                    }
                }
            }
            prop_assert_eq!(apply_masking(&g, vocab.len(), &config), m);
        }
    }
}

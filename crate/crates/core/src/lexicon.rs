//! WordNet-style sense inventory.
//!
//! A [`GlossLexicon`] maps a `(lemma, part of speech)` pair to the ordered list
//! of its senses, each carrying a gloss definition. Two loaders are provided:
//! the WordNet 3.0 database files (`index.sense` plus `data.*`) and a small
//! tab-separated fixture format used by tests and synthetic corpora.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed line {line} ({reason}): {content:?}")]
    MalformedLine {
        line: usize,
        content: String,
        reason: String,
    },
    #[error("sense key {sense_key} points to missing {pos} synset {offset:08}")]
    DanglingOffset {
        sense_key: String,
        pos: PartOfSpeech,
        offset: u64,
    },
    #[error("duplicate sense key {0}")]
    DuplicateSenseKey(String),
    #[error("duplicate sense rank {rank} for {lemma} ({pos})")]
    DuplicateRank {
        lemma: String,
        pos: PartOfSpeech,
        rank: u32,
    },
    #[error("empty gloss for {0}")]
    EmptyGloss(String),
}

impl LexiconError {
    fn io(path: &Path, source: io::Error) -> Self {
        LexiconError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(line: usize, content: &str, reason: impl Into<String>) -> Self {
        LexiconError::MalformedLine {
            line,
            content: content.to_string(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartOfSpeech {
    Noun,
    Verb,
    Adjective,
    Adverb,
}

impl PartOfSpeech {
    pub const ALL: [PartOfSpeech; 4] = [
        PartOfSpeech::Noun,
        PartOfSpeech::Verb,
        PartOfSpeech::Adjective,
        PartOfSpeech::Adverb,
    ];

    /// Maps an evaluation-framework tag (`NOUN`, `VERB`, `ADJ`, `ADV`).
    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "NOUN" => Some(PartOfSpeech::Noun),
            "VERB" => Some(PartOfSpeech::Verb),
            "ADJ" => Some(PartOfSpeech::Adjective),
            "ADV" => Some(PartOfSpeech::Adverb),
            _ => None,
        }
    }

    /// Maps a WordNet `ss_type`, either the sense-key digit or the data-file
    /// letter. Adjective satellites fold into [`PartOfSpeech::Adjective`].
    pub fn from_ss_type(ss_type: &str) -> Option<Self> {
        match ss_type {
            "1" | "n" => Some(PartOfSpeech::Noun),
            "2" | "v" => Some(PartOfSpeech::Verb),
            "3" | "5" | "a" | "s" => Some(PartOfSpeech::Adjective),
            "4" | "r" => Some(PartOfSpeech::Adverb),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            PartOfSpeech::Noun => "NOUN",
            PartOfSpeech::Verb => "VERB",
            PartOfSpeech::Adjective => "ADJ",
            PartOfSpeech::Adverb => "ADV",
        }
    }
}

impl fmt::Display for PartOfSpeech {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for PartOfSpeech {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PartOfSpeech::from_tag(s).ok_or_else(|| format!("unknown part of speech {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseEntry {
    pub sense_key: String,
    pub lemma: String,
    pub pos: PartOfSpeech,
    pub gloss: String,
    /// 1 is the most frequent sense.
    pub sense_rank: u32,
}

/// Lowercases and joins multiword lemmas with underscores, the WordNet
/// convention for lemma lookup.
pub fn normalize_lemma(lemma: &str) -> String {
    lemma
        .split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .to_lowercase()
}

fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Immutable sense inventory indexed by `(lemma, pos)` and by sense key.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlossLexicon {
    entries: HashMap<(String, PartOfSpeech), Vec<SenseEntry>>,
    by_key: HashMap<String, (String, PartOfSpeech, usize)>,
}

impl GlossLexicon {
    pub fn from_entries<I>(entries: I) -> Result<Self, LexiconError>
    where
        I: IntoIterator<Item = SenseEntry>,
    {
        let mut grouped: HashMap<(String, PartOfSpeech), Vec<SenseEntry>> = HashMap::new();
        let mut seen_keys = std::collections::HashSet::new();
        for entry in entries {
            if entry.gloss.trim().is_empty() {
                return Err(LexiconError::EmptyGloss(entry.sense_key));
            }
            if !seen_keys.insert(entry.sense_key.clone()) {
                return Err(LexiconError::DuplicateSenseKey(entry.sense_key));
            }
            grouped
                .entry((normalize_lemma(&entry.lemma), entry.pos))
                .or_default()
                .push(entry);
        }

        let mut by_key = HashMap::with_capacity(seen_keys.len());
        for ((lemma, pos), senses) in grouped.iter_mut() {
            senses.sort_by(|a, b| a.sense_rank.cmp(&b.sense_rank));
            for pair in senses.windows(2) {
                if pair[0].sense_rank == pair[1].sense_rank {
                    return Err(LexiconError::DuplicateRank {
                        lemma: lemma.clone(),
                        pos: *pos,
                        rank: pair[0].sense_rank,
                    });
                }
            }
            for (i, sense) in senses.iter().enumerate() {
                by_key.insert(sense.sense_key.clone(), (lemma.clone(), *pos, i));
            }
        }

        Ok(GlossLexicon {
            entries: grouped,
            by_key,
        })
    }

    /// Senses of `lemma` ordered by ascending sense rank; empty when unknown.
    pub fn candidate_senses(&self, lemma: &str, pos: PartOfSpeech) -> &[SenseEntry] {
        self.entries
            .get(&(normalize_lemma(lemma), pos))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn get(&self, sense_key: &str) -> Option<&SenseEntry> {
        let (lemma, pos, i) = self.by_key.get(sense_key)?;
        self.entries.get(&(lemma.clone(), *pos)).map(|s| &s[*i])
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Number of distinct `(lemma, pos)` groups.
    pub fn lemma_count(&self) -> usize {
        self.entries.len()
    }

    /// All senses in a stable order: lemma, then part of speech, then rank.
    pub fn iter_sorted(&self) -> Vec<&SenseEntry> {
        let mut keys: Vec<_> = self.entries.keys().collect();
        keys.sort();
        keys.into_iter()
            .flat_map(|k| self.entries[k].iter())
            .collect()
    }

    /// Writes the fixture TSV format, one sense per line.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> io::Result<()> {
        for e in self.iter_sorted() {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                e.sense_key,
                e.lemma,
                e.pos.tag(),
                e.sense_rank,
                e.gloss
            )?;
        }
        Ok(())
    }

    pub fn export_tsv(&self, path: &Path) -> Result<(), LexiconError> {
        let file = File::create(path).map_err(|e| LexiconError::io(path, e))?;
        let mut out = io::BufWriter::new(file);
        self.write_tsv(&mut out)
            .and_then(|_| out.flush())
            .map_err(|e| LexiconError::io(path, e))
    }
}

/// Parses the fixture format `sense_key<TAB>lemma<TAB>pos<TAB>sense_rank<TAB>gloss`.
pub fn read_tsv_lexicon<R: BufRead>(reader: R) -> Result<GlossLexicon, LexiconError> {
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| LexiconError::malformed(lineno, "", e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, '\t').collect();
        if fields.len() != 5 {
            return Err(LexiconError::malformed(lineno, &line, "expected 5 tab-separated fields"));
        }
        let pos = PartOfSpeech::from_tag(fields[2])
            .ok_or_else(|| LexiconError::malformed(lineno, &line, "unknown part of speech"))?;
        let sense_rank: u32 = fields[3]
            .parse()
            .ok()
            .filter(|r| *r >= 1)
            .ok_or_else(|| LexiconError::malformed(lineno, &line, "sense rank must be an integer >= 1"))?;
        let gloss = normalize_whitespace(fields[4]);
        if fields[0].is_empty() || fields[1].is_empty() || gloss.is_empty() {
            return Err(LexiconError::malformed(lineno, &line, "empty field"));
        }
        entries.push(SenseEntry {
            sense_key: fields[0].to_string(),
            lemma: fields[1].to_string(),
            pos,
            gloss,
            sense_rank,
        });
    }
    GlossLexicon::from_entries(entries)
}

pub fn import_tsv_lexicon(path: &Path) -> Result<GlossLexicon, LexiconError> {
    let file = File::open(path).map_err(|e| LexiconError::io(path, e))?;
    read_tsv_lexicon(BufReader::new(file))
}

/// Extracts the definition part of a WordNet gloss field: the text before
/// the first `; "` example boundary, whitespace-normalized.
pub fn gloss_definition(gloss_field: &str) -> String {
    let definition = match gloss_field.find("; \"") {
        Some(cut) => &gloss_field[..cut],
        None => gloss_field,
    };
    let definition = normalize_whitespace(definition);
    if definition.is_empty() {
        normalize_whitespace(gloss_field)
    } else {
        definition
    }
}

/// Reads synset glosses from WordNet `data.*` files, keyed by `(pos, offset)`.
fn read_data_glosses(
    paths: &[PathBuf],
) -> Result<HashMap<(PartOfSpeech, u64), String>, LexiconError> {
    let mut glosses = HashMap::new();
    for path in paths {
        let file = File::open(path).map_err(|e| LexiconError::io(path, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| LexiconError::io(path, e))?;
            // license header lines start with two spaces
            if line.is_empty() || line.starts_with(' ') {
                continue;
            }
            let lineno = i + 1;
            let mut fields = line.split(' ');
            let offset = fields
                .next()
                .and_then(|f| f.parse::<u64>().ok())
                .ok_or_else(|| LexiconError::malformed(lineno, &line, "bad synset offset"))?;
            let pos = fields
                .nth(1)
                .and_then(PartOfSpeech::from_ss_type)
                .ok_or_else(|| LexiconError::malformed(lineno, &line, "bad ss_type"))?;
            let gloss = match line.find(" | ") {
                Some(bar) => gloss_definition(&line[bar + 3..]),
                None => return Err(LexiconError::malformed(lineno, &line, "missing gloss separator")),
            };
            glosses.insert((pos, offset), gloss);
        }
    }
    Ok(glosses)
}

/// Parses one `index.sense` line: `sense_key synset_offset sense_number tag_cnt`.
fn parse_index_sense_line(
    lineno: usize,
    line: &str,
) -> Result<(String, String, PartOfSpeech, u64, u32), LexiconError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(LexiconError::malformed(lineno, line, "expected 4 fields"));
    }
    let sense_key = fields[0];
    let (lemma, rest) = sense_key
        .split_once('%')
        .ok_or_else(|| LexiconError::malformed(lineno, line, "sense key lacks '%'"))?;
    let lex_sense: Vec<&str> = rest.split(':').collect();
    if lemma.is_empty() || lex_sense.len() != 5 {
        return Err(LexiconError::malformed(lineno, line, "bad sense key syntax"));
    }
    let pos = PartOfSpeech::from_ss_type(lex_sense[0])
        .ok_or_else(|| LexiconError::malformed(lineno, line, "bad ss_type in sense key"))?;
    let offset: u64 = fields[1]
        .parse()
        .map_err(|_| LexiconError::malformed(lineno, line, "bad synset offset"))?;
    let sense_number: u32 = fields[2]
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| LexiconError::malformed(lineno, line, "bad sense number"))?;
    fields[3]
        .parse::<u32>()
        .map_err(|_| LexiconError::malformed(lineno, line, "bad tag count"))?;
    Ok((sense_key.to_string(), lemma.to_string(), pos, offset, sense_number))
}

/// Loads a lexicon from a WordNet 3.0 `index.sense` file and the matching
/// `data.{noun,verb,adj,adv}` files.
pub fn import_wordnet(
    index_sense_path: &Path,
    data_file_paths: &[PathBuf],
) -> Result<GlossLexicon, LexiconError> {
    let glosses = read_data_glosses(data_file_paths)?;
    let file = File::open(index_sense_path).map_err(|e| LexiconError::io(index_sense_path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LexiconError::io(index_sense_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let (sense_key, lemma, pos, offset, sense_rank) = parse_index_sense_line(i + 1, &line)?;
        let gloss = glosses
            .get(&(pos, offset))
            .ok_or_else(|| LexiconError::DanglingOffset {
                sense_key: sense_key.clone(),
                pos,
                offset,
            })?
            .clone();
        entries.push(SenseEntry {
            sense_key,
            lemma,
            pos,
            gloss,
            sense_rank,
        });
    }
    GlossLexicon::from_entries(entries)
}

/// Loads `index.sense` and all four data files from a WordNet `dict` directory.
pub fn import_wordnet_dir(dir: &Path) -> Result<GlossLexicon, LexiconError> {
    let data: Vec<PathBuf> = ["noun", "verb", "adj", "adv"]
        .iter()
        .map(|p| dir.join(format!("data.{p}")))
        .collect();
    import_wordnet(&dir.join("index.sense"), &data)
}

/// Opens either a WordNet directory or a TSV fixture file.
pub fn load_lexicon(path: &Path) -> Result<GlossLexicon, LexiconError> {
    if path.is_dir() {
        import_wordnet_dir(path)
    } else {
        import_tsv_lexicon(path)
    }
}

//! All-words WSD evaluation framework corpora: the XML sentence files, the
//! `.gold.key.txt` answer files, and the per-corpus statistics (instance
//! counts by part of speech and the positive/negative sentence-gloss pair
//! distribution).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lexicon::{GlossLexicon, PartOfSpeech};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("XML syntax error at byte {position}: {message}")]
    XmlSyntaxError { position: u64, message: String },
    #[error("<{element}> is missing attribute {attribute:?}")]
    MissingAttribute {
        element: String,
        attribute: &'static str,
    },
    #[error("instance {id} has unsupported part of speech {pos:?}")]
    UnsupportedPos { id: String, pos: String },
    #[error("duplicate instance id {0}")]
    DuplicateInstanceId(String),
    #[error("malformed line {line}: {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("empty key set on line {line} for {id}")]
    EmptyKeySet { line: usize, id: String },
    #[error("no gold keys for instance {0}")]
    MissingGold(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusToken {
    pub surface: String,
    pub lemma: Option<String>,
    /// Raw framework tag (`NOUN`, `DET`, `.` ...), kept for export.
    pub tag: Option<String>,
    pub pos: Option<PartOfSpeech>,
    pub instance_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WsdSentence {
    pub sentence_id: String,
    pub tokens: Vec<CorpusToken>,
}

/// Borrowed view of one annotated instance.
#[derive(Clone, Copy, Debug)]
pub struct Instance<'a> {
    pub id: &'a str,
    pub sentence: &'a WsdSentence,
    pub sentence_index: usize,
    pub token_index: usize,
    pub lemma: &'a str,
    pub pos: PartOfSpeech,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WsdCorpus {
    pub name: String,
    sentences: Vec<WsdSentence>,
    instance_index: HashMap<String, (usize, usize)>,
}

impl WsdCorpus {
    /// Builds a corpus and its instance index. Every instance token needs a
    /// lemma and a part of speech, and instance ids must be unique.
    pub fn new(name: impl Into<String>, sentences: Vec<WsdSentence>) -> Result<Self, CorpusError> {
        let mut instance_index = HashMap::new();
        for (si, sentence) in sentences.iter().enumerate() {
            for (ti, token) in sentence.tokens.iter().enumerate() {
                if let Some(id) = &token.instance_id {
                    if token.lemma.is_none() {
                        return Err(CorpusError::MissingAttribute {
                            element: "instance".into(),
                            attribute: "lemma",
                        });
                    }
                    if token.pos.is_none() {
                        return Err(CorpusError::UnsupportedPos {
                            id: id.clone(),
                            pos: token.tag.clone().unwrap_or_default(),
                        });
                    }
                    if instance_index.insert(id.clone(), (si, ti)).is_some() {
                        return Err(CorpusError::DuplicateInstanceId(id.clone()));
                    }
                }
            }
        }
        Ok(WsdCorpus {
            name: name.into(),
            sentences,
            instance_index,
        })
    }

    pub fn sentences(&self) -> &[WsdSentence] {
        &self.sentences
    }

    pub fn instance_count(&self) -> usize {
        self.instance_index.len()
    }

    fn make_instance(&self, si: usize, ti: usize) -> Instance<'_> {
        let sentence = &self.sentences[si];
        let token = &sentence.tokens[ti];
        Instance {
            id: token.instance_id.as_deref().expect("indexed token is an instance"),
            sentence,
            sentence_index: si,
            token_index: ti,
            lemma: token.lemma.as_deref().expect("instance has lemma"),
            pos: token.pos.expect("instance has pos"),
        }
    }

    pub fn instance(&self, id: &str) -> Option<Instance<'_>> {
        self.instance_index
            .get(id)
            .map(|&(si, ti)| self.make_instance(si, ti))
    }

    /// Instances in document order.
    pub fn instances(&self) -> impl Iterator<Item = Instance<'_>> + '_ {
        self.sentences.iter().enumerate().flat_map(move |(si, s)| {
            s.tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.instance_id.is_some())
                .map(move |(ti, _)| self.make_instance(si, ti))
        })
    }

    /// Splits at a sentence boundary, keeping the first `n` sentences on the left.
    pub fn split_sentences(&self, n: usize, left: &str, right: &str) -> (WsdCorpus, WsdCorpus) {
        let n = n.min(self.sentences.len());
        let a = WsdCorpus::new(left, self.sentences[..n].to_vec()).expect("subset of a valid corpus");
        let b = WsdCorpus::new(right, self.sentences[n..].to_vec()).expect("subset of a valid corpus");
        (a, b)
    }

    /// Writes the corpus in the framework XML schema.
    pub fn write_xml<W: Write>(&self, mut out: W) -> io::Result<()> {
        use quick_xml::escape::escape;
        writeln!(out, "<?xml version=\"1.0\" encoding=\"UTF-8\" ?>")?;
        writeln!(out, "<corpus lang=\"en\" source=\"{}\">", escape(self.name.as_str()))?;
        writeln!(out, "<text id=\"d000\">")?;
        for sentence in &self.sentences {
            writeln!(out, "<sentence id=\"{}\">", escape(sentence.sentence_id.as_str()))?;
            for t in &sentence.tokens {
                let mut attrs = String::new();
                let element = if let Some(id) = &t.instance_id {
                    attrs.push_str(&format!(" id=\"{}\"", escape(id.as_str())));
                    "instance"
                } else {
                    "wf"
                };
                if let Some(lemma) = &t.lemma {
                    attrs.push_str(&format!(" lemma=\"{}\"", escape(lemma.as_str())));
                }
                let tag = t.tag.clone().or_else(|| t.pos.map(|p| p.tag().to_string()));
                if let Some(tag) = tag {
                    attrs.push_str(&format!(" pos=\"{}\"", escape(tag.as_str())));
                }
                writeln!(out, "<{element}{attrs}>{}</{element}>", escape(t.surface.as_str()))?;
            }
            writeln!(out, "</sentence>")?;
        }
        writeln!(out, "</text>")?;
        writeln!(out, "</corpus>")
    }

    pub fn export_xml(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
        self.write_xml(&mut out).and_then(|_| out.flush()).map_err(io_err)
    }
}

fn attribute(
    reader: &Reader<&[u8]>,
    start: &BytesStart<'_>,
    name: &str,
) -> Result<Option<String>, CorpusError> {
    for attr in start.attributes() {
        let attr = attr.map_err(|e| CorpusError::XmlSyntaxError {
            position: reader.buffer_position(),
            message: e.to_string(),
        })?;
        if attr.key.as_ref() == name.as_bytes() {
            let value = attr
                .decode_and_unescape_value(reader.decoder())
                .map_err(|e| CorpusError::XmlSyntaxError {
                    position: reader.buffer_position(),
                    message: e.to_string(),
                })?;
            return Ok(Some(value.into_owned()));
        }
    }
    Ok(None)
}

struct OpenToken {
    element: String,
    token: CorpusToken,
}

fn open_token(reader: &Reader<&[u8]>, start: &BytesStart<'_>) -> Result<OpenToken, CorpusError> {
    let element = String::from_utf8_lossy(start.name().as_ref()).into_owned();
    let is_instance = element == "instance";
    let instance_id = attribute(reader, start, "id")?;
    let lemma = attribute(reader, start, "lemma")?;
    let tag = attribute(reader, start, "pos")?;
    if is_instance {
        let id = instance_id.as_ref().ok_or(CorpusError::MissingAttribute {
            element: element.clone(),
            attribute: "id",
        })?;
        if lemma.is_none() {
            return Err(CorpusError::MissingAttribute {
                element: element.clone(),
                attribute: "lemma",
            });
        }
        let raw = tag.as_ref().ok_or(CorpusError::MissingAttribute {
            element: element.clone(),
            attribute: "pos",
        })?;
        if PartOfSpeech::from_tag(raw).is_none() {
            return Err(CorpusError::UnsupportedPos {
                id: id.clone(),
                pos: raw.clone(),
            });
        }
    }
    let pos = tag.as_deref().and_then(PartOfSpeech::from_tag);
    Ok(OpenToken {
        element,
        token: CorpusToken {
            surface: String::new(),
            lemma,
            tag,
            pos,
            instance_id: if is_instance { instance_id } else { None },
        },
    })
}

/// Parses framework XML from memory. `default_name` is used when the root
/// element carries no `source` attribute.
pub fn parse_framework_xml(xml: &str, default_name: &str) -> Result<WsdCorpus, CorpusError> {
    let mut reader = Reader::from_str(xml);
    let syntax = |reader: &Reader<&[u8]>, e: quick_xml::Error| CorpusError::XmlSyntaxError {
        position: reader.error_position(),
        message: e.to_string(),
    };

    let mut name: Option<String> = None;
    let mut sentences: Vec<WsdSentence> = Vec::new();
    let mut current: Option<WsdSentence> = None;
    let mut open: Option<OpenToken> = None;
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    loop {
        let event = reader.read_event().map_err(|e| syntax(&reader, e))?;
        match event {
            Event::Start(start) => {
                let local = start.name();
                match local.as_ref() {
                    b"corpus" => name = attribute(&reader, &start, "source")?,
                    b"sentence" => {
                        let id = attribute(&reader, &start, "id")?
                            .unwrap_or_else(|| format!("s{}", sentences.len()));
                        current = Some(WsdSentence {
                            sentence_id: id,
                            tokens: Vec::new(),
                        });
                    }
                    b"wf" | b"instance" => open = Some(open_token(&reader, &start)?),
                    _ => {}
                }
            }
            Event::Empty(start) => {
                if matches!(start.name().as_ref(), b"wf" | b"instance") {
                    let tok = open_token(&reader, &start)?;
                    if let Some(s) = current.as_mut() {
                        push_token(s, tok.token, &mut seen_ids)?;
                    }
                }
            }
            Event::Text(text) => {
                if let Some(tok) = open.as_mut() {
                    let decoded = text.decode().map_err(|e| CorpusError::XmlSyntaxError {
                        position: reader.buffer_position(),
                        message: e.to_string(),
                    })?;
                    let unescaped = quick_xml::escape::unescape(&decoded).map_err(|e| {
                        CorpusError::XmlSyntaxError {
                            position: reader.buffer_position(),
                            message: e.to_string(),
                        }
                    })?;
                    tok.token.surface.push_str(&unescaped);
                }
            }
            Event::GeneralRef(reference) => {
                if let Some(tok) = open.as_mut() {
                    let name = reference.decode().map_err(|e| CorpusError::XmlSyntaxError {
                        position: reader.buffer_position(),
                        message: e.to_string(),
                    })?;
                    let entity = format!("&{name};");
                    let resolved = quick_xml::escape::unescape(&entity).map_err(|e| {
                        CorpusError::XmlSyntaxError {
                            position: reader.buffer_position(),
                            message: e.to_string(),
                        }
                    })?;
                    tok.token.surface.push_str(&resolved);
                }
            }
            Event::End(end) => match end.name().as_ref() {
                b"wf" | b"instance" => {
                    if let (Some(tok), Some(s)) = (open.take(), current.as_mut()) {
                        debug_assert!(tok.element == "wf" || tok.element == "instance");
                        push_token(s, tok.token, &mut seen_ids)?;
                    }
                }
                b"sentence" => {
                    if let Some(s) = current.take() {
                        if !s.tokens.is_empty() {
                            sentences.push(s);
                        }
                    }
                }
                _ => {}
            },
            Event::Eof => break,
            _ => {}
        }
    }

    let name = name.unwrap_or_else(|| default_name.to_string());
    WsdCorpus::new(name, sentences)
}

fn push_token(
    sentence: &mut WsdSentence,
    token: CorpusToken,
    seen: &mut BTreeSet<String>,
) -> Result<(), CorpusError> {
    if let Some(id) = &token.instance_id {
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateInstanceId(id.clone()));
        }
    }
    sentence.tokens.push(token);
    Ok(())
}

pub fn load_framework_xml(path: &Path) -> Result<WsdCorpus, CorpusError> {
    let xml = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let stem = path
        .file_name()
        .and_then(|n| n.to_str())
        .map(|n| n.split('.').next().unwrap_or(n))
        .unwrap_or("corpus");
    parse_framework_xml(&xml, stem)
}

/// Gold answers: instance id to its (non-empty) set of sense keys.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldKeys(pub BTreeMap<String, BTreeSet<String>>);

impl GoldKeys {
    pub fn get(&self, id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Total number of gold keys summed over instances.
    pub fn key_count(&self) -> usize {
        self.0.values().map(BTreeSet::len).sum()
    }

    pub fn write<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (id, keys) in &self.0 {
            write!(out, "{id}")?;
            for k in keys {
                write!(out, " {k}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn export(&self, path: &Path) -> Result<(), CorpusError> {
        let io_err = |e| CorpusError::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
        self.write(&mut out).and_then(|_| out.flush()).map_err(io_err)
    }
}

/// Parses key-file lines `instance_id key1 [key2 ...]`.
pub fn read_gold_keys<R: BufRead>(reader: R) -> Result<GoldKeys, CorpusError> {
    let mut map = BTreeMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| CorpusError::MalformedLine {
            line: i + 1,
            content: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id = fields.next().expect("non-blank line has a field").to_string();
        let keys: BTreeSet<String> = fields.map(str::to_string).collect();
        if keys.is_empty() {
            return Err(CorpusError::EmptyKeySet { line: i + 1, id });
        }
        if keys.iter().any(|k| !k.contains('%')) {
            return Err(CorpusError::MalformedLine {
                line: i + 1,
                content: line,
            });
        }
        map.entry(id).or_insert_with(BTreeSet::new).extend(keys);
    }
    Ok(GoldKeys(map))
}

pub fn load_gold_keys(path: &Path) -> Result<GoldKeys, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_gold_keys(BufReader::new(file))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub noun: usize,
    pub verb: usize,
    pub adj: usize,
    pub adv: usize,
    pub total: usize,
    pub positive_pairs: usize,
    pub negative_pairs: usize,
    /// Instances with no gold key among the lexicon's candidates; they are
    /// excluded from the pair counts.
    pub unresolvable: usize,
}

/// Counts instances per part of speech and the sentence-gloss pair class
/// distribution: each resolvable instance contributes `|gold ∩ candidates|`
/// positives and `|candidates| - |gold ∩ candidates|` negatives.
pub fn compute_stats(
    corpus: &WsdCorpus,
    gold: &GoldKeys,
    lexicon: &GlossLexicon,
) -> Result<CorpusStats, CorpusError> {
    let mut stats = CorpusStats::default();
    for inst in corpus.instances() {
        let keys = gold
            .get(inst.id)
            .ok_or_else(|| CorpusError::MissingGold(inst.id.to_string()))?;
        match inst.pos {
            PartOfSpeech::Noun => stats.noun += 1,
            PartOfSpeech::Verb => stats.verb += 1,
            PartOfSpeech::Adjective => stats.adj += 1,
            PartOfSpeech::Adverb => stats.adv += 1,
        }
        stats.total += 1;

        let candidates = lexicon.candidate_senses(inst.lemma, inst.pos);
        let hits = candidates
            .iter()
            .filter(|c| keys.contains(&c.sense_key))
            .count();
        if hits == 0 {
            stats.unresolvable += 1;
            continue;
        }
        stats.positive_pairs += hits;
        stats.negative_pairs += candidates.len() - hits;
    }
    Ok(stats)
}

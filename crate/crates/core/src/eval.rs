//! Prediction, framework-style scoring, the most-frequent-sense baseline and
//! report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldKeys, Instance, WsdCorpus};
use crate::examples::{build_candidates, BuilderConfig};
use crate::lexicon::GlossLexicon;
use crate::model::{score_candidates, LmgcModel, Mode, ModelError};
use crate::tokenizer::{TokenSequence, Vocabulary};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("vocabulary has {vocab} tokens but the model expects {model}")]
    VocabMismatch { vocab: usize, model: usize },
    #[error("prediction for unknown instance {0}")]
    UnknownInstanceId(String),
    #[error("more than one prediction for instance {0}")]
    DuplicatePrediction(String),
    #[error("no gold keys for instance {0}")]
    MissingGold(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: expected `instance_id sense_key`, found {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Prediction {
    pub instance_id: String,
    pub sense_key: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predictions {
    /// Sorted by instance id.
    pub predictions: Vec<Prediction>,
    /// Instances left unanswered, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl Predictions {
    fn from_results(results: Vec<(String, Result<String, String>)>) -> Self {
        let mut out = Predictions::default();
        for (id, r) in results {
            match r {
                Ok(key) => out.predictions.push(Prediction {
                    instance_id: id,
                    sense_key: key,
                }),
                Err(reason) => out.skipped.push((id, reason)),
            }
        }
        out.predictions.sort();
        out.skipped.sort();
        out
    }
}

/// First index of the maximum; earlier (lower-ranked) candidates win ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn check_vocab(model: &LmgcModel, vocab: &Vocabulary) -> Result<(), EvalError> {
    if vocab.len() != model.encoder.config.vocab_size {
        return Err(EvalError::VocabMismatch {
            vocab: vocab.len(),
            model: model.encoder.config.vocab_size,
        });
    }
    Ok(())
}

fn predict_with<F>(
    model: &LmgcModel,
    corpus: &WsdCorpus,
    lexicon: &GlossLexicon,
    vocab: &Vocabulary,
    config: &BuilderConfig,
    choose: F,
) -> Result<Predictions, EvalError>
where
    F: Fn(&[&TokenSequence]) -> Result<usize, ModelError> + Sync,
{
    check_vocab(model, vocab)?;
    let instances: Vec<Instance<'_>> = corpus.instances().collect();
    let results = instances
        .par_iter()
        .map(|inst| {
            let (pairs, senses) = match build_candidates(inst, lexicon, vocab, config) {
                Ok(x) => x,
                Err(e) => return Ok((inst.id.to_string(), Err(e.to_string()))),
            };
            let seqs: Vec<&TokenSequence> = pairs.iter().map(|p| &p.sequence).collect();
            let best = choose(&seqs)?;
            Ok((inst.id.to_string(), Ok(senses[best].sense_key.clone())))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(Predictions::from_results(results))
}

/// Per instance, the candidate with the highest softmax probability over the
/// stacked candidates; ties go to the lower sense rank. Instances without
/// candidates are skipped and reported.
pub fn predict(
    model: &LmgcModel,
    corpus: &WsdCorpus,
    lexicon: &GlossLexicon,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<Predictions, EvalError> {
    predict_with(model, corpus, lexicon, vocab, config, |seqs| {
        let scored = score_candidates(model, seqs, &mut Mode::Eval)?;
        Ok(argmax(&scored.probabilities))
    })
}

/// Scores every candidate pair on its own and takes the argmax of the
/// positive-class logits.
pub fn predict_sequential(
    model: &LmgcModel,
    corpus: &WsdCorpus,
    lexicon: &GlossLexicon,
    vocab: &Vocabulary,
    config: &BuilderConfig,
) -> Result<Predictions, EvalError> {
    predict_with(model, corpus, lexicon, vocab, config, |seqs| {
        let mut logits = Vec::with_capacity(seqs.len());
        for seq in seqs {
            let out = model.encoder.forward(seq, &mut Mode::Eval)?;
            logits.push(model.head.logits(out.aggregate())[1]);
        }
        Ok(argmax(&logits))
    })
}

/// Rank-1 sense of every instance; a pure function of the lexicon.
pub fn mfs_baseline(corpus: &WsdCorpus, lexicon: &GlossLexicon) -> Predictions {
    let results = corpus
        .instances()
        .map(|inst| {
            let r = lexicon
                .candidate_senses(inst.lemma, inst.pos)
                .first()
                .map(|s| s.sense_key.clone())
                .ok_or_else(|| format!("instance {} has no candidate senses", inst.id));
            (inst.id.to_string(), r)
        })
        .collect();
    Predictions::from_results(results)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub attempted: usize,
    pub correct: usize,
    pub total: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Score {
    pub fn from_counts(attempted: usize, correct: usize, total: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, attempted);
        let recall = ratio(correct, total);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else if attempted == total {
            // P == R exactly; avoid rounding in the harmonic mean
            precision
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Score {
            attempted,
            correct,
            total,
            precision,
            recall,
            f1,
        }
    }

    fn merge(self, other: Score) -> Score {
        Score::from_counts(
            self.attempted + other.attempted,
            self.correct + other.correct,
            self.total + other.total,
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub overall: Score,
    pub by_pos: BTreeMap<String, Score>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Micro-average over all datasets ("All").
    pub overall: Score,
    pub by_pos: BTreeMap<String, Score>,
    pub datasets: Vec<DatasetScore>,
}

/// Framework scorer semantics: an answer is correct if it is any of the
/// instance's gold keys; precision is over attempted instances, recall over
/// all instances of the corpus.
pub fn score(predictions: &[Prediction], gold: &GoldKeys, corpus: &WsdCorpus) -> Result<DatasetScore, EvalError> {
    let mut answers: BTreeMap<&str, &str> = BTreeMap::new();
    for p in predictions {
        if corpus.instance(&p.instance_id).is_none() {
            return Err(EvalError::UnknownInstanceId(p.instance_id.clone()));
        }
        if answers.insert(&p.instance_id, &p.sense_key).is_some() {
            return Err(EvalError::DuplicatePrediction(p.instance_id.clone()));
        }
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for inst in corpus.instances() {
        let keys = gold
            .get(inst.id)
            .ok_or_else(|| EvalError::MissingGold(inst.id.to_string()))?;
        let c = counts.entry(inst.pos.tag().to_string()).or_default();
        c.2 += 1;
        if let Some(answer) = answers.get(inst.id) {
            c.0 += 1;
            if keys.contains(*answer) {
                c.1 += 1;
            }
        }
    }
    let by_pos: BTreeMap<String, Score> = counts
        .into_iter()
        .map(|(pos, (a, c, t))| (pos, Score::from_counts(a, c, t)))
        .collect();
    let overall = by_pos.values().fold(Score::default(), |acc, s| acc.merge(*s));
    Ok(DatasetScore {
        name: corpus.name.clone(),
        overall,
        by_pos,
    })
}

/// Pools instances of all datasets into the "All" figures.
pub fn combine(datasets: Vec<DatasetScore>) -> ScoreReport {
    let mut overall = Score::default();
    let mut by_pos: BTreeMap<String, Score> = BTreeMap::new();
    for d in &datasets {
        overall = overall.merge(d.overall);
        for (pos, s) in &d.by_pos {
            let e = by_pos.entry(pos.clone()).or_default();
            *e = e.merge(*s);
        }
    }
    ScoreReport {
        overall,
        by_pos,
        datasets,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Markdown,
}

/// Column order of the results table.
pub const TABLE_COLUMNS: [&str; 6] = ["SE7", "SE2", "SE3", "SE13", "SE15", "All"];

/// Maps framework dataset names (`semeval2007`, `senseval2`, ...) to table
/// columns.
pub fn table_column(dataset: &str) -> Option<&'static str> {
    let d = dataset.to_ascii_lowercase();
    match d.as_str() {
        "semeval2007" | "semeval-2007" | "se7" | "se07" => Some("SE7"),
        "senseval2" | "senseval-2" | "se2" | "se02" => Some("SE2"),
        "senseval3" | "senseval-3" | "se3" | "se03" => Some("SE3"),
        "semeval2013" | "semeval-2013" | "se13" => Some("SE13"),
        "semeval2015" | "semeval-2015" | "se15" => Some("SE15"),
        _ => None,
    }
}

pub fn emit_report(report: &ScoreReport, format: ReportFormat, system: &str) -> String {
    match format {
        ReportFormat::Json => serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        ReportFormat::Markdown => {
            let column = |name: &str| -> Score {
                if name == "All" {
                    return report.overall;
                }
                report
                    .datasets
                    .iter()
                    .filter(|d| table_column(&d.name) == Some(name))
                    .fold(Score::default(), |acc, d| acc.merge(d.overall))
            };
            let mut out = String::new();
            let _ = writeln!(out, "| System | {} |", TABLE_COLUMNS.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(TABLE_COLUMNS.len()));
            let cells: Vec<String> = TABLE_COLUMNS.iter().map(|c| format!("{:.1}", 100.0 * column(c).f1)).collect();
            let _ = writeln!(out, "| {system} | {} |", cells.join(" | "));
            out
        }
    }
}

pub fn write_predictions<W: Write>(predictions: &[Prediction], mut out: W) -> io::Result<()> {
    for p in predictions {
        writeln!(out, "{} {}", p.instance_id, p.sense_key)?;
    }
    Ok(())
}

pub fn export_predictions(predictions: &[Prediction], path: &Path) -> Result<(), EvalError> {
    let io_err = |e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut out = io::BufWriter::new(File::create(path).map_err(io_err)?);
    write_predictions(predictions, &mut out).and_then(|_| out.flush()).map_err(io_err)
}

/// Reads `instance_id sense_key` lines; only the first key of a line is used.
pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<Prediction>, EvalError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::MalformedLine {
            line: i + 1,
            content: e.to_string(),
        })?;
        let mut parts = line.split_whitespace();
        let (Some(id), Some(key)) = (parts.next(), parts.next()) else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(EvalError::MalformedLine {
                line: i + 1,
                content: line,
            });
        };
        if !seen.insert(id.to_string()) {
            return Err(EvalError::DuplicatePrediction(id.to_string()));
        }
        out.push(Prediction {
            instance_id: id.into(),
            sense_key: key.into(),
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let file = File::open(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_predictions(BufReader::new(file))
}

//! Lexicon import against excerpts of the real WordNet 3.0 files
//! (`tests/data/wordnet`, distributed under the WordNet license).

use std::path::PathBuf;
use std::process::Command;

use gloss_wsd::lexicon::{import_tsv_lexicon, import_wordnet_dir, PartOfSpeech};

fn dict() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/wordnet")
}

#[test]
fn long_first_adjective_sense() {
    let lex = import_wordnet_dir(&dict()).unwrap();
    let e = lex.get("long%3:00:02::").unwrap();
    assert_eq!(e.lemma, "long");
    assert_eq!(e.pos, PartOfSpeech::Adjective);
    assert_eq!(e.sense_rank, 1);
    assert_eq!(
        e.gloss,
        "primarily temporal sense; being or indicating a relatively great or greater than average duration or passage of time or a duration as specified"
    );
}

#[test]
fn cell_senses_in_rank_order() {
    let lex = import_wordnet_dir(&dict()).unwrap();
    let senses = lex.candidate_senses("cell", PartOfSpeech::Noun);
    let ranks: Vec<u32> = senses.iter().map(|s| s.sense_rank).collect();
    assert_eq!(ranks, (1..=7).collect::<Vec<_>>());
    assert_eq!(senses[0].sense_key, "cell%1:06:03::");
    assert_eq!(senses[0].gloss, "any small compartment");
    assert!(lex.candidate_senses("cell", PartOfSpeech::Verb).is_empty());
}

#[test]
fn every_index_line_becomes_an_entry() {
    let lex = import_wordnet_dir(&dict()).unwrap();
    let lines = std::fs::read_to_string(dict().join("index.sense")).unwrap();
    assert_eq!(lex.len(), lines.lines().count());
    // satellite adjectives fold into adjectives
    let long_adj = lex.candidate_senses("long", PartOfSpeech::Adjective);
    assert!(long_adj.iter().any(|s| s.sense_key.starts_with("long%5:")));
    assert!(long_adj.windows(2).all(|w| w[0].sense_rank < w[1].sense_rank));
}

#[test]
fn import_lexicon_command_round_trips() {
    let out = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_gloss-wsd"))
        .args(["import-lexicon", "--wordnet"])
        .arg(dict())
        .arg("--out-dir")
        .arg(out.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&status.stdout).unwrap();
    let tsv = import_tsv_lexicon(&out.path().join("lexicon.tsv")).unwrap();
    let direct = import_wordnet_dir(&dict()).unwrap();
    assert_eq!(tsv, direct);
    assert_eq!(summary["senses"], direct.len());
    assert!(out.path().join("manifest.json").is_file());
}

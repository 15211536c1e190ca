use std::fs;
use std::path::Path;

use gloss_wsd::fixtures::{generate, SyntheticSpec};

use crate::{gloss_wsd, p, timed, Outcome};

struct Inputs {
    xml: [String; 3],
    keys: [String; 3],
    lexicon: String,
}

fn write_inputs(dir: &Path) -> Result<Inputs, String> {
    let mut xml = Vec::new();
    let mut keys = Vec::new();
    let mut lexicon = String::new();
    for (name, n) in [("train", 300), ("val", 60), ("test", 100)] {
        let data = generate(&SyntheticSpec {
            name: name.into(),
            n_sentences: n,
            n_lemmas: 8,
            vocab_size: 20,
            context_len: 3,
            gloss_len: 2,
            ..Default::default()
        })
        .map_err(|e| e.to_string())?;
        let x = dir.join(format!("{name}.data.xml"));
        let k = dir.join(format!("{name}.gold.key.txt"));
        let l = dir.join("lexicon.tsv");
        data.corpus.export_xml(&x).map_err(|e| e.to_string())?;
        data.gold.export(&k).map_err(|e| e.to_string())?;
        data.lexicon.export_tsv(&l).map_err(|e| e.to_string())?;
        xml.push(p(&x));
        keys.push(p(&k));
        lexicon = p(&l);
    }
    Ok(Inputs {
        xml: xml.try_into().expect("three datasets"),
        keys: keys.try_into().expect("three datasets"),
        lexicon,
    })
}

/// build-examples, train, predict, score into `out`.
fn pipeline(inputs: &Inputs, out: &Path, jobs: &str) -> Result<(), String> {
    let o = |s: &str| p(&out.join(s));
    let common = ["--seed", "7", "--jobs", jobs];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend(common);
        gloss_wsd(&all)
    };
    let [train_xml, val_xml, test_xml] = &inputs.xml;
    let [train_keys, val_keys, test_keys] = &inputs.keys;
    run(&[
        "build-examples", "--xml", train_xml, "--keys", train_keys, "--lexicon", &inputs.lexicon,
        "--vocab-xml", val_xml, "--vocab-xml", test_xml, "--out-dir", &o("train"),
    ])?;
    let vocab = o("train/vocab.json");
    run(&[
        "build-examples", "--xml", val_xml, "--keys", val_keys, "--lexicon", &inputs.lexicon,
        "--vocab", &vocab, "--out-dir", &o("val"),
    ])?;
    run(&[
        "train", "--mode", "lmgc-m", "--groups", &o("train/groups.jsonl"), "--val-groups", &o("val/groups.jsonl"),
        "--vocab", &vocab, "--hidden", "16", "--ffn", "32", "--epochs", "2", "--batch-size", "8", "--lr", "3e-3",
        "--out-dir", &o("run"),
    ])?;
    run(&[
        "predict", "--checkpoint", &o("run/best.ckpt"), "--xml", test_xml, "--lexicon", &inputs.lexicon,
        "--vocab", &vocab, "--out-dir", &o("predict"),
    ])?;
    run(&[
        "score", "--predictions", &o("predict/predictions.key"), "--keys", test_keys, "--xml", test_xml,
        "--out-dir", &o("score"),
    ])
}

const COMPARED: [&str; 7] = [
    "train/groups.jsonl",
    "train/vocab.json",
    "run/report.json",
    "run/best.ckpt",
    "predict/predictions.key",
    "score/report.json",
    "score/report.md",
];

pub fn determinism() -> Outcome {
    timed(600, || {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let inputs = write_inputs(tmp.path())?;
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        pipeline(&inputs, &a, "1")?;
        pipeline(&inputs, &b, "3")?;
        let mut differing = Vec::new();
        for file in COMPARED {
            let read = |dir: &Path| fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"));
            if read(&a)? != read(&b)? {
                differing.push(file);
            }
        }
        Ok(if differing.is_empty() {
            Outcome::new(true, "two seeded runs (1 and 3 threads) byte-identical in 7 artifacts")
        } else {
            Outcome::fail(format!("differing artifacts: {}", differing.join(", ")))
        })
    })
}

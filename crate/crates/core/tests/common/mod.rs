#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gloss_wsd::fixtures::{generate, SyntheticData, SyntheticSpec};

/// Files of one synthetic dataset in the framework formats.
pub struct DatasetFiles {
    pub xml: PathBuf,
    pub keys: PathBuf,
    pub lexicon: PathBuf,
    pub data: SyntheticData,
}

pub fn write_dataset(dir: &Path, spec: &SyntheticSpec) -> DatasetFiles {
    let data = generate(spec).unwrap();
    let xml = dir.join(format!("{}.data.xml", spec.name));
    let keys = dir.join(format!("{}.gold.key.txt", spec.name));
    let lexicon = dir.join("lexicon.tsv");
    data.corpus.export_xml(&xml).unwrap();
    data.gold.export(&keys).unwrap();
    data.lexicon.export_tsv(&lexicon).unwrap();
    DatasetFiles {
        xml,
        keys,
        lexicon,
        data,
    }
}

pub fn small_spec(name: &str, n_sentences: usize) -> SyntheticSpec {
    SyntheticSpec {
        name: name.into(),
        n_sentences,
        n_lemmas: 8,
        vocab_size: 20,
        context_len: 3,
        gloss_len: 2,
        ..Default::default()
    }
}

pub fn gloss_wsd<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_gloss-wsd")).args(args).output().unwrap()
}

/// Runs the binary and insists on success; returns stdout.
pub fn ok<I, S>(args: I) -> String
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    let out = gloss_wsd(args);
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

//! Criteria on the real corpora. `WSD_FRAMEWORK_DIR` points at the unpacked
//! evaluation framework (with `Training_Corpora/` and `Evaluation_Datasets/`)
//! and `WORDNET_DIR` at a WordNet 3.0 `dict` directory.

use std::path::PathBuf;

use crate::{gloss_wsd, p, read_json, timed, Outcome};

pub const TEST_SETS: [&str; 5] = ["senseval2", "senseval3", "semeval2007", "semeval2013", "semeval2015"];

/// Published statistics: noun, verb, adj, adv, total, positive and negative
/// pairs, as printed.
const TABLE: [(&str, [&str; 7]); 6] = [
    ("semcor", ["87k", "88.3k", "31.7k", "18.9k", "226k", "226.5k", "1.79m"]),
    ("senseval2", ["1k", "517", "445", "254", "2.3k", "2.4k", "14.2k"]),
    ("senseval3", ["900", "588", "350", "12", "1.8k", "1.8k", "15.3k"]),
    ("semeval2007", ["159", "296", "0", "0", "455", "459", "4.5k"]),
    ("semeval2013", ["1.6k", "0", "0", "0", "1.6k", "1.6k", "9.7k"]),
    ("semeval2015", ["531", "251", "160", "80", "1k", "1.2k", "6.5k"]),
];

const FIELDS: [&str; 7] = ["noun", "verb", "adj", "adv", "total", "positive_pairs", "negative_pairs"];

struct Data {
    framework: PathBuf,
    wordnet: PathBuf,
}

fn data() -> Result<Data, String> {
    let var = |name: &str| {
        std::env::var_os(name)
            .map(PathBuf::from)
            .filter(|p| p.is_dir())
            .ok_or_else(|| format!("{name} is unset or not a directory; real corpora unavailable"))
    };
    Ok(Data {
        framework: var("WSD_FRAMEWORK_DIR")?,
        wordnet: var("WORDNET_DIR")?,
    })
}

impl Data {
    /// XML and gold-key paths of a dataset.
    fn files(&self, name: &str) -> (PathBuf, PathBuf) {
        let dir = if name == "semcor" {
            self.framework.join("Training_Corpora/SemCor")
        } else {
            self.framework.join("Evaluation_Datasets").join(name)
        };
        (dir.join(format!("{name}.data.xml")), dir.join(format!("{name}.gold.key.txt")))
    }

    fn corpus_stats(&self, name: &str, out: &std::path::Path) -> Result<serde_json::Value, String> {
        let (xml, keys) = self.files(name);
        gloss_wsd(&[
            "corpus-stats",
            "--xml",
            &p(&xml),
            "--keys",
            &p(&keys),
            "--lexicon",
            &p(&self.wordnet),
            "--out-dir",
            &p(out),
        ])?;
        read_json(&out.join("stats.json"))
    }
}

/// Value and half rounding unit of a printed cell such as `226.5k`.
pub fn printed_cell(cell: &str) -> (f64, f64) {
    let (digits, scale) = match cell.chars().last() {
        Some('k') => (&cell[..cell.len() - 1], 1e3),
        Some('m') => (&cell[..cell.len() - 1], 1e6),
        _ => (cell, 1.0),
    };
    let decimals = digits.split_once('.').map_or(0, |(_, d)| d.len());
    let value: f64 = digits.parse().expect("table cell is numeric");
    (value * scale, 0.5 * scale / 10f64.powi(decimals as i32))
}

pub fn dataset_table() -> Outcome {
    timed(120, || {
        let data = data()?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut mismatches = Vec::new();
        for (name, cells) in TABLE {
            let stats = data.corpus_stats(name, &tmp.path().join(name))?;
            for (field, cell) in FIELDS.iter().zip(cells) {
                let got = stats["stats"][field].as_f64().ok_or(format!("{name}: no {field}"))?;
                let (want, half) = printed_cell(cell);
                if (got - want).abs() > half + 1e-9 {
                    mismatches.push(format!("{name}.{field} {got} vs {cell}"));
                }
            }
        }
        Ok(if mismatches.is_empty() {
            Outcome::new(true, "all 42 cells within printed rounding")
        } else {
            Outcome::fail(format!("mismatched cells: {}", mismatches.join(", ")))
        })
    })
}

pub fn truncation_fraction() -> Outcome {
    timed(300, || {
        let data = data()?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let stats = data.corpus_stats("semcor", tmp.path())?;
        let fraction = stats["fraction_fitting"].as_f64().ok_or("no fraction_fitting")?;
        Ok(Outcome::new(
            fraction >= 0.99,
            format!("{:.4} of SemCor pairs fit (need >= 0.99)", fraction),
        ))
    })
}

pub fn mfs_baseline() -> Outcome {
    timed(60, || {
        let data = data()?;
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut args = vec!["mfs".to_string()];
        for name in TEST_SETS {
            let (xml, keys) = data.files(name);
            args.extend(["--xml".into(), p(&xml), "--keys".into(), p(&keys)]);
        }
        args.extend(["--lexicon".into(), p(&data.wordnet), "--out-dir".into(), p(tmp.path())]);
        gloss_wsd(&args)?;
        let report = read_json(&tmp.path().join("report.json"))?;
        let f1 = 100.0 * report["overall"]["f1"].as_f64().ok_or("no overall F1")?;
        Ok(Outcome::new(
            (f1 - 64.8).abs() <= 0.5,
            format!("All-F1 {f1:.2} (need 64.8 +- 0.5)"),
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::printed_cell;

    #[test]
    fn printed_cells_parse_with_their_precision() {
        assert_eq!(printed_cell("455"), (455.0, 0.5));
        assert_eq!(printed_cell("226.5k"), (226_500.0, 50.0));
        assert_eq!(printed_cell("87k"), (87_000.0, 500.0));
        let (v, h) = printed_cell("1.79m");
        assert!((v - 1_790_000.0).abs() < 1e-6 && (h - 5_000.0).abs() < 1e-6);
    }
}

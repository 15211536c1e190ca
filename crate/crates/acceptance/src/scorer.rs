//! Randomized fixtures scored by the library and by a line-by-line scorer
//! written against the plain-text key formats.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use gloss_wsd::corpus::{parse_framework_xml, read_gold_keys};
use gloss_wsd::eval::{combine, read_predictions, score, Score};
use gloss_wsd::seed;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::Outcome;

const TAGS: [&str; 4] = ["NOUN", "VERB", "ADJ", "ADV"];

struct Dataset {
    name: String,
    xml: String,
    gold: String,
    predictions: String,
}

fn random_dataset<R: Rng>(rng: &mut R, name: &str) -> Dataset {
    let coverage: f64 = match rng.random_range(0..4) {
        0 => 1.0,
        1 => 0.0,
        _ => rng.random(),
    };
    let mut xml = format!("<corpus lang=\"en\" source=\"{name}\"><text id=\"{name}.d0\">");
    let (mut gold, mut predictions) = (String::new(), String::new());
    let n_sentences = rng.random_range(1..=6);
    for s in 0..n_sentences {
        write!(xml, "<sentence id=\"{name}.d0.s{s}\"><wf lemma=\"the\" pos=\"DET\">the</wf>").unwrap();
        for t in 0..rng.random_range(0..=6) {
            let id = format!("{name}.d0.s{s}.t{t}");
            let lemma = format!("w{}", rng.random_range(0..5));
            let tag = TAGS.choose(rng).unwrap();
            write!(xml, "<instance id=\"{id}\" lemma=\"{lemma}\" pos=\"{tag}\">{lemma}</instance>").unwrap();
            let pool: Vec<String> = (0..4).map(|k| format!("{lemma}%1:00:0{k}::")).collect();
            let n_gold = rng.random_range(1..=3);
            let keys: Vec<&String> = pool.choose_multiple(rng, n_gold).collect();
            writeln!(gold, "{id} {}", keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(" ")).unwrap();
            if rng.random::<f64>() < coverage {
                writeln!(predictions, "{id} {}", pool.choose(rng).unwrap()).unwrap();
            }
        }
        xml.push_str("</sentence>");
    }
    xml.push_str("</text></corpus>");
    Dataset {
        name: name.to_string(),
        xml,
        gold,
        predictions,
    }
}

/// attempted, correct, total
type Counts = (usize, usize, usize);

/// For every gold line: attempted if a prediction line names the instance,
/// correct if its key is among the gold keys.
fn brute_force(gold: &str, predictions: &str) -> Counts {
    let mut answers = BTreeMap::new();
    for line in predictions.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        answers.insert(f[0], f[1]);
    }
    let (mut attempted, mut correct, mut total) = (0, 0, 0);
    for line in gold.lines() {
        let f: Vec<&str> = line.split_whitespace().collect();
        total += 1;
        if let Some(answer) = answers.get(f[0]) {
            attempted += 1;
            if f[1..].contains(answer) {
                correct += 1;
            }
        }
    }
    (attempted, correct, total)
}

fn ratios((a, c, t): Counts) -> [f64; 3] {
    let precision = if a == 0 { 0.0 } else { c as f64 / a as f64 };
    let recall = if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    [precision, recall, f1]
}

fn agrees(s: &Score, counts: Counts) -> bool {
    let expected = ratios(counts);
    (s.attempted, s.correct, s.total) == counts
        && [s.precision, s.recall, s.f1]
            .iter()
            .zip(expected)
            .all(|(x, y)| (x - y).abs() <= 1e-12)
}

fn check_fixture(datasets: &[Dataset]) -> Result<(), String> {
    let mut scored = Vec::new();
    let mut all = (0, 0, 0);
    let mut by_pos: BTreeMap<String, Counts> = BTreeMap::new();
    for d in datasets {
        let corpus = parse_framework_xml(&d.xml, &d.name).map_err(|e| e.to_string())?;
        let gold = read_gold_keys(d.gold.as_bytes()).map_err(|e| e.to_string())?;
        let preds = read_predictions(d.predictions.as_bytes()).map_err(|e| e.to_string())?;
        let s = score(&preds, &gold, &corpus).map_err(|e| e.to_string())?;
        let counts = brute_force(&d.gold, &d.predictions);
        if !agrees(&s.overall, counts) {
            return Err(format!("{}: {:?} vs brute force {counts:?}", d.name, s.overall));
        }
        all = (all.0 + counts.0, all.1 + counts.1, all.2 + counts.2);
        // per part of speech, from the tags written into the XML
        let tags: BTreeMap<&str, &str> = d
            .xml
            .split("<instance id=\"")
            .skip(1)
            .map(|rest| {
                let id = &rest[..rest.find('"').unwrap()];
                let tag_at = rest.find("pos=\"").unwrap() + 5;
                let tag = &rest[tag_at..tag_at + rest[tag_at..].find('"').unwrap()];
                (id, tag)
            })
            .collect();
        let ids: BTreeSet<&str> = tags.keys().copied().collect();
        for tag in TAGS {
            let keep = |text: &str| -> String {
                text.lines()
                    .filter(|l| {
                        let id = l.split_whitespace().next().unwrap();
                        ids.contains(id) && tags[id] == tag
                    })
                    .map(|l| format!("{l}\n"))
                    .collect()
            };
            let c = brute_force(&keep(&d.gold), &keep(&d.predictions));
            if c.2 > 0 {
                let e = by_pos.entry(tag.to_string()).or_default();
                *e = (e.0 + c.0, e.1 + c.1, e.2 + c.2);
            }
        }
        scored.push(s);
    }
    let report = combine(scored);
    if !agrees(&report.overall, all) {
        return Err(format!("All: {:?} vs brute force {all:?}", report.overall));
    }
    if report.by_pos.len() != by_pos.len() {
        return Err(format!("POS rows {:?} vs {:?}", report.by_pos.keys(), by_pos.keys()));
    }
    for (tag, counts) in &by_pos {
        if !report.by_pos.get(tag).is_some_and(|s| agrees(s, *counts)) {
            return Err(format!("{tag}: {:?} vs brute force {counts:?}", report.by_pos.get(tag)));
        }
    }
    Ok(())
}

pub fn oracle_equivalence() -> Outcome {
    let mut rng = seed::stream(0, &["acceptance".into(), "scorer".into()]);
    let (mut multi_gold, mut partial) = (0, 0);
    for i in 0..1000 {
        let n = rng.random_range(1..=3);
        let datasets: Vec<Dataset> = (0..n).map(|j| random_dataset(&mut rng, &format!("f{i}x{j}"))).collect();
        for d in &datasets {
            multi_gold += usize::from(d.gold.lines().any(|l| l.split_whitespace().count() > 2));
            partial += usize::from(d.predictions.lines().count() < d.gold.lines().count());
        }
        if let Err(e) = check_fixture(&datasets) {
            return Outcome::fail(format!("fixture {i}: {e}"));
        }
    }
    Outcome::new(
        multi_gold > 0 && partial > 0,
        format!("1000 fixtures agree exactly ({multi_gold} datasets with multi-gold, {partial} with partial coverage)"),
    )
}

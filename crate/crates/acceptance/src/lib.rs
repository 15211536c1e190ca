//! Acceptance criteria for `gloss-wsd`. Each criterion is a function that
//! returns an [`Outcome`]; the `acceptance` test target runs them all and
//! prints one PASS/FAIL line per criterion.

use std::path::Path;
use std::time::{Duration, Instant};

mod checks;
mod learning;
mod pipeline;
mod real_data;
mod scorer;

pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    pub fn fail(detail: impl Into<String>) -> Self {
        Outcome::new(false, detail)
    }

    /// Fails the outcome when `elapsed` exceeds `limit`.
    fn within(self, elapsed: Duration, limit: Duration) -> Self {
        let secs = elapsed.as_secs_f64();
        if elapsed > limit {
            Outcome::new(false, format!("{}; took {secs:.1}s, limit {}s", self.detail, limit.as_secs()))
        } else {
            Outcome::new(self.passed, format!("{}; {secs:.1}s", self.detail))
        }
    }
}

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub run: fn() -> Outcome,
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion {
            id: 1,
            name: "dataset statistics table",
            run: real_data::dataset_table,
        },
        Criterion {
            id: 2,
            name: "pairs fitting in 160 tokens",
            run: real_data::truncation_fraction,
        },
        Criterion {
            id: 3,
            name: "MFS baseline All-F1",
            run: real_data::mfs_baseline,
        },
        Criterion {
            id: 4,
            name: "scorer vs brute-force oracle",
            run: scorer::oracle_equivalence,
        },
        Criterion {
            id: 5,
            name: "focal loss reduces to cross-entropy",
            run: checks::focal_reduction,
        },
        Criterion {
            id: 6,
            name: "gradient check",
            run: checks::gradient_check,
        },
        Criterion {
            id: 7,
            name: "parallel vs sequential predictions",
            run: learning::parallel_sequential,
        },
        Criterion {
            id: 8,
            name: "learning on the synthetic fixture",
            run: learning::learning,
        },
        Criterion {
            id: 9,
            name: "head parameter accounting",
            run: checks::parameter_accounting,
        },
        Criterion {
            id: 10,
            name: "pipeline determinism",
            run: pipeline::determinism,
        },
    ]
}

/// Runs one `gloss-wsd` command in process with stdout suppressed.
fn gloss_wsd<S: AsRef<str>>(args: &[S]) -> Result<(), String> {
    let mut argv = vec!["gloss-wsd".to_string(), "--quiet".to_string()];
    argv.extend(args.iter().map(|a| a.as_ref().to_string()));
    match gloss_wsd::cli::run(&argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", argv[2..].join(" "))),
    }
}

fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn timed(limit_secs: u64, body: impl FnOnce() -> Result<Outcome, String>) -> Outcome {
    let start = Instant::now();
    let outcome = body().unwrap_or_else(Outcome::fail);
    outcome.within(start.elapsed(), Duration::from_secs(limit_secs))
}

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Cross-validation folds, serialised as `{"folds": [{"train": [..], "test": [..]}]}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub folds: Vec<Fold>,
}

/// Splits boards into `folds` disjoint test sets such that every category on
/// a fold's test boards also appears on one of its training boards.
///
/// Boards that are the only holder of some category never enter a test set.
/// The remaining boards are shuffled and dealt round-robin; `test_fraction`
/// (when given) caps each test set at `round(fraction · boards)`. Any test
/// board that would leave one of its categories uncovered is moved to the
/// training side of every fold.
pub fn make_cv_splits<R: Rng + ?Sized>(
    dataset: &Dataset,
    folds: usize,
    test_fraction: Option<f64>,
    rng: &mut R,
) -> Result<SplitConfig> {
    let n = dataset.boards.len();
    if folds == 0 {
        return Err(Error::Config("need at least one fold".into()));
    }
    if n < folds {
        return Err(Error::InfeasibleSplit(format!(
            "{n} boards cannot fill {folds} folds"
        )));
    }
    let cats: Vec<BTreeSet<usize>> = (0..n)
        .map(|b| dataset.instance_labels(b).into_iter().collect())
        .collect();

    let mut holders = vec![Vec::new(); dataset.categories.len()];
    for (b, cs) in cats.iter().enumerate() {
        for &c in cs {
            holders[c].push(b);
        }
    }
    let mut train_only: BTreeSet<usize> = holders
        .iter()
        .filter(|h| h.len() == 1)
        .map(|h| h[0])
        .collect();

    let mut free: Vec<usize> = (0..n).filter(|b| !train_only.contains(b)).collect();
    free.shuffle(rng);
    let per_fold = match test_fraction {
        Some(f) if !(f > 0.0 && f < 1.0) => {
            return Err(Error::Config(format!(
                "test fraction must be in (0, 1), got {f}"
            )));
        }
        Some(f) => Some(((f * n as f64).round() as usize).max(1)),
        None => None,
    };
    let mut tests: Vec<Vec<usize>> = vec![Vec::new(); folds];
    for (i, &b) in free.iter().enumerate() {
        let k = i % folds;
        if per_fold.is_none_or(|cap| tests[k].len() < cap) {
            tests[k].push(b);
        } else {
            train_only.insert(b);
        }
    }

    // coverage repair: drop offending boards from testing until stable
    loop {
        let mut moved = false;
        for test in tests.iter_mut() {
            let test_set: BTreeSet<usize> = test.iter().copied().collect();
            let covered: BTreeSet<usize> = (0..n)
                .filter(|b| !test_set.contains(b))
                .flat_map(|b| cats[b].iter().copied())
                .collect();
            if let Some(pos) = test.iter().position(|&b| !cats[b].is_subset(&covered)) {
                let b = test.remove(pos);
                train_only.insert(b);
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }

    if let Some(k) = tests.iter().position(Vec::is_empty) {
        return Err(Error::InfeasibleSplit(format!(
            "fold {k} has no test board left after enforcing category coverage"
        )));
    }

    let id = |b: usize| dataset.boards[b].board_id.clone();
    let out = SplitConfig {
        folds: tests
            .iter()
            .map(|test| {
                let mut test = test.clone();
                test.sort_unstable();
                let train = (0..n)
                    .filter(|b| test.binary_search(b).is_err())
                    .map(id)
                    .collect();
                Fold {
                    train,
                    test: test.into_iter().map(id).collect(),
                }
            })
            .collect(),
    };
    verify_coverage(dataset, &out)?;
    Ok(out)
}

/// Checks disjoint test sets and category coverage for every fold.
pub fn verify_coverage(dataset: &Dataset, split: &SplitConfig) -> Result<()> {
    let mut seen_test = BTreeSet::new();
    for (k, fold) in split.folds.iter().enumerate() {
        let train = dataset.board_indices(&fold.train)?;
        let test = dataset.board_indices(&fold.test)?;
        if let Some(b) = test.iter().find(|b| train.contains(b)) {
            return Err(Error::InfeasibleSplit(format!(
                "fold {k}: board {} is both train and test",
                dataset.boards[*b].board_id
            )));
        }
        for &b in &test {
            if !seen_test.insert(b) {
                return Err(Error::InfeasibleSplit(format!(
                    "board {} is in more than one test set",
                    dataset.boards[b].board_id
                )));
            }
        }
        let covered = dataset.categories_on(&train);
        let missing: Vec<&str> = dataset
            .categories_on(&test)
            .difference(&covered)
            .map(|&c| dataset.categories[c].as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::InfeasibleSplit(format!(
                "fold {k}: categories {missing:?} appear only in test"
            )));
        }
    }
    Ok(())
}

pub fn save_split(path: impl AsRef<Path>, split: &SplitConfig) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(split)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_split(path: impl AsRef<Path>) -> Result<SplitConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

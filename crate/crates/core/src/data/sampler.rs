use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::similarity::TripletBatch;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BatchMode {
    /// All samples from one randomly drawn board.
    #[default]
    Within,
    /// Samples pooled over every training board.
    Across,
}

/// A sampled N-way K-shot batch plus where each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledBatch {
    /// Raw (jittered) features; `board_ids` index into the dataset.
    pub batch: TripletBatch,
    /// `(board, instance)` of each row.
    pub members: Vec<(usize, usize)>,
    /// The first row of each category is treated as a labelled template.
    pub labeled: Vec<bool>,
}

/// Draws N-way K-shot batches from a fixed pool of boards.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    dataset: &'a Dataset,
    mode: BatchMode,
    n_way: usize,
    k_shot: usize,
    margin: f64,
    jitter: Vec<f64>,
    /// Per board: category → instance indices.
    per_board: Vec<(usize, BTreeMap<usize, Vec<usize>>)>,
    /// Category → (board, instance) over the whole pool.
    pooled: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl<'a> BatchSampler<'a> {
    /// `jitter_sigma` is relative to the per-dimension standard deviation of
    /// the pooled ground-truth features.
    pub fn new(
        dataset: &'a Dataset,
        boards: &[usize],
        mode: BatchMode,
        n_way: usize,
        k_shot: usize,
        jitter_sigma: f64,
        margin: f64,
    ) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Config("N and K must be at least 1".into()));
        }
        if !(jitter_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "jitter must be >= 0, got {jitter_sigma}"
            )));
        }
        let per_board: Vec<_> = boards
            .iter()
            .map(|&b| (b, dataset.instances_by_category(b)))
            .filter(|(_, m)| !m.is_empty())
            .collect();
        if per_board.is_empty() {
            return Err(Error::Config("no labelled instances to sample from".into()));
        }
        let mut pooled: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for (b, m) in &per_board {
            for (&c, insts) in m {
                pooled
                    .entry(c)
                    .or_default()
                    .extend(insts.iter().map(|&i| (*b, i)));
            }
        }

        let d = dataset.feature_dim;
        let mut jitter = vec![0.0; d];
        if jitter_sigma > 0.0 {
            let feats: Vec<&[f64]> = per_board
                .iter()
                .flat_map(|(b, _)| {
                    dataset.boards[*b]
                        .instances
                        .iter()
                        .map(|i| i.feature.as_slice())
                })
                .collect();
            let n = feats.len() as f64;
            for (k, j) in jitter.iter_mut().enumerate() {
                let mean = feats.iter().map(|f| f[k]).sum::<f64>() / n;
                let var = feats.iter().map(|f| (f[k] - mean).powi(2)).sum::<f64>() / n;
                *j = jitter_sigma * var.sqrt();
            }
        }

        Ok(Self {
            dataset,
            mode,
            n_way,
            k_shot,
            margin,
            jitter,
            per_board,
            pooled,
        })
    }

    pub fn mode(&self) -> BatchMode {
        self.mode
    }

    /// Number of distinct categories the sampler can ever produce.
    pub fn category_count(&self) -> usize {
        self.pooled.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SampledBatch {
        let members: Vec<(usize, usize)> = match self.mode {
            BatchMode::Within => {
                let (board, by_cat) = self.per_board.choose(rng).expect("nonempty pool");
                let cats: Vec<usize> = by_cat.keys().copied().collect();
                pick(rng, &cats, self.n_way)
                    .into_iter()
                    .flat_map(|c| pick(rng, &by_cat[&c], self.k_shot))
                    .map(|i| (*board, i))
                    .collect()
            }
            BatchMode::Across => {
                let cats: Vec<usize> = self.pooled.keys().copied().collect();
                pick(rng, &cats, self.n_way)
                    .into_iter()
                    .flat_map(|c| pick(rng, &self.pooled[&c], self.k_shot))
                    .collect()
            }
        };

        let d = self.dataset.feature_dim;
        let mut features = Matrix::zeros(members.len(), d);
        let mut categories = Vec::with_capacity(members.len());
        let mut labeled = Vec::with_capacity(members.len());
        let mut seen = std::collections::BTreeSet::new();
        for (row, &(b, i)) in members.iter().enumerate() {
            let inst = &self.dataset.boards[b].instances[i];
            let dst = features.row_mut(row);
            dst.copy_from_slice(&inst.feature);
            for (v, &s) in dst.iter_mut().zip(&self.jitter) {
                if s > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += s * z;
                }
            }
            let c = self
                .dataset
                .category_index(&inst.category)
                .expect("category indexed at construction");
            categories.push(c);
            labeled.push(seen.insert(c));
        }

        SampledBatch {
            batch: TripletBatch {
                features,
                categories,
                board_ids: members.iter().map(|m| m.0).collect(),
                margin: self.margin,
            },
            members,
            labeled,
        }
    }
}

/// `count` items: distinct when enough are available, otherwise all of them
/// topped up by draws with replacement.
fn pick<R: Rng + ?Sized, T: Copy>(rng: &mut R, items: &[T], count: usize) -> Vec<T> {
    if items.len() >= count {
        return items.choose_multiple(rng, count).copied().collect();
    }
    let mut out: Vec<T> = items.to_vec();
    out.shuffle(rng);
    while out.len() < count {
        out.push(*items.choose(rng).expect("nonempty"));
    }
    out
}

/// One batch drawn from every board in `dataset`.
pub fn sample_training_batch<R: Rng + ?Sized>(
    dataset: &Dataset,
    mode: BatchMode,
    n_way: usize,
    k_shot: usize,
    jitter_sigma: f64,
    rng: &mut R,
) -> Result<SampledBatch> {
    if dataset.boards.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let all: Vec<usize> = (0..dataset.boards.len()).collect();
    let sampler = BatchSampler::new(dataset, &all, mode, n_way, k_shot, jitter_sigma, 1.0)?;
    Ok(sampler.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{
        generate_synthetic_dataset, BBox, BoardRecord, ComponentInstance, SyntheticConfig,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_board(cats: &[&str]) -> Dataset {
        let instances = cats
            .iter()
            .enumerate()
            .map(|(i, c)| ComponentInstance {
                instance_id: format!("i{i}"),
                category: c.to_string(),
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
                feature: vec![i as f64, 1.0],
                score: 1.0,
            })
            .collect();
        Dataset::new(vec![BoardRecord {
            board_id: "b".into(),
            width: 10,
            height: 10,
            instances,
            proposals: None,
        }])
        .unwrap()
    }

    #[test]
    fn single_category_board_repeats_ways() {
        let ds = one_board(&["res", "res", "res"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_training_batch(&ds, BatchMode::Within, 2, 2, 0.0, &mut rng).unwrap();
        assert_eq!(s.batch.len(), 4);
        assert!(s.batch.categories.iter().all(|&c| c == 0));
    }

    #[test]
    fn zero_jitter_duplicates_are_identical() {
        let ds = one_board(&["res", "cap", "cap"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_training_batch(&ds, BatchMode::Within, 2, 2, 0.0, &mut rng).unwrap();
        let res_rows: Vec<usize> = (0..4).filter(|&r| s.batch.categories[r] == 1).collect();
        assert_eq!(res_rows.len(), 2);
        assert_eq!(
            s.batch.features.row(res_rows[0]),
            s.batch.features.row(res_rows[1])
        );
    }

    #[test]
    fn jitter_makes_duplicates_differ() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 3,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = sample_training_batch(&ds, BatchMode::Within, 10, 10, 0.05, &mut rng).unwrap();
        for r in 0..s.batch.len() {
            let (b, i) = s.members[r];
            assert_ne!(
                s.batch.features.row(r),
                ds.boards[b].instances[i].feature.as_slice()
            );
        }
    }

    #[test]
    fn within_batches_stay_on_one_board() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let s = sample_training_batch(&ds, BatchMode::Within, 10, 10, 0.05, &mut rng).unwrap();
            assert_eq!(s.batch.len(), 100);
            assert!(s.batch.board_ids.iter().all(|&b| b == s.batch.board_ids[0]));
        }
    }

    #[test]
    fn across_batches_cover_n_categories() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 8,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = sample_training_batch(&ds, BatchMode::Across, 10, 10, 0.0, &mut rng).unwrap();
        let distinct: std::collections::BTreeSet<_> = s.batch.categories.iter().collect();
        assert_eq!(distinct.len(), 10.min(ds.categories.len()));
        assert_eq!(s.labeled.iter().filter(|&&l| l).count(), distinct.len());
    }

    #[test]
    fn sampling_is_deterministic_under_seed() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let a = sample_training_batch(
            &ds,
            BatchMode::Within,
            10,
            10,
            0.05,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = sample_training_batch(
            &ds,
            BatchMode::Within,
            10,
            10,
            0.05,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_n_is_config_error() {
        let ds = one_board(&["res"]);
        let r = sample_training_batch(
            &ds,
            BatchMode::Within,
            0,
            2,
            0.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{geometry_features, Dataset, GEOMETRY_DIM};
use crate::error::{Error, Result};

/// How templates are chosen for each category at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateStrategy {
    /// One random labelled instance per category from the test board itself.
    #[default]
    #[value(name = "random", alias = "random-on-board")]
    RandomOnBoard,
    /// The training instance closest to its category centroid.
    #[value(name = "centroid", alias = "centroid-nn")]
    CentroidNn,
    /// k-means centres per category, k picked by silhouette.
    #[value(name = "kmeans", alias = "silhouette-kmeans")]
    SilhouetteKmeans,
}

impl TemplateStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateStrategy::RandomOnBoard => "random",
            TemplateStrategy::CentroidNn => "centroid",
            TemplateStrategy::SilhouetteKmeans => "kmeans",
        }
    }
}

/// Where template candidates come from.
#[derive(Clone, Copy, Debug)]
pub enum TemplateSource<'a> {
    Board(usize),
    Training(&'a [usize]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub category: usize,
    pub feature: Vec<f64>,
    /// Normalised box geometry; the member average for cluster centres.
    pub geometry: [f64; GEOMETRY_DIM],
    /// `(board, instance)` when the template is a real instance.
    pub source: Option<(usize, usize)>,
}

struct Candidate {
    board: usize,
    instance: usize,
    geometry: [f64; GEOMETRY_DIM],
}

/// Picks templates for every category in `required` (category ids), ordered
/// by category id. Fails with the names of all categories lacking candidates.
pub fn select_templates<R: Rng + ?Sized>(
    dataset: &Dataset,
    source: TemplateSource<'_>,
    strategy: TemplateStrategy,
    required: &[usize],
    rng: &mut R,
) -> Result<Vec<Template>> {
    let boards: Vec<usize> = match source {
        TemplateSource::Board(b) => vec![b],
        TemplateSource::Training(bs) => bs.to_vec(),
    };
    let mut pool: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for &b in &boards {
        let board = &dataset.boards[b];
        for (i, c) in dataset.instance_labels(b).into_iter().enumerate() {
            pool.entry(c).or_default().push(Candidate {
                board: b,
                instance: i,
                geometry: geometry_features(
                    &board.instances[i].bbox,
                    board.width as f64,
                    board.height as f64,
                ),
            });
        }
    }

    let mut required = required.to_vec();
    required.sort_unstable();
    required.dedup();
    let missing: Vec<String> = required
        .iter()
        .filter(|c| !pool.contains_key(c))
        .map(|&c| dataset.categories[c].clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingTemplates(missing));
    }

    let feature = |c: &Candidate| {
        dataset.boards[c.board].instances[c.instance]
            .feature
            .as_slice()
    };
    let as_template = |category: usize, c: &Candidate| Template {
        category,
        feature: feature(c).to_vec(),
        geometry: c.geometry,
        source: Some((c.board, c.instance)),
    };

    let mut out = Vec::new();
    for &cat in &required {
        let cands = &pool[&cat];
        match strategy {
            TemplateStrategy::RandomOnBoard => {
                out.push(as_template(cat, cands.choose(rng).expect("nonempty")));
            }
            TemplateStrategy::CentroidNn => {
                let points: Vec<&[f64]> = cands.iter().map(feature).collect();
                out.push(as_template(cat, &cands[centroid_nearest(&points)]));
            }
            TemplateStrategy::SilhouetteKmeans => {
                let points: Vec<&[f64]> = cands.iter().map(feature).collect();
                if points.len() < 4 {
                    out.push(as_template(cat, &cands[centroid_nearest(&points)]));
                    continue;
                }
                let (_, (assign, centers)) = best_k_by_silhouette(&points, 8, rng);
                for (k, center) in centers.into_iter().enumerate() {
                    let members: Vec<&Candidate> = cands
                        .iter()
                        .zip(&assign)
                        .filter(|(_, &a)| a == k)
                        .map(|(c, _)| c)
                        .collect();
                    let mut geometry = [0.0; GEOMETRY_DIM];
                    for m in &members {
                        for (g, v) in geometry.iter_mut().zip(m.geometry) {
                            *g += v / members.len() as f64;
                        }
                    }
                    out.push(Template {
                        category: cat,
                        feature: center,
                        geometry,
                        source: None,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the point nearest the mean; lowest index on ties.
fn centroid_nearest(points: &[&[f64]]) -> usize {
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(*p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= points.len() as f64);
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in points.iter().enumerate() {
        let dist = sq_dist(p, &mean);
        if dist < best_d {
            best = i;
            best_d = dist;
        }
    }
    best
}

/// Lloyd's k-means with k-means++ seeding. Returns `(assignment, centres)`.
/// Empty clusters are reseeded with the point farthest from its centre.
pub fn kmeans<R: Rng + ?Sized>(
    points: &[&[f64]],
    k: usize,
    max_iter: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<Vec<f64>>) {
    assert!(k >= 1 && k <= points.len(), "k must be in 1..=n");
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if r < w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[next].to_vec());
        for (m, p) in nearest.iter_mut().zip(points) {
            *m = m.min(sq_dist(p, centers.last().expect("just pushed")));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dist = sq_dist(p, c);
                if dist < best_d {
                    best = j;
                    best_d = dist;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(*p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points[a], &centers[assign[a]])
                            .total_cmp(&sq_dist(points[b], &centers[assign[b]]))
                    })
                    .expect("nonempty");
                centers[j] = points[far].to_vec();
                assign[far] = j;
                changed = true;
            } else {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    (assign, centers)
}

/// Mean silhouette coefficient with Euclidean distance. Points in singleton
/// clusters score 0.
pub fn silhouette_score(points: &[&[f64]], assign: &[usize]) -> f64 {
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b).sqrt()).collect())
        .collect();
    silhouette_from_distances(&dist, assign)
}

fn silhouette_from_distances(dist: &[Vec<f64>], assign: &[usize]) -> f64 {
    let n = assign.len();
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    assign.iter().for_each(|&a| sizes[a] += 1);
    let mut total = 0.0;
    for i in 0..n {
        let own = assign[i];
        if sizes[own] <= 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            sums[assign[j]] += dist[i][j];
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 && b.is_finite() {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Cluster assignment and centres.
type Clustering = (Vec<usize>, Vec<Vec<f64>>);

/// Tries k in `2..=min(k_max, n-1)` and keeps the highest mean silhouette;
/// the smaller k wins ties.
fn best_k_by_silhouette<R: Rng + ?Sized>(
    points: &[&[f64]],
    k_max: usize,
    rng: &mut R,
) -> (usize, Clustering) {
    let dist: Vec<Vec<f64>> = points
        .iter()
        .map(|a| points.iter().map(|b| sq_dist(a, b).sqrt()).collect())
        .collect();
    let upper = k_max.min(points.len() - 1);
    let mut best: Option<(f64, usize, Clustering)> = None;
    for k in 2..=upper {
        let (assign, centers) = kmeans(points, k, 100, rng);
        let s = silhouette_from_distances(&dist, &assign);
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, k, (assign, centers)));
        }
    }
    let (_, k, clustering) = best.expect("n >= 4 gives at least k = 2");
    (k, clustering)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BBox, BoardRecord, ComponentInstance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(boards: Vec<Vec<(&str, Vec<f64>)>>) -> Dataset {
        Dataset::new(
            boards
                .into_iter()
                .enumerate()
                .map(|(b, insts)| BoardRecord {
                    board_id: format!("b{b}"),
                    width: 100,
                    height: 100,
                    instances: insts
                        .into_iter()
                        .enumerate()
                        .map(|(i, (c, f))| ComponentInstance {
                            instance_id: format!("b{b}_{i}"),
                            category: c.into(),
                            bbox: BBox::new(i as f64, 0.0, i as f64 + 2.0, 4.0),
                            feature: f,
                            score: 1.0,
                        })
                        .collect(),
                    proposals: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_instance_under_every_strategy() {
        let ds = dataset(vec![vec![("cap", vec![1.0, 2.0])]]);
        for s in [
            TemplateStrategy::RandomOnBoard,
            TemplateStrategy::CentroidNn,
            TemplateStrategy::SilhouetteKmeans,
        ] {
            let t = select_templates(
                &ds,
                TemplateSource::Training(&[0]),
                s,
                &[0],
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
            assert_eq!(t.len(), 1);
            assert_eq!(t[0].feature, vec![1.0, 2.0]);
            assert_eq!(t[0].source, Some((0, 0)));
        }
    }

    #[test]
    fn centroid_nn_picks_middle_point() {
        let ds = dataset(vec![vec![
            ("r", vec![0.0]),
            ("r", vec![0.9]),
            ("r", vec![3.0]),
        ]]);
        let t = select_templates(
            &ds,
            TemplateSource::Training(&[0]),
            TemplateStrategy::CentroidNn,
            &[0],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(t[0].feature, vec![0.9]);
    }

    #[test]
    fn silhouette_matches_definition() {
        // clusters {0,1} and {10,11} on a line
        let pts: Vec<Vec<f64>> = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let s = silhouette_score(&refs, &[0, 0, 1, 1]);
        // point 0: a = 1, b = (10 + 11)/2 = 10.5; point 1: a = 1, b = 9.5
        let expect = ((9.5 / 10.5) + (8.5 / 9.5)) * 2.0 / 4.0;
        assert!((s - expect).abs() < 1e-12);
    }

    #[test]
    fn two_tight_pairs_give_two_centres() {
        let ds = dataset(vec![vec![
            ("r", vec![0.0, 0.0]),
            ("r", vec![0.1, 0.0]),
            ("r", vec![5.0, 5.0]),
            ("r", vec![5.0, 5.1]),
        ]]);
        for seed in 0..10 {
            let mut t = select_templates(
                &ds,
                TemplateSource::Training(&[0]),
                TemplateStrategy::SilhouetteKmeans,
                &[0],
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap();
            assert_eq!(t.len(), 2);
            t.sort_by(|a, b| a.feature[0].total_cmp(&b.feature[0]));
            assert!((t[0].feature[0] - 0.05).abs() < 1e-12);
            assert!((t[1].feature[1] - 5.05).abs() < 1e-12);
            assert!(t[0].source.is_none());
        }
    }

    #[test]
    fn random_on_board_is_seed_deterministic_and_local() {
        let ds = dataset(vec![
            vec![("a", vec![0.0]), ("a", vec![1.0]), ("b", vec![2.0])],
            vec![("a", vec![9.0]), ("b", vec![8.0])],
        ]);
        let pick = |seed| {
            select_templates(
                &ds,
                TemplateSource::Board(0),
                TemplateStrategy::RandomOnBoard,
                &[0, 1],
                &mut ChaCha8Rng::seed_from_u64(seed),
            )
            .unwrap()
        };
        assert_eq!(pick(3), pick(3));
        for seed in 0..20 {
            let t = pick(seed);
            assert_eq!(t.len(), 2);
            assert!(t.iter().all(|t| t.source.unwrap().0 == 0));
        }
    }

    #[test]
    fn missing_category_lists_names() {
        let ds = dataset(vec![
            vec![("a", vec![0.0])],
            vec![("b", vec![1.0]), ("c", vec![2.0])],
        ]);
        let err = select_templates(
            &ds,
            TemplateSource::Board(0),
            TemplateStrategy::RandomOnBoard,
            &[0, 1, 2],
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap_err();
        match err {
            Error::MissingTemplates(names) => {
                assert_eq!(names, vec!["b".to_string(), "c".to_string()])
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let pts: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![(i % 7) as f64, (i / 7) as f64])
            .collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let a = kmeans(&refs, 4, 100, &mut ChaCha8Rng::seed_from_u64(1));
        let b = kmeans(&refs, 4, 100, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.0.iter().all(|&k| k < 4));
    }
}

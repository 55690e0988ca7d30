//! Pairwise similarity head, its training losses, and template matching.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::half_dim;
use crate::error::{Error, Result};
use crate::linalg::{dot, LinearParams, Matrix};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityMetric {
    #[default]
    Dot,
    Cosine,
}

/// The embedding `phi_d` applied before every similarity comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub phi_d: LinearParams,
    #[serde(default)]
    pub metric: SimilarityMetric,
}

impl SimilarityParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, metric: SimilarityMetric, rng: &mut R) -> Self {
        Self {
            phi_d: LinearParams::init(dim, half_dim(dim), rng),
            metric,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi_d: self.phi_d.zeros_like(),
            metric: self.metric,
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_d.in_dim()
    }

    /// Embeds every row of `x`, normalising rows for the cosine metric.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        let mut p = self.phi_d.forward(x)?;
        if self.metric == SimilarityMetric::Cosine {
            for i in 0..p.rows() {
                let row = p.row_mut(i);
                let norm = dot(row, row).sqrt();
                if norm > 0.0 {
                    row.iter_mut().for_each(|v| *v /= norm);
                }
            }
        }
        Ok(p)
    }

    /// Full `B × B` score matrix.
    pub fn score_matrix(&self, x: &Matrix) -> Result<Matrix> {
        let p = self.embed(x)?;
        p.matmul_t(&p)
    }

    /// Backpropagates `dS` (gradient w.r.t. the score matrix of `x`) into
    /// `phi_d` and the inputs.
    fn backward_scores(&self, x: &Matrix, d_scores: &Matrix) -> Result<(Matrix, SimilarityParams)> {
        let raw = self.phi_d.forward(x)?;
        let embedded = self.embed(x)?;
        let mut sym = d_scores.clone();
        sym.add_assign(&d_scores.transpose())?;
        let mut d_emb = sym.matmul(&embedded)?;
        if self.metric == SimilarityMetric::Cosine {
            for i in 0..d_emb.rows() {
                let norm = dot(raw.row(i), raw.row(i)).sqrt();
                let unit = embedded.row(i);
                let g = d_emb.row_mut(i);
                if norm > 0.0 {
                    let along = dot(unit, g);
                    for (gv, &u) in g.iter_mut().zip(unit) {
                        *gv = (*gv - u * along) / norm;
                    }
                } else {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut grads = self.zeros_like();
        let dx = self.phi_d.backward(x, &d_emb, &mut grads.phi_d)?;
        Ok((dx, grads))
    }
}

/// Similarity of two feature vectors under `p`.
pub fn similarity_score(a: &[f64], b: &[f64], p: &SimilarityParams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("similarity_score", a.len(), b.len()));
    }
    let x = Matrix::from_rows(&[a, b])?;
    let e = p.embed(&x)?;
    Ok(dot(e.row(0), e.row(1)))
}

/// A labelled batch of (refined) features.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub features: Matrix,
    pub categories: Vec<usize>,
    /// Index of the source board for every row.
    pub board_ids: Vec<usize>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.features.rows() != self.categories.len() {
            return Err(Error::shape(
                "TripletBatch",
                self.features.rows(),
                self.categories.len(),
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!(
                "margin must be > 0, got {}",
                self.margin
            )));
        }
        let distinct: std::collections::BTreeSet<_> = self.categories.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::DegenerateBatch(format!(
                "{} categories in a batch of {}",
                distinct.len(),
                self.categories.len()
            )));
        }
        Ok(())
    }
}

/// Loss value together with how many of its terms were non-zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub active_terms: usize,
    pub total_terms: usize,
}

/// A loss evaluation with gradients w.r.t. the batch features and the head.
#[derive(Clone, Debug)]
pub struct LossOutput<P> {
    pub report: LossReport,
    pub d_features: Matrix,
    pub grads: P,
}

/// Hinge terms `max(0, S[i,d] − S[i,s] + margin)` over every anchor `i`,
/// same-category partner `s ≠ i` and different-category partner `d`, divided
/// by the number of strictly positive terms. Returns the report and `dL/dS`.
pub fn triplet_from_scores(
    scores: &Matrix,
    categories: &[usize],
    margin: f64,
) -> (LossReport, Matrix) {
    let n = categories.len();
    let mut d_scores = Matrix::zeros(n, n);
    let mut sum = 0.0;
    let mut active = 0usize;
    let mut total = 0usize;
    let mut same = Vec::with_capacity(n);
    let mut diff = Vec::with_capacity(n);
    for i in 0..n {
        same.clear();
        diff.clear();
        for j in 0..n {
            if j == i {
                continue;
            }
            if categories[j] == categories[i] {
                same.push(j);
            } else {
                diff.push(j);
            }
        }
        let row = scores.row(i);
        for &s in &same {
            for &d in &diff {
                total += 1;
                let term = row[d] - row[s] + margin;
                if term > 0.0 {
                    sum += term;
                    active += 1;
                    d_scores[(i, d)] += 1.0;
                    d_scores[(i, s)] -= 1.0;
                }
            }
        }
    }
    let loss = if active > 0 {
        d_scores.scale(1.0 / active as f64);
        sum / active as f64
    } else {
        0.0
    };
    (
        LossReport {
            loss,
            active_terms: active,
            total_terms: total,
        },
        d_scores,
    )
}

pub fn triplet_loss(
    batch: &TripletBatch,
    p: &SimilarityParams,
) -> Result<LossOutput<SimilarityParams>> {
    batch.validate()?;
    let scores = p.score_matrix(&batch.features)?;
    let (report, d_scores) = triplet_from_scores(&scores, &batch.categories, batch.margin);
    let (d_features, grads) = p.backward_scores(&batch.features, &d_scores)?;
    Ok(LossOutput {
        report,
        d_features,
        grads,
    })
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy of `sigmoid(S[i,j])` against the same-category
/// indicator, over all unordered pairs `i < j`.
pub fn bce_from_scores(scores: &Matrix, categories: &[usize]) -> (LossReport, Matrix) {
    let n = categories.len();
    let mut d_scores = Matrix::zeros(n, n);
    let pairs = n * n.saturating_sub(1) / 2;
    let mut sum = 0.0;
    let mut active = 0;
    for i in 0..n {
        for j in i + 1..n {
            let s = scores[(i, j)];
            let y = if categories[i] == categories[j] {
                1.0
            } else {
                0.0
            };
            let l = softplus(s) - y * s;
            if l > 0.0 {
                active += 1;
            }
            sum += l;
            d_scores[(i, j)] = sigmoid(s) - y;
        }
    }
    if pairs > 0 {
        d_scores.scale(1.0 / pairs as f64);
    }
    (
        LossReport {
            loss: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
            active_terms: active,
            total_terms: pairs,
        },
        d_scores,
    )
}

pub fn bce_pair_loss(
    batch: &TripletBatch,
    p: &SimilarityParams,
) -> Result<LossOutput<SimilarityParams>> {
    batch.validate()?;
    let scores = p.score_matrix(&batch.features)?;
    let (report, d_scores) = bce_from_scores(&scores, &batch.categories);
    let (d_features, grads) = p.backward_scores(&batch.features, &d_scores)?;
    Ok(LossOutput {
        report,
        d_features,
        grads,
    })
}

/// Mean softmax cross-entropy of a linear classifier over the batch features.
pub fn classifier_head_loss(
    batch: &TripletBatch,
    head: &LinearParams,
) -> Result<LossOutput<LinearParams>> {
    if batch.features.rows() != batch.categories.len() {
        return Err(Error::shape(
            "TripletBatch",
            batch.features.rows(),
            batch.categories.len(),
        ));
    }
    let classes = head.out_dim();
    if let Some(&bad) = batch.categories.iter().find(|&&c| c >= classes) {
        return Err(Error::Label(format!(
            "category id {bad} out of range for {classes} classes"
        )));
    }
    let logits = head.forward(&batch.features)?;
    let n = batch.len();
    let mut d_logits = Matrix::zeros(n, classes);
    let mut sum = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + norm.ln();
        let y = batch.categories[i];
        sum += log_z - row[y];
        let g = d_logits.row_mut(i);
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = (row[k] - log_z).exp();
        }
        g[y] -= 1.0;
    }
    let scale = if n > 0 { 1.0 / n as f64 } else { 0.0 };
    d_logits.scale(scale);
    let mut grads = head.zeros_like();
    let d_features = head.backward(&batch.features, &d_logits, &mut grads)?;
    Ok(LossOutput {
        report: LossReport {
            loss: sum * scale,
            active_terms: n,
            total_terms: n,
        },
        d_features,
        grads,
    })
}

/// Categories ordered by descending score; a category's score is the max
/// over its entries. Equal scores rank the lower category index first.
pub fn rank_categories(scores: impl IntoIterator<Item = (usize, f64)>) -> Vec<(usize, f64)> {
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for (c, s) in scores {
        best.entry(c)
            .and_modify(|b| {
                if s > *b {
                    *b = s
                }
            })
            .or_insert(s);
    }
    let mut ranked: Vec<(usize, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Scores every query row against every template row and ranks categories.
pub fn classify_by_templates(
    queries: &Matrix,
    template_categories: &[usize],
    templates: &Matrix,
    p: &SimilarityParams,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if template_categories.is_empty() || templates.rows() == 0 {
        return Err(Error::Config("no templates to classify against".into()));
    }
    if templates.rows() != template_categories.len() {
        return Err(Error::shape(
            "templates",
            template_categories.len(),
            templates.rows(),
        ));
    }
    if queries.rows() == 0 {
        return Ok(Vec::new());
    }
    let q = p.embed(queries)?;
    let t = p.embed(templates)?;
    let scores = q.matmul_t(&t)?;
    Ok((0..scores.rows())
        .map(|i| {
            rank_categories(
                template_categories
                    .iter()
                    .copied()
                    .zip(scores.row(i).iter().copied()),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn identity_params(d: usize) -> SimilarityParams {
        SimilarityParams {
            phi_d: LinearParams::new(Matrix::identity(d), vec![0.0; d]).unwrap(),
            metric: SimilarityMetric::Dot,
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, classes: usize) -> TripletBatch {
        let data = (0..n * d)
            .map(|_| StandardNormal.sample(&mut *rng))
            .collect();
        let mut categories: Vec<usize> = (0..n).map(|i| i % classes).collect();
        categories.rotate_left(rng.random_range(0..n));
        TripletBatch {
            features: Matrix::from_vec(n, d, data).unwrap(),
            categories,
            board_ids: vec![0; n],
            margin: 1.0,
        }
    }

    #[test]
    fn score_examples() {
        let p = identity_params(2);
        assert_eq!(
            similarity_score(&[3.0, 4.0], &[3.0, 4.0], &p).unwrap(),
            25.0
        );
        assert_eq!(similarity_score(&[1.0, 0.0], &[0.0, 1.0], &p).unwrap(), 0.0);
        assert!(similarity_score(&[1.0], &[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn score_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for metric in [SimilarityMetric::Dot, SimilarityMetric::Cosine] {
            let p = SimilarityParams::init(6, metric, &mut rng);
            for _ in 0..20 {
                let a: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
                let b: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
                assert_eq!(
                    similarity_score(&a, &b, &p).unwrap(),
                    similarity_score(&b, &a, &p).unwrap()
                );
            }
        }
    }

    #[test]
    fn separated_scores_give_zero_loss() {
        // categories [0,0,1,1]; similar pairs score 5, dissimilar 0
        let cats = [0, 0, 1, 1];
        let mut s = Matrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                s[(i, j)] = if cats[i] == cats[j] { 5.0 } else { 0.0 };
            }
        }
        let (r, g) = triplet_from_scores(&s, &cats, 1.0);
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.active_terms, 0);
        assert_eq!(r.total_terms, 8);
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_triple_arithmetic() {
        // anchor 0, similar 1, dissimilar 2; only anchor 0's row matters here
        let cats = [0, 0, 1];
        let mut s = Matrix::zeros(3, 3);
        s[(0, 1)] = 0.9;
        s[(0, 2)] = 0.2;
        // push every other triple far into the inactive region
        s[(1, 0)] = 10.0;
        s[(1, 2)] = -10.0;
        let (r, _) = triplet_from_scores(&s, &cats, 1.0);
        assert_eq!(r.active_terms, 1);
        assert!((r.loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn one_category_batch_is_degenerate() {
        let batch = TripletBatch {
            features: Matrix::zeros(3, 2),
            categories: vec![4, 4, 4],
            board_ids: vec![0; 3],
            margin: 1.0,
        };
        let p = identity_params(2);
        assert!(matches!(
            triplet_loss(&batch, &p),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(matches!(
            bce_pair_loss(&batch, &p),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn singleton_category_contributes_no_anchor_pairs() {
        let cats = [0, 1, 1];
        let s = Matrix::zeros(3, 3);
        let (r, _) = triplet_from_scores(&s, &cats, 1.0);
        // anchors 1 and 2 each have one similar and one dissimilar partner
        assert_eq!(r.total_terms, 2);
    }

    #[test]
    fn bce_zero_score_is_ln2() {
        let s = Matrix::zeros(2, 2);
        let (r, _) = bce_from_scores(&s, &[0, 0]);
        assert!((r.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_separated_scores_vanish() {
        let cats = [0, 0, 1];
        let mut s = Matrix::zeros(3, 3);
        s[(0, 1)] = 60.0;
        s[(0, 2)] = -60.0;
        s[(1, 2)] = -60.0;
        let (r, _) = bce_from_scores(&s, &cats);
        assert!(r.loss < 1e-20);
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        let head = LinearParams::zeros(3, 4);
        let batch = TripletBatch {
            features: Matrix::from_rows(&[[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]]).unwrap(),
            categories: vec![0, 3],
            board_ids: vec![0, 0],
            margin: 1.0,
        };
        let out = classifier_head_loss(&batch, &head).unwrap();
        assert!((out.report.loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn ce_confident_correct_logit_vanishes() {
        let mut head = LinearParams::zeros(1, 3);
        head.bias = vec![0.0, 80.0, 0.0];
        let batch = TripletBatch {
            features: Matrix::from_rows(&[[0.0]]).unwrap(),
            categories: vec![1],
            board_ids: vec![0],
            margin: 1.0,
        };
        assert!(classifier_head_loss(&batch, &head).unwrap().report.loss < 1e-30);
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let head = LinearParams::zeros(2, 3);
        let batch = TripletBatch {
            features: Matrix::zeros(1, 2),
            categories: vec![3],
            board_ids: vec![0],
            margin: 1.0,
        };
        assert!(matches!(
            classifier_head_loss(&batch, &head),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn classify_self_match_and_single_template() {
        let p = identity_params(2);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let templates = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [s, s]]).unwrap();
        let queries = Matrix::from_rows(&[[s, s], [0.0, 1.0]]).unwrap();
        let ranked = classify_by_templates(&queries, &[0, 1, 2], &templates, &p).unwrap();
        assert_eq!(ranked[0][0].0, 2);
        assert_eq!(ranked[1][0].0, 1);

        let one = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let ranked = classify_by_templates(&queries, &[5], &one, &p).unwrap();
        assert!(ranked.iter().all(|r| r[0].0 == 5));
        assert!(classify_by_templates(&queries, &[], &Matrix::zeros(0, 2), &p).is_err());
    }

    #[test]
    fn ranking_ties_prefer_lower_category() {
        let r = rank_categories([(3, 1.0), (1, 1.0), (2, 0.5), (3, 0.2)]);
        assert_eq!(r, vec![(1, 1.0), (3, 1.0), (2, 0.5)]);
    }

    #[test]
    fn ranking_matches_exhaustive_oracle() {
        // 3 templates, two of category 0
        let cats = [0usize, 1, 0];
        let scores = [0.4, 0.7, 0.9];
        let ranked = rank_categories(cats.iter().copied().zip(scores));
        // oracle: per category max, then sort by hand
        let mut oracle = vec![(0usize, 0.4f64.max(0.9)), (1, 0.7)];
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        assert_eq!(ranked, oracle);
    }

    fn gradcheck_loss(kind: &str, metric: SimilarityMetric, seed: u64) -> f64 {
        use crate::linalg::finite_difference_gradcheck;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(&mut rng, 8, 6, 3);
        let p = SimilarityParams::init(6, metric, &mut rng);
        let head = LinearParams::init(6, 3, &mut rng);
        let nx = batch.features.as_slice().len();
        let mut flat = batch.features.as_slice().to_vec();
        match kind {
            "ce" => flat.extend(head.flat_values()),
            _ => flat.extend(p.phi_d.flat_values()),
        }
        let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
            let mut b = batch.clone();
            b.features.as_mut_slice().copy_from_slice(&v[..nx]);
            let (report, dx, gp): (LossReport, Matrix, Vec<f64>) = match kind {
                "ce" => {
                    let mut h = head.clone();
                    h.flat_values_mut().zip(&v[nx..]).for_each(|(d, s)| *d = *s);
                    let o = classifier_head_loss(&b, &h)?;
                    (o.report, o.d_features, o.grads.flat_values().collect())
                }
                _ => {
                    let mut q = p.clone();
                    q.phi_d
                        .flat_values_mut()
                        .zip(&v[nx..])
                        .for_each(|(d, s)| *d = *s);
                    let o = if kind == "bce" {
                        bce_pair_loss(&b, &q)?
                    } else {
                        triplet_loss(&b, &q)?
                    };
                    (
                        o.report,
                        o.d_features,
                        o.grads.phi_d.flat_values().collect(),
                    )
                }
            };
            let mut g = dx.into_vec();
            g.extend(gp);
            Ok((report.loss, g))
        };
        finite_difference_gradcheck(f, &flat, 1e-4).unwrap()
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for seed in 0..3 {
            for metric in [SimilarityMetric::Dot, SimilarityMetric::Cosine] {
                for kind in ["triplet", "bce"] {
                    let e = gradcheck_loss(kind, metric, seed);
                    assert!(e < 1e-3, "{kind} {metric:?} seed {seed}: {e}");
                }
            }
            let e = gradcheck_loss("ce", SimilarityMetric::Dot, seed);
            assert!(e < 1e-3, "ce seed {seed}: {e}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn triplet_monotone_in_margin(seed in 0u64..500, m1 in 0.01f64..3.0, extra in 0.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b = random_batch(&mut rng, 10, 4, 3);
                let p = SimilarityParams::init(4, SimilarityMetric::Dot, &mut rng);
                let s = p.score_matrix(&b.features).unwrap();
                // compare sums: the normalised mean can drop when new terms turn on
                let (lo, _) = triplet_from_scores(&s, &b.categories, m1);
                let (hi, _) = triplet_from_scores(&s, &b.categories, m1 + extra);
                prop_assert!(lo.loss >= 0.0);
                prop_assert!(hi.loss * hi.active_terms as f64 >= lo.loss * lo.active_terms as f64 - 1e-9);
                prop_assert!(hi.active_terms >= lo.active_terms);
            }

            #[test]
            fn argmax_invariant_under_increasing_transform(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let cats: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
                let scores: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
                let a = rank_categories(cats.iter().copied().zip(scores.iter().copied()));
                let b = rank_categories(cats.iter().copied().zip(scores.iter().map(|s| (2.0 * s).exp() + 1.0)));
                let order_a: Vec<usize> = a.iter().map(|r| r.0).collect();
                let order_b: Vec<usize> = b.iter().map(|r| r.0).collect();
                prop_assert_eq!(order_a, order_b);
            }
        }
    }
}

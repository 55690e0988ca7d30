//! Classification accuracy, detection matching, AP/mAP, and the end-to-end
//! proposal pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, geometry_features, select_templates, BBox, BoardRecord, ComponentInstance, Dataset,
    Template, TemplateSource, TemplateStrategy,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{LossKind, Model};
use crate::similarity::{classify_by_templates, rank_categories, sigmoid};

/// Intersection over union of two well-ordered boxes.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub board_id: String,
    /// Id of the proposal (or component) this detection came from.
    pub instance_id: String,
    pub bbox: BBox,
    pub category: String,
    /// Winning similarity score squashed into (0, 1).
    pub confidence: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    /// Number of classified instances behind `top1`/`top5`.
    #[serde(default)]
    pub queries: usize,
    /// AP per category with at least one ground-truth box.
    #[serde(default)]
    pub per_category_ap: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default)]
    pub counts: BTreeMap<String, MatchCounts>,
    /// Boards left out of the pipeline because they carry no proposals.
    #[serde(default)]
    pub skipped_boards: Vec<String>,
}

impl EvalReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// `category,ap,tp,fp,fn`, one row per category with ground truth.
    pub fn save_ap_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["category", "ap", "tp", "fp", "fn"])?;
        for (cat, ap) in &self.per_category_ap {
            let c = self.counts.get(cat).copied().unwrap_or_default();
            w.write_record([
                cat.clone(),
                ap.to_string(),
                c.tp.to_string(),
                c.fp.to_string(),
                c.fn_.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// All-point interpolated AP from detections already sorted by confidence.
fn average_precision(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(is_tp.len());
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut tp = 0usize;
    for (k, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.into_iter().zip(recall) {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// Greedy confidence-ordered matching at `iou_threshold`, then per-category
/// AP and their mean over categories present in the ground truth.
pub fn evaluate_detection_map(
    predictions: &[DetectionResult],
    boards: &[&BoardRecord],
    iou_threshold: f64,
) -> EvalReport {
    let mut gt: BTreeMap<&str, Vec<(&str, &BBox)>> = BTreeMap::new();
    for b in boards {
        for inst in &b.instances {
            gt.entry(inst.category.as_str())
                .or_default()
                .push((b.board_id.as_str(), &inst.bbox));
        }
    }
    let mut by_cat: BTreeMap<&str, Vec<&DetectionResult>> = BTreeMap::new();
    for p in predictions {
        by_cat.entry(p.category.as_str()).or_default().push(p);
    }

    let mut report = EvalReport::default();
    let mut categories: Vec<&str> = gt.keys().chain(by_cat.keys()).copied().collect();
    categories.sort_unstable();
    categories.dedup();
    for cat in categories {
        let truths = gt.get(cat).map(Vec::as_slice).unwrap_or(&[]);
        let mut preds = by_cat.remove(cat).unwrap_or_default();
        preds.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then_with(|| a.board_id.cmp(&b.board_id))
                .then_with(|| a.instance_id.cmp(&b.instance_id))
        });
        let mut used = vec![false; truths.len()];
        let mut is_tp = Vec::with_capacity(preds.len());
        for p in &preds {
            let mut best: Option<(usize, f64)> = None;
            for (g, (board, bbox)) in truths.iter().enumerate() {
                if used[g] || *board != p.board_id {
                    continue;
                }
                let iou = box_iou(&p.bbox, bbox);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                used[g] = true;
            }
            is_tp.push(best.is_some());
        }
        let tp = is_tp.iter().filter(|&&t| t).count();
        report.counts.insert(
            cat.to_string(),
            MatchCounts {
                tp,
                fp: preds.len() - tp,
                fn_: truths.len() - tp,
            },
        );
        if !truths.is_empty() {
            report
                .per_category_ap
                .insert(cat.to_string(), average_precision(&is_tp, truths.len()));
        }
    }
    if !report.per_category_ap.is_empty() {
        let aps = &report.per_category_ap;
        report.map = Some(aps.values().sum::<f64>() / aps.len() as f64);
    }
    report
}

/// How templates are found for each evaluated board.
#[derive(Clone, Copy, Debug)]
pub struct TemplatePlan<'a> {
    pub strategy: TemplateStrategy,
    /// Boards supplying centroid / k-means templates.
    pub training_boards: &'a [usize],
    pub seed: u64,
}

impl<'a> TemplatePlan<'a> {
    pub fn on_board(seed: u64) -> Self {
        Self {
            strategy: TemplateStrategy::RandomOnBoard,
            training_boards: &[],
            seed,
        }
    }
}

/// Per-board template provider; pooled strategies are computed once.
struct TemplateProvider<'a> {
    dataset: &'a Dataset,
    strategy: TemplateStrategy,
    pooled: Vec<Template>,
    rng: ChaCha8Rng,
}

impl<'a> TemplateProvider<'a> {
    fn new(dataset: &'a Dataset, boards: &[usize], plan: &TemplatePlan<'_>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let pooled = match plan.strategy {
            TemplateStrategy::RandomOnBoard => Vec::new(),
            s => {
                let required: Vec<usize> = dataset.categories_on(boards).into_iter().collect();
                select_templates(
                    dataset,
                    TemplateSource::Training(plan.training_boards),
                    s,
                    &required,
                    &mut rng,
                )?
            }
        };
        Ok(Self {
            dataset,
            strategy: plan.strategy,
            pooled,
            rng,
        })
    }

    fn for_board(&mut self, board: usize) -> Result<Vec<Template>> {
        match self.strategy {
            TemplateStrategy::RandomOnBoard => {
                let required: Vec<usize> =
                    self.dataset.categories_on(&[board]).into_iter().collect();
                select_templates(
                    self.dataset,
                    TemplateSource::Board(board),
                    self.strategy,
                    &required,
                    &mut self.rng,
                )
            }
            _ => Ok(self.pooled.clone()),
        }
    }
}

/// Ranks categories (dataset ids) for each query node of one board graph
/// made of `queries` plus every template.
fn rank_queries(
    model: &Model,
    dataset: &Dataset,
    board: &BoardRecord,
    queries: &[&ComponentInstance],
    templates: &[Template],
) -> Result<Vec<Vec<(usize, f64)>>> {
    if templates.is_empty() {
        return Err(Error::Config("no templates to classify against".into()));
    }
    if queries.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    let n_model = cfg.categories.len();
    let to_model: Vec<Option<usize>> = dataset
        .categories
        .iter()
        .map(|name| cfg.categories.iter().position(|c| c == name))
        .collect();

    let (w, h) = (board.width as f64, board.height as f64);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(queries.len() + templates.len());
    for q in queries {
        rows.push(augment(
            &model.prepare_feature(&q.feature),
            &geometry_features(&q.bbox, w, h),
            cfg.extra,
            None,
            n_model,
        )?);
    }
    for t in templates {
        let label = match cfg.extra {
            crate::data::ExtraMode::Label => Some(to_model[t.category].ok_or_else(|| {
                Error::Label(format!(
                    "category '{}' unknown to the model",
                    dataset.categories[t.category]
                ))
            })?),
            _ => None,
        };
        rows.push(augment(
            &model.prepare_feature(&t.feature),
            &t.geometry,
            cfg.extra,
            label,
            n_model,
        )?);
    }
    let x = Matrix::from_rows(&rows)?;
    let refined = model.refine(&x)?;
    let query_rows: Vec<usize> = (0..queries.len()).collect();
    let template_rows: Vec<usize> = (queries.len()..rows.len()).collect();
    let q = refined.select_rows(&query_rows);

    if cfg.loss == LossKind::Ce {
        let head =
            model.params.head.as_ref().ok_or_else(|| {
                Error::Config("cross-entropy model has no classifier head".into())
            })?;
        let logits = head.forward(&q)?;
        let to_dataset: Vec<Option<usize>> = cfg
            .categories
            .iter()
            .map(|c| dataset.category_index(c))
            .collect();
        return Ok((0..logits.rows())
            .map(|i| {
                rank_categories(
                    logits
                        .row(i)
                        .iter()
                        .zip(&to_dataset)
                        .filter_map(|(&s, c)| c.map(|c| (c, s))),
                )
            })
            .collect());
    }
    let t = refined.select_rows(&template_rows);
    let cats: Vec<usize> = templates.iter().map(|t| t.category).collect();
    classify_by_templates(&q, &cats, &t, &model.params.similarity)
}

/// Top-1 / top-5 template classification over the ground-truth instances of
/// `boards`, micro-averaged. Instances serving as templates are not scored.
pub fn evaluate_classification(
    dataset: &Dataset,
    boards: &[usize],
    model: &Model,
    plan: &TemplatePlan<'_>,
) -> Result<EvalReport> {
    let mut provider = TemplateProvider::new(dataset, boards, plan)?;
    let mut hits1 = 0usize;
    let mut hits5 = 0usize;
    let mut total = 0usize;
    for &b in boards {
        let board = &dataset.boards[b];
        let templates = provider.for_board(b)?;
        let labels = dataset.instance_labels(b);
        let is_template: Vec<bool> = (0..board.instances.len())
            .map(|i| templates.iter().any(|t| t.source == Some((b, i))))
            .collect();
        let query_idx: Vec<usize> = (0..board.instances.len())
            .filter(|&i| !is_template[i])
            .collect();
        let queries: Vec<&ComponentInstance> =
            query_idx.iter().map(|&i| &board.instances[i]).collect();
        let ranked = rank_queries(model, dataset, board, &queries, &templates)?;
        for (&i, ranking) in query_idx.iter().zip(&ranked) {
            let pos = ranking.iter().position(|&(c, _)| c == labels[i]);
            hits1 += pos.is_some_and(|p| p < 1) as usize;
            hits5 += pos.is_some_and(|p| p < 5) as usize;
            total += 1;
        }
    }
    let frac = |h: usize| {
        if total > 0 {
            h as f64 / total as f64
        } else {
            0.0
        }
    };
    Ok(EvalReport {
        top1: Some(frac(hits1)),
        top5: Some(frac(hits5)),
        queries: total,
        ..EvalReport::default()
    })
}

/// Classifies the proposals of one board (those scoring at least
/// `threshold`), returning one detection per surviving proposal.
fn detect_board(
    model: &Model,
    dataset: &Dataset,
    board: &BoardRecord,
    proposals: &[ComponentInstance],
    templates: &[Template],
    threshold: f64,
) -> Result<Vec<DetectionResult>> {
    let kept: Vec<&ComponentInstance> = proposals.iter().filter(|p| p.score >= threshold).collect();
    let ranked = rank_queries(model, dataset, board, &kept, templates)?;
    Ok(kept
        .iter()
        .zip(ranked)
        .filter_map(|(p, r)| {
            r.first().map(|&(c, s)| DetectionResult {
                board_id: board.board_id.clone(),
                instance_id: p.instance_id.clone(),
                bbox: p.bbox,
                category: dataset.categories[c].clone(),
                confidence: sigmoid(s),
            })
        })
        .collect())
}

/// Proposals → graph with templates → classification → mAP at IoU 0.5.
/// Boards without a proposal list are skipped and listed in the report.
pub fn run_pipeline_eval(
    dataset: &Dataset,
    boards: &[usize],
    model: &Model,
    plan: &TemplatePlan<'_>,
    score_threshold: f64,
) -> Result<EvalReport> {
    let mut provider = TemplateProvider::new(dataset, boards, plan)?;
    let mut predictions = Vec::new();
    let mut evaluated = Vec::new();
    let mut skipped = Vec::new();
    for &b in boards {
        let board = &dataset.boards[b];
        let Some(proposals) = &board.proposals else {
            log::warn!("board {} has no proposals; skipped", board.board_id);
            skipped.push(board.board_id.clone());
            continue;
        };
        let templates = provider.for_board(b)?;
        predictions.extend(detect_board(
            model,
            dataset,
            board,
            proposals,
            &templates,
            score_threshold,
        )?);
        evaluated.push(board);
    }
    let mut report = evaluate_detection_map(&predictions, &evaluated, 0.5);
    report.skipped_boards = skipped;
    Ok(report)
}

/// Detections for a single board using random on-board templates. Falls
/// back to the labelled components when the board has no proposals.
pub fn predict(
    board: &BoardRecord,
    model: &Model,
    seed: u64,
    score_threshold: f64,
) -> Result<Vec<DetectionResult>> {
    let dataset = Dataset::new(vec![board.clone()])?;
    let mut provider = TemplateProvider::new(&dataset, &[0], &TemplatePlan::on_board(seed))?;
    let templates = provider.for_board(0)?;
    let proposals = board.proposals.as_ref().unwrap_or(&board.instances);
    detect_board(
        model,
        &dataset,
        board,
        proposals,
        &templates,
        score_threshold,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, perfect_proposals, ExtraMode, SyntheticConfig};
    use crate::linalg::{LinearParams, Matrix};
    use crate::model::{BlockKind, ModelConfig};
    use crate::similarity::SimilarityMetric;

    fn det(board: &str, id: &str, cat: &str, bbox: [f64; 4], confidence: f64) -> DetectionResult {
        DetectionResult {
            board_id: board.into(),
            instance_id: id.into(),
            bbox: bbox.into(),
            category: cat.into(),
            confidence,
        }
    }

    fn gt_board(boxes: &[(&str, [f64; 4])]) -> BoardRecord {
        BoardRecord {
            board_id: "b".into(),
            width: 100,
            height: 100,
            instances: boxes
                .iter()
                .enumerate()
                .map(|(i, (c, bb))| ComponentInstance {
                    instance_id: format!("g{i}"),
                    category: c.to_string(),
                    bbox: (*bb).into(),
                    feature: vec![0.0],
                    score: 1.0,
                })
                .collect(),
            proposals: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_eq!(box_iou(&a, &BBox::new(1.0, 1.0, 3.0, 3.0)), 1.0 / 7.0);
    }

    #[test]
    fn single_perfect_detection() {
        let b = gt_board(&[("r", [0.0, 0.0, 10.0, 10.0])]);
        let r = evaluate_detection_map(
            &[det("b", "p", "r", [0.0, 0.0, 10.0, 10.0], 0.9)],
            &[&b],
            0.5,
        );
        assert_eq!(r.map, Some(1.0));
        assert_eq!(
            r.counts["r"],
            MatchCounts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn no_predictions_gives_zero() {
        let b = gt_board(&[("r", [0.0, 0.0, 10.0, 10.0])]);
        let r = evaluate_detection_map(&[], &[&b], 0.5);
        assert_eq!(r.map, Some(0.0));
        assert_eq!(r.counts["r"].fn_, 1);
    }

    #[test]
    fn false_positive_ranked_first() {
        // ranks: FP, TP, TP → precision 0, 1/2, 2/3; recall 0, 1/2, 1
        // envelope: 2/3 at both recall steps → AP = 2/3
        let b = gt_board(&[
            ("r", [0.0, 0.0, 10.0, 10.0]),
            ("r", [20.0, 20.0, 30.0, 30.0]),
        ]);
        let preds = [
            det("b", "p0", "r", [50.0, 50.0, 60.0, 60.0], 0.9),
            det("b", "p1", "r", [0.0, 0.0, 10.0, 10.0], 0.8),
            det("b", "p2", "r", [20.0, 20.0, 30.0, 30.0], 0.7),
        ];
        let r = evaluate_detection_map(&preds, &[&b], 0.5);
        assert!((r.per_category_ap["r"] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn duplicate_detection_counts_once() {
        let b = gt_board(&[("r", [0.0, 0.0, 10.0, 10.0])]);
        let preds = [
            det("b", "p0", "r", [0.0, 0.0, 10.0, 10.0], 0.9),
            det("b", "p1", "r", [0.0, 0.0, 10.0, 11.0], 0.8),
        ];
        let r = evaluate_detection_map(&preds, &[&b], 0.5);
        assert_eq!(
            r.counts["r"],
            MatchCounts {
                tp: 1,
                fp: 1,
                fn_: 0
            }
        );
        assert_eq!(r.per_category_ap["r"], 1.0);
    }

    #[test]
    fn categories_without_ground_truth_do_not_enter_map() {
        let b = gt_board(&[("r", [0.0, 0.0, 10.0, 10.0])]);
        let preds = [
            det("b", "p0", "r", [0.0, 0.0, 10.0, 10.0], 0.9),
            det("b", "p1", "x", [0.0, 0.0, 10.0, 10.0], 0.8),
        ];
        let r = evaluate_detection_map(&preds, &[&b], 0.5);
        assert_eq!(r.map, Some(1.0));
        assert_eq!(r.counts["x"].fp, 1);
        assert!(!r.per_category_ap.contains_key("x"));
    }

    fn identity_model(ds: &Dataset) -> Model {
        let d = ds.feature_dim;
        let mut m = Model::init(
            ModelConfig {
                feature_dim: d,
                extra: ExtraMode::None,
                block: BlockKind::None,
                depth: 1,
                loss: LossKind::Triplet,
                metric: SimilarityMetric::Cosine,
                categories: ds.categories.clone(),
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        m.params.similarity.phi_d = LinearParams::new(Matrix::identity(d), vec![0.0; d]).unwrap();
        m
    }

    #[test]
    fn degenerate_set_is_solved_by_identity_embedding() {
        let mut ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(6, 5, 16, 3)).unwrap();
        let model = identity_model(&ds);
        let boards: Vec<usize> = (0..ds.boards.len()).collect();
        for strategy in [
            TemplateStrategy::RandomOnBoard,
            TemplateStrategy::CentroidNn,
            TemplateStrategy::SilhouetteKmeans,
        ] {
            let plan = TemplatePlan {
                strategy,
                training_boards: &boards,
                seed: 1,
            };
            let r = evaluate_classification(&ds, &boards, &model, &plan).unwrap();
            assert_eq!(r.top1, Some(1.0), "{strategy:?}");
            assert!(r.top5 >= r.top1);
        }

        for b in &mut ds.boards {
            b.proposals = Some(perfect_proposals(b));
        }
        let r = run_pipeline_eval(&ds, &boards, &model, &TemplatePlan::on_board(2), 0.3).unwrap();
        assert_eq!(r.map, Some(1.0));
    }

    #[test]
    fn low_scoring_proposals_are_dropped() {
        let mut ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(2, 3, 8, 3)).unwrap();
        for b in &mut ds.boards {
            let mut p = perfect_proposals(b);
            p.iter_mut().for_each(|p| p.score = 0.29);
            b.proposals = Some(p);
        }
        let model = identity_model(&ds);
        let r = run_pipeline_eval(&ds, &[0, 1], &model, &TemplatePlan::on_board(0), 0.3).unwrap();
        assert_eq!(r.map, Some(0.0));
    }

    #[test]
    fn boards_without_proposals_are_reported() {
        let mut ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(2, 3, 8, 3)).unwrap();
        ds.boards[0].proposals = None;
        let model = identity_model(&ds);
        let r = run_pipeline_eval(&ds, &[0, 1], &model, &TemplatePlan::on_board(0), 0.3).unwrap();
        assert_eq!(r.skipped_boards, vec![ds.boards[0].board_id.clone()]);
    }

    #[test]
    fn single_category_board_is_always_right() {
        let b = gt_board(&[
            ("r", [0.0, 0.0, 1.0, 1.0]),
            ("r", [2.0, 2.0, 3.0, 3.0]),
            ("r", [4.0, 4.0, 5.0, 5.0]),
        ]);
        let ds = Dataset::new(vec![b]).unwrap();
        let model = identity_model(&ds);
        let r = evaluate_classification(&ds, &[0], &model, &TemplatePlan::on_board(0)).unwrap();
        assert_eq!(r.top1, Some(1.0));
        assert_eq!(r.queries, 2);
    }

    #[test]
    fn report_files_are_written() {
        let b = gt_board(&[("r", [0.0, 0.0, 10.0, 10.0])]);
        let r = evaluate_detection_map(
            &[det("b", "p", "r", [0.0, 0.0, 10.0, 10.0], 0.9)],
            &[&b],
            0.5,
        );
        let dir = tempfile::tempdir().unwrap();
        r.save_json(dir.path().join("r.json")).unwrap();
        r.save_ap_csv(dir.path().join("ap.csv")).unwrap();
        let back: EvalReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = fs::read_to_string(dir.path().join("ap.csv")).unwrap();
        assert_eq!(csv, "category,ap,tp,fp,fn\nr,1,1,0,0\n");
    }
}

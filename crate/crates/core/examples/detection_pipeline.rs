//! Scores detector proposals end to end: proposals below the score threshold
//! are dropped, the rest are classified against on-board templates and
//! matched to ground truth for per-category AP.

use boardgraph::ablation::benchmark_train_config;
use boardgraph::data::{generate_synthetic_dataset, make_cv_splits, SyntheticConfig};
use boardgraph::eval::{predict, run_pipeline_eval, TemplatePlan};
use boardgraph::train::{run_training, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic_dataset(&SyntheticConfig {
        n_boards: 30,
        ..SyntheticConfig::default()
    })?;
    let split = make_cv_splits(&ds, 3, None, &mut ChaCha8Rng::seed_from_u64(5))?;
    let fold = &split.folds[0];
    let cfg = TrainConfig {
        epochs: 30,
        ..benchmark_train_config()
    };
    let model = run_training(&ds, fold, &cfg)?.best_checkpoint.model;

    let test = ds.board_indices(&fold.test)?;
    let report = run_pipeline_eval(&ds, &test, &model, &TemplatePlan::on_board(0), 0.3)?;
    println!(
        "{:<14} {:>6} {:>4} {:>4} {:>4}",
        "category", "AP", "tp", "fp", "fn"
    );
    for (cat, ap) in &report.per_category_ap {
        let c = report.counts[cat];
        println!("{cat:<14} {ap:>6.3} {:>4} {:>4} {:>4}", c.tp, c.fp, c.fn_);
    }
    println!("mAP {:.3}", report.map.unwrap_or(0.0));

    let board = &ds.boards[test[0]];
    let detections = predict(board, &model, 0, 0.3)?;
    println!(
        "\n{} detections on {}; the five most confident:",
        detections.len(),
        board.board_id
    );
    let mut top = detections.clone();
    top.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    for d in top.iter().take(5) {
        println!(
            "  {:<10} {:<14} {:.3}",
            d.instance_id, d.category, d.confidence
        );
    }
    Ok(())
}

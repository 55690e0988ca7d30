//! Trains the GN similarity model on one cross-validation fold and scores the
//! held-out boards with on-board templates.
//!
//! ```text
//! cargo run --release --example train_fold -- 40
//! ```

use boardgraph::ablation::benchmark_train_config;
use boardgraph::data::{generate_synthetic_dataset, make_cv_splits, SyntheticConfig};
use boardgraph::eval::{evaluate_classification, TemplatePlan};
use boardgraph::train::{run_training_with, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(40), |s| s.parse())?;
    let ds = generate_synthetic_dataset(&SyntheticConfig::default())?;
    let split = make_cv_splits(&ds, 3, None, &mut ChaCha8Rng::seed_from_u64(1))?;
    let fold = &split.folds[0];

    let cfg = TrainConfig {
        epochs,
        ..benchmark_train_config()
    };
    let out = run_training_with(&ds, fold, &cfg, |m| {
        if m.epoch % 10 == 0 || m.epoch == 1 {
            println!(
                "epoch {:>3}  loss {:.4}  val top-1 {:.3}  lr {:.0e}",
                m.epoch, m.loss, m.eval_top1, m.lr
            );
        }
    })?;

    let test = ds.board_indices(&fold.test)?;
    let plan = TemplatePlan::on_board(7);
    for (name, ck) in [
        ("final", &out.final_checkpoint),
        ("best", &out.best_checkpoint),
    ] {
        let r = evaluate_classification(&ds, &test, &ck.model, &plan)?;
        println!(
            "{name:<5} (epoch {:>3}): test top-1 {:.3}, top-5 {:.3} over {} queries",
            ck.epoch,
            r.top1.unwrap_or(0.0),
            r.top5.unwrap_or(0.0),
            r.queries
        );
    }
    Ok(())
}

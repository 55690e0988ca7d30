//! Compares the three ways of choosing templates on the same trained model:
//! one random instance per category on the test board, the training instance
//! nearest each category centroid, and k-means centres picked by silhouette.

use boardgraph::ablation::benchmark_train_config;
use boardgraph::data::{
    generate_synthetic_dataset, make_cv_splits, SyntheticConfig, TemplateStrategy,
};
use boardgraph::eval::{evaluate_classification, TemplatePlan};
use boardgraph::train::{run_training, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ds = generate_synthetic_dataset(&SyntheticConfig {
        n_boards: 30,
        ..SyntheticConfig::default()
    })?;
    let split = make_cv_splits(&ds, 3, None, &mut ChaCha8Rng::seed_from_u64(3))?;
    let fold = &split.folds[0];
    let cfg = TrainConfig {
        epochs: 30,
        ..benchmark_train_config()
    };
    let out = run_training(&ds, fold, &cfg)?;
    let model = &out.best_checkpoint.model;

    let train = ds.board_indices(&fold.train)?;
    let test = ds.board_indices(&fold.test)?;
    for strategy in [
        TemplateStrategy::RandomOnBoard,
        TemplateStrategy::CentroidNn,
        TemplateStrategy::SilhouetteKmeans,
    ] {
        let plan = TemplatePlan {
            strategy,
            training_boards: &train,
            seed: 11,
        };
        let r = evaluate_classification(&ds, &test, model, &plan)?;
        println!(
            "{:<8} top-1 {:.3}  top-5 {:.3}",
            strategy.as_str(),
            r.top1.unwrap_or(0.0),
            r.top5.unwrap_or(0.0)
        );
    }
    Ok(())
}

//! Runs the ablation matrix on synthetic boards and prints mean accuracy per
//! variant.
//!
//! ```text
//! cargo run --release --example ablation_table -- --variants SPN-T-W-GN,SPN-T-A --seeds 1,2,3
//! ```

use boardgraph::ablation::{run_ablation, variant, AblationSettings, VARIANTS};
use clap::Parser;

#[derive(Parser)]
struct Args {
    /// Comma-separated variant names; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    boards: Option<usize>,
    #[arg(long)]
    offset_scale: Option<f64>,
    #[arg(long)]
    gain_spread: Option<f64>,
    #[arg(long)]
    contrast: Option<f64>,
    /// Also score the proposal pipeline (mAP).
    #[arg(long)]
    pipeline: bool,
    /// Evaluate the validation-best checkpoint rather than the last one.
    #[arg(long)]
    best: bool,
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    let variants = if args.variants.is_empty() {
        VARIANTS.to_vec()
    } else {
        args.variants
            .iter()
            .map(|n| variant(n).ok_or_else(|| format!("unknown variant {n}")))
            .collect::<Result<_, _>>()?
    };
    let mut settings = AblationSettings {
        data_seeds: args.seeds,
        with_pipeline: args.pipeline,
        use_best: args.best,
        ..AblationSettings::default()
    };
    if let Some(e) = args.epochs {
        settings.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        settings.train.lr = lr;
    }
    if let Some(p) = args.patience {
        settings.train.patience = p;
    }
    if let Some(b) = args.boards {
        settings.data.n_boards = b;
    }
    if let Some(o) = args.offset_scale {
        settings.data.offset_scale = o;
    }
    if let Some(g) = args.gain_spread {
        settings.data.gain_spread = g;
    }
    if let Some(c) = args.contrast {
        settings.data.contrast = c;
    }

    let (_, summary) = run_ablation(&settings, &variants, |r| {
        eprintln!(
            "{:<14} seed {} fold {}  top1 {:.3}  top5 {:.3}{}  ({:.1}s)",
            r.variant,
            r.data_seed,
            r.fold,
            r.top1,
            r.top5,
            r.map.map_or(String::new(), |m| format!("  mAP {m:.3}")),
            r.seconds
        );
    })?;
    println!("{:<14} {:>6} {:>6} {:>6}", "variant", "top1", "top5", "mAP");
    for s in summary {
        let map = s.mean_map.map_or("-".to_string(), |m| format!("{m:.3}"));
        println!(
            "{:<14} {:>6.3} {:>6.3} {:>6}",
            s.variant, s.mean_top1, s.mean_top5, map
        );
    }
    Ok(())
}

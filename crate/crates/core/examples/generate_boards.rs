//! Generates a synthetic board set, writes it as JSON and reads it back.
//!
//! ```text
//! cargo run --release --example generate_boards -- 20 /tmp/boards
//! ```

use boardgraph::data::{generate_synthetic_dataset, load_dataset, save_dataset, SyntheticConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let n_boards: usize = args.next().map_or(Ok(20), |s| s.parse())?;
    let dir = args.next().map_or_else(
        || std::env::temp_dir().join("boardgraph-boards"),
        Into::into,
    );

    let cfg = SyntheticConfig {
        n_boards,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic_dataset(&cfg)?;
    let paths = save_dataset(&dir, &ds)?;
    println!("wrote {} boards to {}", paths.len(), dir.display());

    // category frequencies follow a power law
    let mut counts = vec![0usize; ds.categories.len()];
    for b in 0..ds.boards.len() {
        for c in ds.instance_labels(b) {
            counts[c] += 1;
        }
    }
    for (name, n) in ds.categories.iter().zip(&counts) {
        println!("{name:<14} {n:>5}");
    }

    let back = load_dataset(&dir)?;
    assert_eq!(back.boards, ds.boards);
    println!(
        "round trip ok: {} boards, d = {}",
        back.boards.len(),
        back.feature_dim
    );
    Ok(())
}

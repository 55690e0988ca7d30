//! One GN block on a toy board: squared-ReLU attention is sparse, and nodes
//! that look alike end up attending to each other.

use boardgraph::blocks::{compute_edge_weights, gn_block_apply, BoardGraph, GnParams, NodeMeta};
use boardgraph::linalg::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), boardgraph::Error> {
    // two resistors, two capacitors and an odd one out
    let rows = [
        [1.0, 0.1, 0.0, 0.2],
        [0.9, 0.2, 0.1, 0.2],
        [0.0, 1.0, 0.8, 0.1],
        [0.1, 0.9, 0.9, 0.0],
        [0.5, 0.5, 0.0, 1.0],
    ];
    let meta = (0..rows.len())
        .map(|i| NodeMeta {
            board_id: "demo".into(),
            instance_id: format!("n{i}"),
            is_template: false,
            category: None,
        })
        .collect();
    let g = BoardGraph::new(Matrix::from_rows(&rows)?, meta)?;
    let params = GnParams::init(4, &mut ChaCha8Rng::seed_from_u64(1));

    let w = compute_edge_weights(&g, &params)?.w;
    println!("edge weights (rows sum to 1 or are empty):");
    for i in 0..w.rows() {
        let cells: Vec<String> = w.row(i).iter().map(|v| format!("{v:.3}")).collect();
        let zeros = w.row(i).iter().filter(|&&v| v == 0.0).count();
        println!("  {}   {zeros} zero", cells.join(" "));
    }

    let (refined, _) = gn_block_apply(&g, &params)?;
    println!("refined features:");
    for i in 0..refined.len() {
        let cells: Vec<String> = refined
            .node_features
            .row(i)
            .iter()
            .map(|v| format!("{v:6.3}"))
            .collect();
        println!("  {}", cells.join(" "));
    }
    Ok(())
}

//! Checks every block/loss pairing against central finite differences.

use boardgraph::model::{gradcheck, BlockKind, LossKind};

fn main() -> Result<(), boardgraph::Error> {
    let blocks = [BlockKind::None, BlockKind::Nlnn, BlockKind::Gn];
    let losses = [LossKind::Triplet, LossKind::Bce, LossKind::Ce];
    println!(
        "{:<6} {:<8} {:>8} {:>12}",
        "block", "loss", "params", "max rel err"
    );
    for block in blocks {
        for loss in losses {
            let r = gradcheck(block, loss, 16, 8, 0, 1e-4)?;
            println!(
                "{:<6} {:<8} {:>8} {:>12.2e}",
                block.as_str(),
                loss.as_str(),
                r.num_params,
                r.max_error()
            );
        }
    }
    Ok(())
}

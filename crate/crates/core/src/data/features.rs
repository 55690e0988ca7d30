use serde::{Deserialize, Serialize};

use super::{BBox, BoardRecord, ComponentInstance};
use crate::error::{Error, Result};

pub const GEOMETRY_DIM: usize = 6;

/// Extra per-node features appended to the visual feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExtraMode {
    #[default]
    None,
    Geometry,
    Label,
}

impl ExtraMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExtraMode::None => "none",
            ExtraMode::Geometry => "geometry",
            ExtraMode::Label => "label",
        }
    }
}

/// Number of appended dimensions for `mode` with `n_categories` classes.
pub fn extra_dim(mode: ExtraMode, n_categories: usize) -> usize {
    match mode {
        ExtraMode::None => 0,
        ExtraMode::Geometry => GEOMETRY_DIM,
        ExtraMode::Label => n_categories + 1,
    }
}

/// `[cx/W, cy/H, w/W, h/H, ln(w/h), √(w·h)/√(W·H)]`
pub fn geometry_features(bbox: &BBox, board_width: f64, board_height: f64) -> [f64; GEOMETRY_DIM] {
    let w = bbox.width();
    let h = bbox.height();
    [
        (bbox.x1 + bbox.x2) / 2.0 / board_width,
        (bbox.y1 + bbox.y2) / 2.0 / board_height,
        w / board_width,
        h / board_height,
        (w / h).ln(),
        (w * h).sqrt() / (board_width * board_height).sqrt(),
    ]
}

/// Appends the extra features for `mode` to `base`.
///
/// `label` is the category id of a labelled (template) node, `None` for a
/// query. Label mode appends a one-hot of width `n_categories` followed by a
/// labelled indicator.
pub fn augment(
    base: &[f64],
    geometry: &[f64; GEOMETRY_DIM],
    mode: ExtraMode,
    label: Option<usize>,
    n_categories: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(base.len() + extra_dim(mode, n_categories));
    out.extend_from_slice(base);
    match mode {
        ExtraMode::None => {}
        ExtraMode::Geometry => out.extend_from_slice(geometry),
        ExtraMode::Label => {
            let start = out.len();
            out.resize(start + n_categories + 1, 0.0);
            if let Some(c) = label {
                if c >= n_categories {
                    return Err(Error::Label(format!(
                        "category id {c} out of range for {n_categories} classes"
                    )));
                }
                out[start + c] = 1.0;
                out[start + n_categories] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Node feature for `instance` on `board`. Labelled nodes carry their
/// category one-hot under [`ExtraMode::Label`].
pub fn augment_node_features(
    instance: &ComponentInstance,
    mode: ExtraMode,
    board: &BoardRecord,
    categories: &[String],
    labeled: bool,
) -> Result<Vec<f64>> {
    let label = if labeled && mode == ExtraMode::Label {
        let idx = categories
            .iter()
            .position(|c| *c == instance.category)
            .ok_or_else(|| Error::Label(format!("unknown category '{}'", instance.category)))?;
        Some(idx)
    } else {
        None
    };
    let geom = geometry_features(&instance.bbox, board.width as f64, board.height as f64);
    augment(&instance.feature, &geom, mode, label, categories.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn board() -> BoardRecord {
        BoardRecord {
            board_id: "b".into(),
            width: 400,
            height: 200,
            instances: vec![],
            proposals: None,
        }
    }

    fn inst(bbox: BBox) -> ComponentInstance {
        ComponentInstance {
            instance_id: "i".into(),
            category: "cap".into(),
            bbox,
            feature: vec![1.0, 2.0, 3.0],
            score: 1.0,
        }
    }

    #[test]
    fn none_mode_is_identity() {
        let cats = vec!["cap".to_string()];
        let f = augment_node_features(
            &inst(BBox::new(0., 0., 1., 1.)),
            ExtraMode::None,
            &board(),
            &cats,
            true,
        )
        .unwrap();
        assert_eq!(f, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn full_board_geometry() {
        let g = geometry_features(&BBox::new(0.0, 0.0, 400.0, 200.0), 400.0, 200.0);
        assert_eq!(g, [0.5, 0.5, 1.0, 1.0, 2f64.ln(), 1.0]);
    }

    #[test]
    fn label_mode_query_and_template() {
        let cats = vec!["cap".to_string(), "res".to_string()];
        let b = board();
        let i = inst(BBox::new(0., 0., 10., 10.));
        let q = augment_node_features(&i, ExtraMode::Label, &b, &cats, false).unwrap();
        assert_eq!(&q[3..], &[0.0, 0.0, 0.0]);
        let t = augment_node_features(&i, ExtraMode::Label, &b, &cats, true).unwrap();
        assert_eq!(&t[3..], &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn unknown_label_is_error() {
        let cats = vec!["res".to_string()];
        let r = augment_node_features(
            &inst(BBox::new(0., 0., 1., 1.)),
            ExtraMode::Label,
            &board(),
            &cats,
            true,
        );
        assert!(matches!(r, Err(Error::Label(_))));
    }

    #[test]
    fn output_width_per_mode() {
        let g = [0.0; GEOMETRY_DIM];
        for (mode, extra) in [
            (ExtraMode::None, 0),
            (ExtraMode::Geometry, 6),
            (ExtraMode::Label, 13),
        ] {
            assert_eq!(
                augment(&[0.0; 64], &g, mode, None, 12).unwrap().len(),
                64 + extra
            );
        }
    }
}

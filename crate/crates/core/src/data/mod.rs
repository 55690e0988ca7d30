//! Boards, their annotation files, and everything that draws samples from them.

mod features;
mod sampler;
mod split;
mod synth;
mod templates;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use features::{
    augment, augment_node_features, extra_dim, geometry_features, ExtraMode, GEOMETRY_DIM,
};
pub use sampler::{sample_training_batch, BatchMode, BatchSampler, SampledBatch};
pub use split::{load_split, make_cv_splits, save_split, verify_coverage, Fold, SplitConfig};
pub use synth::{
    generate_synthetic_dataset, perfect_proposals, ProposalConfig, SyntheticConfig, CATEGORY_NAMES,
};
pub use templates::{
    kmeans, select_templates, silhouette_score, Template, TemplateSource, TemplateStrategy,
};

/// Axis-aligned box in pixel coordinates, serialised as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_well_ordered(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        Self { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// A labelled component or an unlabelled proposal.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentInstance {
    pub instance_id: String,
    /// Empty for proposals.
    pub category: String,
    pub bbox: BBox,
    pub feature: Vec<f64>,
    /// 1.0 for ground truth, the proposer's confidence otherwise.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoardRecord {
    pub board_id: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<ComponentInstance>,
    pub proposals: Option<Vec<ComponentInstance>>,
}

impl BoardRecord {
    pub fn feature_dim(&self) -> Option<usize> {
        self.instances
            .iter()
            .chain(self.proposals.iter().flatten())
            .map(|i| i.feature.len())
            .next()
    }

    /// Distinct categories on this board, sorted by name.
    pub fn categories(&self) -> BTreeSet<&str> {
        self.instances.iter().map(|i| i.category.as_str()).collect()
    }

    fn validate(&self, feature_dim: usize) -> std::result::Result<(), String> {
        let w = self.width as f64;
        let h = self.height as f64;
        if self.width == 0 || self.height == 0 {
            return Err(format!("board {} has zero size", self.board_id));
        }
        let gt = self.instances.iter().map(|i| ("component", i));
        let props = self.proposals.iter().flatten().map(|i| ("proposal", i));
        for (kind, inst) in gt.chain(props) {
            let b = inst.bbox;
            let id = &inst.instance_id;
            if !b.is_well_ordered() {
                return Err(format!(
                    "{kind} '{id}': degenerate bbox {:?}",
                    <[f64; 4]>::from(b)
                ));
            }
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(format!("{kind} '{id}': bbox outside the {w}x{h} board"));
            }
            if inst.feature.len() != feature_dim {
                return Err(format!(
                    "{kind} '{id}': feature dimension {} does not match {feature_dim}",
                    inst.feature.len()
                ));
            }
            if !inst.feature.iter().all(|v| v.is_finite()) {
                return Err(format!("{kind} '{id}': non-finite feature"));
            }
            if !(0.0..=1.0).contains(&inst.score) {
                return Err(format!(
                    "{kind} '{id}': score {} outside [0, 1]",
                    inst.score
                ));
            }
        }
        if let Some(inst) = self.instances.iter().find(|i| i.category.is_empty()) {
            return Err(format!("component '{}': empty category", inst.instance_id));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct ComponentEntry {
    id: String,
    category: String,
    bbox: BBox,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ProposalEntry {
    id: String,
    bbox: BBox,
    score: f64,
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoardFile {
    board_id: String,
    width: u32,
    height: u32,
    feature_dim: usize,
    components: Vec<ComponentEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    proposals: Option<Vec<ProposalEntry>>,
}

impl BoardFile {
    fn into_record(self) -> (usize, BoardRecord) {
        let instances = self
            .components
            .into_iter()
            .map(|c| ComponentInstance {
                instance_id: c.id,
                category: c.category,
                bbox: c.bbox,
                feature: c.feature,
                score: 1.0,
            })
            .collect();
        let proposals = self.proposals.map(|ps| {
            ps.into_iter()
                .map(|p| ComponentInstance {
                    instance_id: p.id,
                    category: String::new(),
                    bbox: p.bbox,
                    feature: p.feature,
                    score: p.score,
                })
                .collect()
        });
        (
            self.feature_dim,
            BoardRecord {
                board_id: self.board_id,
                width: self.width,
                height: self.height,
                instances,
                proposals,
            },
        )
    }

    fn from_record(b: &BoardRecord, feature_dim: usize) -> Self {
        Self {
            board_id: b.board_id.clone(),
            width: b.width,
            height: b.height,
            feature_dim,
            components: b
                .instances
                .iter()
                .map(|i| ComponentEntry {
                    id: i.instance_id.clone(),
                    category: i.category.clone(),
                    bbox: i.bbox,
                    feature: i.feature.clone(),
                })
                .collect(),
            proposals: b.proposals.as_ref().map(|ps| {
                ps.iter()
                    .map(|p| ProposalEntry {
                        id: p.instance_id.clone(),
                        bbox: p.bbox,
                        score: p.score,
                        feature: p.feature.clone(),
                    })
                    .collect()
            }),
        }
    }
}

/// Parses and validates one board annotation file.
pub fn load_board(path: impl AsRef<Path>) -> Result<BoardRecord> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_board(&text, path)
}

fn parse_board(text: &str, path: &Path) -> Result<BoardRecord> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    let file: BoardFile = serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    let (dim, record) = file.into_record();
    record.validate(dim).map_err(parse_err)?;
    Ok(record)
}

pub fn save_board(path: impl AsRef<Path>, board: &BoardRecord) -> Result<()> {
    let path = path.as_ref();
    let dim = board.feature_dim().unwrap_or(0);
    let mut text = serde_json::to_string(&BoardFile::from_record(board, dim))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A collection of boards sharing one feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub boards: Vec<BoardRecord>,
    /// Every ground-truth category name, sorted. Indices into this list are
    /// the category ids used throughout training and evaluation.
    pub categories: Vec<String>,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(boards: Vec<BoardRecord>) -> Result<Self> {
        let feature_dim = boards
            .iter()
            .find_map(BoardRecord::feature_dim)
            .ok_or_else(|| Error::Config("dataset has no features".into()))?;
        let mut seen = BTreeSet::new();
        for b in &boards {
            if !seen.insert(b.board_id.as_str()) {
                return Err(Error::Config(format!("duplicate board id {}", b.board_id)));
            }
            b.validate(feature_dim).map_err(|message| Error::Parse {
                path: PathBuf::from(&b.board_id),
                message,
            })?;
        }
        let categories: BTreeSet<String> = boards
            .iter()
            .flat_map(|b| b.instances.iter().map(|i| i.category.clone()))
            .collect();
        Ok(Self {
            boards,
            categories: categories.into_iter().collect(),
            feature_dim,
        })
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories
            .binary_search_by(|c| c.as_str().cmp(name))
            .ok()
    }

    pub fn board_index(&self, board_id: &str) -> Option<usize> {
        self.boards.iter().position(|b| b.board_id == board_id)
    }

    pub fn board_indices(&self, ids: &[String]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.board_index(id)
                    .ok_or_else(|| Error::Config(format!("unknown board id {id}")))
            })
            .collect()
    }

    /// Category id of every ground-truth instance, per board.
    pub fn instance_labels(&self, board: usize) -> Vec<usize> {
        self.boards[board]
            .instances
            .iter()
            .map(|i| {
                self.category_index(&i.category)
                    .expect("category indexed at construction")
            })
            .collect()
    }

    /// Instance indices grouped by category id, for one board.
    pub fn instances_by_category(&self, board: usize) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, c) in self.instance_labels(board).into_iter().enumerate() {
            out.entry(c).or_default().push(i);
        }
        out
    }

    /// Categories present on any of `boards`.
    pub fn categories_on(&self, boards: &[usize]) -> BTreeSet<usize> {
        boards
            .iter()
            .flat_map(|&b| self.instance_labels(b))
            .collect()
    }
}

/// Loads every board file in `dir` (files ending in `.json`, excluding
/// manifests), in file-name order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".json") && !name.ends_with("manifest.json")
        })
        .collect();
    paths.sort();
    let boards = paths.iter().map(load_board).collect::<Result<Vec<_>>>()?;
    if boards.is_empty() {
        return Err(Error::Config(format!(
            "no board files in {}",
            dir.display()
        )));
    }
    let dims: BTreeSet<usize> = boards.iter().filter_map(BoardRecord::feature_dim).collect();
    if dims.len() > 1 {
        return Err(Error::Parse {
            path: dir.to_path_buf(),
            message: format!("mixed feature dimensions {dims:?}"),
        });
    }
    Dataset::new(boards)
}

/// Writes one `<board_id>.json` per board into `dir`, returning the paths.
pub fn save_dataset(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    dataset
        .boards
        .iter()
        .map(|b| {
            let path = dir.join(format!("{}.json", b.board_id));
            save_board(&path, b)?;
            Ok(path)
        })
        .collect()
}

//! The full learnable model: optional refinement blocks followed by the
//! similarity head (or a classifier head for the cross-entropy baseline).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockCache, GnParams, NlnnParams};
use crate::data::{extra_dim, ExtraMode};
use crate::error::{Error, Result};
use crate::linalg::{finite_difference_gradcheck, LinearParams, Matrix};
use crate::similarity::{
    bce_pair_loss, classifier_head_loss, triplet_loss, LossReport, SimilarityMetric,
    SimilarityParams, TripletBatch,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    None,
    Nlnn,
    #[default]
    Gn,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::None => "none",
            BlockKind::Nlnn => "nlnn",
            BlockKind::Gn => "gn",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Triplet,
    Bce,
    Ce,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Triplet => "triplet",
            LossKind::Bce => "bce",
            LossKind::Ce => "ce",
        }
    }
}

/// Architecture choices; every parameter shape follows from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Raw visual feature dimension `d`.
    pub feature_dim: usize,
    pub extra: ExtraMode,
    pub block: BlockKind,
    /// Stacked block applications; ignored for `BlockKind::None`.
    pub depth: usize,
    pub loss: LossKind,
    pub metric: SimilarityMetric,
    /// Category names; their order defines class ids.
    pub categories: Vec<String>,
}

impl ModelConfig {
    /// Node feature dimension `d'` after extra features are appended.
    pub fn input_dim(&self) -> usize {
        self.feature_dim + extra_dim(self.extra, self.categories.len())
    }

    pub fn block_count(&self) -> usize {
        match self.block {
            BlockKind::None => 0,
            _ => self.depth,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockParams {
    Gn(GnParams),
    Nlnn(NlnnParams),
}

impl BlockParams {
    fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        match self {
            BlockParams::Gn(p) => p.forward(x),
            BlockParams::Nlnn(p) => p.forward(x),
        }
    }

    fn backward(&self, cache: &BlockCache, d_out: &Matrix) -> Result<(Matrix, BlockParams)> {
        Ok(match self {
            BlockParams::Gn(p) => {
                let (dx, g) = p.backward(cache, d_out)?;
                (dx, BlockParams::Gn(g))
            }
            BlockParams::Nlnn(p) => {
                let (dx, g) = p.backward(cache, d_out)?;
                (dx, BlockParams::Nlnn(g))
            }
        })
    }

    fn zeros_like(&self) -> Self {
        match self {
            BlockParams::Gn(p) => BlockParams::Gn(p.zeros_like()),
            BlockParams::Nlnn(p) => BlockParams::Nlnn(p.zeros_like()),
        }
    }

    fn named_layers(&self) -> Vec<(&'static str, &LinearParams)> {
        match self {
            BlockParams::Gn(p) => p.named_layers(),
            BlockParams::Nlnn(p) => p.named_layers(),
        }
    }

    fn named_layers_mut(&mut self) -> Vec<(&'static str, &mut LinearParams)> {
        match self {
            BlockParams::Gn(p) => p.named_layers_mut(),
            BlockParams::Nlnn(p) => p.named_layers_mut(),
        }
    }
}

/// Every learnable weight. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
    pub similarity: SimilarityParams,
    /// Present only when trained with cross-entropy.
    pub head: Option<LinearParams>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = config.input_dim();
        if d == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if config.block != BlockKind::None && config.depth == 0 {
            return Err(Error::Config("block depth must be at least 1".into()));
        }
        let blocks = (0..config.block_count())
            .map(|_| match config.block {
                BlockKind::Gn => BlockParams::Gn(GnParams::init(d, rng)),
                _ => BlockParams::Nlnn(NlnnParams::init(d, rng)),
            })
            .collect();
        let similarity = SimilarityParams::init(d, config.metric, rng);
        let head = match config.loss {
            LossKind::Ce => {
                if config.categories.is_empty() {
                    return Err(Error::Config(
                        "classifier head needs at least one category".into(),
                    ));
                }
                Some(LinearParams::init(d, config.categories.len(), rng))
            }
            _ => None,
        };
        Ok(Self {
            blocks,
            similarity,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            similarity: self.similarity.zeros_like(),
            head: self.head.as_ref().map(LinearParams::zeros_like),
        }
    }

    /// Layers with stable dotted names, e.g. `block0.phi_g` or `sim.phi_d`.
    pub fn named_layers(&self) -> Vec<(String, &LinearParams)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.named_layers()
                    .into_iter()
                    .map(|(n, l)| (format!("block{i}.{n}"), l)),
            );
        }
        out.push(("sim.phi_d".to_string(), &self.similarity.phi_d));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn named_layers_mut(&mut self) -> Vec<(String, &mut LinearParams)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.named_layers_mut()
                    .into_iter()
                    .map(|(n, l)| (format!("block{i}.{n}"), l)),
            );
        }
        out.push(("sim.phi_d".to_string(), &mut self.similarity.phi_d));
        if let Some(h) = &mut self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_layers()
            .iter()
            .map(|(_, l)| l.num_params())
            .sum()
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.named_layers()
            .into_iter()
            .flat_map(|(_, l)| l.flat_values())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(Error::shape("flat parameters", expected, values.len()));
        }
        let mut src = values.iter();
        for (_, layer) in self.named_layers_mut() {
            for (dst, v) in layer.flat_values_mut().zip(&mut src) {
                *dst = *v;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named_layers().iter().all(|(_, l)| l.is_finite())
    }
}

/// Gradient of one batch: parameters plus the model input.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub report: LossReport,
    pub params: ModelParams,
    pub d_input: Matrix,
}

/// Fixed per-dimension rescaling of the visual features, fitted on the
/// training boards. Each dimension is divided by its root mean square, so
/// inputs reach unit scale while keeping their sign and mutual correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    /// Reciprocal root mean square; 1 for dimensions that are always zero.
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut sq = vec![0.0; dim];
        for f in features {
            if f.len() != dim {
                return Err(Error::shape("InputNorm::fit", dim, f.len()));
            }
            n += 1;
            for (acc, &v) in sq.iter_mut().zip(f) {
                *acc += v * v;
            }
        }
        if n == 0 {
            return Err(Error::Config(
                "no features to fit the input normaliser on".into(),
            ));
        }
        let scale = sq
            .iter()
            .map(|q| {
                let ms = q / n as f64;
                if ms > 1e-24 {
                    1.0 / ms.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, feature: &[f64]) -> Vec<f64> {
        feature
            .iter()
            .zip(&self.scale)
            .map(|(v, s)| v * s)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Applied to raw visual features before extras are appended.
    pub input_norm: Option<InputNorm>,
}

struct GroupCache {
    rows: Vec<usize>,
    caches: Vec<BlockCache>,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self {
            config,
            params,
            input_norm: None,
        })
    }

    /// A raw visual feature as the network sees it.
    pub fn prepare_feature(&self, feature: &[f64]) -> Vec<f64> {
        match &self.input_norm {
            Some(norm) => norm.apply(feature),
            None => feature.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    /// Applies the block stack to the nodes of one board graph.
    pub fn refine(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for b in &self.params.blocks {
            h = b.forward(&h)?.0;
        }
        Ok(h)
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape("model input", self.input_dim(), x.cols()));
        }
        Ok(())
    }

    /// Refines each board's rows as a separate graph; rows stay in place.
    fn refine_groups(&self, x: &Matrix, board_ids: &[usize]) -> Result<(Matrix, Vec<GroupCache>)> {
        self.check_input(x)?;
        if self.params.blocks.is_empty() {
            return Ok((x.clone(), Vec::new()));
        }
        let mut out = Matrix::zeros(x.rows(), x.cols());
        let mut groups = Vec::new();
        for rows in group_rows(board_ids) {
            let mut h = x.select_rows(&rows);
            let mut caches = Vec::with_capacity(self.params.blocks.len());
            for b in &self.params.blocks {
                let (next, cache) = b.forward(&h)?;
                caches.push(cache);
                h = next;
            }
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(h.row(k));
            }
            groups.push(GroupCache { rows, caches });
        }
        Ok((out, groups))
    }

    /// Loss and gradients for a batch whose `features` are model inputs
    /// (already augmented to `d'`). Rows sharing a board id form one graph.
    pub fn batch_gradient(&self, batch: &TripletBatch) -> Result<BatchGradient> {
        if batch.board_ids.len() != batch.features.rows() {
            return Err(Error::shape(
                "batch board ids",
                batch.features.rows(),
                batch.board_ids.len(),
            ));
        }
        let (refined, groups) = self.refine_groups(&batch.features, &batch.board_ids)?;
        let refined_batch = TripletBatch {
            features: refined,
            categories: batch.categories.clone(),
            board_ids: batch.board_ids.clone(),
            margin: batch.margin,
        };
        let mut grads = self.params.zeros_like();
        let (report, d_refined) = match self.config.loss {
            LossKind::Triplet | LossKind::Bce => {
                let out = if self.config.loss == LossKind::Triplet {
                    triplet_loss(&refined_batch, &self.params.similarity)?
                } else {
                    bce_pair_loss(&refined_batch, &self.params.similarity)?
                };
                grads.similarity = out.grads;
                (out.report, out.d_features)
            }
            LossKind::Ce => {
                let head = self.params.head.as_ref().ok_or_else(|| {
                    Error::Config("cross-entropy model has no classifier head".into())
                })?;
                let out = classifier_head_loss(&refined_batch, head)?;
                grads.head = Some(out.grads);
                (out.report, out.d_features)
            }
        };

        let d_input = if groups.is_empty() {
            d_refined
        } else {
            let mut d_input = Matrix::zeros(d_refined.rows(), d_refined.cols());
            for g in &groups {
                let mut d = d_refined.select_rows(&g.rows);
                for (k, (b, cache)) in self.params.blocks.iter().zip(&g.caches).enumerate().rev() {
                    let (dx, gb) = b.backward(cache, &d)?;
                    accumulate_block(&mut grads.blocks[k], &gb);
                    d = dx;
                }
                for (k, &r) in g.rows.iter().enumerate() {
                    d_input.row_mut(r).copy_from_slice(d.row(k));
                }
            }
            d_input
        };
        Ok(BatchGradient {
            report,
            params: grads,
            d_input,
        })
    }
}

/// Outcome of [`gradcheck`]: worst relative errors of the analytic
/// gradients against central finite differences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params_error: f64,
    pub input_error: f64,
    pub num_params: usize,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.params_error.max(self.input_error)
    }
}

/// Checks a freshly initialised model on one random board of `nodes` nodes
/// with `dim`-wide inputs. Labels cycle over up to three categories so that
/// every category appears at least twice.
pub fn gradcheck(
    block: BlockKind,
    loss: LossKind,
    dim: usize,
    nodes: usize,
    seed: u64,
    eps: f64,
) -> Result<GradcheckReport> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    if dim == 0 || nodes < 4 {
        return Err(Error::Config(format!(
            "gradcheck needs dim ≥ 1 and at least 4 nodes, got dim {dim}, {nodes} nodes"
        )));
    }
    let n_cat = (nodes / 2).min(3);
    let config = ModelConfig {
        feature_dim: dim,
        extra: ExtraMode::None,
        block,
        depth: 1,
        loss,
        metric: SimilarityMetric::Dot,
        categories: (0..n_cat).map(|c| format!("c{c}")).collect(),
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = Model::init(config, &mut rng)?;
    let data = (0..nodes * dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let batch = TripletBatch {
        features: Matrix::from_vec(nodes, dim, data)?,
        categories: (0..nodes).map(|i| i % n_cat).collect(),
        board_ids: vec![0; nodes],
        margin: 1.0,
    };

    let theta = model.params.flat_values();
    let params_error = finite_difference_gradcheck(
        |v: &[f64]| {
            let mut m = model.clone();
            m.params.set_flat_values(v)?;
            let g = m.batch_gradient(&batch)?;
            Ok((g.report.loss, g.params.flat_values()))
        },
        &theta,
        eps,
    )?;
    let x0 = batch.features.as_slice().to_vec();
    let input_error = finite_difference_gradcheck(
        |v: &[f64]| {
            let mut b = batch.clone();
            b.features.as_mut_slice().copy_from_slice(v);
            let g = model.batch_gradient(&b)?;
            Ok((g.report.loss, g.d_input.into_vec()))
        },
        &x0,
        eps,
    )?;
    Ok(GradcheckReport {
        params_error,
        input_error,
        num_params: theta.len(),
    })
}

fn accumulate_block(acc: &mut BlockParams, g: &BlockParams) {
    for ((_, a), (_, b)) in acc.named_layers_mut().into_iter().zip(g.named_layers()) {
        a.weight
            .add_assign(&b.weight)
            .expect("congruent block gradients");
        for (x, y) in a.bias.iter_mut().zip(&b.bias) {
            *x += y;
        }
    }
}

/// Row indices grouped by board, groups ordered by first appearance.
fn group_rows(board_ids: &[usize]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut groups: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for (r, &b) in board_ids.iter().enumerate() {
        groups
            .entry(b)
            .or_insert_with(|| {
                order.push(b);
                Vec::new()
            })
            .push(r);
    }
    order
        .into_iter()
        .map(|b| groups.remove(&b).expect("grouped"))
        .collect()
}

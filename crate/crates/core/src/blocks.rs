//! Feature refinement over a per-board graph.
//!
//! Every node of a [`BoardGraph`] is one component (or proposal) on a single
//! board. The graph is dense: edge weights are predicted from node pairs and
//! normalised with squared ReLU, which leaves many edges at exactly zero.
//!
//! Two block variants share one implementation:
//!
//! * [`GnParams`]: global, edge and node updates. The global feature is the
//!   mean of the embedded nodes and is fed into every node update.
//! * [`NlnnParams`]: the same edge and node updates without the global feature.
//!
//! Forward passes run on the nodes sorted into a canonical order (by feature
//! value) and map the result back, so reordering the input nodes reorders the
//! output bit-for-bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{LinearParams, Matrix};

/// Width of the embeddings inside a block for node dimension `d`.
///
/// Equal to `d/2` for even `d`; odd widths round up.
#[inline]
pub fn half_dim(d: usize) -> usize {
    d.div_ceil(2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMeta {
    pub board_id: String,
    pub instance_id: String,
    pub is_template: bool,
    pub category: Option<usize>,
}

/// Nodes of one board.
#[derive(Clone, Debug, PartialEq)]
pub struct BoardGraph {
    pub node_features: Matrix,
    pub node_meta: Vec<NodeMeta>,
}

impl BoardGraph {
    pub fn new(node_features: Matrix, node_meta: Vec<NodeMeta>) -> Result<Self> {
        if node_features.rows() == 0 {
            return Err(Error::EmptyGraph);
        }
        if node_meta.len() != node_features.rows() {
            return Err(Error::shape(
                "BoardGraph",
                node_features.rows(),
                node_meta.len(),
            ));
        }
        if let Some(first) = node_meta.first() {
            if let Some(other) = node_meta.iter().find(|m| m.board_id != first.board_id) {
                return Err(Error::Config(format!(
                    "graph mixes boards {} and {}",
                    first.board_id, other.board_id
                )));
            }
        }
        Ok(Self {
            node_features,
            node_meta,
        })
    }

    pub fn len(&self) -> usize {
        self.node_features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.node_features.cols()
    }

    /// Node `i` of the result is node `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            node_features: self.node_features.select_rows(perm),
            node_meta: perm.iter().map(|&p| self.node_meta[p].clone()).collect(),
        }
    }
}

/// Normalised (`w`) and raw (`w_hat`) pairwise edge scores.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeightMatrix {
    pub w: Matrix,
    pub w_hat: Matrix,
}

/// Squared-ReLU row normalisation. Rows without a positive score are zero.
pub fn normalize_edge_scores(w_hat: &Matrix) -> Matrix {
    let mut w = Matrix::zeros(w_hat.rows(), w_hat.cols());
    for i in 0..w_hat.rows() {
        let row = w.row_mut(i);
        let mut total = 0.0;
        for (dst, &s) in row.iter_mut().zip(w_hat.row(i)) {
            let r = s.max(0.0);
            *dst = r * r;
            total += *dst;
        }
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    w
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnParams {
    pub phi_g: LinearParams,
    pub phi_e: LinearParams,
    pub psi_1: LinearParams,
    pub psi_2: LinearParams,
    pub phi_n: LinearParams,
}

impl GnParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let h = half_dim(dim);
        Self {
            phi_g: LinearParams::init(dim, h, rng),
            phi_e: LinearParams::init(dim, h, rng),
            psi_1: LinearParams::init(dim, h, rng),
            psi_2: LinearParams::init(dim, h, rng),
            phi_n: LinearParams::init(dim + 2 * h, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_n.out_dim()
    }

    fn layers(&self) -> Layers<'_> {
        Layers {
            phi_g: Some(&self.phi_g),
            phi_e: &self.phi_e,
            psi_1: &self.psi_1,
            psi_2: &self.psi_2,
            phi_n: &self.phi_n,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi_g: self.phi_g.zeros_like(),
            phi_e: self.phi_e.zeros_like(),
            psi_1: self.psi_1.zeros_like(),
            psi_2: self.psi_2.zeros_like(),
            phi_n: self.phi_n.zeros_like(),
        }
    }

    pub fn named_layers(&self) -> Vec<(&'static str, &LinearParams)> {
        vec![
            ("phi_g", &self.phi_g),
            ("phi_e", &self.phi_e),
            ("psi_1", &self.psi_1),
            ("psi_2", &self.psi_2),
            ("phi_n", &self.phi_n),
        ]
    }

    pub fn named_layers_mut(&mut self) -> Vec<(&'static str, &mut LinearParams)> {
        vec![
            ("phi_g", &mut self.phi_g),
            ("phi_e", &mut self.phi_e),
            ("psi_1", &mut self.psi_1),
            ("psi_2", &mut self.psi_2),
            ("phi_n", &mut self.phi_n),
        ]
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = half_dim(d);
        check_layer("phi_g", &self.phi_g, d, h)?;
        check_layer("phi_e", &self.phi_e, d, h)?;
        check_layer("psi_1", &self.psi_1, d, h)?;
        check_layer("psi_2", &self.psi_2, d, h)?;
        check_layer("phi_n", &self.phi_n, d + 2 * h, d)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        self.validate()?;
        block_forward(&self.layers(), x)
    }

    /// Returns `dL/dx` and the parameter gradients.
    pub fn backward(&self, cache: &BlockCache, d_out: &Matrix) -> Result<(Matrix, GnParams)> {
        let mut grads = self.zeros_like();
        let dx = {
            let mut g = LayersMut {
                phi_g: Some(&mut grads.phi_g),
                phi_e: &mut grads.phi_e,
                psi_1: &mut grads.psi_1,
                psi_2: &mut grads.psi_2,
                phi_n: &mut grads.phi_n,
            };
            block_backward(&self.layers(), cache, d_out, &mut g)?
        };
        Ok((dx, grads))
    }
}

/// Block parameters without the global embedding. `phi_n` maps
/// `d + half_dim(d)` inputs back to `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NlnnParams {
    pub phi_e: LinearParams,
    pub psi_1: LinearParams,
    pub psi_2: LinearParams,
    pub phi_n: LinearParams,
}

impl NlnnParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let h = half_dim(dim);
        Self {
            phi_e: LinearParams::init(dim, h, rng),
            psi_1: LinearParams::init(dim, h, rng),
            psi_2: LinearParams::init(dim, h, rng),
            phi_n: LinearParams::init(dim + h, dim, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.phi_n.out_dim()
    }

    fn layers(&self) -> Layers<'_> {
        Layers {
            phi_g: None,
            phi_e: &self.phi_e,
            psi_1: &self.psi_1,
            psi_2: &self.psi_2,
            phi_n: &self.phi_n,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            phi_e: self.phi_e.zeros_like(),
            psi_1: self.psi_1.zeros_like(),
            psi_2: self.psi_2.zeros_like(),
            phi_n: self.phi_n.zeros_like(),
        }
    }

    pub fn named_layers(&self) -> Vec<(&'static str, &LinearParams)> {
        vec![
            ("phi_e", &self.phi_e),
            ("psi_1", &self.psi_1),
            ("psi_2", &self.psi_2),
            ("phi_n", &self.phi_n),
        ]
    }

    pub fn named_layers_mut(&mut self) -> Vec<(&'static str, &mut LinearParams)> {
        vec![
            ("phi_e", &mut self.phi_e),
            ("psi_1", &mut self.psi_1),
            ("psi_2", &mut self.psi_2),
            ("phi_n", &mut self.phi_n),
        ]
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        let h = half_dim(d);
        check_layer("phi_e", &self.phi_e, d, h)?;
        check_layer("psi_1", &self.psi_1, d, h)?;
        check_layer("psi_2", &self.psi_2, d, h)?;
        check_layer("phi_n", &self.phi_n, d + h, d)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, BlockCache)> {
        self.validate()?;
        block_forward(&self.layers(), x)
    }

    pub fn backward(&self, cache: &BlockCache, d_out: &Matrix) -> Result<(Matrix, NlnnParams)> {
        let mut grads = self.zeros_like();
        let dx = {
            let mut g = LayersMut {
                phi_g: None,
                phi_e: &mut grads.phi_e,
                psi_1: &mut grads.psi_1,
                psi_2: &mut grads.psi_2,
                phi_n: &mut grads.phi_n,
            };
            block_backward(&self.layers(), cache, d_out, &mut g)?
        };
        Ok((dx, grads))
    }
}

fn check_layer(name: &'static str, p: &LinearParams, in_dim: usize, out_dim: usize) -> Result<()> {
    if p.in_dim() != in_dim {
        return Err(Error::shape(name, in_dim, p.in_dim()));
    }
    if p.out_dim() != out_dim || p.bias.len() != out_dim {
        return Err(Error::shape(name, out_dim, p.out_dim()));
    }
    Ok(())
}

/// Raw and normalised edge weights for `g`, in the node order of `g`.
pub fn compute_edge_weights(g: &BoardGraph, p: &GnParams) -> Result<EdgeWeightMatrix> {
    edge_weights(&p.psi_1, &p.psi_2, &g.node_features)
}

pub fn nlnn_edge_weights(g: &BoardGraph, p: &NlnnParams) -> Result<EdgeWeightMatrix> {
    edge_weights(&p.psi_1, &p.psi_2, &g.node_features)
}

fn edge_weights(
    psi_1: &LinearParams,
    psi_2: &LinearParams,
    x: &Matrix,
) -> Result<EdgeWeightMatrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyGraph);
    }
    let w_hat = psi_1.forward(x)?.matmul_t(&psi_2.forward(x)?)?;
    let w = normalize_edge_scores(&w_hat);
    Ok(EdgeWeightMatrix { w, w_hat })
}

/// Refines every node of `g` with the global/edge/node block.
pub fn gn_block_apply(g: &BoardGraph, p: &GnParams) -> Result<(BoardGraph, BlockCache)> {
    let (out, cache) = p.forward(&g.node_features)?;
    Ok((
        BoardGraph {
            node_features: out,
            node_meta: g.node_meta.clone(),
        },
        cache,
    ))
}

/// Refines every node of `g` with the edge/node block (no global feature).
pub fn nlnn_block_apply(g: &BoardGraph, p: &NlnnParams) -> Result<(BoardGraph, BlockCache)> {
    let (out, cache) = p.forward(&g.node_features)?;
    Ok((
        BoardGraph {
            node_features: out,
            node_meta: g.node_meta.clone(),
        },
        cache,
    ))
}

struct Layers<'a> {
    phi_g: Option<&'a LinearParams>,
    phi_e: &'a LinearParams,
    psi_1: &'a LinearParams,
    psi_2: &'a LinearParams,
    phi_n: &'a LinearParams,
}

struct LayersMut<'a> {
    phi_g: Option<&'a mut LinearParams>,
    phi_e: &'a mut LinearParams,
    psi_1: &'a mut LinearParams,
    psi_2: &'a mut LinearParams,
    phi_n: &'a mut LinearParams,
}

/// Intermediate values of one forward pass, all in canonical node order.
#[derive(Clone, Debug)]
pub struct BlockCache {
    order: Vec<usize>,
    x: Matrix,
    e: Matrix,
    a: Matrix,
    b: Matrix,
    w_hat: Matrix,
    w: Matrix,
    row_mass: Vec<f64>,
    z: Matrix,
    pre: Matrix,
}

impl BlockCache {
    /// Normalised edge weights from the forward pass, in input node order.
    pub fn edge_weights(&self) -> Matrix {
        let inv = inverse_permutation(&self.order);
        let rows = self.w.select_rows(&inv);
        rows.transpose().select_rows(&inv).transpose()
    }
}

fn canonical_order(x: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by(|&i, &j| {
        x.row(i)
            .iter()
            .zip(x.row(j))
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inv[orig] = pos;
    }
    inv
}

fn block_forward(p: &Layers<'_>, x_in: &Matrix) -> Result<(Matrix, BlockCache)> {
    let n = x_in.rows();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let d = p.phi_n.out_dim();
    if x_in.cols() != d {
        return Err(Error::shape("graph block input", d, x_in.cols()));
    }
    let order = canonical_order(x_in);
    let x = x_in.select_rows(&order);

    let e = p.phi_e.forward(&x)?;
    let a = p.psi_1.forward(&x)?;
    let b = p.psi_2.forward(&x)?;
    let w_hat = a.matmul_t(&b)?;
    let w = normalize_edge_scores(&w_hat);
    let row_mass: Vec<f64> = (0..n)
        .map(|i| w_hat.row(i).iter().map(|&s| s.max(0.0).powi(2)).sum())
        .collect();
    let agg = w.matmul(&e)?;

    let z = match p.phi_g {
        Some(phi_g) => {
            let mut global = phi_g.forward(&x)?.col_sums();
            global.iter_mut().for_each(|v| *v /= n as f64);
            let global_rows = Matrix::from_vec(
                n,
                global.len(),
                global
                    .iter()
                    .copied()
                    .cycle()
                    .take(n * global.len())
                    .collect(),
            )?;
            Matrix::hconcat(&[&x, &agg, &global_rows])?
        }
        None => Matrix::hconcat(&[&x, &agg])?,
    };
    let mut pre = p.phi_n.forward(&z)?;
    pre.add_assign(&x)?;

    let mut out_c = pre.clone();
    out_c
        .as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = v.max(0.0));
    let mut out = Matrix::zeros(n, d);
    for (pos, &orig) in order.iter().enumerate() {
        out.row_mut(orig).copy_from_slice(out_c.row(pos));
    }

    Ok((
        out,
        BlockCache {
            order,
            x,
            e,
            a,
            b,
            w_hat,
            w,
            row_mass,
            z,
            pre,
        },
    ))
}

fn block_backward(
    p: &Layers<'_>,
    c: &BlockCache,
    d_out_in: &Matrix,
    g: &mut LayersMut<'_>,
) -> Result<Matrix> {
    let n = c.x.rows();
    let d = c.x.cols();
    let h = c.e.cols();
    if d_out_in.rows() != n || d_out_in.cols() != d {
        return Err(Error::shape(
            "graph block upstream",
            n * d,
            d_out_in.as_slice().len(),
        ));
    }
    let d_out = d_out_in.select_rows(&c.order);

    // outer relu
    let mut d_pre = d_out;
    for (gv, &pv) in d_pre.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        if pv <= 0.0 {
            *gv = 0.0;
        }
    }
    let mut dx = d_pre.clone();
    let dz = p.phi_n.backward(&c.z, &d_pre, g.phi_n)?;
    dx.add_assign(&dz.col_slice(0, d))?;
    let d_agg = dz.col_slice(d, h);

    // agg = w · e
    let d_w = d_agg.matmul_t(&c.e)?;
    let d_e = c.w.t_matmul(&d_agg)?;

    // w_ij = r_ij² / Σ_k r_ik²
    let mut d_w_hat = Matrix::zeros(n, n);
    for i in 0..n {
        let mass = c.row_mass[i];
        if mass <= 0.0 {
            continue;
        }
        let w_row = c.w.row(i);
        let dw_row = d_w.row(i);
        let inner: f64 = w_row.iter().zip(dw_row).map(|(w, dw)| w * dw).sum();
        let dst = d_w_hat.row_mut(i);
        for (j, &r) in c.w_hat.row(i).iter().enumerate() {
            if r > 0.0 {
                dst[j] = (dw_row[j] - inner) / mass * 2.0 * r;
            }
        }
    }
    let d_a = d_w_hat.matmul(&c.b)?;
    let d_b = d_w_hat.t_matmul(&c.a)?;

    dx.add_assign(&p.psi_1.backward(&c.x, &d_a, g.psi_1)?)?;
    dx.add_assign(&p.psi_2.backward(&c.x, &d_b, g.psi_2)?)?;
    dx.add_assign(&p.phi_e.backward(&c.x, &d_e, g.phi_e)?)?;

    if let (Some(phi_g), Some(grad_g)) = (p.phi_g, g.phi_g.as_deref_mut()) {
        let mut d_global = dz.col_slice(d + h, h).col_sums();
        d_global.iter_mut().for_each(|v| *v /= n as f64);
        let d_rows =
            Matrix::from_vec(n, h, d_global.iter().copied().cycle().take(n * h).collect())?;
        dx.add_assign(&phi_g.backward(&c.x, &d_rows, grad_g)?)?;
    }

    let mut dx_out = Matrix::zeros(n, d);
    for (pos, &orig) in c.order.iter().enumerate() {
        dx_out.row_mut(orig).copy_from_slice(dx.row(pos));
    }
    Ok(dx_out)
}

//! Synthetic boards with per-board domain shift and skewed category counts.
//!
//! Features split into colour channels and shape channels. A category's
//! prototype puts `color_weight` of its energy into colour and the rest into
//! a shape shared by its whole family of `family_size` categories, so shape
//! alone only tells families apart. Each board perturbs the prototypes, then
//! applies its own gain and a non-negative colour cast:
//!
//! ```text
//! p_cb     = normalize(p_c + sigma_board · η)
//! feature  = max(0, p_cb ⊙ gain_b + offset_b + sigma_inst · ε)
//! ```
//!
//! `η` and `ε` are Gaussians scaled by `1/√d`, so each sigma is the expected
//! norm of its perturbation relative to the unit prototypes. `η` and the cast
//! touch only the colour channels. The cast biases dot products towards
//! whatever is bright on that board, which a model can only undo by looking
//! at the board as a whole.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BBox, BoardRecord, ComponentInstance, Dataset};
use crate::error::{Error, Result};

pub const CATEGORY_NAMES: &[&str] = &[
    "resistor",
    "capacitor",
    "inductor",
    "ferrite_bead",
    "diode",
    "led",
    "transistor",
    "ic",
    "connector",
    "test_point",
    "pad",
    "pin",
    "crystal",
    "switch",
    "fuse",
    "jumper",
    "potentiometer",
    "relay",
    "transformer",
    "battery",
    "buzzer",
    "heatsink",
    "mounting_hole",
    "voltage_regulator",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalConfig {
    /// Fraction of ground-truth components that receive a proposal.
    pub recall: f64,
    /// Std of box-corner displacement, relative to the box size.
    pub box_jitter: f64,
    /// Norm of the feature perturbation relative to the ground truth.
    pub feature_noise: f64,
    pub false_positives: (usize, usize),
    pub true_score: (f64, f64),
    pub false_score: (f64, f64),
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            recall: 0.9,
            box_jitter: 0.08,
            feature_noise: 0.05,
            false_positives: (2, 8),
            true_score: (0.35, 1.0),
            false_score: (0.0, 0.6),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_boards: usize,
    pub n_categories: usize,
    pub feature_dim: usize,
    /// Category frequency ∝ (rank + 1)^(−exponent).
    pub imbalance_exponent: f64,
    pub instances_per_board: (usize, usize),
    pub min_categories_per_board: usize,
    pub sigma_board: f64,
    pub sigma_inst: f64,
    /// Per-dimension gains are drawn from `1 ± gain_spread`.
    pub gain_spread: f64,
    /// Expected norm of the per-board offset, confined to the colour channels.
    pub offset_scale: f64,
    /// Leading feature channels that carry colour and receive the board's cast.
    pub color_dims: usize,
    /// Share of each prototype's squared norm that lies in the colour channels.
    pub color_weight: f64,
    /// Board exposure is drawn log-uniformly from `[1/contrast, contrast]` and
    /// scales every feature on the board.
    pub contrast: f64,
    /// Consecutive categories sharing one shape prototype.
    pub family_size: usize,
    pub proposals: Option<ProposalConfig>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_boards: 60,
            n_categories: 12,
            feature_dim: 64,
            imbalance_exponent: 1.0,
            instances_per_board: (40, 80),
            min_categories_per_board: 4,
            sigma_board: 0.4,
            sigma_inst: 0.1,
            gain_spread: 0.3,
            offset_scale: 3.0,
            color_dims: 8,
            color_weight: 0.5,
            family_size: 3,
            contrast: 1.0,
            proposals: Some(ProposalConfig::default()),
            seed: 1,
        }
    }
}

impl SyntheticConfig {
    /// No prototype shift, no instance noise, identity gains, zero offsets.
    pub fn degenerate(n_boards: usize, n_categories: usize, feature_dim: usize, seed: u64) -> Self {
        Self {
            n_boards,
            n_categories,
            feature_dim,
            sigma_board: 0.0,
            sigma_inst: 0.0,
            gain_spread: 0.0,
            offset_scale: 0.0,
            contrast: 1.0,
            seed,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_categories > CATEGORY_NAMES.len() {
            return err(format!(
                "{} categories requested, at most {} are available",
                self.n_categories,
                CATEGORY_NAMES.len()
            ));
        }
        if self.n_boards == 0 || self.n_categories == 0 || self.feature_dim == 0 {
            return err("boards, categories and feature dimension must be positive".into());
        }
        let sigmas = [
            self.sigma_board,
            self.sigma_inst,
            self.gain_spread,
            self.offset_scale,
        ];
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return err("noise scales must be finite and non-negative".into());
        }
        if self.sigma_inst > 0.0 && self.sigma_inst >= self.sigma_board {
            return err(format!(
                "sigma_inst ({}) must be below sigma_board ({})",
                self.sigma_inst, self.sigma_board
            ));
        }
        let (lo, hi) = self.instances_per_board;
        if lo == 0 || lo > hi {
            return err(format!("bad instances_per_board range {lo}..={hi}"));
        }
        if self.min_categories_per_board == 0 || self.min_categories_per_board > lo {
            return err("min_categories_per_board must be in 1..=min instances".into());
        }
        if self.gain_spread >= 1.0 {
            return err("gain_spread must be below 1".into());
        }
        if !(0.0..=1.0).contains(&self.color_weight) {
            return err(format!("color_weight {} outside [0, 1]", self.color_weight));
        }
        if !(self.contrast.is_finite() && self.contrast >= 1.0) {
            return err(format!(
                "contrast must be at least 1, got {}",
                self.contrast
            ));
        }
        if self.family_size == 0 {
            return err("family_size must be positive".into());
        }
        Ok(())
    }
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, norm: f64) -> Vec<f64> {
    let scale = norm / (d as f64).sqrt();
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

/// Half-normal entries: the magnitudes of [`gaussian_vec`].
fn half_normal_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, norm: f64) -> Vec<f64> {
    gaussian_vec(rng, d, norm)
        .into_iter()
        .map(f64::abs)
        .collect()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Generates a dataset; identical configs give identical datasets.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.feature_dim;
    let c_total = cfg.n_categories;

    let r = cfg.color_dims.min(d);
    let family = cfg.family_size.max(1);
    let shapes: Vec<Vec<f64>> = (0..c_total.div_ceil(family))
        .map(|_| normalized(half_normal_vec(&mut rng, d - r, 1.0)))
        .collect();
    let (wc, ws) = (cfg.color_weight.sqrt(), (1.0 - cfg.color_weight).sqrt());
    let prototypes: Vec<Vec<f64>> = (0..c_total)
        .map(|c| {
            let color = normalized(half_normal_vec(&mut rng, r, 1.0));
            color
                .iter()
                .map(|x| x * wc)
                .chain(shapes[c / family].iter().map(|x| x * ws))
                .collect()
        })
        .collect();
    let mut ranks: Vec<usize> = (0..c_total).collect();
    ranks.shuffle(&mut rng);
    let weights: Vec<f64> = ranks
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-cfg.imbalance_exponent))
        .collect();
    // typical footprint per category: (width, height)
    let sizes: Vec<(f64, f64)> = (0..c_total)
        .map(|_| {
            let base = rng.random_range(16.0..96.0);
            let aspect: f64 = rng.random_range((1.0f64 / 3.0).ln()..3.0f64.ln()).exp();
            (base * aspect.sqrt(), base / aspect.sqrt())
        })
        .collect();

    let mut boards = Vec::with_capacity(cfg.n_boards);
    for b in 0..cfg.n_boards {
        let board_id = format!("board_{b:03}");
        let width = rng.random_range(1200..=2000u32);
        let height = rng.random_range(900..=1500u32);

        let mut gain: Vec<f64> = (0..d)
            .map(|_| 1.0 + cfg.gain_spread * rng.random_range(-1.0..=1.0))
            .collect();
        let exposure = if cfg.contrast > 1.0 {
            rng.random_range(-cfg.contrast.ln()..=cfg.contrast.ln())
                .exp()
        } else {
            1.0
        };
        gain.iter_mut().for_each(|g| *g *= exposure);
        let mut offset = half_normal_vec(&mut rng, r, cfg.offset_scale * exposure);
        offset.resize(d, 0.0);

        let (lo, hi) = cfg.instances_per_board;
        let total = rng.random_range(lo..=hi);
        let k = rng.random_range(cfg.min_categories_per_board.min(c_total)..=c_total.min(total));
        let indexed: Vec<usize> = (0..c_total).collect();
        let present: Vec<usize> = {
            let mut v: Vec<usize> = indexed
                .choose_multiple_weighted(&mut rng, k, |&c| weights[c])
                .map_err(|e| Error::Config(e.to_string()))?
                .copied()
                .collect();
            v.sort_unstable();
            v
        };
        let mut labels: Vec<usize> = present.clone();
        while labels.len() < total {
            let c = *present
                .choose_weighted(&mut rng, |&c| weights[c])
                .map_err(|e| Error::Config(e.to_string()))?;
            labels.push(c);
        }
        labels.shuffle(&mut rng);

        let board_protos: Vec<Option<Vec<f64>>> = (0..c_total)
            .map(|c| {
                present.binary_search(&c).ok().map(|_| {
                    let mut shift = gaussian_vec(&mut rng, r, cfg.sigma_board);
                    shift.resize(d, 0.0);
                    normalized(
                        prototypes[c]
                            .iter()
                            .zip(&shift)
                            .map(|(p, s)| p + s)
                            .collect(),
                    )
                })
            })
            .collect();

        let boxes = layout_boxes(&mut rng, &labels, &sizes, width as f64, height as f64);
        let mut instances = Vec::with_capacity(total);
        for (i, (&c, bbox)) in labels.iter().zip(boxes).enumerate() {
            let proto = board_protos[c].as_ref().expect("present category");
            let noise = gaussian_vec(&mut rng, d, cfg.sigma_inst);
            let feature = (0..d)
                .map(|j| (proto[j] * gain[j] + offset[j] + noise[j]).max(0.0))
                .collect();
            instances.push(ComponentInstance {
                instance_id: format!("{board_id}_c{i:03}"),
                category: CATEGORY_NAMES[c].to_string(),
                bbox,
                feature,
                score: 1.0,
            });
        }

        let proposals = cfg.proposals.as_ref().map(|pc| {
            make_proposals(
                &mut rng,
                pc,
                &instances,
                &gain,
                &offset,
                &sizes,
                width as f64,
                height as f64,
            )
        });

        boards.push(BoardRecord {
            board_id,
            width,
            height,
            instances,
            proposals,
        });
    }
    Dataset::new(boards)
}

/// Places one box per label on a shuffled grid over the board.
fn layout_boxes<R: Rng + ?Sized>(
    rng: &mut R,
    labels: &[usize],
    sizes: &[(f64, f64)],
    width: f64,
    height: f64,
) -> Vec<BBox> {
    let n = labels.len();
    let cols = ((n as f64 * width / height).sqrt().ceil() as usize).max(1);
    let rows = n.div_ceil(cols);
    let cell_w = width / cols as f64;
    let cell_h = height / rows as f64;
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    cells.shuffle(rng);
    labels
        .iter()
        .zip(cells)
        .map(|(&c, cell)| {
            let (bw, bh) = sizes[c];
            let w = (bw * rng.random_range(0.85..1.15)).min(cell_w * 0.9);
            let h = (bh * rng.random_range(0.85..1.15)).min(cell_h * 0.9);
            let cx0 = (cell % cols) as f64 * cell_w;
            let cy0 = (cell / cols) as f64 * cell_h;
            let x1 = cx0 + rng.random_range(0.0..=(cell_w - w));
            let y1 = cy0 + rng.random_range(0.0..=(cell_h - h));
            BBox::new(x1, y1, x1 + w, y1 + h)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn make_proposals<R: Rng + ?Sized>(
    rng: &mut R,
    pc: &ProposalConfig,
    instances: &[ComponentInstance],
    gain: &[f64],
    offset: &[f64],
    sizes: &[(f64, f64)],
    width: f64,
    height: f64,
) -> Vec<ComponentInstance> {
    let d = gain.len();
    let mut out = Vec::new();
    for inst in instances {
        if !rng.random_bool(pc.recall.clamp(0.0, 1.0)) {
            continue;
        }
        let b = inst.bbox;
        let (w, h) = (b.width(), b.height());
        let mut jit = |len: f64| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            z * pc.box_jitter * len
        };
        let x1 = (b.x1 + jit(w)).clamp(0.0, width - 1.0);
        let y1 = (b.y1 + jit(h)).clamp(0.0, height - 1.0);
        let x2 = (b.x2 + jit(w)).clamp(x1 + 1.0, width);
        let y2 = (b.y2 + jit(h)).clamp(y1 + 1.0, height);
        let noise = gaussian_vec(rng, d, pc.feature_noise);
        out.push(ComponentInstance {
            instance_id: String::new(),
            category: String::new(),
            bbox: BBox::new(x1, y1, x2, y2),
            feature: inst
                .feature
                .iter()
                .zip(&noise)
                .map(|(f, n)| (f + n).max(0.0))
                .collect(),
            score: rng.random_range(pc.true_score.0..=pc.true_score.1),
        });
    }
    let n_fp =
        rng.random_range(pc.false_positives.0..=pc.false_positives.1.max(pc.false_positives.0));
    for _ in 0..n_fp {
        let (bw, bh) = *sizes.choose(rng).expect("at least one category");
        let x1 = rng.random_range(0.0..(width - bw).max(1.0));
        let y1 = rng.random_range(0.0..(height - bh).max(1.0));
        let clutter = normalized(half_normal_vec(rng, d, 1.0));
        out.push(ComponentInstance {
            instance_id: String::new(),
            category: String::new(),
            bbox: BBox::new(x1, y1, (x1 + bw).min(width), (y1 + bh).min(height)),
            feature: (0..d).map(|j| clutter[j] * gain[j] + offset[j]).collect(),
            score: rng.random_range(pc.false_score.0..=pc.false_score.1),
        });
    }
    out.shuffle(rng);
    for (i, p) in out.iter_mut().enumerate() {
        p.instance_id = format!("p{i:03}");
    }
    out
}

/// Proposals that coincide exactly with the ground truth (score 1).
pub fn perfect_proposals(board: &BoardRecord) -> Vec<ComponentInstance> {
    board
        .instances
        .iter()
        .map(|i| ComponentInstance {
            instance_id: format!("p_{}", i.instance_id),
            category: String::new(),
            bbox: i.bbox,
            feature: i.feature.clone(),
            score: 1.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn euclid(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn degenerate_config_shares_one_feature_per_category() {
        let ds = generate_synthetic_dataset(&SyntheticConfig::degenerate(6, 5, 8, 3)).unwrap();
        let mut seen: std::collections::BTreeMap<&str, &Vec<f64>> = Default::default();
        for b in &ds.boards {
            for i in &b.instances {
                let f = seen.entry(i.category.as_str()).or_insert(&i.feature);
                assert_eq!(*f, &i.feature);
            }
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SyntheticConfig {
            n_boards: 5,
            ..SyntheticConfig::default()
        };
        assert_eq!(
            generate_synthetic_dataset(&cfg).unwrap(),
            generate_synthetic_dataset(&cfg).unwrap()
        );
    }

    #[test]
    fn too_many_categories_is_config_error() {
        let cfg = SyntheticConfig {
            n_categories: CATEGORY_NAMES.len() + 1,
            ..SyntheticConfig::default()
        };
        assert!(matches!(
            generate_synthetic_dataset(&cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn inverted_sigmas_rejected() {
        let cfg = SyntheticConfig {
            sigma_board: 0.1,
            sigma_inst: 0.2,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic_dataset(&cfg).is_err());
    }

    #[test]
    fn boxes_lie_on_the_board() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 10,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for b in &ds.boards {
            for i in b.instances.iter().chain(b.proposals.iter().flatten()) {
                assert!(i.bbox.is_well_ordered());
                assert!(i.bbox.x2 <= b.width as f64 && i.bbox.y2 <= b.height as f64);
            }
        }
    }

    /// Mean pairwise distance within boards vs across boards, same category,
    /// and across categories, computed by direct enumeration.
    #[test]
    fn within_board_tighter_than_across_boards() {
        let ds = generate_synthetic_dataset(&SyntheticConfig {
            n_boards: 60,
            n_categories: 12,
            feature_dim: 64,
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let all: Vec<(usize, &str, &[f64])> = ds
            .boards
            .iter()
            .enumerate()
            .flat_map(|(b, r)| {
                r.instances
                    .iter()
                    .map(move |i| (b, i.category.as_str(), i.feature.as_slice()))
            })
            .collect();
        let (mut within, mut across, mut cross_cat) = ((0.0, 0u64), (0.0, 0u64), (0.0, 0u64));
        for (x, a) in all.iter().enumerate() {
            for b in &all[x + 1..] {
                let dist = euclid(a.2, b.2);
                let slot = if a.1 != b.1 {
                    &mut cross_cat
                } else if a.0 == b.0 {
                    &mut within
                } else {
                    &mut across
                };
                slot.0 += dist;
                slot.1 += 1;
            }
        }
        let mean = |s: (f64, u64)| s.0 / s.1 as f64;
        assert!(
            mean(within) < mean(across),
            "{} vs {}",
            mean(within),
            mean(across)
        );
        assert!(
            mean(across) < mean(cross_cat),
            "{} vs {}",
            mean(across),
            mean(cross_cat)
        );
    }
}

//! Set matching between predicted tokens and ground truth, relation sampling
//! and the training objective.

mod hungarian;

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{box_giou, BoundingBox, SpatialGraph};
use crate::model::ForwardOutput;
use crate::tensor::Tensor;

pub use hungarian::hungarian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchCoefficients {
    pub cost_cls: f64,
    pub cost_reg: f64,
    pub cost_giou: f64,
}

impl Default for MatchCoefficients {
    fn default() -> Self {
        Self {
            cost_cls: 2.0,
            cost_reg: 5.0,
            cost_giou: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossCoefficients {
    pub reg: f64,
    pub giou: f64,
    pub cls: f64,
    pub rln: f64,
    /// Cross-entropy weight of tokens whose target is background.
    pub empty_weight: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            reg: 5.0,
            giou: 2.0,
            cls: 2.0,
            rln: 1.0,
            empty_weight: 0.1,
        }
    }
}

impl MatchCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.cost_cls, self.cost_reg, self.cost_giou]
            .iter()
            .any(|c| *c < 0.0)
        {
            return Err(Error::Config(
                "match coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.reg, self.giou, self.cls, self.rln, self.empty_weight]
            .iter()
            .any(|c| *c < 0.0)
        {
            return Err(Error::Config(
                "loss coefficients must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// `gt_to_pred[g]` is the token assigned to ground-truth node `g`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub gt_to_pred: Vec<usize>,
}

impl Assignment {
    /// Target class per token: the matched node's class, 0 otherwise.
    pub fn token_targets(&self, gt: &SpatialGraph, n_tokens: usize) -> Vec<usize> {
        let mut t = vec![0; n_tokens];
        for (g, &p) in self.gt_to_pred.iter().enumerate() {
            t[p] = gt.nodes[g].cls;
        }
        t
    }
}

/// One supervised relation: ground-truth pair, token pair and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationSample {
    pub gt: (usize, usize),
    pub pred: (usize, usize),
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RelationSampleSet {
    pub pairs: Vec<RelationSample>,
}

impl RelationSampleSet {
    pub fn num_valid(&self) -> usize {
        self.pairs.iter().filter(|p| p.label != 0).count()
    }

    pub fn num_background(&self) -> usize {
        self.pairs.len() - self.num_valid()
    }

    pub fn token_pairs(&self) -> Vec<(usize, usize)> {
        self.pairs.iter().map(|p| p.pred).collect()
    }
}

fn center_size(b: &BoundingBox) -> Vec<f64> {
    let mut v = b.center();
    v.extend(b.size());
    v
}

fn corners(cs: &[f64]) -> BoundingBox {
    let d = cs.len() / 2;
    BoundingBox::from_center_size(&cs[..d], &cs[d..])
}

/// Matching cost `[#gt, N]`: `-cost_cls · p(gt class) + cost_reg · ℓ1 +
/// cost_giou · (1 - GIoU)` with boxes in center-size form.
pub fn match_cost(
    cls_logits: &Tensor,
    boxes: &Tensor,
    gt: &SpatialGraph,
    coeffs: &MatchCoefficients,
) -> Result<Tensor> {
    let n = cls_logits.rows();
    let g = gt.nodes.len();
    if g > n {
        return Err(Error::Config(format!(
            "{g} ground-truth nodes exceed {n} object tokens"
        )));
    }
    let probs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = cls_logits.row(i).to_vec();
            softmax_in_place(&mut r);
            r
        })
        .collect();
    let pred_boxes: Vec<BoundingBox> = (0..n).map(|i| corners(boxes.row(i))).collect();
    let mut cost = Tensor::zeros(&[g, n]);
    for (r, node) in gt.nodes.iter().enumerate() {
        let target = center_size(&node.bbox);
        for c in 0..n {
            let l1: f64 = boxes
                .row(c)
                .iter()
                .zip(&target)
                .map(|(a, b)| (a - b).abs())
                .sum();
            let mut v = -coeffs.cost_cls * probs[c][node.cls] + coeffs.cost_reg * l1;
            if coeffs.cost_giou != 0.0 {
                v += coeffs.cost_giou * (1.0 - box_giou(&pred_boxes[c], &node.bbox));
            }
            cost.data[r * n + c] = v;
        }
    }
    Ok(cost)
}

pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    Ok(Assignment {
        gt_to_pred: hungarian(cost)?,
    })
}

/// All valid relations plus `ratio` background pairs per valid one, drawn
/// without replacement from ordered node pairs that carry no relation.
///
/// Undirected edges contribute both orders. With no valid relation a single
/// background pair is drawn so the relation head still sees a negative.
pub fn sample_relations<R: Rng>(
    gt: &SpatialGraph,
    assignment: &Assignment,
    rng: &mut R,
    ratio: usize,
) -> RelationSampleSet {
    let map = |i: usize, j: usize, label: usize| RelationSample {
        gt: (i, j),
        pred: (assignment.gt_to_pred[i], assignment.gt_to_pred[j]),
        label,
    };
    let mut pairs = Vec::new();
    for e in &gt.edges {
        pairs.push(map(e.src, e.dst, e.rln));
        if !gt.directed {
            pairs.push(map(e.dst, e.src, e.rln));
        }
    }
    let n = gt.nodes.len();
    let mut background = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let related = gt
                .edges
                .iter()
                .any(|e| (e.src == i && e.dst == j) || (!gt.directed && e.src == j && e.dst == i));
            if !related {
                background.push((i, j));
            }
        }
    }
    let valid = pairs.len();
    let want = if valid == 0 { 1 } else { ratio * valid };
    let count = want.min(background.len());
    let mut picks = sample(rng, background.len(), count).into_vec();
    picks.sort_unstable();
    for k in picks {
        let (i, j) = background[k];
        pairs.push(map(i, j, 0));
    }
    RelationSampleSet { pairs }
}

/// Per-term values of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    #[serde(rename = "L_reg")]
    pub reg: f64,
    #[serde(rename = "L_gIoU")]
    pub giou: f64,
    #[serde(rename = "L_cls")]
    pub cls: f64,
    #[serde(rename = "L_rln")]
    pub rln: f64,
    pub total: f64,
}

pub struct Loss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Weighted training objective for one image.
///
/// Box terms average over matched nodes, the class term is a weighted mean
/// over all tokens (background weight `empty_weight`) and the relation term
/// averages over `samples`. `rel_logits` must hold one row per sample in
/// order; it may be `None` when there are no samples.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    t: &mut Tape,
    out: &ForwardOutput,
    rel_logits: Option<Var>,
    gt: &SpatialGraph,
    assignment: &Assignment,
    samples: &RelationSampleSet,
    coeffs: &LossCoefficients,
    step: usize,
) -> Result<Loss> {
    let n = t.value(out.cls_logits).rows();
    let g = gt.nodes.len();
    let zero = |t: &mut Tape| t.constant(Tensor::scalar(0.0));

    let (reg, giou) = if g == 0 {
        (zero(t), zero(t))
    } else {
        let idx = Rc::new(assignment.gt_to_pred.clone());
        let matched = t.gather_rows(out.boxes, idx);
        let mut target = Vec::new();
        let (mut lo, mut hi) = (Vec::new(), Vec::new());
        for node in &gt.nodes {
            target.extend(center_size(&node.bbox));
            lo.extend_from_slice(&node.bbox.lo);
            hi.extend_from_slice(&node.bbox.hi);
        }
        let s = 1.0 / g as f64;
        (t.l1(matched, &target, s), t.giou_loss(matched, &lo, &hi, s))
    };

    let targets = assignment.token_targets(gt, n);
    let w: Vec<f64> = targets
        .iter()
        .map(|&c| if c == 0 { coeffs.empty_weight } else { 1.0 })
        .collect();
    let wsum: f64 = w.iter().sum();
    let coef: Vec<f64> = w.iter().map(|v| v / wsum).collect();
    let cls = t.cross_entropy(out.cls_logits, &targets, &coef);

    let rln = match rel_logits {
        Some(r) if !samples.pairs.is_empty() => {
            let labels: Vec<usize> = samples.pairs.iter().map(|p| p.label).collect();
            let c = vec![1.0 / labels.len() as f64; labels.len()];
            t.cross_entropy(r, &labels, &c)
        }
        _ => zero(t),
    };

    let terms = [
        ("L_reg", reg, coeffs.reg),
        ("L_gIoU", giou, coeffs.giou),
        ("L_cls", cls, coeffs.cls),
        ("L_rln", rln, coeffs.rln),
    ];
    for (name, v, _) in terms {
        if !t.value(v).item().is_finite() {
            return Err(Error::NonFiniteLoss { term: name, step });
        }
    }
    let mut total = t.scale(reg, coeffs.reg);
    for (_, v, c) in &terms[1..] {
        let s = t.scale(*v, *c);
        total = t.add(total, s);
    }
    let val = |v: Var| t.value(v).item();
    let breakdown = LossBreakdown {
        reg: val(reg),
        giou: val(giou),
        cls: val(cls),
        rln: val(rln),
        total: val(total),
    };
    Ok(Loss { total, breakdown })
}

//! Spatial graph types and the geometric primitives shared by data
//! generation, matching and evaluation.
//!
//! All coordinates live in the normalized unit cube `[0,1]^d`, `d ∈ {2, 3}`.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default normalized width of the virtual box drawn around a graph node.
pub const DEFAULT_NODE_BOX_WIDTH: f64 = 0.2;
/// Default minimum extent of an edge box along any axis.
pub const DEFAULT_EDGE_MIN_WIDTH: f64 = 0.15;

/// Axis-aligned box stored as `(lo, hi)` corners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "[Vec<f64>; 2]", into = "[Vec<f64>; 2]")]
pub struct BoundingBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl From<[Vec<f64>; 2]> for BoundingBox {
    fn from([lo, hi]: [Vec<f64>; 2]) -> Self {
        Self { lo, hi }
    }
}

impl From<BoundingBox> for [Vec<f64>; 2] {
    fn from(b: BoundingBox) -> Self {
        [b.lo, b.hi]
    }
}

impl BoundingBox {
    /// Checked constructor: equal dimensions, `lo <= hi`, everything in `[0,1]`.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { lo, hi };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!("{b}")))
        }
    }

    /// Builds a box from center and full size without range checks.
    pub fn from_center_size(center: &[f64], size: &[f64]) -> Self {
        let lo = center.iter().zip(size).map(|(c, s)| c - 0.5 * s).collect();
        let hi = center.iter().zip(size).map(|(c, s)| c + 0.5 * s).collect();
        Self { lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_valid(&self) -> bool {
        self.lo.len() == self.hi.len()
            && !self.lo.is_empty()
            && self
                .lo
                .iter()
                .zip(&self.hi)
                .all(|(&l, &h)| l.is_finite() && h.is_finite() && l <= h && l >= 0.0 && h <= 1.0)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    pub fn size(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    /// Hypervolume; negative extents count as zero.
    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l).max(0.0))
            .product()
    }

    /// Clamps every coordinate into `[0,1]`.
    pub fn clipped(&self) -> Self {
        Self {
            lo: self.lo.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            hi: self.hi.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn intersection_volume(&self, other: &Self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .map(|((al, ah), (bl, bh))| (ah.min(*bh) - al.max(*bl)).max(0.0))
            .product()
    }

    pub fn enclosing_volume(&self, other: &Self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .zip(other.lo.iter().zip(&other.hi))
            .map(|((al, ah), (bl, bh))| (ah.max(*bh) - al.min(*bl)).max(0.0))
            .product()
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_volume(other);
        let union = self.volume() + other.volume() - inter;
        if union > 0.0 {
            inter / union
        } else if self == other {
            1.0
        } else {
            0.0
        }
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}–{:?}", self.lo, self.hi)
    }
}

/// Generalized IoU in any dimension.
///
/// Zero-volume boxes contribute zero volume; two coinciding degenerate boxes
/// give 1.
pub fn box_giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_volume(b);
    let union = a.volume() + b.volume() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let enclosure = a.enclosing_volume(b);
    if enclosure > 0.0 {
        iou - (enclosure - union) / enclosure
    } else {
        iou
    }
}

/// Virtual box of half-width `half_width` around a node center, clipped to
/// the unit cube.
pub fn node_virtual_box(center: &[f64], half_width: f64) -> BoundingBox {
    BoundingBox {
        lo: center
            .iter()
            .map(|c| (c - half_width).clamp(0.0, 1.0))
            .collect(),
        hi: center
            .iter()
            .map(|c| (c + half_width).clamp(0.0, 1.0))
            .collect(),
    }
}

/// Recovers the node center from a (possibly border-clipped) virtual box of
/// full width `width`.
///
/// An axis counts as clipped when its extent falls short of `width` and the
/// box touches the corresponding border; otherwise the midpoint is used.
pub fn virtual_box_center(b: &BoundingBox, width: f64) -> Vec<f64> {
    const TOUCH: f64 = 1e-2;
    b.lo.iter()
        .zip(&b.hi)
        .map(|(&lo, &hi)| {
            let short = hi - lo < width - TOUCH;
            if short && lo <= TOUCH && hi < 1.0 - TOUCH {
                (hi - 0.5 * width).max(0.0)
            } else if short && hi >= 1.0 - TOUCH && lo > TOUCH {
                (lo + 0.5 * width).min(1.0)
            } else {
                0.5 * (lo + hi)
            }
        })
        .collect()
}

/// A graph node: center point, box and class (`0` = background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub center: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub cls: usize,
}

impl Node {
    /// Node whose box is the virtual box of width `box_width` around `center`.
    pub fn point(center: Vec<f64>, box_width: f64, cls: usize) -> Self {
        let bbox = node_virtual_box(&center, 0.5 * box_width);
        Self { center, bbox, cls }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub rln: usize,
}

/// A spatial graph in normalized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGraph {
    pub directed: bool,
    pub dim: usize,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl SpatialGraph {
    pub fn new(dim: usize, directed: bool) -> Self {
        Self {
            directed,
            dim,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Mirror graph along `axis`: `x -> 1 - x` for centers and boxes.
    pub fn flipped(&self, axis: usize) -> SpatialGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.center[axis] = 1.0 - n.center[axis];
            let (lo, hi) = (n.bbox.lo[axis], n.bbox.hi[axis]);
            n.bbox.lo[axis] = 1.0 - hi;
            n.bbox.hi[axis] = 1.0 - lo;
        }
        g
    }

    /// Adds an edge, storing undirected edges in `src < dst` order.
    pub fn add_edge(&mut self, src: usize, dst: usize, rln: usize) {
        let (src, dst) = if !self.directed && src > dst {
            (dst, src)
        } else {
            (src, dst)
        };
        self.edges.push(Edge { src, dst, rln });
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges
            .iter()
            .any(|e| (e.src == a && e.dst == b) || (!self.directed && e.src == b && e.dst == a))
    }

    /// Undirected adjacency lists.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            adj[e.src].push(e.dst);
            adj[e.dst].push(e.src);
        }
        adj
    }

    /// Line segments `(a, b)` between node centers, one per edge.
    pub fn segments(&self) -> Vec<(&[f64], &[f64])> {
        self.edges
            .iter()
            .map(|e| {
                (
                    self.nodes[e.src].center.as_slice(),
                    self.nodes[e.dst].center.as_slice(),
                )
            })
            .collect()
    }

    pub fn is_connected(&self) -> bool {
        if self.nodes.is_empty() {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Axis-aligned box spanning the two endpoint centers of `e`.
///
/// Axes narrower than `min_width` are widened symmetrically; a widened
/// interval that leaves `[0,1]` is shifted back inside so its extent stays
/// `min(min_width, 1)`.
pub fn edge_to_box(g: &SpatialGraph, e: &Edge, min_width: f64) -> BoundingBox {
    let a = &g.nodes[e.src].center;
    let b = &g.nodes[e.dst].center;
    let w = min_width.min(1.0);
    let mut lo = Vec::with_capacity(a.len());
    let mut hi = Vec::with_capacity(a.len());
    for (&p, &q) in a.iter().zip(b) {
        let (mut l, mut h) = (p.min(q).clamp(0.0, 1.0), p.max(q).clamp(0.0, 1.0));
        if h - l < w {
            let mid = 0.5 * (l + h);
            l = mid - 0.5 * w;
            h = mid + 0.5 * w;
            if l < 0.0 {
                h -= l;
                l = 0.0;
            }
            if h > 1.0 {
                l -= h - 1.0;
                h = 1.0;
            }
            l = l.max(0.0);
        }
        lo.push(l);
        hi.push(h);
    }
    BoundingBox { lo, hi }
}

/// A single invariant violation found by [`validate_graph`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    BadDimension { dim: usize },
    NodeDimension { node: usize, len: usize },
    NodeOutOfRange { node: usize },
    InvalidBox { node: usize },
    EdgeIndexOutOfRange { edge: usize },
    SelfLoop { edge: usize, node: usize },
    DuplicateEdge { edge: usize },
    NonCanonical { edge: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadDimension { dim } => write!(f, "graph dimension {dim} not in {{2,3}}"),
            Violation::NodeDimension { node, len } => {
                write!(f, "node {node} has {len} coordinates")
            }
            Violation::NodeOutOfRange { node } => write!(f, "node {node} center outside [0,1]"),
            Violation::InvalidBox { node } => write!(f, "node {node} has an invalid box"),
            Violation::EdgeIndexOutOfRange { edge } => {
                write!(f, "edge {edge} references a missing node")
            }
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge} is a self-loop on {node}"),
            Violation::DuplicateEdge { edge } => write!(f, "edge {edge} is a duplicate"),
            Violation::NonCanonical { edge } => {
                write!(f, "undirected edge {edge} not stored as src < dst")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Lists every invariant violation of `g`; an empty report means valid.
pub fn validate_graph(g: &SpatialGraph) -> ValidationReport {
    let mut violations = Vec::new();
    if g.dim != 2 && g.dim != 3 {
        violations.push(Violation::BadDimension { dim: g.dim });
    }
    for (i, n) in g.nodes.iter().enumerate() {
        if n.center.len() != g.dim {
            violations.push(Violation::NodeDimension {
                node: i,
                len: n.center.len(),
            });
        }
        if n.center.iter().any(|c| !(0.0..=1.0).contains(c)) {
            violations.push(Violation::NodeOutOfRange { node: i });
        }
        if !n.bbox.is_valid() || n.bbox.dim() != g.dim {
            violations.push(Violation::InvalidBox { node: i });
        }
    }
    let mut seen = HashSet::new();
    for (i, e) in g.edges.iter().enumerate() {
        if e.src >= g.nodes.len() || e.dst >= g.nodes.len() {
            violations.push(Violation::EdgeIndexOutOfRange { edge: i });
            continue;
        }
        if e.src == e.dst {
            violations.push(Violation::SelfLoop {
                edge: i,
                node: e.src,
            });
            continue;
        }
        if !g.directed && e.src > e.dst {
            violations.push(Violation::NonCanonical { edge: i });
        }
        let key = if g.directed {
            (e.src, e.dst)
        } else {
            (e.src.min(e.dst), e.src.max(e.dst))
        };
        if !seen.insert(key) {
            violations.push(Violation::DuplicateEdge { edge: i });
        }
    }
    ValidationReport { violations }
}

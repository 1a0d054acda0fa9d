//! Synthetic road-network style data: planar graphs, their rasterization
//! and the patch/pruning preprocessing pipeline.

mod dataset;
mod geometry;
mod patches;
mod planar;
mod prune;
mod raster;

use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, generate_sample, load_png, load_split, save_png, Manifest, ManifestEntry,
    Split,
};
pub use geometry::{segment_point_distance, segments_cross};
pub use patches::{extract_patches, PatchWindow};
pub use planar::generate_planar_graph;
pub use prune::{node_angle_deg, prune_degree2};
pub use raster::rasterize;

use crate::error::{Error, Result};
use crate::graph::SpatialGraph;

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// Pixels per image side.
    pub image_size: usize,
    pub n_images: usize,
    /// Inclusive node-count range before pruning.
    pub node_count_range: (usize, usize),
    /// Probability of keeping each planar edge that is not on the spanning tree.
    pub extra_edge_probability: f64,
    /// Minimum distance between two generated nodes (normalized).
    pub min_node_separation: f64,
    /// Minimum angle between two edges sharing a node, in degrees.
    pub min_edge_angle_deg: f64,
    /// Minimum distance between an edge and any node it does not touch.
    pub min_edge_node_clearance: f64,
    /// Line thickness in pixels.
    pub line_thickness: f64,
    /// Amplitude of uniform additive noise, `[0, 1]`.
    pub noise_level: f64,
    /// Degree-2 nodes whose incident segments meet at this angle or more are merged.
    pub prune_angle_deg: f64,
    /// Width of the virtual node boxes.
    pub node_box_width: f64,
    /// Train / val / test fractions.
    pub splits: (f64, f64, f64),
    /// Generation attempts per graph before giving up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            n_images: 100,
            node_count_range: (3, 6),
            extra_edge_probability: 0.25,
            min_node_separation: 0.2,
            min_edge_angle_deg: 35.0,
            min_edge_node_clearance: 0.08,
            line_thickness: 2.0,
            noise_level: 0.0,
            prune_angle_deg: 160.0,
            node_box_width: crate::graph::DEFAULT_NODE_BOX_WIDTH,
            splits: (0.8, 0.1, 0.1),
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.node_count_range;
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if lo < 2 || hi < lo {
            return Err(Error::Config(format!(
                "node_count_range must satisfy 2 <= min <= max, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.extra_edge_probability) {
            return Err(Error::Config(
                "extra_edge_probability must lie in [0, 1]".into(),
            ));
        }
        let (a, b, c) = self.splits;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "split fractions must be >= 0 and sum to 1".into(),
            ));
        }
        if self.line_thickness <= 0.0 {
            return Err(Error::Config("line_thickness must be positive".into()));
        }
        Ok(())
    }
}

/// A dense image with `channels` planes over `dims` (x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, dims: &[usize]) -> Self {
        Self {
            channels,
            dims: dims.to_vec(),
            data: vec![0.0; channels * dims.iter().product::<usize>()],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// Pixel value of a 2D single-channel image.
    pub fn get2(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.dims[0] + x]
    }

    pub fn set2(&mut self, x: usize, y: usize, v: f64) {
        let w = self.dims[0];
        self.data[y * w + x] = v;
    }

    /// Mirror image along `axis` (0 = x): index `i` moves to `dims[axis] - 1 - i`.
    pub fn flipped(&self, axis: usize) -> Image {
        let stride: usize = self.dims[..axis].iter().product();
        let n = self.dims[axis];
        let mut out = self.clone();
        for (k, v) in out.data.iter_mut().enumerate() {
            let i = k / stride % n;
            let src = k - i * stride + (n - 1 - i) * stride;
            *v = self.data[src];
        }
        out
    }

    /// Crops a 2D window `[x0, x0 + w) × [y0, y0 + h)` from every channel.
    pub fn crop2(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let (sw, sh) = (self.dims[0], self.dims[1]);
        let mut out = Image::zeros(self.channels, &[w, h]);
        for c in 0..self.channels {
            for y in 0..h {
                let src = c * sw * sh + (y0 + y) * sw + x0;
                let dst = c * w * h + y * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }
}

/// An image with its ground-truth graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub graph: SpatialGraph,
}

impl Sample {
    /// Image and graph mirrored along every axis whose flag is set.
    pub fn flipped(&self, axes: &[bool]) -> Sample {
        let mut out = self.clone();
        for (axis, _) in axes.iter().enumerate().filter(|(_, f)| **f) {
            out.image = out.image.flipped(axis);
            out.graph = out.graph.flipped(axis);
        }
        out
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::geometry::segment_point_distance;
use super::{GenConfig, Image};
use crate::graph::SpatialGraph;

/// Draws every edge of a 2D graph as a line `cfg.line_thickness` pixels wide.
///
/// A pixel is lit when its center lies within half the thickness of the
/// segment. Noise (if any) is uniform in `[-noise_level, noise_level]`,
/// seeded from `cfg.seed`, and the result is clipped to `[0, 1]`.
pub fn rasterize(g: &SpatialGraph, cfg: &GenConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rasterize_with(g, cfg, &mut rng)
}

pub(crate) fn rasterize_with<R: Rng>(g: &SpatialGraph, cfg: &GenConfig, rng: &mut R) -> Image {
    let n = cfg.image_size;
    let mut img = Image::zeros(1, &[n, n]);
    let half = cfg.line_thickness / 2.0;
    let scale = n as f64;
    for (a, b) in g.segments() {
        let pa = [a[0] * scale, a[1] * scale];
        let pb = [b[0] * scale, b[1] * scale];
        let x0 = (pa[0].min(pb[0]) - half).floor().max(0.0) as usize;
        let x1 = ((pa[0].max(pb[0]) + half).ceil() as usize).min(n);
        let y0 = (pa[1].min(pb[1]) - half).floor().max(0.0) as usize;
        let y1 = ((pa[1].max(pb[1]) + half).ceil() as usize).min(n);
        for y in y0..y1 {
            for x in x0..x1 {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                if segment_point_distance(&c, &pa, &pb) <= half {
                    img.set2(x, y, 1.0);
                }
            }
        }
    }
    if cfg.noise_level > 0.0 {
        for v in img.data.iter_mut() {
            *v = (*v + rng.gen_range(-cfg.noise_level..=cfg.noise_level)).clamp(0.0, 1.0);
        }
    }
    img
}

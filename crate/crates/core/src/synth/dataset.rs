use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::planar::generate_planar_graph;
use super::prune::prune_degree2;
use super::raster::rasterize_with;
use super::{GenConfig, Image, Sample};
use crate::error::{Error, Result};
use crate::graph::{validate_graph, SpatialGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub graph: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GenConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Generates sample `index` of the dataset described by `cfg`.
///
/// Each sample draws from its own ChaCha stream, so samples are independent
/// of generation order.
pub fn generate_sample(cfg: &GenConfig, index: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let raw = generate_planar_graph(cfg, &mut rng)?;
    let graph = prune_degree2(&raw, cfg.prune_angle_deg);
    let image = rasterize_with(&graph, cfg, &mut rng);
    Ok(Sample { image, graph })
}

fn split_counts(n: usize, splits: (f64, f64, f64)) -> (usize, usize) {
    let train = ((n as f64) * splits.0).round() as usize;
    let val = (((n as f64) * splits.1).round() as usize).min(n - train.min(n));
    (train.min(n), val)
}

/// Writes `images/NNNNN.png`, `graphs/NNNNN.json` and `manifest.json` under
/// `out_dir`. Paths in the manifest are relative to `out_dir`.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let img_dir = out_dir.join("images");
    let graph_dir = out_dir.join("graphs");
    for d in [&img_dir, &graph_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }

    let (n_train, n_val) = split_counts(cfg.n_images, cfg.splits);
    let mut order: Vec<usize> = (0..cfg.n_images).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    let mut splits = vec![Split::Test; cfg.n_images];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut entries = Vec::with_capacity(cfg.n_images);
    for (i, split) in splits.into_iter().enumerate() {
        let sample = generate_sample(cfg, i as u64)?;
        let report = validate_graph(&sample.graph);
        if !report.is_valid() {
            return Err(Error::InvalidGraph(format!(
                "sample {i}: {:?}",
                report.violations
            )));
        }
        let image = format!("images/{i:05}.png");
        let graph = format!("graphs/{i:05}.json");
        save_png(&out_dir.join(&image), &sample.image)?;
        let gp = out_dir.join(&graph);
        fs::write(&gp, sample.graph.to_json()?).map_err(|e| Error::io(&gp, e))?;
        entries.push(ManifestEntry {
            image,
            graph,
            split,
        });
    }

    let manifest = Manifest {
        config: cfg.clone(),
        entries,
    };
    let mp = out_dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest)
}

/// Loads every sample of one split from a manifest file.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<Sample>> {
    let manifest = Manifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let image = load_png(&root.join(&e.image))?;
            let gp = root.join(&e.graph);
            let text = fs::read_to_string(&gp).map_err(|err| Error::io(&gp, err))?;
            Ok(Sample {
                image,
                graph: SpatialGraph::from_json(&text)?,
            })
        })
        .collect()
}

/// Writes a single-channel 2D image as 8-bit grayscale PNG.
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 1 || img.dims.len() != 2 {
        return Err(Error::Image {
            path: path.into(),
            message: format!(
                "expected one 2D channel, got {} x {:?}",
                img.channels, img.dims
            ),
        });
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(
        path,
        img.dims[0] as u32,
        img.dims[1] as u32,
        png::ColorType::Grayscale,
        &bytes,
    )
}

pub(crate) fn write_png(
    path: &Path,
    w: u32,
    h: u32,
    color: png::ColorType,
    bytes: &[u8],
) -> Result<()> {
    let img_err = |message: String| Error::Image {
        path: PathBuf::from(path),
        message,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| img_err(e.to_string()))?;
    writer.finish().map_err(|e| img_err(e.to_string()))
}

/// Reads an 8-bit grayscale PNG into `[0, 1]` values.
pub fn load_png(path: &Path) -> Result<Image> {
    let img_err = |message: String| Error::Image {
        path: path.into(),
        message,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| img_err(e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!(
            "expected 8-bit grayscale, got {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut img = Image::zeros(1, &[w, h]);
    for (dst, &b) in img.data.iter_mut().zip(&buf[..w * h]) {
        *dst = b as f64 / 255.0;
    }
    Ok(img)
}

//! Image-to-graph transformer: conv backbone, deformable encoder, decoder over
//! object tokens plus one relation token, and the object/relation heads.

mod checkpoint;
pub mod layers;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, LevelShape, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::synth::Image;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
use layers::{
    deformable_attention, grid_centers, multi_head_attention, sine_position_encoding,
    DeformableAttention, FeedForward, LayerNorm, Linear, MultiHeadAttention,
};

/// Large negative score used to hide keys from attention.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Spatial dimension of the image (2 or 3).
    pub dim: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub num_obj_tokens: usize,
    pub d_emb: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub n_points: usize,
    pub n_levels: usize,
    pub mlp_dim: usize,
    /// Object classes, not counting background.
    pub num_classes: usize,
    /// Relation classes including background (index 0).
    pub num_relations: usize,
    /// Output channels of the stride-2 conv stages.
    pub backbone_channels: Vec<usize>,
    /// Without it the relation head sees only the two object tokens.
    pub use_rln_token: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            image_size: 64,
            in_channels: 1,
            num_obj_tokens: 20,
            d_emb: 64,
            n_enc_layers: 4,
            n_dec_layers: 4,
            n_heads: 4,
            n_points: 4,
            n_levels: 3,
            mlp_dim: 128,
            num_classes: 1,
            num_relations: 2,
            backbone_channels: vec![16, 32, 64, 64, 64],
            use_rln_token: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.dim) {
            return err(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.n_heads == 0 || !self.d_emb.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_emb {} not divisible by n_heads {}",
                self.d_emb, self.n_heads
            ));
        }
        if self.n_points == 0 || self.n_levels == 0 {
            return err("n_points and n_levels must be at least 1".into());
        }
        if self.n_levels > self.backbone_channels.len() {
            return err(format!(
                "{} levels requested from {} backbone stages",
                self.n_levels,
                self.backbone_channels.len()
            ));
        }
        if self.num_obj_tokens == 0 || self.num_relations < 2 || self.num_classes == 0 {
            return err("need at least one token, one class and one relation class".into());
        }
        if self.image_size >> self.backbone_channels.len() == 0 {
            return err(format!(
                "image_size {} too small for {} stride-2 stages",
                self.image_size,
                self.backbone_channels.len()
            ));
        }
        Ok(())
    }

    /// Decoder tokens: object tokens plus the relation token when enabled.
    pub fn num_tokens(&self) -> usize {
        self.num_obj_tokens + usize::from(self.use_rln_token)
    }

    /// Spatial sizes of the feature levels, finest first.
    pub fn level_dims(&self) -> Vec<Vec<usize>> {
        let stages = self.backbone_channels.len();
        (stages - self.n_levels..stages)
            .map(|s| vec![self.image_size >> (s + 1); self.dim])
            .collect()
    }
}

struct ConvStage {
    w: ParamId,
    b: ParamId,
    geom: Rc<ConvGeom>,
}

struct EncoderLayer {
    attn: DeformableAttention,
    ln1: LayerNorm,
    ffn: FeedForward,
    ln2: LayerNorm,
}

struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln1: LayerNorm,
    cross: DeformableAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
    ln3: LayerNorm,
}

/// Network weights plus the structure needed to run them.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    stages: Vec<ConvStage>,
    proj: Vec<Linear>,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    query_embed: ParamId,
    query_pos: ParamId,
    ref_point: Linear,
    cls_head: Linear,
    box_mlp: [Linear; 3],
    rel_ln: LayerNorm,
    rel_mlp: [Linear; 3],
}

/// Per-image tape outputs of a forward pass.
pub struct ForwardOutput {
    /// `[N, C + 1]`, column 0 is background.
    pub cls_logits: Var,
    /// `[N, 2 * dim]` center-size boxes in `(0, 1)`.
    pub boxes: Var,
    /// Refined object tokens `[N, d_emb]`.
    pub obj: Var,
    /// Refined relation token `[1, d_emb]`.
    pub rln: Option<Var>,
    /// Reference points `[N + 1, dim]` (or `[N, dim]` without relation token).
    pub refs: Var,
    /// All decoder tokens after the last layer.
    pub tokens: Var,
}

/// Plain-value model output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub cls_logits: Tensor,
    pub boxes: Tensor,
    pub relation_logits: BTreeMap<(usize, usize), Vec<f64>>,
}

/// Options for [`Model::forward_with`] used by tests and ablations.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Hide the relation token from the object tokens in decoder self-attention.
    pub mask_rln_in_self_attention: bool,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let d = cfg.d_emb;

        let mut stages = Vec::new();
        let mut in_ch = cfg.in_channels;
        let mut dims = vec![cfg.image_size; cfg.dim];
        let k_len = 3usize.pow(cfg.dim as u32);
        for (s, &out_ch) in cfg.backbone_channels.iter().enumerate() {
            let geom = ConvGeom::new(in_ch, out_ch, 3, 2, 1, &dims);
            // He-style uniform init for ReLU stacks
            let fan_in = in_ch * k_len;
            let a = (6.0 / fan_in as f64).sqrt();
            let data = (0..out_ch * fan_in)
                .map(|_| rand::Rng::gen_range(rng, -a..a))
                .collect();
            let w = ps.add(
                format!("backbone.conv{s}.w"),
                Tensor::matrix(out_ch, fan_in, data),
            );
            let b = ps.add(format!("backbone.conv{s}.b"), Tensor::zeros(&[out_ch]));
            dims = geom.out_dims.clone();
            stages.push(ConvStage {
                w,
                b,
                geom: Rc::new(geom),
            });
            in_ch = out_ch;
        }
        let first_level = cfg.backbone_channels.len() - cfg.n_levels;
        let proj = (0..cfg.n_levels)
            .map(|l| {
                Linear::new(
                    &mut ps,
                    &format!("input_proj{l}"),
                    cfg.backbone_channels[first_level + l],
                    d,
                    rng,
                )
            })
            .collect();
        let le: Vec<f64> = (0..cfg.n_levels * d)
            .map(|_| rand::Rng::gen_range(rng, -0.1..0.1))
            .collect();
        let level_embed = ps.add("level_embed", Tensor::matrix(cfg.n_levels, d, le));

        let deform = |ps: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            DeformableAttention::new(
                ps,
                name,
                d,
                cfg.n_heads,
                cfg.n_levels,
                cfg.n_points,
                cfg.dim,
                rng,
            )
        };
        let encoder = (0..cfg.n_enc_layers)
            .map(|i| EncoderLayer {
                attn: deform(&mut ps, &format!("enc{i}.attn"), rng),
                ln1: LayerNorm::new(&mut ps, &format!("enc{i}.ln1"), d),
                ffn: FeedForward::new(&mut ps, &format!("enc{i}.ffn"), d, cfg.mlp_dim, rng),
                ln2: LayerNorm::new(&mut ps, &format!("enc{i}.ln2"), d),
            })
            .collect();
        let decoder = (0..cfg.n_dec_layers)
            .map(|i| DecoderLayer {
                self_attn: MultiHeadAttention::new(
                    &mut ps,
                    &format!("dec{i}.self_attn"),
                    d,
                    cfg.n_heads,
                    rng,
                ),
                ln1: LayerNorm::new(&mut ps, &format!("dec{i}.ln1"), d),
                cross: deform(&mut ps, &format!("dec{i}.cross_attn"), rng),
                ln2: LayerNorm::new(&mut ps, &format!("dec{i}.ln2"), d),
                ffn: FeedForward::new(&mut ps, &format!("dec{i}.ffn"), d, cfg.mlp_dim, rng),
                ln3: LayerNorm::new(&mut ps, &format!("dec{i}.ln3"), d),
            })
            .collect();

        let t = cfg.num_tokens();
        let mut uniform = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| rand::Rng::gen_range(rng, -1.0..1.0))
                .collect()
        };
        let query_embed = ps.add("query_embed", Tensor::matrix(t, d, uniform(t * d)));
        let query_pos = ps.add("query_pos", Tensor::matrix(t, d, uniform(t * d)));
        let ref_point = Linear::new(&mut ps, "ref_point", d, cfg.dim, rng);

        let cls_head = Linear::new(&mut ps, "cls_head", d, cfg.num_classes + 1, rng);
        // Background prior of 0.99 so an untrained model predicts nothing.
        ps.get_mut(cls_head.b).data[0] = (99.0f64).ln();
        let box_mlp = [
            Linear::new(&mut ps, "box_mlp0", d, d, rng),
            Linear::new(&mut ps, "box_mlp1", d, d, rng),
            Linear::zeros(&mut ps, "box_mlp2", d, 2 * cfg.dim),
        ];
        let rel_in = if cfg.use_rln_token { 3 * d } else { 2 * d };
        let rel_ln = LayerNorm::new(&mut ps, "rel_ln", rel_in);
        let rel_mlp = [
            Linear::new(&mut ps, "rel_mlp0", rel_in, cfg.mlp_dim, rng),
            Linear::new(&mut ps, "rel_mlp1", cfg.mlp_dim, cfg.mlp_dim, rng),
            Linear::new(&mut ps, "rel_mlp2", cfg.mlp_dim, cfg.num_relations, rng),
        ];

        Ok(Self {
            cfg,
            params: ps,
            stages,
            proj,
            level_embed,
            encoder,
            decoder,
            query_embed,
            query_pos,
            ref_point,
            cls_head,
            box_mlp,
            rel_ln,
            rel_mlp,
        })
    }

    /// Feature levels (finest first) as `[cells, d_emb]` tokens with their
    /// shapes, positional encodings and cell-center reference points.
    pub fn backbone_forward(
        &self,
        t: &mut Tape,
        image: &Image,
    ) -> Result<(Vec<Var>, Vec<LevelShape>)> {
        let cfg = &self.cfg;
        let want = vec![cfg.image_size; cfg.dim];
        if image.channels != cfg.in_channels || image.dims != want {
            return Err(Error::Config(format!(
                "image {}x{:?} does not match model input {}x{:?}",
                image.channels, image.dims, cfg.in_channels, want
            )));
        }
        let plane = image.plane_len();
        let mut x = t.constant(Tensor::matrix(image.channels, plane, image.data.clone()));
        let first_level = self.stages.len() - cfg.n_levels;
        let mut feats = Vec::new();
        let mut shapes = Vec::new();
        let mut start = 0;
        for (s, st) in self.stages.iter().enumerate() {
            let w = t.param(st.w);
            let b = t.param(st.b);
            let y = t.conv(x, w, b, st.geom.clone());
            x = t.relu(y);
            if s >= first_level {
                let l = s - first_level;
                let xt = t.transpose(x);
                let f = self.proj[l].forward(t, xt);
                let le = t.param(self.level_embed);
                let le = t.slice_rows(le, l, l + 1);
                let f = t.add_bias(f, le);
                let shape = LevelShape {
                    dims: st.geom.out_dims.clone(),
                    start,
                };
                start += shape.len();
                shapes.push(shape);
                feats.push(f);
            }
        }
        Ok((feats, shapes))
    }

    /// Runs the encoder over the concatenated levels; returns memory `[T, d_emb]`.
    pub fn encoder_forward(&self, t: &mut Tape, feats: &[Var], shapes: &[LevelShape]) -> Var {
        let d = self.cfg.dim;
        let mut src = t.concat_rows(feats);
        if self.encoder.is_empty() {
            return src;
        }
        let mut coords = Vec::new();
        for s in shapes {
            coords.extend(grid_centers(&s.dims));
        }
        let n = coords.len() / d;
        let pos = sine_position_encoding(&coords, d, self.cfg.d_emb);
        let refs = t.constant(Tensor::matrix(n, d, coords));
        for layer in &self.encoder {
            let q = t.add_const(src, &pos);
            let a = deformable_attention(t, &layer.attn, q, refs, src, shapes);
            let s = t.add(src, a);
            src = layer.ln1.forward(t, s);
            let f = layer.ffn.forward(t, src);
            let s = t.add(src, f);
            src = layer.ln2.forward(t, s);
        }
        src
    }

    /// Decoder over all tokens; returns `(tokens, reference logits)`.
    pub fn decoder_forward(
        &self,
        t: &mut Tape,
        memory: Var,
        shapes: &[LevelShape],
        opts: ForwardOptions,
    ) -> (Var, Var) {
        let n_tok = self.cfg.num_tokens();
        let mut tgt = t.param(self.query_embed);
        let pos = t.param(self.query_pos);
        let ref_logits = self.ref_point.forward(t, pos);
        let refs = t.sigmoid(ref_logits);
        let mask = (opts.mask_rln_in_self_attention && self.cfg.use_rln_token).then(|| {
            let n = self.cfg.num_obj_tokens;
            let mut m = Tensor::zeros(&[n_tok, n_tok]);
            for q in 0..n {
                m.data[q * n_tok + n] = MASKED;
            }
            m
        });
        for layer in &self.decoder {
            let q = t.add(tgt, pos);
            let (sa, _) = multi_head_attention(t, &layer.self_attn, q, q, tgt, mask.as_ref());
            let s = t.add(tgt, sa);
            tgt = layer.ln1.forward(t, s);
            let q = t.add(tgt, pos);
            let ca = deformable_attention(t, &layer.cross, q, refs, memory, shapes);
            let s = t.add(tgt, ca);
            tgt = layer.ln2.forward(t, s);
            let f = layer.ffn.forward(t, tgt);
            let s = t.add(tgt, f);
            tgt = layer.ln3.forward(t, s);
        }
        (tgt, ref_logits)
    }

    /// Class logits and center-size boxes for the given object tokens.
    ///
    /// Box centers are offsets in logit space from the token's reference point.
    pub fn object_head(&self, t: &mut Tape, obj: Var, ref_logits: Var) -> (Var, Var) {
        let d = self.cfg.dim;
        let cls = self.cls_head.forward(t, obj);
        let h = self.box_mlp[0].forward(t, obj);
        let h = t.relu(h);
        let h = self.box_mlp[1].forward(t, h);
        let h = t.relu(h);
        let raw = self.box_mlp[2].forward(t, h);
        let c = t.slice_cols(raw, 0, d);
        let s = t.slice_cols(raw, d, 2 * d);
        let c = t.add(c, ref_logits);
        let c = t.sigmoid(c);
        let s = t.sigmoid(s);
        let boxes = t.concat_cols(&[c, s]);
        (cls, boxes)
    }

    pub fn forward(&self, t: &mut Tape, image: &Image) -> Result<ForwardOutput> {
        self.forward_with(t, image, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        t: &mut Tape,
        image: &Image,
        opts: ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (feats, shapes) = self.backbone_forward(t, image)?;
        let memory = self.encoder_forward(t, &feats, &shapes);
        let (tokens, ref_logits) = self.decoder_forward(t, memory, &shapes, opts);
        let n = self.cfg.num_obj_tokens;
        let obj = t.slice_rows(tokens, 0, n);
        let obj_refs = t.slice_rows(ref_logits, 0, n);
        let rln = self
            .cfg
            .use_rln_token
            .then(|| t.slice_rows(tokens, n, n + 1));
        let (cls_logits, boxes) = self.object_head(t, obj, obj_refs);
        let refs = t.sigmoid(ref_logits);
        Ok(ForwardOutput {
            cls_logits,
            boxes,
            obj,
            rln,
            refs,
            tokens,
        })
    }

    /// Relation logits `[pairs, L]` for ordered token pairs `(i, j)`.
    pub fn relation_head(
        &self,
        t: &mut Tape,
        out: &ForwardOutput,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let n = self.cfg.num_obj_tokens;
        for &(i, j) in pairs {
            if i == j {
                return Err(Error::SelfPair(i));
            }
            if i >= n || j >= n {
                return Err(Error::Config(format!("pair ({i}, {j}) outside {n} tokens")));
            }
        }
        let is = Rc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let js = Rc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let oi = t.gather_rows(out.obj, is);
        let oj = t.gather_rows(out.obj, js);
        let x = match out.rln {
            Some(r) => {
                let rr = t.gather_rows(r, Rc::new(vec![0; pairs.len()]));
                t.concat_cols(&[oi, rr, oj])
            }
            None => t.concat_cols(&[oi, oj]),
        };
        let h = self.rel_ln.forward(t, x);
        let h = self.rel_mlp[0].forward(t, h);
        let h = t.relu(h);
        let h = self.rel_mlp[1].forward(t, h);
        let h = t.relu(h);
        Ok(self.rel_mlp[2].forward(t, h))
    }

    /// Forward pass with relation logits for `pairs`, as plain values.
    pub fn predict_raw(&self, image: &Image, pairs: &[(usize, usize)]) -> Result<Prediction> {
        let mut t = Tape::new(&self.params);
        let out = self.forward(&mut t, image)?;
        let mut relation_logits = BTreeMap::new();
        if !pairs.is_empty() {
            let r = self.relation_head(&mut t, &out, pairs)?;
            let rv = t.value(r);
            for (k, p) in pairs.iter().enumerate() {
                relation_logits.insert(*p, rv.row(k).to_vec());
            }
        }
        Ok(Prediction {
            cls_logits: t.value(out.cls_logits).clone(),
            boxes: t.value(out.boxes).clone(),
            relation_logits,
        })
    }

    /// Ids of the relation-head parameters.
    pub fn relation_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.rel_ln.gamma, self.rel_ln.beta];
        for l in &self.rel_mlp {
            ids.push(l.w);
            ids.push(l.b);
        }
        ids
    }
}

#[cfg(test)]
mod tests;

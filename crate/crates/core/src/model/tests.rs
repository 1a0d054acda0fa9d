use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;
use crate::autograd::Tape;

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        num_obj_tokens: 4,
        d_emb: 16,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_heads: 2,
        n_points: 2,
        n_levels: 2,
        mlp_dim: 32,
        backbone_channels: vec![4, 8, 8],
        ..ModelConfig::default()
    }
}

fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Image {
    let mut img = Image::zeros(1, &[n, n]);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.0..1.0);
    }
    img
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Independent multilinear interpolation with zero padding.
fn oracle_interp(feat: &[f64], channels: usize, dims: &[usize], x: &[f64]) -> Vec<f64> {
    let d = dims.len();
    let mut out = vec![0.0; channels];
    let u: Vec<f64> = (0..d).map(|a| x[a] * dims[a] as f64 - 0.5).collect();
    for corner in 0..(1 << d) {
        let mut w = 1.0;
        let mut lin = 0isize;
        let mut stride = 1isize;
        let mut ok = true;
        for a in 0..d {
            let i0 = u[a].floor();
            let i = if corner >> a & 1 == 1 { i0 + 1.0 } else { i0 };
            w *= 1.0 - (u[a] - i).abs();
            if i < 0.0 || i >= dims[a] as f64 {
                ok = false;
            }
            lin += i as isize * stride;
            stride *= dims[a] as isize;
        }
        if ok {
            for c in 0..channels {
                out[c] += w * feat[lin as usize * channels + c];
            }
        }
    }
    out
}

fn identity_deform(ps: &mut ParamStore, dim: usize, width: usize) -> DeformableAttention {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = DeformableAttention::new(ps, "da", width, 1, 1, 1, dim, &mut rng);
    ps.get_mut(p.offsets.b).data.fill(0.0);
    for lin in [p.value, p.out] {
        let w = ps.get_mut(lin.w);
        w.data.fill(0.0);
        for i in 0..width {
            w.data[i * width + i] = 1.0;
        }
    }
    p
}

#[test]
fn deformable_attention_reduces_to_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for dim in [2, 3] {
        for _ in 0..100 {
            let dims: Vec<usize> = (0..dim).map(|_| rng.gen_range(2..7)).collect();
            let cells: usize = dims.iter().product();
            let width = 4;
            let mut ps = ParamStore::new();
            let p = identity_deform(&mut ps, dim, width);
            // random query weights: offsets stay zero regardless of f_q
            let feat = rand_tensor(&mut rng, cells, width);
            let xq: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.01..0.99)).collect();
            let mut t = Tape::new(&ps);
            let f = t.constant(feat.clone());
            let q = t.constant(rand_tensor(&mut rng, 1, width));
            let r = t.constant(Tensor::matrix(1, dim, xq.clone()));
            let levels = [LevelShape {
                dims: dims.clone(),
                start: 0,
            }];
            let out = deformable_attention(&mut t, &p, q, r, f, &levels);
            let want = oracle_interp(&feat.data, width, &dims, &xq);
            for (a, b) in t.value(out).data.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "{dim}d: {a} vs {b}");
            }
        }
    }
}

#[test]
fn cell_center_returns_cell_feature() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = vec![5, 4];
    let mut ps = ParamStore::new();
    let p = identity_deform(&mut ps, 2, 3);
    let feat = rand_tensor(&mut rng, 20, 3);
    for (i, j) in [(0, 0), (2, 1), (4, 3)] {
        let x = [(i as f64 + 0.5) / 5.0, (j as f64 + 0.5) / 4.0];
        let mut t = Tape::new(&ps);
        let f = t.constant(feat.clone());
        let q = t.constant(Tensor::zeros(&[1, 3]));
        let r = t.constant(Tensor::matrix(1, 2, x.to_vec()));
        let out = deformable_attention(
            &mut t,
            &p,
            q,
            r,
            f,
            &[LevelShape {
                dims: dims.clone(),
                start: 0,
            }],
        );
        assert_eq!(t.value(out).data, feat.row(j * 5 + i).to_vec());
    }
}

#[test]
fn deformable_gradient_wrt_query_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut ps = ParamStore::new();
    let width = 8;
    let p = DeformableAttention::new(&mut ps, "da", width, 2, 2, 3, 2, &mut rng);
    for lin in [p.offsets, p.attn] {
        for v in ps.get_mut(lin.w).data.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let levels = [
        LevelShape {
            dims: vec![6, 6],
            start: 0,
        },
        LevelShape {
            dims: vec![3, 3],
            start: 36,
        },
    ];
    let feat = rand_tensor(&mut rng, 45, width);
    let fq = rand_tensor(&mut rng, 3, width);
    let refs = Tensor::matrix(3, 2, (0..6).map(|_| rng.gen_range(0.2..0.8)).collect());
    let mix = rand_tensor(&mut rng, 3, width);
    let eval = |q_t: &Tensor, grad: bool| {
        let mut t = Tape::new(&ps);
        let q = if grad {
            t.input(q_t.clone())
        } else {
            t.constant(q_t.clone())
        };
        let f = t.constant(feat.clone());
        let r = t.constant(refs.clone());
        let out = deformable_attention(&mut t, &p, q, r, f, &levels);
        let m = t.constant(mix.clone());
        let y = t.mul(out, m);
        let s = t.sum(y);
        let value = t.value(s).item();
        let g = grad.then(|| t.backward(s).wrt(q).unwrap().clone());
        (value, g)
    };
    let analytic = eval(&fq, true).1.unwrap();
    let h = 1e-5;
    let mut num = vec![0.0; fq.numel()];
    for (j, n) in num.iter_mut().enumerate() {
        let mut a = fq.clone();
        a.data[j] += h;
        let mut b = fq.clone();
        b.data[j] -= h;
        *n = (eval(&a, false).0 - eval(&b, false).0) / (2.0 * h);
    }
    let diff: f64 = analytic
        .data
        .iter()
        .zip(&num)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.norm().max(1e-12);
    assert!(diff / scale < 1e-4, "relative error {}", diff / scale);
}

#[test]
fn attention_weights_are_normalized() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = ParamStore::new();
    let p = DeformableAttention::new(&mut ps, "da", 8, 2, 3, 4, 2, &mut rng);
    for v in ps.get_mut(p.attn.w).data.iter_mut() {
        *v = rng.gen_range(-2.0..2.0);
    }
    let mut t = Tape::new(&ps);
    let q = t.constant(rand_tensor(&mut rng, 5, 8));
    let logits = p.attn.forward(&mut t, q);
    let a = t.softmax(logits, 12);
    for group in t.value(a).data.chunks(12) {
        assert!((group.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn multi_head_attention_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParamStore::new();
    let p = MultiHeadAttention::new(&mut ps, "mha", 8, 2, &mut rng);

    // one key: output independent of the query
    let key = rand_tensor(&mut rng, 1, 8);
    let mut outs = Vec::new();
    for _ in 0..2 {
        let mut t = Tape::new(&ps);
        let q = t.constant(rand_tensor(&mut rng, 1, 8));
        let k = t.constant(key.clone());
        let (o, _) = multi_head_attention(&mut t, &p, q, k, k, None);
        outs.push(t.value(o).clone());
    }
    for (a, b) in outs[0].data.iter().zip(&outs[1].data) {
        assert!((a - b).abs() < 1e-12);
    }
    // output = W_m W'_m f
    let mut t = Tape::new(&ps);
    let k = t.constant(key.clone());
    let v = p.v.forward(&mut t, k);
    let o = p.out.forward(&mut t, v);
    for (a, b) in t.value(o).data.iter().zip(&outs[0].data) {
        assert!((a - b).abs() < 1e-12);
    }

    // identical keys: uniform weights; random keys: rows sum to one
    let mut t = Tape::new(&ps);
    let q = t.constant(rand_tensor(&mut rng, 3, 8));
    let same = t.constant(Tensor::matrix(4, 8, key.data.repeat(4)));
    let (_, w) = multi_head_attention(&mut t, &p, q, same, same, None);
    for h in w {
        assert!(t.value(h).data.iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
    let k = t.constant(rand_tensor(&mut rng, 6, 8));
    let (_, w) = multi_head_attention(&mut t, &p, q, k, k, None);
    for h in w {
        for row in t.value(h).data.chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn backbone_level_sizes_and_finite_on_zero_image() {
    let model = Model::new(ModelConfig::default()).unwrap();
    assert_eq!(
        model.cfg.level_dims(),
        vec![vec![8, 8], vec![4, 4], vec![2, 2]]
    );
    let img = Image::zeros(1, &[64, 64]);
    let mut t = Tape::new(&model.params);
    let (feats, shapes) = model.backbone_forward(&mut t, &img).unwrap();
    let sizes: Vec<usize> = shapes.iter().map(LevelShape::len).collect();
    assert_eq!(sizes, vec![64, 16, 4]);
    for f in feats {
        assert!(t.value(f).is_finite());
    }
    let out = model.forward(&mut t, &img).unwrap();
    assert!(t.value(out.cls_logits).is_finite() && t.value(out.boxes).is_finite());
}

#[test]
fn backbone_shape_mismatch_is_config_error() {
    let model = Model::new(tiny_config()).unwrap();
    let mut t = Tape::new(&model.params);
    let err = model
        .backbone_forward(&mut t, &Image::zeros(1, &[9, 8]))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn backbone_is_translation_covariant_on_interior_cells() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut a = Image::zeros(1, &[64, 64]);
    for y in 16..40 {
        for x in 12..36 {
            a.set2(x, y, rng.gen_range(0.0..1.0));
        }
    }
    let mut b = Image::zeros(1, &[64, 64]);
    for y in 0..64 {
        for x in 8..64 {
            b.set2(x, y, a.get2(x - 8, y));
        }
    }
    let mut t = Tape::new(&model.params);
    let (fa, _) = model.backbone_forward(&mut t, &a).unwrap();
    let (fb, _) = model.backbone_forward(&mut t, &b).unwrap();
    let (va, vb) = (t.value(fa[0]), t.value(fb[0]));
    for y in 1..7 {
        for x in 1..6 {
            for c in 0..va.cols() {
                let u = va.at(y * 8 + x, c);
                let v = vb.at(y * 8 + x + 1, c);
                assert!((u - v).abs() < 1e-12, "cell ({x},{y}) ch {c}");
            }
        }
    }
}

#[test]
fn encoder_identity_shape_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = random_image(&mut rng, 8);
    let mut cfg = tiny_config();
    cfg.n_enc_layers = 0;
    let model = Model::new(cfg).unwrap();
    let mut t = Tape::new(&model.params);
    let (feats, shapes) = model.backbone_forward(&mut t, &img).unwrap();
    let concat = t.concat_rows(&feats);
    let mem = model.encoder_forward(&mut t, &feats, &shapes);
    assert_eq!(t.value(mem), t.value(concat));

    let model = Model::new(tiny_config()).unwrap();
    let run = || {
        let mut t = Tape::new(&model.params);
        let (feats, shapes) = model.backbone_forward(&mut t, &img).unwrap();
        let cat = t.concat_rows(&feats);
        let before = t.value(cat).shape.clone();
        let mem = model.encoder_forward(&mut t, &feats, &shapes);
        assert_eq!(t.value(mem).shape, before);
        t.value(mem).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn decoder_token_counts_and_rln_interaction() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let img = random_image(&mut rng, 8);
    let cfg = ModelConfig {
        num_obj_tokens: 1,
        ..tiny_config()
    };
    let model = Model::new(cfg).unwrap();
    let run = |mask: bool| {
        let mut t = Tape::new(&model.params);
        let opts = ForwardOptions {
            mask_rln_in_self_attention: mask,
        };
        let out = model.forward_with(&mut t, &img, opts).unwrap();
        t.value(out.tokens).clone()
    };
    let plain = run(false);
    assert_eq!(plain.shape, vec![2, 16]);
    let masked = run(true);
    let diff: f64 = plain
        .row(0)
        .iter()
        .zip(masked.row(0))
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(diff > 0.0);

    let cfg = ModelConfig {
        n_dec_layers: 0,
        ..tiny_config()
    };
    let model = Model::new(cfg).unwrap();
    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, &img).unwrap();
    let q = model.params.get(model.query_embed);
    assert_eq!(t.value(out.tokens), q);
}

#[test]
fn object_head_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = random_image(&mut rng, 8);
    let model = Model::new(tiny_config()).unwrap();
    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, &img).unwrap();
    let (cls, boxes) = (t.value(out.cls_logits), t.value(out.boxes));
    assert_eq!(cls.shape, vec![4, 2]);
    assert_eq!(boxes.shape, vec![4, 4]);
    assert!(boxes.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    // untrained: background wins everywhere
    for r in 0..4 {
        assert!(cls.at(r, 0) > cls.at(r, 1));
    }
}

#[test]
fn object_head_is_permutation_covariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = Model::new(tiny_config()).unwrap();
    let obj = rand_tensor(&mut rng, 4, 16);
    let refs = rand_tensor(&mut rng, 4, 2);
    let perm = vec![2, 0, 3, 1];
    let run = |o: &Tensor, r: &Tensor| {
        let mut t = Tape::new(&model.params);
        let o = t.constant(o.clone());
        let r = t.constant(r.clone());
        let (c, b) = model.object_head(&mut t, o, r);
        (t.value(c).clone(), t.value(b).clone())
    };
    let permute = |x: &Tensor| {
        let mut data = Vec::new();
        for &p in &perm {
            data.extend_from_slice(x.row(p));
        }
        Tensor::matrix(x.rows(), x.cols(), data)
    };
    let (c, b) = run(&obj, &refs);
    let (pc, pb) = run(&permute(&obj), &permute(&refs));
    assert_eq!(pc, permute(&c));
    assert_eq!(pb, permute(&b));
}

#[test]
fn relation_head_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(&mut rng, 8);
    let cfg = ModelConfig {
        num_relations: 3,
        ..tiny_config()
    };
    let model = Model::new(cfg).unwrap();
    let mut pairs = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                pairs.push((i, j));
            }
        }
    }
    assert_eq!(pairs.len(), 6);
    let pred = model.predict_raw(&img, &pairs).unwrap();
    assert_eq!(pred.relation_logits.len(), 6);
    assert!(pred.relation_logits.values().all(|v| v.len() == 3));
    assert_ne!(pred.relation_logits[&(0, 1)], pred.relation_logits[&(1, 0)]);

    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, &img).unwrap();
    assert!(matches!(
        model.relation_head(&mut t, &out, &[(2, 2)]),
        Err(Error::SelfPair(2))
    ));
    let r = model
        .relation_head(&mut t, &out, &[(0, 1), (3, 2)])
        .unwrap();
    assert_eq!(t.value(r).shape, vec![2, 3]);
}

#[test]
fn no_rln_variant_uses_pairs_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = random_image(&mut rng, 8);
    let cfg = ModelConfig {
        use_rln_token: false,
        ..tiny_config()
    };
    let model = Model::new(cfg).unwrap();
    let mut t = Tape::new(&model.params);
    let out = model.forward(&mut t, &img).unwrap();
    assert!(out.rln.is_none());
    assert_eq!(t.value(out.tokens).rows(), 4);
    let r = model.relation_head(&mut t, &out, &[(0, 1)]).unwrap();
    assert_eq!(t.value(r).shape, vec![1, 2]);
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = random_image(&mut rng, 8);
    let a = Model::new(tiny_config())
        .unwrap()
        .predict_raw(&img, &[(0, 1)])
        .unwrap();
    let b = Model::new(tiny_config())
        .unwrap()
        .predict_raw(&img, &[(0, 1)])
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let img = random_image(&mut rng, 8);
    let mut model = Model::new(tiny_config()).unwrap();
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &model, serde_json::json!({"step": 3})).unwrap();
    let (loaded, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta["step"], 3);
    let pairs = [(0, 1), (1, 0), (2, 3)];
    assert_eq!(
        model.predict_raw(&img, &pairs).unwrap(),
        loaded.predict_raw(&img, &pairs).unwrap()
    );

    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn three_dimensional_model_runs() {
    let cfg = ModelConfig {
        dim: 3,
        d_emb: 12,
        n_heads: 2,
        ..tiny_config()
    };
    let model = Model::new(cfg).unwrap();
    let img = Image::zeros(1, &[8, 8, 8]);
    let p = model.predict_raw(&img, &[(0, 1)]).unwrap();
    assert_eq!(p.boxes.shape, vec![4, 6]);
    assert!(p.boxes.is_finite());
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let img = random_image(&mut rng, 8);
    let mut model = Model::new(tiny_config()).unwrap();
    // move zero-initialized layers off their special values
    for id in model.params.ids().collect::<Vec<_>>() {
        for v in model.params.get_mut(id).data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let pairs = [(0, 1), (2, 1), (3, 0)];
    let w_cls = rand_tensor(&mut rng, 4, 2);
    let w_box = rand_tensor(&mut rng, 4, 4);
    let w_rel = rand_tensor(&mut rng, 3, 2);
    let objective = |m: &Model, grad: bool| {
        let mut t = Tape::new(&m.params);
        let out = m.forward(&mut t, &img).unwrap();
        let r = m.relation_head(&mut t, &out, &pairs).unwrap();
        let mut total = None;
        for (v, w) in [(out.cls_logits, &w_cls), (out.boxes, &w_box), (r, &w_rel)] {
            let c = t.constant(w.clone());
            let p = t.mul(v, c);
            let s = t.sum(p);
            total = Some(match total {
                None => s,
                Some(acc) => t.add(acc, s),
            });
        }
        let total = total.unwrap();
        let val = t.value(total).item();
        let g = grad.then(|| {
            let g = t.backward(total);
            g.params()
                .map(|(id, t)| (id, t.clone()))
                .collect::<Vec<_>>()
        });
        (val, g)
    };
    let grads = objective(&model, true).1.unwrap();
    assert_eq!(
        grads.len(),
        model.params.len(),
        "every parameter gets a gradient"
    );
    let h = 1e-5;
    for (id, g) in grads {
        let n = g.numel();
        let picks: Vec<usize> = (0..n.min(6)).map(|_| rng.gen_range(0..n)).collect();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for &j in &picks {
            let orig = model.params.get(id).data[j];
            model.params.get_mut(id).data[j] = orig + h;
            let fp = objective(&model, false).0;
            model.params.get_mut(id).data[j] = orig - h;
            let fm = objective(&model, false).0;
            model.params.get_mut(id).data[j] = orig;
            let num = (fp - fm) / (2.0 * h);
            diff += (num - g.data[j]).powi(2);
            norm += num.powi(2).max(g.data[j].powi(2));
        }
        // key biases have an identically zero gradient (softmax shift invariance)
        let rel = diff.sqrt() / norm.sqrt().max(1e-6);
        assert!(
            rel < 1e-3,
            "{}: relative error {rel} (diff {diff}, norm {norm})",
            model.params.name(id)
        );
    }
}

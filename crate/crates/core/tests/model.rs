use coss_core::model::{FrozenTeacher, Keep, Model, ModelConfig};
use coss_core::tokenizers::{Modality, TokenBatch, Tokens};
use coss_numerics::{AdamW, AdamWConfig, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        vocab_size: 20,
        text_len: 6,
        image_tokens: 4,
        volume_tokens: 8,
        patch_dim_2d: 5,
        patch_dim_3d: 3,
        ..ModelConfig::default()
    }
}

fn random_patches(n: usize, l: usize, p: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, l, p], |_| rng.gen_range(-1.0..1.0))
}

fn image_batch(seed: u64) -> TokenBatch<f64> {
    TokenBatch::from_patches(Modality::Image2d, random_patches(2, 4, 5, seed), vec![2, 2]).unwrap()
}

fn block_params(d: usize, depth: usize, r: usize) -> usize {
    depth * ((4 + 2 * r) * d * d + (9 + r) * d)
}

#[test]
fn parameter_count_matches_closed_form() {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(cfg.clone(), 0).unwrap();
    let d = cfg.embed_dim;
    let expected = cfg.vocab_size * d
        + (cfg.patch_dim_2d + 1) * d
        + (cfg.patch_dim_3d + 1) * d
        + (cfg.text_len + cfg.image_tokens + cfg.volume_tokens) * d
        + d
        + block_params(d, cfg.depth, cfg.mlp_ratio)
        + 2 * d;
    assert_eq!(model.param_count(), expected);
    // Regression constant for the default desk-scale geometry.
    assert_eq!(model.param_count(), 571_712);
}

#[test]
fn init_is_seeded() {
    let a = Model::<f32>::new(toy_config(), 3).unwrap();
    let b = Model::<f32>::new(toy_config(), 3).unwrap();
    let c = Model::<f32>::new(toy_config(), 4).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_ne!(a.checksum(), c.checksum());
    for (_, p) in a.params.iter() {
        if p.name.ends_with(".bias") {
            assert!(p.value.data().iter().all(|&x| x == 0.0));
        } else if p.name.contains("norm") {
            continue;
        } else {
            assert!(p.value.data().iter().all(|&x| x.abs() <= 0.04));
        }
    }
}

#[test]
fn invalid_heads_rejected() {
    let cfg = ModelConfig { heads: 3, ..toy_config() };
    assert!(Model::<f32>::new(cfg, 0).is_err());
}

#[test]
fn encode_shapes_for_every_modality() {
    let model = Model::<f64>::new(toy_config(), 1).unwrap();
    let mut g = Graph::new();
    let text = TokenBatch::<f64>::from_ids(vec![2, 5, 6, 0, 0, 0, 2, 7, 8, 9, 10, 11], 2, 6).unwrap();
    let enc = model.encode(&mut g, &text, &Keep::all(2, 6)).unwrap();
    assert_eq!(g.shape(enc.hidden), &[2, 7, 16]);
    let enc = model.encode(&mut g, &image_batch(0), &Keep::all(2, 4)).unwrap();
    assert_eq!(g.shape(enc.hidden), &[2, 5, 16]);
    let vol = TokenBatch::from_patches(Modality::Volume3d, random_patches(3, 8, 3, 1), vec![2, 2, 2]).unwrap();
    let keep = Keep::from_visible(3, 8, (0..24).map(|i| i % 4 == 0).collect()).unwrap();
    let enc = model.encode(&mut g, &vol, &keep).unwrap();
    assert_eq!(g.shape(enc.hidden), &[3, 3, 16]);
}

#[test]
fn empty_keep_is_an_error() {
    let model = Model::<f64>::new(toy_config(), 1).unwrap();
    let mut g = Graph::new();
    let keep = Keep::from_visible(2, 4, vec![true, false, false, false, false, false, false, false]).unwrap();
    assert!(model.encode(&mut g, &image_batch(0), &keep).is_err());
}

#[test]
fn masked_content_is_invisible() {
    let model = Model::<f64>::new(toy_config(), 1).unwrap();
    let keep = Keep::from_visible(2, 4, vec![true, false, true, false, false, true, false, true]).unwrap();
    let a = image_batch(0);
    let mut patches = a.patches().unwrap().clone();
    // Overwrite the hidden positions with unrelated values.
    let noise = random_patches(2, 4, 5, 9);
    for i in 0..2 {
        for p in 0..4 {
            if !keep.is_visible(i, p) {
                for j in 0..5 {
                    let k = (i * 4 + p) * 5 + j;
                    patches.data_mut()[k] = noise.data()[k];
                }
            }
        }
    }
    let b = TokenBatch::from_patches(Modality::Image2d, patches, vec![2, 2]).unwrap();
    let mut g = Graph::new();
    let ea = model.encode(&mut g, &a, &keep).unwrap();
    let eb = model.encode(&mut g, &b, &keep).unwrap();
    assert_eq!(g.value(ea.hidden), g.value(eb.hidden));
}

#[test]
fn text_padding_does_not_leak() {
    let model = Model::<f64>::new(toy_config(), 1).unwrap();
    let a = TokenBatch::<f64>::from_ids(vec![2, 5, 6, 0, 0, 0], 1, 6).unwrap();
    let b = TokenBatch::<f64> {
        modality: Modality::Text,
        n: 1,
        len: 6,
        tokens: Tokens::Text { ids: vec![2, 5, 6, 9, 12, 4], valid: vec![true, true, true, false, false, false] },
    };
    let mut g = Graph::new();
    let ea = model.encode(&mut g, &a, &Keep::all(1, 6)).unwrap();
    let eb = model.encode(&mut g, &b, &Keep::all(1, 6)).unwrap();
    let va = g.value(ea.hidden).data()[..4 * 16].to_vec();
    assert_eq!(va, g.value(eb.hidden).data()[..4 * 16].to_vec());
}

/// Independent evaluation of one pre-norm block on a two-token input.
#[test]
fn single_block_matches_hand_rolled_oracle() {
    let cfg = ModelConfig { depth: 1, ..toy_config() };
    let model = Model::<f64>::new(cfg, 5).unwrap();
    let block = &model.backbone.blocks[0];
    let x = random_patches(1, 2, 16, 3);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = block.forward(&mut g, &model.params, xv, None).unwrap();
    let got = g.value(out).data().to_vec();

    let p = |id| model.params.value(id).data().to_vec();
    let d = 16;
    let heads = 2;
    let hd = d / heads;
    let ln = |v: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
        v.iter().enumerate().map(|(i, a)| (a - m) / (var + 1e-6).sqrt() * gamma[i] + beta[i]).collect()
    };
    let lin = |v: &[f64], w: &[f64], b: &[f64], out: usize| -> Vec<f64> {
        (0..out).map(|o| b[o] + v.iter().enumerate().map(|(i, a)| a * w[i * out + o]).sum::<f64>()).collect()
    };
    let gelu = |a: f64| 0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh());
    let rows: Vec<Vec<f64>> = (0..2).map(|t| x.data()[t * d..(t + 1) * d].to_vec()).collect();
    let h: Vec<Vec<f64>> = rows.iter().map(|r| ln(r, &p(block.norm1.gamma), &p(block.norm1.beta))).collect();
    let qkv: Vec<Vec<f64>> = h.iter().map(|r| lin(r, &p(block.qkv.weight), &p(block.qkv.bias), 3 * d)).collect();
    let mut att = vec![vec![0.0; d]; 2];
    for head in 0..heads {
        for t in 0..2 {
            let q = &qkv[t][head * hd..(head + 1) * hd];
            let scores: Vec<f64> = (0..2)
                .map(|u| {
                    let k = &qkv[u][d + head * hd..d + (head + 1) * hd];
                    q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for u in 0..2 {
                for j in 0..hd {
                    att[t][head * hd + j] += e[u] / z * qkv[u][2 * d + head * hd + j];
                }
            }
        }
    }
    let mut expected = Vec::new();
    for t in 0..2 {
        let a = lin(&att[t], &p(block.proj.weight), &p(block.proj.bias), d);
        let x1: Vec<f64> = rows[t].iter().zip(&a).map(|(u, v)| u + v).collect();
        let h2 = ln(&x1, &p(block.norm2.gamma), &p(block.norm2.beta));
        let m = lin(&h2, &p(block.fc1.weight), &p(block.fc1.bias), 2 * d);
        let m: Vec<f64> = m.into_iter().map(gelu).collect();
        let m = lin(&m, &p(block.fc2.weight), &p(block.fc2.bias), d);
        expected.extend(x1.iter().zip(&m).map(|(u, v)| u + v));
    }
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn decoder_shapes_and_unknown_key() {
    let mut model = Model::<f64>::new(toy_config(), 1).unwrap();
    model.add_decoder(0, Modality::Image2d, 1).unwrap();
    model.add_decoder(1, Modality::Text, 1).unwrap();
    assert!(model.add_decoder(0, Modality::Image2d, 1).is_err());
    let mut g = Graph::new();
    let keep = Keep::from_visible(2, 4, vec![true, false, true, false, false, true, false, true]).unwrap();
    let enc = model.encode(&mut g, &image_batch(0), &keep).unwrap();
    let rec = model.decode_visual(&mut g, 0, &enc).unwrap();
    assert_eq!(g.shape(rec), &[2, 4, 5]);
    assert!(model.decode_visual(&mut g, 7, &enc).is_err());
    assert!(model.decode_visual(&mut g, 1, &enc).is_err());
    assert!(model.predict_tokens(&mut g, 0, &enc).is_err());

    let text = TokenBatch::<f64>::from_ids(vec![2, 5, 6, 0, 0, 0], 1, 6).unwrap();
    let enc = model.encode(&mut g, &text, &Keep::all(1, 6)).unwrap();
    let logits = model.predict_tokens(&mut g, 1, &enc).unwrap();
    assert_eq!(g.shape(logits), &[1, 6, 20]);
}

#[test]
fn mask_embedding_only_affects_masked_outputs_through_decoder() {
    let mut model = Model::<f64>::new(toy_config(), 1).unwrap();
    model.add_decoder(0, Modality::Image2d, 1).unwrap();
    let keep = Keep::from_visible(2, 4, vec![true, false, true, false, false, true, false, true]).unwrap();
    let run = |m: &Model<f64>| {
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &image_batch(0), &keep).unwrap();
        let hidden = g.value(enc.hidden).clone();
        let rec = m.decode_visual(&mut g, 0, &enc).unwrap();
        (hidden, g.value(rec).clone())
    };
    let (h0, r0) = run(&model);
    let coss_core::model::Decoder::Visual(dec) = model.decoder(0).unwrap().clone() else { panic!() };
    model.params.get_mut(dec.mask_token).value.data_mut().iter_mut().for_each(|x| *x = 0.0);
    let (h1, r1) = run(&model);
    assert_eq!(h0, h1);
    for i in 0..2 {
        for p in 0..4 {
            if !keep.is_visible(i, p) {
                let k = (i * 4 + p) * 5;
                assert!((0..5).any(|j| r0.data()[k + j] != r1.data()[k + j]));
            }
        }
    }
}

#[test]
fn decoder_init_depends_only_on_seed_and_key() {
    let mut a = Model::<f32>::new(toy_config(), 1).unwrap();
    let mut b = Model::<f32>::new(toy_config(), 2).unwrap();
    a.add_decoder(3, Modality::Volume3d, 9).unwrap();
    b.add_decoder(3, Modality::Volume3d, 9).unwrap();
    for id in a.decoder_params(3) {
        let name = &a.params.get(id).name;
        let other = b.params.id(name).unwrap();
        assert_eq!(a.params.value(id), b.params.value(other));
    }
}

#[test]
fn teacher_copies_then_diverges() {
    let mut model = Model::<f64>::new(toy_config(), 1).unwrap();
    model.add_decoder(0, Modality::Image2d, 1).unwrap();
    let teacher = FrozenTeacher::snapshot(&model);
    let batch = image_batch(4);
    let keep = Keep::all(2, 4);
    let mut g = Graph::new();
    let s = model.encode(&mut g, &batch, &keep).unwrap();
    let t = teacher.encode(&mut g, &batch, &keep).unwrap();
    assert_eq!(g.value(s.hidden), g.value(t.hidden));

    let checksum = teacher.checksum().to_string();
    let mut opt = AdamW::new(AdamWConfig::default());
    for step in 0..10 {
        let mut g = Graph::new();
        let enc = model.encode(&mut g, &image_batch(100 + step), &keep).unwrap();
        let rec = model.decode_visual(&mut g, 0, &enc).unwrap();
        let sq = g.square(rec);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut model.params, &grads, 1e-2).unwrap();
    }
    assert_eq!(teacher.checksum(), checksum);
    assert!(teacher.verify());
    let mut g = Graph::new();
    let s = model.encode(&mut g, &batch, &keep).unwrap();
    let t = teacher.encode(&mut g, &batch, &keep).unwrap();
    assert!(g.value(s.hidden).max_abs_diff(g.value(t.hidden)) > 0.0);
    // Teacher outputs never require gradients.
    assert!(!g.requires_grad(t.hidden));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut model = Model::<f32>::new(toy_config(), 1).unwrap();
    model.add_decoder(0, Modality::Text, 1).unwrap();
    model.add_decoder(1, Modality::Volume3d, 1).unwrap();
    model.save(&path, serde_json::json!({"stage": 1})).unwrap();
    let (loaded, meta) = Model::<f32>::load(&path).unwrap();
    assert_eq!(meta["stage"], 1);
    assert_eq!(loaded.checksum(), model.checksum());
    assert_eq!(loaded.decoders(), model.decoders());
    let names: Vec<_> = model.params.iter().map(|(_, p)| p.name.clone()).collect();
    let loaded_names: Vec<_> = loaded.params.iter().map(|(_, p)| p.name.clone()).collect();
    assert_eq!(names, loaded_names);

    let info = coss_core::model::read_checkpoint_info(&path).unwrap();
    assert_eq!(info.param_count, model.param_count());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(Model::<f32>::load(&path).is_err());
    bytes[0] = b'C';
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(Model::<f32>::load(&path).is_err());
}

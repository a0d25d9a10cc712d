use coss_core::pretext::{
    apply_text_mask, mim_loss, mlm_loss, sample_text_mask, sample_visual_mask, MaskPlan, TEXT_MASK_RATIO, VISUAL_MASK_RATIO,
};
use coss_core::rng::{stream_rng, Stream};
use coss_core::tokenizers::{Modality, TokenBatch, MASK, PAD};
use coss_numerics::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn text_row(valid_words: usize, len: usize) -> Vec<u32> {
    let mut ids = vec![2];
    ids.extend((0..valid_words).map(|i| 4 + i as u32 % 50));
    ids.resize(len, PAD);
    ids
}

fn visual(n: usize, l: usize) -> TokenBatch<f32> {
    TokenBatch::from_patches(Modality::Image2d, Tensor::zeros(&[n, l, 2]), vec![l]).unwrap()
}

#[test]
fn hundred_valid_tokens_mask_fifteen() {
    let batch = TokenBatch::<f32>::from_ids(text_row(100, 112), 1, 112).unwrap();
    let plan = sample_text_mask(&batch, TEXT_MASK_RATIO, &mut stream_rng(0, Stream::Mask, 0)).unwrap();
    assert_eq!(plan.masked_count(), 15);
}

#[test]
fn few_tokens_still_mask_one() {
    let batch = TokenBatch::<f32>::from_ids(text_row(3, 112), 1, 112).unwrap();
    let plan = sample_text_mask(&batch, TEXT_MASK_RATIO, &mut stream_rng(0, Stream::Mask, 0)).unwrap();
    assert_eq!(plan.masked_count(), 1);
}

#[test]
fn empty_text_masks_nothing() {
    let batch = TokenBatch::<f32>::from_ids(text_row(0, 8), 1, 8).unwrap();
    let plan = sample_text_mask(&batch, TEXT_MASK_RATIO, &mut stream_rng(0, Stream::Mask, 0)).unwrap();
    assert_eq!(plan.masked_count(), 0);
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 8, 6]));
    let loss = mlm_loss(&mut g, logits, &text_row(0, 8), &plan).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
}

#[test]
fn pad_and_cls_never_masked() {
    let ids: Vec<u32> = (0..4).flat_map(|i| text_row(5 + i * 7, 40)).collect();
    let batch = TokenBatch::<f32>::from_ids(ids.clone(), 4, 40).unwrap();
    let mut rng = stream_rng(1, Stream::Mask, 0);
    for _ in 0..1000 {
        let plan = sample_text_mask(&batch, TEXT_MASK_RATIO, &mut rng).unwrap();
        for (k, &m) in plan.masked.iter().enumerate() {
            if m {
                assert!(ids[k] != PAD && ids[k] != 2);
            }
        }
    }
}

#[test]
fn masked_ids_replaced_targets_kept() {
    let ids = text_row(20, 30);
    let batch = TokenBatch::<f32>::from_ids(ids.clone(), 1, 30).unwrap();
    let plan = sample_text_mask(&batch, TEXT_MASK_RATIO, &mut stream_rng(2, Stream::Mask, 0)).unwrap();
    let masked = apply_text_mask(&batch, &plan).unwrap();
    for (k, &id) in masked.ids().unwrap().iter().enumerate() {
        assert_eq!(id, if plan.masked[k] { MASK } else { ids[k] });
    }
    assert_eq!(masked.valid(), batch.valid());
    assert_eq!(plan.keep().visible_count().unwrap(), 30);
}

#[test]
fn visual_mask_counts() {
    for (l, m) in [(196, 147), (144, 108), (4, 3)] {
        let plan = sample_visual_mask(&visual(3, l), VISUAL_MASK_RATIO, &mut stream_rng(0, Stream::Mask, 0)).unwrap();
        for i in 0..3 {
            assert_eq!(plan.sample_masked_count(i), m);
        }
        assert_eq!(plan.keep().visible_count().unwrap(), l - m);
    }
}

#[test]
fn visual_ratio_outside_unit_interval_rejected() {
    for r in [0.0, 1.0, -0.1, 1.5] {
        assert!(sample_visual_mask(&visual(1, 16), r, &mut stream_rng(0, Stream::Mask, 0)).is_err());
    }
}

#[test]
fn samples_receive_independent_masks() {
    let mut rng = stream_rng(3, Stream::Mask, 0);
    let batch = visual(2, 196);
    for _ in 0..100 {
        let plan = sample_visual_mask(&batch, VISUAL_MASK_RATIO, &mut rng).unwrap();
        assert_ne!(plan.masked[..196], plan.masked[196..]);
    }
}

#[test]
fn masks_reproducible_from_seed() {
    let batch = visual(4, 64);
    let a = sample_visual_mask(&batch, 0.75, &mut stream_rng(9, Stream::Mask, 5)).unwrap();
    let b = sample_visual_mask(&batch, 0.75, &mut stream_rng(9, Stream::Mask, 5)).unwrap();
    let c = sample_visual_mask(&batch, 0.75, &mut stream_rng(9, Stream::Mask, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

fn plan_all(modality: Modality, n: usize, len: usize) -> MaskPlan {
    MaskPlan { modality, n, len, ratio: 0.5, masked: vec![true; n * len] }
}

#[test]
fn uniform_logits_give_ln_v() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[2, 3, 8]));
    let loss = mlm_loss(&mut g, logits, &[1, 2, 3, 4, 5, 6], &plan_all(Modality::Text, 2, 3)).unwrap();
    assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_give_zero_loss() {
    let targets = [3u32, 0, 5];
    let logits = Tensor::from_fn(&[1, 3, 6], |k| if targets[k / 6] as usize == k % 6 { 100.0 } else { 0.0 });
    let mut g = Graph::<f64>::new();
    let logits = g.constant(logits);
    let loss = mlm_loss(&mut g, logits, &targets, &plan_all(Modality::Text, 1, 3)).unwrap();
    assert!(g.value(loss).item() < 1e-12);
}

#[test]
fn mlm_loss_matches_naive_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, l, v) = (3, 7, 11);
    let logits = Tensor::<f64>::from_fn(&[n, l, v], |_| rng.gen_range(-3.0..3.0));
    let targets: Vec<u32> = (0..n * l).map(|_| rng.gen_range(0..v as u32)).collect();
    let masked: Vec<bool> = (0..n * l).map(|_| rng.gen_bool(0.4)).collect();
    let plan = MaskPlan { modality: Modality::Text, n, len: l, ratio: 0.4, masked: masked.clone() };
    let mut g = Graph::new();
    let lv = g.constant(logits.clone());
    let loss = mlm_loss(&mut g, lv, &targets, &plan).unwrap();

    let mut total = 0.0;
    let mut count = 0;
    for r in 0..n * l {
        if !masked[r] {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[targets[r] as usize].exp() / z).ln();
        count += 1;
    }
    assert!((g.value(loss).item() - total / count as f64).abs() < 1e-6);
}

#[test]
fn mim_loss_basic_values() {
    let plan = plan_all(Modality::Image2d, 2, 3);
    let mut g = Graph::<f64>::new();
    let target = Tensor::zeros(&[2, 3, 4]);
    let rec = g.constant(Tensor::zeros(&[2, 3, 4]));
    let loss = mim_loss(&mut g, rec, &target, &plan).unwrap();
    assert_eq!(g.value(loss).item(), 0.0);
    let rec = g.constant(Tensor::ones(&[2, 3, 4]));
    let loss = mim_loss(&mut g, rec, &target, &plan).unwrap();
    assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
}

#[test]
fn unmasked_reconstruction_has_zero_gradient() {
    let plan = MaskPlan {
        modality: Modality::Image2d,
        n: 1,
        len: 4,
        ratio: 0.5,
        masked: vec![true, false, true, false],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("rec", Tensor::from_fn(&[1, 4, 3], |_| rng.gen_range(-1.0..1.0))).unwrap();
    let target = Tensor::from_fn(&[1, 4, 3], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::new();
    let rec = g.param(&store, id);
    let loss = mim_loss(&mut g, rec, &target, &plan).unwrap();
    let grads = g.backward(loss).unwrap();
    let grad = grads.get(id).unwrap();
    for p in 0..4 {
        let row = &grad.data()[p * 3..(p + 1) * 3];
        if plan.masked[p] {
            assert!(row.iter().any(|&x| x != 0.0));
        } else {
            assert!(row.iter().all(|&x| x == 0.0));
        }
    }
    // Perturbing an unmasked reconstruction leaves the loss unchanged.
    let before = g.value(loss).item();
    store.get_mut(id).value.data_mut()[3] += 10.0;
    let mut g = Graph::new();
    let rec = g.param(&store, id);
    let loss = mim_loss(&mut g, rec, &target, &plan).unwrap();
    assert_eq!(g.value(loss).item(), before);
}

proptest! {
    #[test]
    fn visual_plan_leaves_one_visible(l in 2usize..300, ratio in 0.01f64..0.99, seed in 0u64..1000) {
        let plan = sample_visual_mask(&visual(2, l), ratio, &mut stream_rng(seed, Stream::Mask, 0)).unwrap();
        for i in 0..2 {
            let m = plan.sample_masked_count(i);
            prop_assert!(m >= 1 && m < l);
        }
    }

    #[test]
    fn text_plan_count_rule(valid in 0usize..60, seed in 0u64..1000) {
        let batch = TokenBatch::<f32>::from_ids(text_row(valid, 64), 1, 64).unwrap();
        let plan = sample_text_mask(&batch, 0.15, &mut stream_rng(seed, Stream::Mask, 0)).unwrap();
        let expected = if valid == 0 { 0 } else { ((0.15 * valid as f64 + 0.5).floor() as usize).max(1) };
        prop_assert_eq!(plan.masked_count(), expected);
    }
}

mod common;

use common::{toy_config, toy_data, toy_tokenizer};
use coss_core::data::{separable_classification, square_segmentation, LabeledSplits, Target};
use coss_core::finetune::{
    binary_auc, classification_metrics, finetune_task, segmentation_metrics, tap_layers, EvalReport, FinetuneConfig, HeadKind,
    TaskModel,
};
use coss_core::model::Model;
use coss_core::tokenizers::{Modality, Tokenizer, TokenizerConfig, Vocabulary};
use coss_numerics::Graph;
use proptest::prelude::*;

fn toy_model(tok: &TokenizerConfig, seed: u64) -> Model<f32> {
    let cfg = toy_config(&["image2d"]);
    let cfg = coss_core::config::RunConfig { tokenizer: tok.clone(), ..cfg };
    Model::new(cfg.model_config(16), seed).unwrap()
}

fn tokenizer(cfg: TokenizerConfig) -> Tokenizer {
    Tokenizer::new(cfg, Vocabulary::build(&["a b c"], 16).unwrap()).unwrap()
}

#[test]
fn tap_rule_matches_depth_ratio() {
    assert_eq!(tap_layers(12), [4, 7, 10, 12]);
    assert_eq!(tap_layers(4), [1, 2, 3, 4]);
    assert_eq!(tap_layers(2), [1, 1, 1, 2]);
}

#[test]
fn classification_logit_shape() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let splits = separable_classification(Modality::Image2d, &tok, [3, 0, 0], 0).unwrap();
    let samples: Vec<_> = splits.train.iter().map(|s| &s.sample).collect();
    for head in [HeadKind::Mlp2, HeadKind::Mlp1] {
        let tm = TaskModel::attach(&model, &tok, Modality::Image2d, head, 5, 8, 1).unwrap();
        let batch = t.batch::<f32>(Modality::Image2d, &samples).unwrap();
        let mut g = Graph::new();
        let logits = tm.classify(&mut g, &batch).unwrap();
        assert_eq!(g.shape(logits), &[3, 5]);
    }
}

#[test]
fn segmentation_output_matches_input_size() {
    let tok = TokenizerConfig { image_size: [224, 224], patch2d: [16, 16], ..toy_tokenizer() };
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let tm = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Seg, 2, 4, 0).unwrap();
    let splits = square_segmentation(Modality::Image2d, &tok, [1, 0, 0], 0).unwrap();
    let batch = t.batch::<f32>(Modality::Image2d, &[&splits.train[0].sample]).unwrap();
    let mut g = Graph::new();
    let out = tm.segment(&mut g, &batch).unwrap();
    assert_eq!(g.shape(out), &[1, 2, 224, 224]);

    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let tm = TaskModel::attach(&model, &tok, Modality::Volume3d, HeadKind::Seg, 3, 4, 0).unwrap();
    let splits = square_segmentation(Modality::Volume3d, &tok, [2, 0, 0], 0).unwrap();
    let samples: Vec<_> = splits.train.iter().map(|s| &s.sample).collect();
    let batch = t.batch::<f32>(Modality::Volume3d, &samples).unwrap();
    let mut g = Graph::new();
    let out = tm.segment(&mut g, &batch).unwrap();
    assert_eq!(g.shape(out), &[2, 3, 8, 8, 8]);
}

#[test]
fn seg_head_on_text_is_rejected() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    assert!(TaskModel::attach(&model, &tok, Modality::Text, HeadKind::Seg, 2, 4, 0).is_err());
}

#[test]
fn heads_depend_on_seed_encoder_does_not() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 3);
    let a = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Mlp2, 4, 8, 1).unwrap();
    let b = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Mlp2, 4, 8, 2).unwrap();
    for id in a.backbone_params() {
        assert_eq!(a.params.get(id).value, model.params.get(id).value);
        assert_eq!(a.params.get(id).value, b.params.get(id).value);
    }
    let differs = a.head.params().iter().zip(b.head.params()).any(|(&x, y)| a.params.get(x).value != b.params.get(y).value);
    assert!(differs);
}

fn tiny_cfg(steps: usize, lr: f64) -> FinetuneConfig {
    FinetuneConfig { steps: Some(steps), batch_size: 8, lr, warmup_epochs: 1, ..FinetuneConfig::default() }
}

#[test]
fn separable_task_is_solved() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let splits = separable_classification(Modality::Image2d, &tok, [64, 16, 32], 5).unwrap();
    let mut tm = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Mlp1, 2, 8, 0).unwrap();
    let out = finetune_task(&mut tm, &t, &splits, &tiny_cfg(200, 1e-3)).unwrap();
    let EvalReport::Classification(report) = &out.test else { panic!("classification report expected") };
    assert_eq!(report.acc, 1.0);
    assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
}

#[test]
fn square_segmentation_is_learned() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let splits = square_segmentation(Modality::Image2d, &tok, [64, 16, 16], 6).unwrap();
    let mut tm = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Seg, 2, 8, 0).unwrap();
    let out = finetune_task(&mut tm, &t, &splits, &tiny_cfg(400, 3e-3)).unwrap();
    let EvalReport::Segmentation(report) = &out.test else { panic!("segmentation report expected") };
    assert!(report.dice > 0.95, "dice {}", report.dice);
    assert!(out.epoch_losses.last().unwrap() < &out.epoch_losses[0]);
}

#[test]
fn empty_split_is_rejected() {
    let tok = toy_tokenizer();
    let model = toy_model(&tok, 0);
    let t = tokenizer(tok.clone());
    let mut splits: LabeledSplits = separable_classification(Modality::Image2d, &tok, [8, 0, 4], 0).unwrap();
    let mut tm = TaskModel::attach(&model, &tok, Modality::Image2d, HeadKind::Mlp1, 2, 8, 0).unwrap();
    assert!(finetune_task(&mut tm, &t, &splits, &tiny_cfg(2, 1e-3)).is_err());
    splits.val = splits.test.clone();
    assert!(finetune_task(&mut tm, &t, &splits, &tiny_cfg(2, 1e-3)).is_ok());
    assert!(matches!(splits.train[0].target, Target::Class(_)));
}

#[test]
fn pretrained_backbone_is_copied() {
    let mut cfg = toy_config(&["image2d"]);
    cfg.scheduler.steps_per_stage = Some(3);
    let data = toy_data(&cfg, 16, 0, 0);
    let run = coss_core::baselines::run_pipeline::<f32>(&cfg, &data.tokenizer, &data.train, &[], None).unwrap();
    let tm = TaskModel::attach(&run.model, &cfg.tokenizer, Modality::Image2d, HeadKind::Mlp2, 3, 8, 0).unwrap();
    for id in run.model.backbone_params() {
        assert_eq!(tm.params.get(id).name, run.model.params.get(id).name);
        assert_eq!(tm.params.get(id).value, run.model.params.get(id).value);
    }
    assert!(!tm.params.iter().any(|(_, p)| p.name.starts_with("decoder.")));
}

// ------------------------------------------------------------------ metrics

/// Mann-Whitney form of the AUC: fraction of (positive, negative) pairs
/// ranked correctly, ties counting one half.
fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                den += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn perfect_and_chance_classification() {
    let r = classification_metrics(&[0, 1, 2], &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    assert_eq!((r.acc, r.auc, r.f1), (1.0, 1.0, 1.0));
    let r = classification_metrics(&[0, 1], &[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
    assert_eq!(r.auc, 0.5);
}

#[test]
fn three_class_hand_worked() {
    let labels = [0, 0, 0, 1, 1, 1, 1, 2, 2, 2];
    let probs = vec![
        vec![0.7, 0.2, 0.1],
        vec![0.5, 0.3, 0.2],
        vec![0.2, 0.5, 0.3],
        vec![0.1, 0.8, 0.1],
        vec![0.3, 0.6, 0.1],
        vec![0.6, 0.3, 0.1],
        vec![0.2, 0.45, 0.35],
        vec![0.1, 0.2, 0.7],
        vec![0.2, 0.3, 0.5],
        vec![0.1, 0.6, 0.3],
    ];
    let r = classification_metrics(&labels, &probs).unwrap();
    // Predictions 0 0 1 1 1 0 1 2 2 1: seven correct.
    assert_eq!(r.acc, 0.7);
    // Per-class (tp, fp, fn): (2,1,1), (3,2,1), (2,0,1).
    let f1 = [2.0 / 3.0, 2.0 / 3.0, 0.8];
    for k in 0..3 {
        assert!((r.per_class[k].f1 - f1[k]).abs() < 1e-15);
    }
    assert!((r.f1 - (2.0 / 3.0 + 2.0 / 3.0 + 0.8) / 3.0).abs() < 1e-15);
    let auc = [17.0 / 21.0, 18.5 / 24.0, 19.5 / 21.0];
    for k in 0..3 {
        assert!((r.per_class[k].auc - auc[k]).abs() < 1e-15, "class {k}: {}", r.per_class[k].auc);
    }
    assert!((r.auc - auc.iter().sum::<f64>() / 3.0).abs() < 1e-15);
}

#[test]
fn single_class_auc_is_nan() {
    let r = classification_metrics(&[1, 1], &[vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
    assert!(r.auc.is_nan());
    assert_eq!(r.acc, 0.5);
}

#[test]
fn rows_must_be_distributions() {
    assert!(classification_metrics(&[0], &[vec![0.5, 0.6]]).is_err());
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
        let positive: Vec<bool> = raw.iter().map(|(_, p)| *p).collect();
        prop_assume!(positive.iter().any(|&p| p) && positive.iter().any(|&p| !p));
        let got = binary_auc(&scores, &positive);
        prop_assert!((got - pairwise_auc(&scores, &positive)).abs() < 1e-12);
    }

    #[test]
    fn macro_f1_invariant_under_relabeling(
        pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..30),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let one_hot = |k: usize| { let mut v = vec![0.0; 3]; v[k] = 1.0; v };
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let probs: Vec<Vec<f64>> = pairs.iter().map(|p| one_hot(p.1)).collect();
        let relabeled: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let reprobs: Vec<Vec<f64>> = pairs.iter().map(|p| one_hot(perm[p.1])).collect();
        let a = classification_metrics(&labels, &probs).unwrap();
        let b = classification_metrics(&relabeled, &reprobs).unwrap();
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        prop_assert_eq!(a.acc, b.acc);
    }
}

fn grid_mask(dims: [usize; 2], cells: &[(usize, usize)]) -> Vec<bool> {
    let mut m = vec![false; dims[0] * dims[1]];
    for &(r, c) in cells {
        m[r * dims[1] + c] = true;
    }
    m
}

fn square(lo: (usize, usize), side: usize) -> Vec<(usize, usize)> {
    (lo.0..lo.0 + side).flat_map(|r| (lo.1..lo.1 + side).map(move |c| (r, c))).collect()
}

/// Brute-force HD95: boundary by 4-neighbour scan, all-pairs distances,
/// pooled both directions, linearly interpolated 95th percentile.
fn brute_hd95(p: &[bool], g: &[bool], dims: [usize; 2]) -> (f64, f64) {
    let edge = |m: &[bool]| -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        for r in 0..dims[0] as i64 {
            for c in 0..dims[1] as i64 {
                if !m[(r * dims[1] as i64 + c) as usize] {
                    continue;
                }
                let bg = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr < 0 || cc < 0 || rr >= dims[0] as i64 || cc >= dims[1] as i64 || !m[(rr * dims[1] as i64 + cc) as usize]
                });
                if bg {
                    out.push((r, c));
                }
            }
        }
        out
    };
    let (bp, bg) = (edge(p), edge(g));
    let directed = |a: &[(i64, i64)], b: &[(i64, i64)]| -> Vec<f64> {
        a.iter()
            .map(|x| b.iter().map(|y| (((x.0 - y.0).pow(2) + (x.1 - y.1).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min))
            .collect()
    };
    let mut all = directed(&bp, &bg);
    all.extend(directed(&bg, &bp));
    all.sort_by(f64::total_cmp);
    let hausdorff = *all.last().unwrap();
    let rank = 0.95 * (all.len() - 1) as f64;
    let (lo, hi) = (rank.floor() as usize, rank.ceil() as usize);
    (all[lo] + (all[hi] - all[lo]) * (rank - lo as f64), hausdorff)
}

#[test]
fn dice_examples() {
    let dims = [4, 4];
    let p = grid_mask(dims, &[(0, 0)]);
    let g = grid_mask(dims, &[(0, 0), (0, 1)]);
    let m = segmentation_metrics(&p, &g, &dims, &[1.0, 1.0]).unwrap();
    assert_eq!(m.dice, 2.0 / 3.0);
    let m = segmentation_metrics(&g, &g, &dims, &[1.0, 1.0]).unwrap();
    assert_eq!((m.dice, m.hd95), (1.0, 0.0));
    let empty = vec![false; 16];
    let m = segmentation_metrics(&empty, &empty, &dims, &[1.0, 1.0]).unwrap();
    assert_eq!((m.dice, m.hd95), (1.0, 0.0));
    let m = segmentation_metrics(&empty, &g, &dims, &[1.0, 1.0]).unwrap();
    assert_eq!((m.dice, m.hd95), (0.0, 32f64.sqrt()));
    assert!(segmentation_metrics(&empty[..15], &g, &dims, &[1.0, 1.0]).is_err());
}

#[test]
fn offset_squares_hd95_matches_brute_force() {
    let dims = [12, 12];
    for (a, b, side) in [((1, 1), (3, 4), 5), ((0, 0), (6, 6), 6), ((2, 2), (2, 3), 7)] {
        let p = grid_mask(dims, &square(a, side));
        let g = grid_mask(dims, &square(b, side - 1));
        let m = segmentation_metrics(&p, &g, &dims, &[1.0, 1.0]).unwrap();
        let (hd95, _) = brute_hd95(&p, &g, dims);
        assert_eq!(m.hd95, hd95, "squares at {a:?} and {b:?}");
    }
}

proptest! {
    #[test]
    fn segmentation_metric_laws(
        p in proptest::collection::vec(any::<bool>(), 64),
        g in proptest::collection::vec(any::<bool>(), 64),
    ) {
        let dims = [8, 8];
        let a = segmentation_metrics(&p, &g, &dims, &[1.0, 1.0]).unwrap();
        let b = segmentation_metrics(&g, &p, &dims, &[1.0, 1.0]).unwrap();
        prop_assert_eq!(a.dice, b.dice);
        prop_assert!((0.0..=1.0).contains(&a.dice));
        prop_assert!(a.hd95 >= 0.0);
        if p.iter().any(|&x| x) && g.iter().any(|&x| x) {
            let (hd95, hausdorff) = brute_hd95(&p, &g, dims);
            prop_assert!((a.hd95 - hd95).abs() < 1e-12);
            prop_assert!(a.hd95 <= hausdorff + 1e-12);
        }
    }
}

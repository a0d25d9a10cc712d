//! Every differentiable op checked against central finite differences at
//! 64-bit precision, plus the small closed-form examples.

use coss_numerics::{AdamW, AdamWConfig, Graph, ParamId, ParamStore, Tensor, Var, NO_INDEX};
use proptest::prelude::*;

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    // splitmix-style stream, deterministic and dependency free
    let mut s = seed.wrapping_add(0x9e37_79b9_7f4a_7c15);
    Tensor::from_fn(shape, |_| {
        s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    })
}

/// Compares analytic gradients of `f` with central differences (h = 1e-4).
fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.insert(format!("p{i}"), seeded(s, i as u64 + 1)).unwrap())
        .collect();
    let eval = |store: &ParamStore<f64>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let loss = f(&mut g, &vars);
        (g.value(loss).item(), g, loss)
    };
    let (_, g, loss) = eval(&store);
    let grads = g.backward(loss).unwrap();
    let h = 1e-4;
    for &id in &ids {
        let analytic = grads.get(id).unwrap().clone();
        for j in 0..analytic.len() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = eval(&store).0;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let down = eval(&store).0;
            store.get_mut(id).value.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            assert!(err < 1e-3 || (a - numeric).abs() < 1e-8, "param {id:?}[{j}]: analytic {a} vs numeric {numeric}");
        }
    }
}

#[test]
fn sum_of_vector_has_unit_gradient() {
    let mut store = ParamStore::new();
    let p = store.insert("p", Tensor::new(vec![3], vec![0.3, -2.0, 5.0]).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.param(&store, p);
    let loss = g.sum(v);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn half_squared_norm_gradient_is_identity() {
    let mut store = ParamStore::new();
    let p = store.insert("p", Tensor::new(vec![2], vec![2.0, -1.0]).unwrap()).unwrap();
    let mut g = Graph::<f64>::new();
    let v = g.param(&store, p);
    let sq = g.square(v);
    let s = g.sum(sq);
    let loss = g.scale(s, 0.5);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[2.0, -1.0]);
}

#[test]
fn disconnected_parameter_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::ones(&[2])).unwrap();
    let b = store.insert("b", Tensor::ones(&[3])).unwrap();
    let mut g = Graph::<f64>::new();
    let va = g.param(&store, a);
    let _vb = g.param(&store, b);
    let loss = g.sum(va);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(b).unwrap().data(), &[0.0; 3]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut store = ParamStore::new();
    let a = store.insert("a", Tensor::ones(&[2])).unwrap();
    let mut g = Graph::<f64>::new();
    let va = g.param(&store, a);
    assert!(g.backward(va).is_err());
}

#[test]
fn elementwise_ops() {
    check(&[&[2, 3], &[2, 3]], |g, v| {
        let a = g.add(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.mul(b, v[1]).unwrap();
        let d = g.square(c);
        let e = g.scale(d, 0.7);
        g.sum(e)
    });
    check(&[&[4], &[4]], |g, v| {
        let sq = g.square(v[1]);
        let one = g.constant(Tensor::ones(&[4]));
        let denom = g.add(sq, one).unwrap();
        let q = g.div(v[0], denom).unwrap();
        g.sum(q)
    });
}

#[test]
fn row_broadcast_and_constants() {
    check(&[&[3, 4], &[4], &[4]], |g, v| {
        let a = g.mul_row(v[0], v[1]).unwrap();
        let b = g.add_row(a, v[2]).unwrap();
        let c = g.mul_const(b, Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1)).unwrap();
        let d = g.add_const(c, &Tensor::full(&[3, 4], 0.3)).unwrap();
        let e = g.square(d);
        g.mean(e)
    });
}

#[test]
fn matmul_and_bmm() {
    check(&[&[2, 3, 4], &[4, 5]], |g, v| {
        let y = g.matmul(v[0], v[1]).unwrap();
        let s = g.square(y);
        g.sum(s)
    });
    check(&[&[2, 3, 4], &[2, 4, 5]], |g, v| {
        let y = g.bmm(v[0], v[1], false).unwrap();
        let s = g.square(y);
        g.sum(s)
    });
    check(&[&[2, 3, 4], &[2, 5, 4]], |g, v| {
        let y = g.bmm(v[0], v[1], true).unwrap();
        let s = g.square(y);
        g.sum(s)
    });
}

#[test]
fn gather_permute_concat_reshape() {
    check(&[&[2, 3, 4], &[2, 1, 4]], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]).unwrap();
        let r = g.reshape(p, &[4, 6]).unwrap();
        let s = g.index_select(r, 1, &[5, 0, NO_INDEX, 0]).unwrap();
        let c = g.concat(&[v[0], v[1]], 1).unwrap();
        let cs = g.square(c);
        let t = g.sum(cs);
        let ss = g.square(s);
        let u = g.sum(ss);
        let w = g.add(t, u).unwrap();
        g.scale(w, 0.5)
    });
}

#[test]
fn softmax_layernorm_gelu() {
    check(&[&[3, 5], &[3, 5]], |g, v| {
        let s = g.softmax(v[0]);
        let w = g.mul(s, v[1]).unwrap();
        let n = g.layer_norm(w, 1e-5);
        let x = g.gelu(n);
        let m = g.mul(x, v[1]).unwrap();
        g.sum(m)
    });
}

#[test]
fn sum_leading_and_cross_entropy() {
    check(&[&[2, 3, 4]], |g, v| {
        let s = g.sum_leading(v[0]);
        let q = g.square(s);
        g.sum(q)
    });
    check(&[&[5, 6]], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2, 1], &[1.0, 0.5, 0.0, 2.0, 1.0]).unwrap());
}

#[test]
fn uniform_logits_cross_entropy_is_log_v() {
    let mut g = Graph::<f64>::new();
    let logits = g.constant(Tensor::zeros(&[1, 8]));
    let loss = g.cross_entropy(logits, &[3], &[1.0]).unwrap();
    assert!((g.value(loss).item() - 8f64.ln()).abs() < 1e-12);
}

#[test]
fn adamw_single_step_matches_hand_recurrence() {
    // m = 0.1, v = 0.001; bias-corrected ratio is 1, so p = 1 - 0.1 * 1/(1+1e-8)
    let mut store = ParamStore::new();
    let p = store.insert("p", Tensor::new(vec![1], vec![1.0f64]).unwrap()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let loss = g.sum(v);
    let grads = g.backward(loss).unwrap();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    opt.step(&mut store, &grads, 0.1).unwrap();
    let expected = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((store.value(p).data()[0] - expected).abs() < 1e-12);
    assert!((store.value(p).data()[0] - 0.9).abs() < 1e-6);
}

#[test]
fn adamw_zero_lr_is_bit_identical() {
    let mut store = ParamStore::new();
    let p = store.insert("w", seeded(&[3, 3], 9).cast::<f32>()).unwrap();
    let before = store.value(p).clone();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.square(v);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.step(&mut store, &grads, 0.0).unwrap();
    assert_eq!(store.value(p), &before);
}

#[test]
fn adamw_rejects_nan_gradient_naming_parameter() {
    let mut store = ParamStore::new();
    let p = store.insert("encoder.bad", Tensor::new(vec![1], vec![f64::NAN]).unwrap()).unwrap();
    let mut g = Graph::new();
    let v = g.param(&store, p);
    let sq = g.square(v);
    let loss = g.sum(sq);
    let grads = g.backward(loss).unwrap();
    let err = AdamW::new(AdamWConfig::default()).step(&mut store, &grads, 0.1).unwrap_err();
    assert!(err.to_string().contains("encoder.bad"));
}

fn ten_steps() -> Tensor<f32> {
    let mut store = ParamStore::new();
    let p = store.insert("w", seeded(&[4, 4], 3).cast::<f32>()).unwrap();
    let x = seeded(&[2, 4], 4).cast::<f32>();
    let mut opt = AdamW::new(AdamWConfig::default());
    for _ in 0..10 {
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let xv = g.constant(x.clone());
        let y = g.matmul(xv, w).unwrap();
        let s = g.square(y);
        let loss = g.mean(s);
        let grads = g.backward(loss).unwrap();
        opt.step(&mut store, &grads, 1e-2).unwrap();
    }
    store.value(p).clone()
}

#[test]
fn adamw_runs_are_bit_identical() {
    assert_eq!(ten_steps(), ten_steps());
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..1000) {
        let t = seeded(&[a, b, c], seed);
        let mut g = Graph::<f64>::new();
        let v = g.constant(t.clone());
        let p = g.permute(v, &[1, 2, 0]).unwrap();
        let back = g.permute(p, &[2, 0, 1]).unwrap();
        prop_assert_eq!(g.value(back), &t);
    }
}

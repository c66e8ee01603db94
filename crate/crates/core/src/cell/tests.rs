use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::{GradTarget, Mode};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn kinds(names: &[&str]) -> Vec<OpKind> {
    names.iter().map(|n| n.parse().unwrap()).collect()
}

fn spec(component: Component, num_inputs: usize, b: usize, scope: &[&str], reduction: bool, width: usize) -> CellSpec {
    CellSpec {
        component,
        num_inputs,
        intermediates: b,
        scope: kinds(scope),
        is_reduction: reduction,
        width,
    }
}

fn build(store: &mut ParamStore, s: CellSpec, seed: u64) -> Cell {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = OpBuilder {
        store,
        rng: &mut rng,
        affine: false,
    };
    Cell::new(s, &mut b, AlphaSource::Fresh { std: 1e-3 }, "cell").unwrap()
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set_alpha(store: &mut ParamStore, id: ParamId, values: &[f64]) {
    store.value_mut(id).data_mut().copy_from_slice(values);
}

#[test]
fn edge_counts() {
    for b in 1..=6 {
        assert_eq!(edge_count(2, b), b * (b + 3) / 2);
        assert_eq!(edge_list(2, b).len(), b * (b + 3) / 2);
    }
    assert_eq!(edge_count(2, 2), 5);
    for (from, to) in edge_list(2, 4) {
        assert!(from < to);
    }
}

#[test]
fn every_intermediate_reads_all_predecessors() {
    let edges = edge_list(2, 4);
    for k in 0..4 {
        let to = 2 + k;
        let incoming: Vec<usize> = edges.iter().filter(|e| e.1 == to).map(|e| e.0).collect();
        assert_eq!(incoming, (0..to).collect::<Vec<_>>());
    }
}

#[test]
fn four_node_cell_with_three_ops_instantiates_eighteen() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Seq, 1, 3, &["lstm_1", "rnn_1", "skip_connect"], false, 4), 0);
    assert_eq!(cell.edges.len(), 6);
    let counts = cell.op_instance_counts();
    assert_eq!(counts["lstm_1"], 6);
    assert_eq!(counts["rnn_1"], 6);
    assert_eq!(counts["skip_connect"], 6);
    assert_eq!(counts.values().sum::<usize>(), 18);
}

#[test]
fn b4_with_eight_ops_has_112_instances() {
    let mut store = ParamStore::new();
    let scope = &CNN_SCOPE_8;
    let cell = build(&mut store, spec(Component::Cnn, 2, 4, scope, false, 2), 0);
    assert_eq!(cell.edges.len(), 14);
    assert_eq!(cell.op_instance_counts().values().sum::<usize>(), 112);
}

const CNN_SCOPE_8: [&str; 8] = [
    "max_pool_3x3",
    "avg_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
    "skip_connect",
    "none",
];

#[test]
fn reduction_strides_only_on_input_edges() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 2, 3, &["max_pool_3x3"], true, 2), 0);
    for e in &cell.edges {
        let expected = if e.from < 2 { 2 } else { 1 };
        assert!(e.ops.iter().all(|op| op.stride == expected));
    }
}

#[test]
fn unknown_scope_name_is_a_catalog_error() {
    assert!(matches!("conv_9x9".parse::<OpKind>(), Err(Error::Catalog(_))));
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = OpBuilder {
        store: &mut store,
        rng: &mut rng,
        affine: false,
    };
    let bad = CellSpec {
        component: Component::Cnn,
        num_inputs: 2,
        intermediates: 1,
        scope: vec![OpKind::Lstm { layers: 1 }],
        is_reduction: false,
        width: 2,
    };
    assert!(matches!(Cell::new(bad, &mut b, AlphaSource::Fresh { std: 1e-3 }, "c"), Err(Error::Catalog(_))));
}

#[test]
fn skip_none_uniform_mix_halves_input() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 1, 1, &["skip_connect", "none"], false, 2), 0);
    set_alpha(&mut store, cell.edges[0].alpha, &[0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_tensor(&[1, 2, 3, 3], &mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let xv = ctx.input(x.clone());
    let y = cell.edges[0].forward(&mut ctx, xv).unwrap();
    for (a, b) in ctx.g.value(y).data().iter().zip(x.data()) {
        assert!((a - b / 2.0).abs() < 1e-15);
    }
}

#[test]
fn saturated_alpha_selects_first_op() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 1, 1, &["avg_pool_3x3", "skip_connect", "max_pool_3x3"], false, 2), 0);
    set_alpha(&mut store, cell.edges[0].alpha, &[20.0, -20.0, -20.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_tensor(&[2, 2, 5, 5], &mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let xv = ctx.input(x);
    let y = cell.edges[0].forward(&mut ctx, xv).unwrap();
    let y0 = cell.edges[0].ops[0].forward(&mut ctx, xv).unwrap();
    assert!(ctx.g.value(y).max_abs_diff(ctx.g.value(y0)) < 1e-6);
}

#[test]
fn mixed_edge_matches_direct_reevaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for seed in 0..5 {
        let mut store = ParamStore::new();
        let cell = build(&mut store, spec(Component::Cnn, 1, 1, &["sep_conv_3x3", "max_pool_3x3", "dil_conv_3x3"], false, 3), seed);
        let alpha: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        set_alpha(&mut store, cell.edges[0].alpha, &alpha);
        let x = random_tensor(&[2, 3, 6, 6], &mut rng);
        let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
        let xv = ctx.input(x);
        let mixed = cell.edges[0].forward(&mut ctx, xv).unwrap();
        let mixed = ctx.g.value(mixed).clone();
        let outs: Vec<Tensor> = cell.edges[0]
            .ops
            .iter()
            .map(|op| {
                let y = op.forward(&mut ctx, xv).unwrap();
                ctx.g.value(y).clone()
            })
            .collect();
        let z: f64 = alpha.iter().map(|a| a.exp()).sum();
        for i in 0..mixed.numel() {
            let direct: f64 = (0..3).map(|k| alpha[k].exp() / z * outs[k].data()[i]).sum();
            assert!((mixed.data()[i] - direct).abs() < 1e-12);
            let lo = outs.iter().map(|o| o.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = outs.iter().map(|o| o.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            assert!(mixed.data()[i] >= lo - 1e-12 && mixed.data()[i] <= hi + 1e-12);
        }
    }
}

#[test]
fn node_sums_incoming_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Seq, 2, 2, &["rnn_1", "skip_connect", "none"], false, 3), 3);
    for e in &cell.edges {
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        set_alpha(&mut store, e.alpha, &a);
    }
    let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
    let states: Vec<Var> = (0..3).map(|_| ctx.input(random_tensor(&[2, 4, 3], &mut rng))).collect();
    let node = cell.node_forward(&mut ctx, 3, &states).unwrap();
    let node = ctx.g.value(node).clone();
    let mut expected = Tensor::zeros(&[2, 4, 3]);
    for e in cell.edges.iter().filter(|e| e.to == 3) {
        let y = e.forward(&mut ctx, states[e.from]).unwrap();
        for (acc, v) in expected.data_mut().iter_mut().zip(ctx.g.value(y).data()) {
            *acc += v;
        }
    }
    assert!(node.max_abs_diff(&expected) < 1e-12);
}

#[test]
fn all_none_node_is_zero() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 2, 1, &["none"], false, 2), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let a = ctx.input(random_tensor(&[1, 2, 4, 4], &mut rng));
    let b = ctx.input(random_tensor(&[1, 2, 4, 4], &mut rng));
    let n = cell.node_forward(&mut ctx, 2, &[a, b]).unwrap();
    assert!(ctx.g.value(n).data().iter().all(|&v| v == 0.0));
}

#[test]
fn cnn_cell_output_shapes() {
    for (reduction, hw) in [(false, 32), (true, 16)] {
        let mut store = ParamStore::new();
        let cell = build(&mut store, spec(Component::Cnn, 2, 4, &["max_pool_3x3", "skip_connect"], reduction, 16), 0);
        let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
        let a = ctx.input(Tensor::full(&[1, 16, 32, 32], 0.1));
        let b = ctx.input(Tensor::full(&[1, 16, 32, 32], 0.2));
        let y = cell_forward(&mut ctx, &cell, a, b).unwrap();
        assert_eq!(ctx.g.shape(y), &[1, 64, hw, hw]);
    }
}

#[test]
fn seq_cell_of_skips_is_identity() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Seq, 1, 1, &["skip_connect"], false, 4), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[2, 5, 4], &mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let xv = ctx.input(x.clone());
    let y = cell.forward(&mut ctx, &[xv]).unwrap();
    assert_eq!(ctx.g.value(y), &x);
}

#[test]
fn seq_cell_of_skips_sums_along_paths() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Seq, 2, 3, &["skip_connect"], false, 4), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_tensor(&[2, 5, 4], &mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let xv = ctx.input(x.clone());
    let y = cell_forward(&mut ctx, &cell, xv, xv).unwrap();
    // Nodes hold 2x, 4x and 8x.
    let scale = (2.0 + 4.0 + 8.0) / 3.0;
    for (a, b) in ctx.g.value(y).data().iter().zip(x.data()) {
        assert!((a - scale * b).abs() < 1e-12);
    }
}

#[test]
fn cell_matches_hand_unrolled_dag() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 2, 3, &["avg_pool_3x3", "sep_conv_3x3", "skip_connect"], false, 2), 8);
    for e in &cell.edges {
        let a: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        set_alpha(&mut store, e.alpha, &a);
    }
    let s0 = random_tensor(&[2, 2, 5, 5], &mut rng);
    let s1 = random_tensor(&[2, 2, 5, 5], &mut rng);
    let mut ctx = Ctx::new(&mut store, Mode::Eval, GradTarget::Nothing, 0);
    let v0 = ctx.input(s0);
    let v1 = ctx.input(s1);
    let out = cell.forward(&mut ctx, &[v0, v1]).unwrap();
    let out = ctx.g.value(out).clone();

    // Independent interpreter: evaluate each op, mix with a scalar softmax.
    let mut states: Vec<Tensor> = vec![ctx.g.value(v0).clone(), ctx.g.value(v1).clone()];
    for to in 2..5 {
        let mut acc = Tensor::zeros(&[2, 2, 5, 5]);
        for e in cell.edges.iter().filter(|e| e.to == to) {
            let w = softmax(ctx.store().value(e.alpha).data());
            let x = ctx.input(states[e.from].clone());
            for (k, op) in e.ops.iter().enumerate() {
                let y = op.forward(&mut ctx, x).unwrap();
                for (a, v) in acc.data_mut().iter_mut().zip(ctx.g.value(y).data()) {
                    *a += w[k] * v;
                }
            }
        }
        states.push(acc);
    }
    let plane = 2 * 5 * 5;
    for b in 0..2 {
        for node in 0..3 {
            let got = &out.data()[b * 3 * plane + node * plane..][..plane];
            let want = &states[2 + node].data()[b * plane..][..plane];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn mismatched_inputs_are_bridge_errors() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 2, 1, &["skip_connect"], false, 2), 0);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Nothing, 0);
    let a = ctx.input(Tensor::zeros(&[1, 2, 4, 4]));
    let b = ctx.input(Tensor::zeros(&[1, 2, 8, 8]));
    assert!(matches!(cell_forward(&mut ctx, &cell, a, b), Err(Error::Bridge(_))));
    let c = ctx.input(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(matches!(cell_forward(&mut ctx, &cell, c, c), Err(Error::Bridge(_))));
}

#[test]
fn alpha_gradient_is_nonzero() {
    let mut store = ParamStore::new();
    let cell = build(&mut store, spec(Component::Cnn, 2, 2, &["max_pool_3x3", "avg_pool_3x3", "skip_connect"], false, 2), 0);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ctx = Ctx::new(&mut store, Mode::Train, GradTarget::Arch, 0);
    let a = ctx.input(random_tensor(&[2, 2, 4, 4], &mut rng));
    let r = ctx.input(random_tensor(&[2, 4, 4, 4], &mut rng));
    let y = cell_forward(&mut ctx, &cell, a, a).unwrap();
    let p = ctx.g.mul(y, r).unwrap();
    let loss = ctx.g.sum(p);
    ctx.backward(loss).unwrap();
    let any = cell
        .alpha_ids()
        .iter()
        .any(|&id| store.get(id).grad.as_ref().unwrap().data().iter().any(|g| g.abs() > 1e-12));
    assert!(any);
}

#[test]
fn discretize_examples() {
    let names = kinds(&["max_pool_3x3", "avg_pool_3x3", "sep_conv_3x3"]);
    assert_eq!(discretize_edge(&[0.1, 0.7, 0.2], &names).unwrap().index, 1);
    let names = kinds(&["none", "skip_connect"]);
    let c = discretize_edge(&[0.9, 0.5], &names).unwrap();
    assert_eq!(c.kind, OpKind::SkipConnect);
    assert!(!c.degenerate);
    let c = discretize_edge(&[0.3], &kinds(&["none"])).unwrap();
    assert!(c.degenerate);
    assert_eq!(c.kind, OpKind::NoConnection);
    assert!(matches!(discretize_edge(&[0.1, 0.2], &kinds(&["none"])), Err(Error::Contract(_))));
}

#[test]
fn discretize_ties_pick_lowest_index() {
    let names = kinds(&["max_pool_3x3", "avg_pool_3x3", "sep_conv_3x3"]);
    assert_eq!(discretize_edge(&[0.5, 0.5, 0.5], &names).unwrap().index, 0);
    assert_eq!(discretize_edge(&[0.1, 0.5, 0.5], &names).unwrap().index, 1);
}

#[test]
fn discretize_agrees_with_softmax_argmax_and_monotone_maps() {
    let names = kinds(&CNN_SCOPE_8[..7]);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let a: Vec<f64> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let p = softmax(&a);
        let brute = (0..7).fold(0, |b, i| if p[i] > p[b] { i } else { b });
        assert_eq!(discretize_edge(&a, &names).unwrap().index, brute);
        let t: Vec<f64> = a.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        assert_eq!(discretize_edge(&t, &names).unwrap().index, brute);
    }
}

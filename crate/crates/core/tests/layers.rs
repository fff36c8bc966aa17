mod common;

use avsr::nn::*;
use avsr::{ParamStore, Trainable};
use avsr_tensor::{GradCheckOptions, Tensor};
use common::{check_layer, randn, rng};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gru_store(input: usize, hidden: usize, seed: u64) -> (GruCell, ParamStore<f64>) {
    let cell = GruCell::new("g.cell", input, hidden);
    let mut store = ParamStore::new();
    cell.init(&mut store, &mut rng(seed)).unwrap();
    (cell, store.cast())
}

fn set_all(store: &mut ParamStore<f64>, prefix: &str, v: f64) {
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.starts_with(prefix)).collect();
    for n in names {
        let shape = store.tensor(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::full(shape, v)).unwrap();
    }
}

/// Per-element GRU step written without tensors.
fn gru_oracle(store: &ParamStore<f64>, name: &str, x: &[f64], h: &[f64], input: usize, hidden: usize) -> Vec<f64> {
    let t = |k: &str| store.tensor(&format!("{name}.{k}")).unwrap().data().to_vec();
    let (wz, wr, wh) = (t("w_z"), t("w_r"), t("w_h"));
    let (uz, ur, uh) = (t("u_z"), t("u_r"), t("u_h"));
    let (bz, br, bh) = (t("b_z"), t("b_r"), t("b_h"));
    let dot = |w: &[f64], row: usize, v: &[f64], n: usize| (0..n).map(|j| w[row * n + j] * v[j]).sum::<f64>();
    let r: Vec<f64> = (0..hidden).map(|i| sigmoid(dot(&wr, i, x, input) + dot(&ur, i, h, hidden) + br[i])).collect();
    let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
    (0..hidden)
        .map(|i| {
            let z = sigmoid(dot(&wz, i, x, input) + dot(&uz, i, h, hidden) + bz[i]);
            let c = (dot(&wh, i, x, input) + dot(&uh, i, &rh, hidden) + bh[i]).tanh();
            (1.0 - z) * h[i] + z * c
        })
        .collect()
}

fn step(cell: &GruCell, store: &ParamStore<f64>, x: &Tensor<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut ctx = Ctx::eval(store);
    let xv = ctx.tape.constant(x.clone());
    let hv = ctx.tape.constant(h.clone());
    let out = cell.step(&mut ctx, xv, hv).unwrap();
    ctx.tape.value(out).clone()
}

#[test]
fn gru_zero_params_keep_zero_state() {
    let (cell, mut store) = gru_store(3, 4, 1);
    set_all(&mut store, "g", 0.0);
    let h = step(&cell, &store, &randn(&[2, 3], 2), &Tensor::zeros(vec![2, 4]));
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gru_saturated_update_gate_takes_candidate() {
    let (cell, mut store) = gru_store(3, 4, 1);
    set_all(&mut store, "g", 0.0);
    set_all(&mut store, "g.cell.b_z", 10.0);
    let h = step(&cell, &store, &randn(&[2, 3], 2), &Tensor::zeros(vec![2, 4]));
    assert!(h.data().iter().all(|&v| v.abs() < 1e-9));
}

#[test]
fn gru_matches_scalar_oracle() {
    let (input, hidden, batch) = (5, 7, 3);
    let (cell, mut store) = gru_store(input, hidden, 4);
    for g in ["z", "r", "h"] {
        store.set(&format!("g.cell.b_{g}"), randn(&[hidden], 40 + g.len() as u64).map(|v| 0.3 * v)).unwrap();
    }
    let x = randn(&[batch, input], 5);
    let h = randn(&[batch, hidden], 6).map(|v| 0.5 * v);
    // Run the tensor path in 32-bit, the oracle in 64-bit.
    let s32: ParamStore<f32> = store.cast();
    let mut ctx = Ctx::eval(&s32);
    let xv = ctx.tape.constant(x.cast());
    let hv = ctx.tape.constant(h.cast());
    let out = cell.step(&mut ctx, xv, hv).unwrap();
    let got = ctx.tape.value(out).clone();
    for b in 0..batch {
        let want = gru_oracle(&store, "g.cell", &x.data()[b * input..][..input], &h.data()[b * hidden..][..hidden], input, hidden);
        for (i, w) in want.iter().enumerate() {
            assert!((got.data()[b * hidden + i] as f64 - w).abs() < 1e-5, "b {b} i {i}");
        }
    }
}

#[test]
fn gru_rejects_mismatched_input() {
    let (cell, store) = gru_store(3, 4, 1);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(Tensor::zeros(vec![2, 5]));
    let h = ctx.tape.constant(Tensor::zeros(vec![2, 4]));
    assert!(cell.step(&mut ctx, x, h).is_err());
}

#[test]
fn gru_step_gradients() {
    let (cell, store) = gru_store(4, 5, 9);
    let h0 = randn(&[3, 5], 10);
    let report = check_layer(
        &store,
        &randn(&[3, 4], 11),
        |ctx, x| {
            let h = ctx.tape.constant(h0.clone());
            cell.step(ctx, x, h)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn bgru_forward(b: &Bgru, store: &ParamStore<f64>, seq: &Tensor<f64>) -> Tensor<f64> {
    let mut ctx = Ctx::eval(store);
    let x = ctx.tape.constant(seq.clone());
    let y = b.forward(&mut ctx, x).unwrap();
    ctx.tape.value(y).clone()
}

fn bgru_store(input: usize, hidden: usize, seed: u64) -> (Bgru, ParamStore<f64>) {
    let b = Bgru::new("b.l0", input, hidden);
    let mut store = ParamStore::new();
    b.init(&mut store, &mut rng(seed)).unwrap();
    (b, store.cast())
}

#[test]
fn bgru_single_step_concatenates_both_cells() {
    let (b, store) = bgru_store(3, 4, 2);
    let seq = randn(&[1, 2, 3], 3);
    let out = bgru_forward(&b, &store, &seq);
    assert_eq!(out.shape(), &[1, 2, 8]);
    let x = seq.reshape(vec![2, 3]).unwrap();
    let f = step(&b.fwd, &store, &x, &Tensor::zeros(vec![2, 4]));
    let r = step(&b.bwd, &store, &x, &Tensor::zeros(vec![2, 4]));
    for i in 0..2 {
        assert_eq!(&out.data()[i * 8..i * 8 + 4], &f.data()[i * 4..i * 4 + 4]);
        assert_eq!(&out.data()[i * 8 + 4..i * 8 + 8], &r.data()[i * 4..i * 4 + 4]);
    }
}

fn reverse_time(t: &Tensor<f64>) -> Tensor<f64> {
    let s = t.shape().to_vec();
    let row = s[1..].iter().product::<usize>();
    let data: Vec<f64> = t.data().chunks(row).rev().flatten().copied().collect();
    Tensor::new(s, data).unwrap()
}

#[test]
fn bgru_time_reversal_symmetry_is_exact() {
    let (hidden, t) = (4, 6);
    let (b, store) = bgru_store(3, hidden, 5);
    let seq = randn(&[t, 2, 3], 6);
    let out = bgru_forward(&b, &store, &seq);
    // Swap the two directions' parameters.
    let mut swapped = ParamStore::new();
    for (n, p) in store.iter() {
        let m = if n.contains(".fwd.") { n.replace(".fwd.", ".bwd.") } else { n.replace(".bwd.", ".fwd.") };
        swapped.insert(m, p.tensor.clone(), p.kind).unwrap();
    }
    let rev = bgru_forward(&b, &swapped, &reverse_time(&seq));
    let rev = reverse_time(&rev);
    for (a, c) in out.data().chunks(2 * hidden).zip(rev.data().chunks(2 * hidden)) {
        assert_eq!(&a[..hidden], &c[hidden..]);
        assert_eq!(&a[hidden..], &c[..hidden]);
    }
}

#[test]
fn bgru_rejects_empty_sequence() {
    let (b, store) = bgru_store(3, 4, 5);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(Tensor::zeros(vec![0, 2, 3]));
    assert!(b.forward(&mut ctx, x).is_err());
}

#[test]
fn one_layer_stack_is_a_bgru_layer() {
    let stack = BgruStack::new("b", 3, 4, 1).unwrap();
    let mut store = ParamStore::new();
    stack.init(&mut store, &mut rng(8)).unwrap();
    let store: ParamStore<f64> = store.cast();
    let seq = randn(&[5, 2, 3], 9);
    let mut ctx = Ctx::eval(&store);
    let x = ctx.tape.constant(seq.clone());
    let y = stack.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.value(y), &bgru_forward(&stack.layers[0], &store, &seq));
    assert_eq!(stack.output_dim(), 8);
}

#[test]
fn two_layer_stack_gradients() {
    let stack = BgruStack::new("b", 3, 4, 2).unwrap();
    let mut store = ParamStore::new();
    stack.init(&mut store, &mut rng(12)).unwrap();
    let report = check_layer(&store.cast(), &randn(&[5, 2, 3], 13), |ctx, x| stack.forward(ctx, x), &GradCheckOptions::default()).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

fn block_store(block: &ResidualBlock, seed: u64) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed)).unwrap();
    store.cast()
}

fn run<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F) -> Tensor<f64>
where
    F: Fn(&mut Ctx<f64>, avsr_tensor::Var) -> avsr::Result<avsr_tensor::Var>,
{
    let mut ctx = Ctx::eval(store);
    let v = ctx.tape.constant(x.clone());
    let y = f(&mut ctx, v).unwrap();
    ctx.tape.value(y).clone()
}

#[test]
fn zero_branch_block_is_identity() {
    for dims in [1, 2] {
        let block = ResidualBlock::new("r.b", dims, 3, 3, 1, false).unwrap();
        let mut store = block_store(&block, 1);
        set_all(&mut store, "r.b.conv", 0.0);
        let shape = if dims == 1 { vec![2, 3, 9] } else { vec![2, 3, 5, 6] };
        let x = randn(&shape, 2);
        assert_eq!(run(&store, &x, |c, v| block.forward(c, v)), x);
    }
}

#[test]
fn projection_block_halves_spatial_dims() {
    let block = ResidualBlock::new("r.b", 2, 3, 6, 2, true).unwrap();
    let store = block_store(&block, 1);
    let y = run(&store, &randn(&[2, 3, 8, 10], 3), |c, v| block.forward(c, v));
    assert_eq!(y.shape(), &[2, 6, 4, 5]);
}

#[test]
fn missing_projection_is_rejected() {
    assert!(ResidualBlock::new("r.b", 2, 3, 6, 1, false).is_err());
    assert!(ResidualBlock::new("r.b", 1, 3, 3, 2, false).is_err());
}

#[test]
fn input_gradient_includes_skip_path() {
    let block = ResidualBlock::new("r.b", 1, 2, 2, 1, false).unwrap();
    let store = block_store(&block, 4);
    let x = randn(&[2, 2, 7], 5);
    let grad = |with_skip: bool| {
        let all = Trainable::All;
        let mut ctx = Ctx::new(&store, true, &all);
        let v = ctx.tape.param(x.clone());
        let y = if with_skip {
            block.forward(&mut ctx, v).unwrap()
        } else {
            let a = block.bn1.relu_after(&mut ctx, v).unwrap();
            let b = block.conv1.forward(&mut ctx, a).unwrap();
            let c = block.bn2.relu_after(&mut ctx, b).unwrap();
            block.conv2.forward(&mut ctx, c).unwrap()
        };
        let s = ctx.tape.sum(y);
        ctx.tape.backward(s).unwrap();
        ctx.tape.grad(v).unwrap().to_vec()
    };
    let (full, branch) = (grad(true), grad(false));
    // d(sum x)/dx = 1 is exactly the difference.
    for (f, b) in full.iter().zip(&branch) {
        assert!((f - b - 1.0).abs() < 1e-9);
    }
}

#[test]
fn residual_block_gradients() {
    for (dims, shape, stride) in [(1, vec![3, 2, 9], 2), (2, vec![2, 2, 5, 5], 1)] {
        let block = ResidualBlock::new("r.b", dims, 2, 3, stride, true).unwrap();
        let store = block_store(&block, 6);
        let report = check_layer(&store, &randn(&shape, 7), |c, v| block.forward(c, v), &GradCheckOptions::default()).unwrap();
        assert!(report.passes(1e-4), "dims {dims}: {report:?}");
    }
}

#[test]
fn visual_frontend_shapes() {
    let fe = VisualFrontend::new("v.fe", 0.125).unwrap();
    assert_eq!(fe.channels(), 8);
    assert_eq!(VisualFrontend::new("v.fe", 1.0).unwrap().channels(), 64);
    assert_eq!(VisualFrontend::output_hw(96, 96).unwrap(), (48, 48));
    assert_eq!(VisualFrontend::output_hw(32, 20).unwrap(), (16, 10));
    assert!(VisualFrontend::output_hw(6, 32).is_err());
    let mut store = ParamStore::new();
    fe.init(&mut store, &mut rng(1)).unwrap();
    let y = run(&store.cast(), &randn(&[1, 1, 29, 96, 96], 2), |c, v| fe.forward(c, v));
    assert_eq!(y.shape(), &[1, 8, 29, 48, 48]);
    let y = run(&store.cast(), &randn(&[2, 1, 29, 13, 9], 2), |c, v| fe.forward(c, v));
    assert_eq!(y.shape(), &[2, 8, 29, 7, 5]);
}

#[test]
fn width_that_leaves_no_channels_is_rejected() {
    assert!(scaled(64, 0.001).is_err());
    assert!(scaled(64, 1.5).is_err());
    assert!(VisualFrontend::new("v", 0.0).is_err());
    assert_eq!(scaled(64, 0.125).unwrap(), 8);
}

#[test]
fn full_width_visual_resnet_gives_512_per_step() {
    let rn = VisualResNet::new("v.rn", 1.0, 64, (48, 48)).unwrap();
    assert_eq!(rn.out_dim, 512);
    let mut store = ParamStore::new();
    rn.init(&mut store, &mut rng(1)).unwrap();
    let y = run(&store.cast(), &randn(&[1, 64, 1, 48, 48], 2), |c, v| rn.forward(c, v));
    assert_eq!(y.shape(), &[1, 1, 512]);
}

#[test]
fn visual_resnet_rejects_collapsing_input() {
    assert!(VisualResNet::new("v.rn", 0.125, 8, (0, 4)).is_err());
    assert!(VisualResNet::new("v.rn", 0.125, 8, (1, 1)).is_ok());
}

#[test]
fn zero_weight_resnet_is_projection_cascade() {
    let rn = VisualResNet::new("v.rn", 0.125, 8, (8, 8)).unwrap();
    let mut store = ParamStore::new();
    rn.init(&mut store, &mut rng(3)).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).filter(|n| n.contains(".conv")).collect();
    for n in names {
        let s = store.tensor(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(s)).unwrap();
    }
    let x = randn(&[2, 8, 3, 8, 8], 4);
    let got = run(&store, &x, |c, v| rn.forward(c, v));
    // Oracle: only the projection convolutions act, then a spatial mean.
    let mut ctx = Ctx::eval(&store);
    let v = ctx.tape.constant(x.clone());
    let v = ctx.tape.permute(v, &[2, 0, 1, 3, 4]).unwrap();
    let mut v = ctx.tape.reshape(v, &[6, 8, 8, 8]).unwrap();
    for b in rn.stages.blocks.iter() {
        if let Some(p) = &b.proj {
            let k = ctx.tape.constant(store.tensor(&p.weight_name()).unwrap().clone());
            v = ctx.tape.conv(v, k, None, &p.stride, &p.pad).unwrap();
        }
    }
    let m = ctx.tape.mean_trailing(v, 2).unwrap();
    let want = ctx.tape.value(m).data().to_vec();
    assert_eq!(got.data(), &want[..]);
}

#[test]
fn visual_resnet_is_time_equivariant() {
    let rn = VisualResNet::new("v.rn", 0.125, 8, (8, 8)).unwrap();
    let mut store = ParamStore::new();
    rn.init(&mut store, &mut rng(5)).unwrap();
    let store: ParamStore<f64> = store.cast();
    let (b, c, t) = (2, 8, 4);
    let x = randn(&[b, c, t, 8, 8], 6);
    let perm = [2, 0, 3, 1];
    let mut px = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            for (ti, &src) in perm.iter().enumerate() {
                let d = ((bi * c + ci) * t + ti) * 64;
                let s = ((bi * c + ci) * t + src) * 64;
                px[d..d + 64].copy_from_slice(&x.data()[s..s + 64]);
            }
        }
    }
    let y = run(&store, &x, |c, v| rn.forward(c, v));
    let py = run(&store, &Tensor::new(x.shape().to_vec(), px).unwrap(), |c, v| rn.forward(c, v));
    let row = b * rn.out_dim;
    for (ti, &src) in perm.iter().enumerate() {
        assert_eq!(&py.data()[ti * row..][..row], &y.data()[src * row..][..row]);
    }
}

#[test]
fn audio_resnet_pools_to_29_frames() {
    let rn = AudioResNet::new("a.rn", 0.125, 16_000, 29).unwrap();
    assert_eq!(rn.conv.kernel, vec![80]);
    assert_eq!(rn.conv.stride, vec![4]);
    assert_eq!(avsr_tensor::conv_out_len(18560, 80, 4, 0), Some(4621));
    let mut store = ParamStore::new();
    rn.init(&mut store, &mut rng(1)).unwrap();
    let store: ParamStore<f64> = store.cast();
    for len in [18560, rn.min_samples(), 20_011] {
        let y = run(&store, &randn(&[2, 1, len], 2), |c, v| rn.forward(c, v));
        assert_eq!(y.shape(), &[29, 2, 64]);
    }
    let mut ctx = Ctx::eval(&store);
    let v = ctx.tape.constant(Tensor::zeros(vec![1, 1, rn.min_samples() - 1]));
    let err = rn.forward(&mut ctx, v).unwrap_err().to_string();
    assert!(err.contains(&rn.min_samples().to_string()), "{err}");
}

#[test]
fn silent_audio_gives_constant_frames() {
    let rn = AudioResNet::new("a.rn", 0.125, 16_000, 29).unwrap();
    let mut store = ParamStore::new();
    rn.init(&mut store, &mut rng(1)).unwrap();
    let y = run(&store.cast(), &Tensor::zeros(vec![1, 1, 18560]), |c, v| rn.forward(c, v));
    let first = &y.data()[..64];
    for f in y.data().chunks(64) {
        assert_eq!(f, first);
    }
    let again = run(&store.cast(), &Tensor::zeros(vec![1, 1, 18560]), |c, v| rn.forward(c, v));
    assert_eq!(y, again);
}

#[test]
fn temporal_conv_backend_shapes_and_bias_path() {
    let tcn = TemporalConvBackend::new("a.tcn", 6, 4);
    let mut store = ParamStore::new();
    tcn.init(&mut store, &mut rng(1)).unwrap();
    let mut store: ParamStore<f64> = store.cast();
    let x = randn(&[29, 3, 6], 2);
    assert_eq!(run(&store, &x, |c, v| tcn.forward(c, v)).shape(), &[3, 4]);
    store.set("a.tcn.fc.bias", randn(&[4], 3)).unwrap();
    for i in 0..2 {
        store.set(&format!("a.tcn.conv{i}.weight"), Tensor::zeros(vec![6, 6, 5])).unwrap();
    }
    let bias = store.tensor("a.tcn.fc.bias").unwrap().data().to_vec();
    for seed in [4, 5] {
        let y = run(&store, &randn(&[7, 3, 6], seed), |c, v| tcn.forward(c, v));
        for row in y.data().chunks(4) {
            assert_eq!(row, &bias[..]);
        }
    }
    let mut ctx = Ctx::eval(&store);
    let v = ctx.tape.constant(Tensor::zeros(vec![4, 3, 6]));
    assert!(tcn.forward(&mut ctx, v).is_err());
}

#[test]
fn temporal_conv_backend_gradients() {
    let tcn = TemporalConvBackend::new("a.tcn", 3, 4);
    let mut store = ParamStore::new();
    tcn.init(&mut store, &mut rng(6)).unwrap();
    let report = check_layer(&store.cast(), &randn(&[6, 3, 3], 7), |c, v| tcn.forward(c, v), &GradCheckOptions::default()).unwrap();
    assert!(report.passes(1e-4), "{report:?}");
}

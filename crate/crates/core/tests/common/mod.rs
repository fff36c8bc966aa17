#![allow(dead_code)]

use std::collections::BTreeMap;

use avsr::nn::Ctx;
use avsr::{ParamStore, Result, Trainable};
use avsr_tensor::gradcheck::compare_gradients;
use avsr_tensor::{GradCheckOptions, GradCheckReport, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// `sum(f(x) ⊙ probe)` with a fixed random probe, so every output coordinate matters.
fn probed<F>(ctx: &mut Ctx<f64>, x: Var, f: &F, probe_seed: u64) -> Result<Var>
where
    F: Fn(&mut Ctx<f64>, Var) -> Result<Var>,
{
    let y = f(ctx, x)?;
    let shape = ctx.tape.shape(y).to_vec();
    let p = ctx.tape.constant(randn(&shape, probe_seed));
    let m = ctx.tape.mul(y, p)?;
    Ok(ctx.tape.sum(m))
}

/// Finite-difference check of every weight in `store` and of the input, for a
/// layer written against `Ctx`. Batch norm runs in train mode throughout.
pub fn check_layer<F>(store: &ParamStore<f64>, input: &Tensor<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx<f64>, Var) -> Result<Var>,
{
    let names: Vec<String> = store.weights().map(|(n, _)| n.to_string()).collect();
    let all = Trainable::All;
    let mut ctx = Ctx::new(store, true, &all);
    let x = ctx.tape.param(input.clone());
    let loss = probed(&mut ctx, x, &f, 99)?;
    ctx.tape.backward(loss)?;
    let rec = ctx.finish();
    let leaf_grad = |v: Option<&Var>, shape: &[usize]| {
        v.and_then(|&v| rec.tape.grad_tensor(v)).unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    };
    let mut params = vec![input.clone()];
    let mut analytic = vec![leaf_grad(Some(&x), input.shape())];
    for n in &names {
        let t = store.tensor(n)?;
        params.push(t.clone());
        analytic.push(leaf_grad(rec.leaves.get(n), t.shape()));
    }
    let value = |ps: &[Tensor<f64>]| -> avsr_tensor::Result<f64> {
        let mut s = store.clone();
        for (n, t) in names.iter().zip(&ps[1..]) {
            s.set(n, t.clone()).expect("same shape");
        }
        let mut ctx = Ctx::new(&s, true, &all);
        let x = ctx.tape.constant(ps[0].clone());
        let loss = probed(&mut ctx, x, &f, 99).expect("forward succeeds");
        Ok(ctx.tape.value(loss).item())
    };
    Ok(compare_gradients(&analytic, &params, value, opts)?)
}

pub fn grads_by_name(store: &ParamStore<f64>, f: impl Fn(&mut Ctx<f64>) -> Result<Var>) -> Result<BTreeMap<String, Tensor<f64>>> {
    let all = Trainable::All;
    let mut ctx = Ctx::new(store, true, &all);
    let loss = f(&mut ctx)?;
    ctx.tape.backward(loss)?;
    let rec = ctx.finish();
    Ok(rec.leaves.iter().filter_map(|(n, &v)| rec.tape.grad_tensor(v).map(|g| (n.clone(), g))).collect())
}

/// A checkpoint with random names, shapes, values and run state.
pub fn random_checkpoint(seed: u64) -> avsr::checkpoint::Checkpoint {
    use avsr::training::{AdamState, MetricsRow, RunState};
    use avsr::ParamKind;
    use rand::Rng;
    let mut r = rng(seed);
    let store = |r: &mut ChaCha8Rng| {
        let mut s = ParamStore::<f32>::new();
        for i in 0..r.gen_range(0..6) {
            let rank = r.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..5)).collect();
            let n = shape.iter().product();
            let data = (0..n).map(|_| f32::from_bits(r.gen::<u32>() & 0xbfff_ffff)).collect();
            let kind = if r.gen_bool(0.3) { ParamKind::Buffer } else { ParamKind::Weight };
            s.insert(format!("g{}.s{}.p{i}", r.gen_range(0..3), r.gen_range(0..3)), Tensor::new(shape, data).unwrap(), kind).unwrap();
        }
        s
    };
    let params = store(&mut r);
    let best = if r.gen_bool(0.5) { Some(store(&mut r)) } else { None };
    let moments = |r: &mut ChaCha8Rng| -> BTreeMap<String, Vec<f32>> {
        params.weights().map(|(n, t)| (n.to_string(), (0..t.len()).map(|_| r.gen()).collect())).collect()
    };
    let (m, v) = (moments(&mut r), moments(&mut r));
    let metrics = (0..r.gen_range(0..5))
        .map(|e| MetricsRow { stage: format!("s{}", r.gen_range(0..3)), epoch: e + 1, train_loss: r.gen(), train_cr: r.gen(), val_cr: r.gen(), wall_seconds: 0.0 })
        .collect();
    avsr::checkpoint::Checkpoint {
        fingerprint: format!("{:016x}", r.gen::<u64>()),
        target: ["audio", "video", "av", "mfcc"][r.gen_range(0..4)].to_string(),
        seed: r.gen(),
        state: RunState {
            stage: r.gen_range(0..3),
            epoch: r.gen_range(0..9),
            history: (0..r.gen_range(0..6)).map(|_| r.gen()).collect(),
            best,
            adam: AdamState { lr: r.gen(), step: r.gen_range(0..1000), m, v },
            metrics,
            done: r.gen(),
        },
        params,
    }
}

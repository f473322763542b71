use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_nn::gradcheck::check_directions;
use sts_nn::layers::{one_hot, timestep_embedding};
use sts_nn::{Conv2d, Graph, GroupNorm, Linear, ParamStore, Tensor, Var};

fn randn(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

fn assert_grads<F>(store: &ParamStore, build: F, label: &str)
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ids = store.trainable_ids();
    let report = check_directions(
        store,
        &ids,
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            g.scalar(l)
        },
        |s| {
            let mut g = Graph::new();
            let l = build(&mut g, s);
            g.backward(l).params()
        },
        20,
        1e-5,
        &mut rng,
    );
    assert!(
        report.max_rel_error() < 1e-5,
        "{label}: max relative error {:.3e} (analytic {:?}, numeric {:?})",
        report.max_rel_error(),
        report.analytic,
        report.numeric
    );
}

#[test]
fn conv_norm_pool_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let c1 = Conv2d::new(&mut store, &mut rng, "c1", 3, 4, 3, 1);
    let gn = GroupNorm::new(&mut store, "gn", 4, 2);
    let c2 = Conv2d::new(&mut store, &mut rng, "c2", 4, 6, 3, 2);
    let c3 = Conv2d::new(&mut store, &mut rng, "c3", 6, 2, 1, 1);
    // perturb norm affine away from the trivial init
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id) + &randn(store.get(id).shape(), &mut rng).mapv(|v| 0.1 * v);
        *store.get_mut(id) = t;
    }
    let x = randn(&[2, 3, 6, 6], &mut rng);
    let target = randn(&[2, 2, 3, 3], &mut rng);
    assert_grads(
        &store,
        |g, s| {
            let xi = g.input(x.clone());
            let h = c1.forward(g, s, xi);
            let h = gn.forward(g, s, h);
            let h = g.silu(h);
            let h = c2.forward(g, s, h);
            let h = g.leaky_relu(h, 0.2);
            let h = c3.forward(g, s, h);
            let t = g.input(target.clone());
            g.mse(h, t)
        },
        "conv stack",
    );
}

#[test]
fn unet_style_plumbing() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let emb = Linear::new(&mut store, &mut rng, "emb", 8, 4);
    let cin = Conv2d::new(&mut store, &mut rng, "cin", 2, 4, 3, 1);
    let down = Conv2d::new(&mut store, &mut rng, "down", 4, 4, 3, 1);
    let up = Conv2d::new(&mut store, &mut rng, "up", 8, 2, 3, 1);
    let x = randn(&[3, 2, 4, 4], &mut rng);
    let temb = timestep_embedding(&[3, 50, 400], 8, 1000.0).into_dyn();
    let target = randn(&[3, 2, 4, 4], &mut rng);
    assert_grads(
        &store,
        |g, s| {
            let xi = g.input(x.clone());
            let ti = g.input(temb.clone());
            let e = emb.forward(g, s, ti);
            let e = g.tanh(e);
            let h0 = cin.forward(g, s, xi);
            let h0 = g.add_channel(h0, e);
            let p = g.avg_pool2(h0);
            let p = down.forward(g, s, p);
            let p = g.relu(p);
            let u = g.upsample2(p);
            let cat = g.concat1(u, h0);
            let out = up.forward(g, s, cat);
            let t = g.input(target.clone());
            let l1 = g.l1(out, t);
            let sq = g.mul(out, out);
            let m = g.mean_all(sq);
            let m = g.scale(m, 0.3);
            g.add(l1, m)
        },
        "unet plumbing",
    );
}

#[test]
fn classifier_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut rng, "conv", 3, 5, 3, 1);
    let fc = Linear::new(&mut store, &mut rng, "fc", 5, 3);
    let x = randn(&[4, 3, 4, 4], &mut rng);
    let labels = [0usize, 2, 1, 2];
    assert_grads(
        &store,
        |g, s| {
            let xi = g.input(x.clone());
            let h = conv.forward(g, s, xi);
            let h = g.silu(h);
            let f = g.spatial_mean(h);
            let logits = fc.forward(g, s, f);
            g.softmax_ce(logits, &labels)
        },
        "classifier",
    );
}

#[test]
fn mlp_with_reshape_and_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, &mut rng, "l1", 2 + 3, 6);
    let l2 = Linear::new(&mut store, &mut rng, "l2", 6, 4);
    let x = randn(&[5, 2], &mut rng);
    let tok = one_hot(&[0, 1, 2, 1, 0], 3).into_dyn();
    assert_grads(
        &store,
        |g, s| {
            let xi = g.input(x.clone());
            let ti = g.input(tok.clone());
            let h = g.concat1(xi, ti);
            let h = l1.forward(g, s, h);
            let h = g.silu(h);
            let h = l2.forward(g, s, h);
            let r = g.reshape(h, &[5, 1, 2, 2]);
            let r = g.add_scalar(r, 0.5);
            g.mse_to(r, 1.0)
        },
        "mlp",
    );
}

#[test]
fn input_gradients_flow_through_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, &mut rng, "c", 2, 3, 3, 2);
    let x0 = randn(&[1, 2, 5, 5], &mut rng);
    let mut g = Graph::new();
    let x = g.input_with_grad(x0.clone());
    let y = conv.forward(&mut g, &store, x);
    let sq = g.square(y);
    let loss = g.mean_all(sq);
    let grads = g.backward(loss);
    let dx = grads.get(x).unwrap().clone();

    let f = |xv: &Tensor| {
        let mut g = Graph::new();
        let x = g.input(xv.clone());
        let y = conv.forward(&mut g, &store, x);
        let sq = g.square(y);
        let l = g.mean_all(sq);
        g.scalar(l)
    };
    let h = 1e-6;
    for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 4, 4], [0, 1, 1, 0]] {
        let mut p = x0.clone();
        p[IxDyn(&idx)] += h;
        let mut m = x0.clone();
        m[IxDyn(&idx)] -= h;
        let num = (f(&p) - f(&m)) / (2.0 * h);
        let ana = dx[IxDyn(&idx)];
        assert!((num - ana).abs() < 1e-7 * (1.0 + ana.abs()), "{idx:?}: {num} vs {ana}");
    }
}

#[test]
fn frozen_parameters_still_pass_gradient_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let a = Conv2d::new(&mut store, &mut rng, "a", 1, 2, 3, 1);
    let b = Conv2d::new(&mut store, &mut rng, "b", 2, 1, 3, 1);
    store.freeze_prefix("b.");
    let x = randn(&[2, 1, 4, 4], &mut rng);
    let mut g = Graph::new();
    let xi = g.input(x);
    let h = a.forward(&mut g, &store, xi);
    let y = b.forward(&mut g, &store, h);
    let l = g.mse_to(y, 0.0);
    let grads = g.backward(l).params();
    let names: Vec<_> = grads.iter().map(|(id, _)| store.name(*id).to_string()).collect();
    assert_eq!(names, vec!["a.weight", "a.bias"]);
    assert!(grads.iter().all(|(_, t)| t.iter().any(|v| *v != 0.0)));
}

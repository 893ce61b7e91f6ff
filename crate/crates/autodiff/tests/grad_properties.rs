use dcd_autodiff::{finite_diff, Bindings, BroadcastKind, Graph, NodeId, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Builds `sum(op(inputs) ⊙ C)` for a fixed random `C`, then checks the
/// autodiff gradient for every input against central differences.
fn check_op(
    name: &str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Graph::new();
    let inputs: Vec<NodeId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| g.input(format!("in{i}"), s))
        .collect();
    let out = build(&mut g, &inputs);
    let weights = random_tensor(&mut rng, g.shape(out));
    let c = g.constant(weights);
    let prod = g.mul(out, c).unwrap();
    let scalar = g.sum(prod);
    let grads = g.grad(scalar, &inputs).unwrap();

    let values: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
    let mut b = Bindings::new();
    for (id, v) in inputs.iter().zip(&values) {
        b.bind(*id, v);
    }
    let analytic = g.eval_many(&grads, &b).unwrap();

    for (k, input) in inputs.iter().enumerate() {
        let fd = finite_diff(
            |probe| {
                let mut bb = Bindings::new();
                for (j, (id, v)) in inputs.iter().zip(&values).enumerate() {
                    if j == k {
                        bb.bind(*id, probe);
                    } else {
                        bb.bind(*id, v);
                    }
                }
                g.eval(scalar, &bb).unwrap().item()
            },
            &values[k],
            1e-5,
        )
        .unwrap();
        for (a, f) in analytic[k].data().iter().zip(fd.data()) {
            let rel = (a - f).abs() / (1.0 + f.abs());
            assert!(rel < 1e-6, "{name} input {k} ({input:?}): autodiff {a} vs fd {f}");
        }
    }
}

#[test]
fn every_op_matches_finite_differences() {
    check_op("affine", &[&[4, 3], &[3, 2], &[2]], |g, i| g.affine(i[0], i[1], i[2]).unwrap(), 1);
    for (s, (ta, tb)) in [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .enumerate()
    {
        let sa: &[usize] = if ta { &[3, 4] } else { &[4, 3] };
        let sb: &[usize] = if tb { &[2, 3] } else { &[3, 2] };
        check_op("matmul", &[sa, sb], move |g, i| g.matmul(i[0], i[1], ta, tb).unwrap(), 10 + s as u64);
    }
    check_op("add", &[&[3, 2], &[3, 2]], |g, i| g.add(i[0], i[1]).unwrap(), 2);
    check_op("sub", &[&[3, 2], &[3, 2]], |g, i| g.sub(i[0], i[1]).unwrap(), 3);
    check_op("mul", &[&[3, 2], &[3, 2]], |g, i| g.mul(i[0], i[1]).unwrap(), 4);
    check_op("scale", &[&[5]], |g, i| g.scale(i[0], -1.7), 5);
    check_op("sum", &[&[3, 2]], |g, i| g.sum(i[0]), 6);
    check_op("sum_axis0", &[&[3, 2]], |g, i| g.sum_axis(i[0], 0).unwrap(), 7);
    check_op("sum_axis1", &[&[3, 2]], |g, i| g.sum_axis(i[0], 1).unwrap(), 8);
    check_op("mean", &[&[3, 2]], |g, i| g.mean(i[0]), 9);
    check_op("square", &[&[3, 2]], |g, i| g.square(i[0]), 20);
    check_op("gelu", &[&[3, 2]], |g, i| g.gelu(i[0]), 21);
    check_op("silu", &[&[3, 2]], |g, i| g.silu(i[0]), 22);
    check_op("dot2d", &[&[3, 2], &[3, 2]], |g, i| g.dot(i[0], i[1]).unwrap(), 23);
    check_op("dot1d", &[&[4], &[4]], |g, i| g.dot(i[0], i[1]).unwrap(), 24);
    check_op("concat", &[&[3, 2], &[3, 1]], |g, i| g.concat_cols(i[0], i[1]).unwrap(), 25);
    check_op("slice", &[&[3, 4]], |g, i| g.slice_cols(i[0], 1, 2).unwrap(), 26);
    check_op(
        "broadcast_scalar",
        &[&[]],
        |g, i| g.broadcast(i[0], BroadcastKind::Scalar, &[2, 3]).unwrap(),
        27,
    );
    check_op(
        "broadcast_row",
        &[&[3]],
        |g, i| g.broadcast(i[0], BroadcastKind::Row, &[2, 3]).unwrap(),
        28,
    );
    check_op(
        "broadcast_col",
        &[&[2]],
        |g, i| g.broadcast(i[0], BroadcastKind::Col, &[2, 3]).unwrap(),
        29,
    );
    check_op("tile", &[&[2, 3]], |g, i| g.tile_rows(i[0], 3).unwrap(), 30);
    check_op("fold", &[&[6, 2]], |g, i| g.fold_rows(i[0], 3).unwrap(), 31);
}

#[test]
fn derivatives_of_derivatives_match_finite_differences() {
    // d/dx of the (appended) gradient graph, for activations up to fourth order.
    for (name, seed) in [("gelu", 40u64), ("silu", 41)] {
        check_op(
            name,
            &[&[3, 2]],
            move |g, i| {
                let y = if name == "gelu" { g.gelu(i[0]) } else { g.silu(i[0]) };
                let y2 = g.square(y);
                let s = g.sum(y2);
                let d1 = g.grad(s, &[i[0]]).unwrap()[0];
                let s1 = g.sum(d1);
                let d2 = g.grad(s1, &[i[0]]).unwrap()[0];
                let s2 = g.sum(d2);
                g.grad(s2, &[i[0]]).unwrap()[0]
            },
            seed,
        );
    }
    // mixed second-order through an affine layer, w.r.t. the weights
    check_op(
        "affine-hvp",
        &[&[4, 3], &[3, 2], &[2]],
        |g, i| {
            let z = g.affine(i[0], i[1], i[2]).unwrap();
            let a = g.gelu(z);
            let s = g.sum(a);
            let dx = g.grad(s, &[i[0]]).unwrap()[0];
            g.square(dx)
        },
        42,
    );
}

#[test]
fn gelu_values_against_normal_cdf_oracle() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut g = Graph::new();
    let x = g.input("x", &[]);
    let y = g.gelu(x);
    let dy = g.grad(y, &[x]).unwrap()[0];
    let eval = |v: f64| {
        let t = Tensor::scalar(v);
        let out = g.eval_many(&[y, dy], &Bindings::new().with(x, &t)).unwrap();
        (out[0].item(), out[1].item())
    };
    let (y0, dy0) = eval(0.0);
    assert_eq!(y0, 0.0);
    assert!((dy0 - 0.5).abs() < 1e-15);
    let (y1, dy1) = eval(1.0);
    let oracle = normal.cdf(1.0);
    // statrs resolves Φ to roughly 1e-11
    assert!((y1 - oracle).abs() < 1e-10, "{y1} vs {oracle}");
    assert!((y1 - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((y1 - 0.841345).abs() < 5e-7);
    assert!((dy1 - (normal.cdf(1.0) + normal.pdf(1.0))).abs() < 1e-10);

    let fd = finite_diff(
        |t| {
            let mut gg = Graph::new();
            let xi = gg.input("x", &[1]);
            let s = gg.gelu(xi);
            let s = gg.sum(s);
            gg.eval(s, &Bindings::new().with(xi, t)).unwrap().item()
        },
        &Tensor::vector(vec![0.0]),
        1e-5,
    )
    .unwrap();
    assert!((fd.data()[0] - 0.5).abs() < 1e-9, "fd {}", fd.data()[0]);
}

#[test]
fn quadratic_form_hessian_recovers_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for d in 1..=4 {
        let m = random_tensor(&mut rng, &[d, d]);
        let a = Tensor::new(
            vec![d, d],
            (0..d * d)
                .map(|k| {
                    let (i, j) = (k / d, k % d);
                    0.5 * (m.data()[i * d + j] + m.data()[j * d + i])
                })
                .collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let x = g.input("x", &[1, d]);
        let ac = g.constant(a.clone());
        let xa = g.matmul(x, ac, false, false).unwrap();
        let q = g.dot(xa, x).unwrap();
        let f = g.sum(q);
        let f = g.scale(f, 0.5);
        let gx = g.grad(f, &[x]).unwrap()[0];
        let xv = random_tensor(&mut rng, &[1, d]);
        for i in 0..d {
            let gi = g.slice_cols(gx, i, 1).unwrap();
            let gi = g.sum(gi);
            let row = g.grad(gi, &[x]).unwrap()[0];
            let row = g.eval(row, &Bindings::new().with(x, &xv)).unwrap();
            for j in 0..d {
                assert!((row.data()[j] - a.data()[i * d + j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn evaluation_is_bit_reproducible() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let x = g.input("x", &[16, 3]);
    let w = g.input("w", &[3, 8]);
    let b = g.input("b", &[8]);
    let h = g.affine(x, w, b).unwrap();
    let h = g.gelu(h);
    let s = g.sum(h);
    let gx = g.grad(s, &[x]).unwrap()[0];
    let xv = random_tensor(&mut rng, &[16, 3]);
    let wv = random_tensor(&mut rng, &[3, 8]);
    let bv = random_tensor(&mut rng, &[8]);
    let bind = Bindings::new().with(x, &xv).with(w, &wv).with(b, &bv);
    let first = g.eval_many(&[s, gx], &bind).unwrap();
    for _ in 0..3 {
        let again = g.eval_many(&[s, gx], &bind).unwrap();
        assert_eq!(first, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradient_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let x = g.input("x", &[5, 2]);
        let f = { let s = g.gelu(x); g.sum(s) };
        let h = { let s = g.silu(x); let s = g.square(s); g.mean(s) };
        let fa = g.scale(f, a);
        let hb = g.scale(h, b);
        let combo = g.add(fa, hb).unwrap();
        let grads = g.grad(combo, &[x]).unwrap();
        let gf = g.grad(f, &[x]).unwrap()[0];
        let gh = g.grad(h, &[x]).unwrap()[0];
        let xv = random_tensor(&mut rng, &[5, 2]);
        let vals = g.eval_many(&[grads[0], gf, gh], &Bindings::new().with(x, &xv)).unwrap();
        for i in 0..10 {
            let lhs = vals[0].data()[i];
            let rhs = a * vals[1].data()[i] + b * vals[2].data()[i];
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

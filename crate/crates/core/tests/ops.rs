use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tammatte_core::gradcheck::grad_check;
use tammatte_core::{Graph, Mask, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ks) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - ks) / stride + 1;
    let ow = (w + 2 * pad - ks) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = b.data()[o];
                for c in 0..cin {
                    for dy in 0..ks {
                        for dx in 0..ks {
                            let iy = (y * stride + dy) as isize - pad as isize;
                            let ix = (xx * stride + dx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += k.data()[((o * cin + c) * ks + dy) * ks + dx]
                                    * x.data()[(c * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                }
                out[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1)] {
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let mut g = Graph::new();
        let (xv, kv, bv) = (
            g.constant(x.clone()),
            g.constant(k.clone()),
            g.constant(b.clone()),
        );
        let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
        let want = conv_oracle(&x, &k, &b, stride, pad);
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn gather_backward_is_the_exact_adjoint() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w, win) = (3, 6, 7, 5);
    let q = random(&[c, h, w], &mut rng);
    let centers = vec![(0, 0), (2, 3), (5, 6), (2, 3), (4, 1)];
    let p = random(&[centers.len(), win * win, c], &mut rng);
    let mut g = Graph::new();
    let qv = g.param(q.clone());
    let (patches, valid) = g.gather_patches(qv, &centers, win).unwrap();
    let pv = g.constant(p.clone());
    let prod = g.mul(patches, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(qv).unwrap();

    let r = (win / 2) as isize;
    let mut want = vec![0.0; c * h * w];
    let mut want_valid = Vec::new();
    for (m, &(cy, cx)) in centers.iter().enumerate() {
        let mut j = 0;
        for dy in -r..=r {
            for dx in -r..=r {
                let (y, x) = (cy as isize + dy, cx as isize + dx);
                let inside = y >= 0 && x >= 0 && y < h as isize && x < w as isize;
                want_valid.push(inside);
                for ch in 0..c {
                    let pval = p.data()[(m * win * win + j) * c + ch];
                    let got = g.value(patches).data()[(m * win * win + j) * c + ch];
                    if inside {
                        let qi = (ch * h + y as usize) * w + x as usize;
                        want[qi] += pval;
                        assert_eq!(got, q.data()[qi]);
                    } else {
                        assert_eq!(got, 0.0);
                    }
                }
                j += 1;
            }
        }
    }
    assert_eq!(valid.data(), want_valid.as_slice());
    assert!(grad.max_abs_diff(&Tensor::new(vec![c, h, w], want).unwrap()) < 1e-14);
}

#[test]
fn conv_softmax_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[2, 2, 3, 3], &mut rng);
    let b = random(&[2], &mut rng);
    let centers = [(1, 1), (3, 2), (0, 4)];
    let f = |g: &mut Graph, v: &[tammatte_core::Var]| {
        let xv = v[0];
        let kv = g.constant(k.clone());
        let bv = g.constant(b.clone());
        let y = g.conv2d(xv, kv, bv, 1, 1)?;
        let (patches, valid) = g.gather_patches(y, &centers, 3)?;
        let keys = g.gather_points(y, &centers)?;
        let logits = g.row_dot(keys, patches, 1.0)?;
        let a = g.masked_softmax(logits, &valid)?;
        let sq = g.mul(a, logits)?;
        g.sum(sq)
    };
    let err = grad_check(f, &x, 1e-5).unwrap();
    assert!(err < 1e-6, "max rel err {err}");
}

#[test]
fn sum_grad_check_is_exact() {
    let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.37 - 1.0);
    let err = grad_check(
        |g: &mut Graph, v: &[tammatte_core::Var]| g.sum(v[0]),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9);
}

#[test]
fn ops_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.param(random(&[3, 8, 8], &mut rng));
        let k = g.param(random(&[4, 3, 3, 3], &mut rng));
        let b = g.param(random(&[4], &mut rng));
        let y = g.conv2d(x, k, b, 2, 1).unwrap();
        let u = g.upsample2x(y).unwrap();
        let s = g.sigmoid(u).unwrap();
        let l = g.mean(s).unwrap();
        g.backward(l).unwrap();
        (g.value(l).clone(), g.grad(x).unwrap(), g.grad(k).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masked_softmax_rows_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..12,
        seed in any::<u64>(),
        scale in 0.1f64..30.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-scale..scale));
        let mut valid: Vec<bool> = (0..rows * cols).map(|_| rng.gen_bool(0.6)).collect();
        for r in 0..rows {
            valid[r * cols + rng.gen_range(0..cols)] = true;
        }
        let mask = Mask::new(vec![rows, cols], valid.clone()).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logits);
        let a = g.masked_softmax(l, &mask).unwrap();
        for (row, v) in g.value(a).data().chunks(cols).zip(valid.chunks(cols)) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (w, ok) in row.iter().zip(v) {
                if *ok {
                    prop_assert!((0.0..=1.0).contains(w));
                } else {
                    prop_assert_eq!(*w, 0.0);
                }
            }
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(seed in any::<u64>(), c in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[2, 2, 3, 3], &mut rng);
        let zero = Tensor::zeros(&[2]);
        let mut g = Graph::new();
        let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k), g.constant(zero));
        let xs = g.scale(xv, c).unwrap();
        let y1 = g.conv2d(xs, kv, bv, 1, 1).unwrap();
        let y0 = g.conv2d(xv, kv, bv, 1, 1).unwrap();
        let y0s = g.scale(y0, c).unwrap();
        prop_assert!(g.value(y1).max_abs_diff(g.value(y0s)) < 1e-12);
    }
}

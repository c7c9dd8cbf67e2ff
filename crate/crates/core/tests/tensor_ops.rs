use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xsight::gradcheck::{check_op, GRAD_REL_TOL};
use xsight::tensor::{BnMode, ParamStore, Tape, Tensor, BN_EPSILON};
use xsight::Error;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct nested-loop cross-correlation, written independently of the tape.
fn conv2d_reference(
    input: &Tensor,
    kernels: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (k, cout) = (kernels.shape()[0], kernels.shape()[3]);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let at = |y: isize, x: isize, c: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            input.data()[(y as usize * w + x as usize) * cin + c]
        }
    };
    let mut out = Vec::new();
    for oy in 0..ho {
        for ox in 0..wo {
            for co in 0..cout {
                let mut s = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..k {
                    for kx in 0..k {
                        for ci in 0..cin {
                            let y = (oy * stride + ky) as isize - padding as isize;
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                                continue;
                            }
                            s += at(y, x, ci)
                                * kernels.data()[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn conv1d_reference(seq: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (l, d) = (seq.shape()[0], seq.shape()[1]);
    let (width, filters) = (kernel.shape()[0], kernel.shape()[2]);
    let mut out = Vec::new();
    for t in 0..=(l - width) {
        for f in 0..filters {
            let mut s = bias.map_or(0.0, |b| b.data()[f]);
            for j in 0..width {
                for dd in 0..d {
                    s += seq.data()[(t + j) * d + dd] * kernel.data()[(j * d + dd) * filters + f];
                }
            }
            out.push(s);
        }
    }
    out
}

#[test]
fn dense_identity_and_hand_product() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![3.0, -1.0]));
    let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, -1.0]);

    let x = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let y = tape.dense(x, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 8.0]);
}

#[test]
fn dense_input_gradient_is_column_sums() {
    let mut tape = Tape::new();
    let wt = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
    let x = tape.input(Tensor::vector(vec![0.1, 0.2, 0.3]), true);
    let w = tape.constant(wt);
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.dense(x, w, b).unwrap();
    let s = tape.sum(y);
    let grads = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-3.0, 7.0, 3.5]);

    let err = check_op(
        &[Tensor::vector(vec![0.1, 0.2, 0.3])],
        1,
        |t, v| {
            let w = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap());
            let b = t.constant(Tensor::zeros(&[2]));
            t.dense(v[0], w, b)
        },
    )
    .unwrap();
    assert!(err < GRAD_REL_TOL, "{err}");
}

#[test]
fn dense_shape_mismatch_names_shapes() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3]));
    let w = tape.constant(Tensor::zeros(&[2, 2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let err = tape.dense(x, w, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Dimension(_)));
    assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_tensor(&mut rng, &[5, 4, 1]);
    let mut tape = Tape::new();
    let x = tape.constant(img.clone());
    let k = tape.constant(Tensor::filled(&[1, 1, 1, 1], 1.0));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), img.data());
}

#[test]
fn conv2d_ones_kernel_on_ramp_gives_local_sums() {
    let ramp = Tensor::new(vec![5, 5, 1], (0..25).map(|v| v as f64).collect()).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(ramp.clone());
    let k = tape.constant(Tensor::filled(&[3, 3, 1, 1], 1.0));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[3, 3, 1]);
    let oracle = conv2d_reference(&ramp, &Tensor::filled(&[3, 3, 1, 1], 1.0), None, 1, 0);
    assert_eq!(tape.value(y).data(), oracle.as_slice());
    // centre of a ramp window: 9 × value at the window centre
    assert_eq!(tape.value(y).data()[0], 9.0 * 6.0);
}

#[test]
fn conv2d_shape_formula_and_oversized_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[8, 8, 1]));
    let k = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
    let y = tape.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[6, 6, 2]);

    let small = tape.constant(Tensor::zeros(&[2, 2, 1]));
    let err = tape.conv2d(small, k, None, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Dimension(_)));
    // padding makes room
    assert!(tape.conv2d(small, k, None, 1, 1).is_ok());
}

#[test]
fn conv_matches_nested_loop_reference_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..100 {
        let h = rng.gen_range(3..=8);
        let w = rng.gen_range(3..=8);
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let stride = rng.gen_range(1..=2);
        let padding = rng.gen_range(0..=1);
        let input = random_tensor(&mut rng, &[h, w, cin]);
        let kernels = random_tensor(&mut rng, &[k, k, cin, cout]);
        let bias = random_tensor(&mut rng, &[cout]);
        let mut tape = Tape::new();
        let (x, kv, bv) = (
            tape.constant(input.clone()),
            tape.constant(kernels.clone()),
            tape.constant(bias.clone()),
        );
        let y = tape.conv2d(x, kv, Some(bv), stride, padding).unwrap();
        let oracle = conv2d_reference(&input, &kernels, Some(&bias), stride, padding);
        assert_eq!(tape.value(y).data(), oracle.as_slice(), "conv2d trial {trial}");

        let l = rng.gen_range(5..=8);
        let d = rng.gen_range(1..=4);
        let width = rng.gen_range(3..=5);
        let seq = random_tensor(&mut rng, &[l, d]);
        let kernel = random_tensor(&mut rng, &[width, d, cout]);
        let s = tape.constant(seq.clone());
        let kv = tape.constant(kernel.clone());
        let bv = tape.constant(bias.clone());
        let y = tape.conv1d(s, kv, Some(bv)).unwrap();
        let oracle = conv1d_reference(&seq, &kernel, Some(&bias));
        assert_eq!(tape.value(y).data(), oracle.as_slice(), "conv1d trial {trial}");
    }
}

#[test]
fn conv1d_examples() {
    let mut tape = Tape::new();
    let seq = tape.constant(Tensor::filled(&[140, 4], 0.5));
    let k = tape.constant(Tensor::filled(&[3, 4, 2], 0.1));
    let y = tape.conv1d(seq, k, None).unwrap();
    assert_eq!(tape.value(y).shape(), &[138, 2]);

    let zeros = tape.constant(Tensor::zeros(&[3, 4, 1]));
    let y = tape.conv1d(seq, zeros, None).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    // width-3 averaging over the first embedding column of a 6×2 sequence
    let data = vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0, 5.0, 50.0, 6.0, 60.0];
    let seq = tape.constant(Tensor::new(vec![6, 2], data).unwrap());
    let avg = Tensor::new(vec![3, 2, 1], vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]).unwrap();
    let k = tape.constant(avg);
    let y = tape.conv1d(seq, k, None).unwrap();
    assert_eq!(tape.value(y).shape(), &[4, 1]);
    for (got, want) in tape.value(y).data().iter().zip([2.0, 3.0, 4.0, 5.0]) {
        assert!((got - want).abs() < 1e-12);
    }

    let short = tape.constant(Tensor::zeros(&[2, 4]));
    let k = tape.constant(Tensor::zeros(&[3, 4, 1]));
    assert!(matches!(tape.conv1d(short, k, None), Err(Error::Dimension(_))));
}

#[test]
fn max_over_time_examples() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::filled(&[4, 3], 2.5));
    let y = tape.max_over_time(c).unwrap();
    assert_eq!(tape.value(y).data(), &[2.5, 2.5, 2.5]);

    let m = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let y = tape.max_over_time(m).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

    let empty = tape.constant(Tensor::zeros(&[0, 3]));
    assert!(matches!(tape.max_over_time(empty), Err(Error::Dimension(_))));

    let err = check_op(
        &[Tensor::new(vec![3, 2], vec![0.1, 0.9, 0.7, -0.2, 0.3, 0.4]).unwrap()],
        2,
        |t, v| t.max_over_time(v[0]),
    )
    .unwrap();
    assert!(err < GRAD_REL_TOL);
}

#[test]
fn max_over_time_ties_route_to_first() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::new(vec![3, 1], vec![1.0, 1.0, 1.0]).unwrap(), true);
    let y = tape.max_over_time(x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_examples_and_brute_force() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::filled(&[4, 4, 1], 0.7));
    let y = tape.max_pool2d(c, 2, 2).unwrap();
    assert_eq!(tape.value(y).shape(), &[2, 2, 1]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.7));

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let img = random_tensor(&mut rng, &[6, 7, 2]);
        let (window, stride) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let x = tape.input(img.clone(), true);
        let y = tape.max_pool2d(x, window, stride).unwrap();
        let (ho, wo) = ((6 - window) / stride + 1, (7 - window) / stride + 1);
        assert_eq!(tape.value(y).shape(), &[ho, wo, 2]);
        for oy in 0..ho {
            for ox in 0..wo {
                for c in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    for wy in 0..window {
                        for wx in 0..window {
                            let v = img.data()[((oy * stride + wy) * 7 + ox * stride + wx) * 2 + c];
                            best = best.max(v);
                        }
                    }
                    assert_eq!(tape.value(y).data()[(oy * wo + ox) * 2 + c], best);
                }
            }
        }
    }

    let too_big = tape.constant(Tensor::zeros(&[2, 2, 1]));
    assert!(matches!(tape.max_pool2d(too_big, 3, 1), Err(Error::Dimension(_))));
}

#[test]
fn max_pool_gradient_only_reaches_argmax_cells() {
    let img = Tensor::new(
        vec![2, 2, 1],
        vec![0.1, 0.9, 0.4, 0.2],
    )
    .unwrap();
    let mut tape = Tape::new();
    let x = tape.input(img.clone(), true);
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);

    let err = check_op(&[img], 4, |t, v| t.max_pool2d(v[0], 2, 1)).unwrap();
    assert!(err < GRAD_REL_TOL);
}

#[test]
fn batch_norm_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0]));
    let gamma = tape.constant(Tensor::filled(&[3], 1.0));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let y = tape
        .batch_norm(&[x], gamma, beta, BnMode::Inference, &[0.0; 3], &[1.0; 3])
        .unwrap();
    for (a, b) in tape.value(y).data().iter().zip([0.3, -1.2, 2.0]) {
        assert!((a - b).abs() < 1e-4);
    }

    let batch: Vec<_> = [[1.0, -3.0], [4.0, 5.0], [9.0, 0.0], [-6.0, 8.0]]
        .iter()
        .map(|r| tape.constant(Tensor::vector(r.to_vec())))
        .collect();
    let gamma = tape.constant(Tensor::filled(&[2], 1.0));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let y = tape
        .batch_norm(&batch, gamma, beta, BnMode::Train, &[0.0; 2], &[1.0; 2])
        .unwrap();
    let out = tape.value(y).data().to_vec();
    for f in 0..2 {
        let col: Vec<f64> = (0..4).map(|s| out[s * 2 + f]).collect();
        let mean = col.iter().sum::<f64>() / 4.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        // variance is var/(var+eps); these columns have variance > 20
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
    assert!(BN_EPSILON > 0.0);
    assert!(matches!(
        tape.batch_norm(&[], gamma, beta, BnMode::Train, &[0.0; 2], &[1.0; 2]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn batch_norm_gradients_on_four_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut inputs: Vec<Tensor> = (0..4).map(|_| random_tensor(&mut rng, &[3])).collect();
    inputs.push(random_tensor(&mut rng, &[3]));
    inputs.push(random_tensor(&mut rng, &[3]));
    for mode in [BnMode::Train, BnMode::Inference] {
        let err = check_op(&inputs, 9, |t, v| {
            t.batch_norm(&v[..4], v[4], v[5], mode, &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0])
        })
        .unwrap();
        assert!(err < GRAD_REL_TOL, "{mode:?}: {err}");
    }
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::vector(vec![1.0, 2.0]), true);
    let b = tape.input(Tensor::vector(vec![3.0]), true);
    let c = tape.concat(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
    let s = tape.sum(c);
    let g = tape.backward(s, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0, 1.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0]);

    let e = tape.constant(Tensor::vector(vec![]));
    let x = tape.constant(Tensor::vector(vec![4.0, 5.0]));
    let c = tape.concat(e, x).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 5.0]);

    let m = tape.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(tape.concat(m, x), Err(Error::Dimension(_))));
}

#[test]
fn activation_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-2.0, 0.0, 3.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).data(), &[0.5]);

    let kink = tape.input(Tensor::scalar(0.0), true);
    let r = tape.relu(kink);
    let g = tape.backward(r, &mut ParamStore::new()).unwrap();
    assert_eq!(g.get(kink).unwrap().data(), &[0.0]);

    let away = [Tensor::vector(vec![-1.3, 0.4, 2.2, -0.05])];
    assert!(check_op(&away, 1, |t, v| Ok(t.relu(v[0]))).unwrap() < GRAD_REL_TOL);
    assert!(check_op(&away, 1, |t, v| Ok(t.sigmoid(v[0]))).unwrap() < GRAD_REL_TOL);
}

#[test]
fn bce_examples() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::scalar(0.5));
    let l = tape.bce_loss(p, 1.0).unwrap();
    assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

    for y in [0.0, 1.0] {
        let p = tape.constant(Tensor::scalar(y));
        let l = tape.bce_loss(p, y).unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);
    }
    assert!(matches!(tape.bce_loss(p, 0.5), Err(Error::Usage(_))));

    for (pv, y) in [(0.3, 1.0), (0.8, 0.0), (0.55, 1.0)] {
        let mut tape = Tape::new();
        let p = tape.input(Tensor::scalar(pv), true);
        let l = tape.bce_loss(p, y).unwrap();
        let g = tape.backward(l, &mut ParamStore::new()).unwrap();
        let expected = (pv - y) / (pv * (1.0 - pv));
        assert!((g.get(p).unwrap().data()[0] - expected).abs() < 1e-12);
        let err = check_op(&[Tensor::scalar(pv)], 0, |t, v| t.bce_loss(v[0], y)).unwrap();
        assert!(err < GRAD_REL_TOL);
    }
}

/// Three dense layers with parameters in a store; checks every parameter
/// gradient against finite differences of the full loss.
#[test]
fn three_layer_network_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let dims = [4, 5, 3, 1];
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let wid = store.add(&format!("l{i}.w"), random_tensor(&mut rng, &[w[1], w[0]])).unwrap();
        let bid = store.add(&format!("l{i}.b"), random_tensor(&mut rng, &[w[1]])).unwrap();
        layers.push((wid, bid));
    }
    let x = random_tensor(&mut rng, &[4]);
    let loss_of = |store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let mut h = tape.constant(x.clone());
        for (i, (w, b)) in layers.iter().enumerate() {
            let (wv, bv) = (tape.param(store, *w), tape.param(store, *b));
            h = tape.dense(h, wv, bv).unwrap();
            if i + 1 < layers.len() {
                h = tape.relu(h);
            }
        }
        let p = tape.sigmoid(h);
        let l = tape.bce_loss(p, 1.0).unwrap();
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    for (i, (w, b)) in layers.iter().enumerate() {
        let (wv, bv) = (tape.param(&store, *w), tape.param(&store, *b));
        h = tape.dense(h, wv, bv).unwrap();
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    let p = tape.sigmoid(h);
    let l = tape.bce_loss(p, 1.0).unwrap();
    tape.backward(l, &mut store).unwrap();

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for j in 0..store.value(id).len() {
            let base = store.value(id).data()[j];
            let mut probe = store.clone();
            probe.value_mut(id).data_mut()[j] = base + 1e-6;
            let plus = loss_of(&probe);
            probe.value_mut(id).data_mut()[j] = base - 1e-6;
            let minus = loss_of(&probe);
            let numeric = (plus - minus) / 2e-6;
            worst = worst.max(xsight::gradcheck::relative_error(store.grad(id).data()[j], numeric));
        }
    }
    assert!(worst < 1e-4, "max relative error {worst}");
}

#[test]
fn backward_contracts() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::vector(vec![2.0])).unwrap();
    let unused = store.add("unused", Tensor::vector(vec![5.0])).unwrap();
    let mut tape = Tape::new();
    let u = tape.param(&store, used);
    let _ = tape.param(&store, unused);
    let s = tape.sum(u);
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(used).data(), &[1.0]);
    assert_eq!(store.grad(unused).data(), &[0.0]);

    // no reset between calls: gradients double
    tape.backward(s, &mut store).unwrap();
    assert_eq!(store.grad(used).data(), &[2.0]);

    let v = tape.param(&store, used);
    assert_eq!(v, u, "parameter leaves are memoized per tape");

    let x = tape.input(Tensor::scalar(3.0), true);
    let g = tape.backward(x, &mut store).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0]);

    let vecx = tape.input(Tensor::vector(vec![1.0, 2.0]), true);
    assert!(matches!(tape.backward(vecx, &mut store), Err(Error::Usage(_))));
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let img = random_tensor(&mut rng, &[8, 8, 2]);
        let k = random_tensor(&mut rng, &[3, 3, 2, 4]);
        let mut tape = Tape::new();
        let x = tape.constant(img);
        let kv = tape.constant(k);
        let y = tape.conv2d(x, kv, None, 1, 1).unwrap();
        let y = tape.relu(y);
        let y = tape.max_pool2d(y, 2, 2).unwrap();
        let y = tape.global_avg_pool(y).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn embedding_skips_padding_row() {
    let mut store = ParamStore::new();
    let table = store
        .add("emb", Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap())
        .unwrap();
    let mut tape = Tape::new();
    let e = tape.embedding(&store, table, &[2, 0, 2, 1]).unwrap();
    assert_eq!(tape.value(e).data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0, 1.0, 2.0]);
    let s = tape.sum(e);
    let g = tape.backward(s, &mut store).unwrap();
    assert_eq!(g.get(e).unwrap().shape(), &[4, 2]);
    assert_eq!(store.grad(table).data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    assert!(matches!(
        tape.embedding(&store, table, &[3]),
        Err(Error::Lookup(_))
    ));
}

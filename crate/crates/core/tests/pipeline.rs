use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tadaf::framework::{predict, sample_grads};
use tadaf::gradcheck::check_composed;
use tadaf::nn::{model_forward, ModelSpec, ModelState};
use tadaf::selftest::random_tensor;
use tadaf::tlayer::{combine, BRANCH1_AXES, BRANCH2_AXES};
use tadaf::{augment_forward, tprod_naive, Activation, Preset, TAdafParams, Tensor3, TprodKernel};

/// Straight-line LeNet evaluation reading the image as `x[c][y][x]`.
fn lenet_oracle(img: &Tensor3, model: &ModelState) -> Vec<f64> {
    let p = &model.params().0;
    let (h, w, _) = img.dims();
    let mut x: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| (0..h).map(|i| (0..w).map(|j| img.get(i, j, c)).collect()).collect())
        .collect();

    let conv = |x: &Vec<Vec<Vec<f64>>>, params: &[f64], out_c: usize| {
        let in_c = x.len();
        let (h, w) = (x[0].len(), x[0][0].len());
        let bias = &params[out_c * in_c * 25..];
        let mut y = vec![vec![vec![0.0; w - 4]; h - 4]; out_c];
        for o in 0..out_c {
            for r in 0..h - 4 {
                for c in 0..w - 4 {
                    let mut acc = bias[o];
                    for ci in 0..in_c {
                        for ky in 0..5 {
                            for kx in 0..5 {
                                acc += params[((o * in_c + ci) * 5 + ky) * 5 + kx] * x[ci][r + ky][c + kx];
                            }
                        }
                    }
                    y[o][r][c] = acc.max(0.0);
                }
            }
        }
        y
    };
    let pool = |x: &Vec<Vec<Vec<f64>>>| {
        x.iter()
            .map(|plane| {
                (0..plane.len() / 2)
                    .map(|r| {
                        (0..plane[0].len() / 2)
                            .map(|c| {
                                plane[2 * r][2 * c]
                                    .max(plane[2 * r][2 * c + 1])
                                    .max(plane[2 * r + 1][2 * c])
                                    .max(plane[2 * r + 1][2 * c + 1])
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect::<Vec<Vec<Vec<f64>>>>()
    };
    let dense = |v: &[f64], params: &[f64], outputs: usize, relu: bool| {
        let inputs = v.len();
        (0..outputs)
            .map(|o| {
                let mut acc = params[inputs * outputs + o];
                for i in 0..inputs {
                    acc += params[o * inputs + i] * v[i];
                }
                if relu {
                    acc.max(0.0)
                } else {
                    acc
                }
            })
            .collect::<Vec<f64>>()
    };

    x = pool(&conv(&x, &p[0], 6));
    x = pool(&conv(&x, &p[3], 16));
    let flat: Vec<f64> = x.iter().flatten().flatten().copied().collect();
    let h1 = dense(&flat, &p[7], 120, true);
    let h2 = dense(&h1, &p[9], 84, true);
    dense(&h2, &p[11], model.num_classes(), false)
}

#[test]
fn lenet_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (classes, seed) in [(10, 1), (100, 2)] {
        let model = ModelState::new(ModelSpec::lenet5(32, 32, classes), seed).unwrap();
        for _ in 0..3 {
            let img = random_tensor(&mut rng, 32, 32, 3);
            let got = model_forward(&img, &model).unwrap().0;
            let want = lenet_oracle(&img, &model);
            let diff = got.iter().zip(&want).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(diff < 1e-12, "diff {diff}");
        }
    }
}

#[test]
fn augmented_views_match_permute_tprod_pipeline() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let img = random_tensor(&mut rng, 5, 7, 3);
    let mut params = TAdafParams::new(5, 7, Preset::P433.weights().unwrap(), Activation::Tanh)
        .with_kernel(TprodKernel::Naive);
    params.w1 = random_tensor(&mut rng, 3, 3, 7);
    params.w2 = random_tensor(&mut rng, 3, 3, 5);
    let (views, _) = augment_forward(&img, &params).unwrap();

    let b1 = tprod_naive(&img.permute(BRANCH1_AXES).unwrap(), &params.w1)
        .unwrap()
        .map(f64::tanh)
        .permute([0, 2, 1])
        .unwrap();
    let b2 = tprod_naive(&img.permute(BRANCH2_AXES).unwrap(), &params.w2)
        .unwrap()
        .map(f64::tanh)
        .permute([2, 0, 1])
        .unwrap();
    assert_eq!(views[0], img);
    assert!(views[1].max_abs_diff(&b1) < 1e-12);
    assert!(views[2].max_abs_diff(&b2) < 1e-12);
}

#[test]
fn gradients_on_rectangular_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let model = ModelState::new(ModelSpec::mlp(4, 6, 5, 3), 3).unwrap();
    for act in [Activation::Identity, Activation::Tanh] {
        let mut params = TAdafParams::new(4, 6, Preset::P525.weights().unwrap(), act);
        for v in params.w1.data_mut().iter_mut().chain(params.w2.data_mut()) {
            *v += rng.random_range(-0.2..0.2);
        }
        let img = random_tensor(&mut rng, 4, 6, 3);
        for r in check_composed(&img, 1, &model, Some(&params), 1e-5).unwrap() {
            assert!(r.max_relative_error < 1e-4, "{act:?} {r:?}");
        }
    }
}

#[test]
fn blended_logits_are_convex_combination_of_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let model = ModelState::new(ModelSpec::toy_cnn(3), 4).unwrap();
    let mut params = TAdafParams::new(6, 6, Preset::P525.weights().unwrap(), Activation::Identity);
    params.w1 = random_tensor(&mut rng, 3, 3, 6);
    let img = random_tensor(&mut rng, 6, 6, 3);
    let (views, _) = augment_forward(&img, &params).unwrap();
    let r: Vec<Vec<f64>> = views.iter().map(|v| model_forward(v, &model).unwrap().0).collect();
    let want = combine([&r[0], &r[1], &r[2]], &[0.5, 0.25, 0.25]).unwrap();
    assert_eq!(predict(&img, &model, Some(&params)).unwrap(), want);
    assert_eq!(sample_grads(&img, 0, &model, Some(&params)).unwrap().logits, want);
}

#[test]
fn kernels_agree_inside_the_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let img = random_tensor(&mut rng, 8, 8, 3);
    let mut base = TAdafParams::new(8, 8, Preset::P333.weights().unwrap(), Activation::Relu);
    base.w1 = random_tensor(&mut rng, 3, 3, 8);
    base.w2 = random_tensor(&mut rng, 3, 3, 8);
    let outs: Vec<_> = [TprodKernel::Naive, TprodKernel::CircSum, TprodKernel::Fft]
        .into_iter()
        .map(|k| augment_forward(&img, &base.clone().with_kernel(k)).unwrap().0)
        .collect();
    for o in &outs[1..] {
        for (a, b) in o.iter().zip(&outs[0]) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }
}

#[test]
fn fft_route_scales_better_than_naive() {
    // Same shape as the `bench` subcommand; loose bounds since CI timing is noisy.
    let s = tadaf::selftest::cost_scaling(3, 0).unwrap();
    assert!(s.fft_ratio < s.naive_ratio, "{s:?}");
}

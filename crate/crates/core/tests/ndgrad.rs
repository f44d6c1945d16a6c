use latentwm::ndgrad::kernels;
use latentwm::ndgrad::{grad_check, grad_check_refined, grad_check_tape, Tape, Tensor, Var};
use latentwm::rng;
use rand::Rng;

fn random(seed: u64, dims: &[usize]) -> Tensor {
    let mut r = rng::stream(seed);
    let n = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.dims() == b.dims()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol)
}

/// `w . K(x)` with a seeded cotangent `w`.
fn projected<K>(k: K, w: Tensor) -> impl Fn(&mut Tape, Var) -> latentwm::Result<Var>
where
    K: Fn(&mut Tape, Var) -> latentwm::Result<Var>,
{
    move |t, x| {
        let y = k(t, x)?;
        let wv = t.constant(w.clone().reshape(t.value(y).dims())?);
        t.dot(y, wv)
    }
}

#[test]
fn conv2d_identity_kernel() {
    let x = random(1, &[5, 4, 3]);
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        k.data_mut()[c * 3 + c] = 1.0;
    }
    assert_eq!(kernels::conv2d(&x, &k, 1, 0).unwrap(), x);
}

#[test]
fn conv2d_normalized_kernel_keeps_constants() {
    let x = Tensor::filled(&[6, 6, 1], 3.5);
    let k = Tensor::filled(&[3, 3, 1, 1], 1.0 / 9.0);
    // Zero padding touches the border, so compare the interior.
    let y = kernels::conv2d(&x, &k, 1, 0).unwrap();
    assert!(y.data().iter().all(|v| (v - 3.5).abs() < 1e-12));
}

#[test]
fn conv2d_vjp_matches_differences() {
    let k = random(2, &[3, 3, 1, 2]);
    let w = random(3, &[6 * 6 * 2]);
    let x = random(4, &[6, 6, 1]);
    let err = grad_check_tape(
        projected(
            move |t, x| {
                let kv = t.constant(k.clone());
                t.conv2d(x, kv, 1, 1)
            },
            w,
        ),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn conv2d_mean_is_pooled_conv2d() {
    let x = random(5, &[9, 7, 3]);
    let k = random(6, &[3, 3, 3, 5]);
    for (stride, padding) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
        let fused = kernels::conv2d_mean(&x, &k, stride, padding).unwrap();
        let plain =
            kernels::global_avg_pool(&kernels::conv2d(&x, &k, stride, padding).unwrap()).unwrap();
        assert!(
            close(&fused, &plain, 1e-12),
            "stride {stride} pad {padding}"
        );
    }
}

#[test]
fn warp_neutral_is_identity() {
    let x = random(7, &[8, 8, 2]);
    let y = kernels::affine_warp(&x, 0.0, 1.0, 8, 8).unwrap();
    assert!(close(&x, &y, 1e-12));
}

#[test]
fn full_turn_matches_no_turn() {
    let mut x = Tensor::zeros(&[9, 9, 1]);
    for i in 3..6 {
        for j in 3..6 {
            x.data_mut()[i * 9 + j] = 1.0;
        }
    }
    let a = kernels::affine_warp(&x, 0.0, 1.0, 9, 9).unwrap();
    let b = kernels::affine_warp(&x, 360.0, 1.0, 9, 9).unwrap();
    assert!(close(&a, &b, 1e-9));
}

#[test]
fn warp_vjp_matches_differences() {
    let w = random(8, &[8 * 8 * 2]);
    let x = random(9, &[8, 8, 2]);
    let err = grad_check_tape(
        projected(|t, x| t.affine_warp(x, 17.0, 0.8, 8, 8), w),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn blur_identities() {
    let x = random(10, &[7, 6, 3]);
    assert!(close(&kernels::gaussian_blur(&x, 0.0).unwrap(), &x, 0.0));
    let c = Tensor::filled(&[7, 6, 3], 42.0);
    assert!(close(&kernels::gaussian_blur(&c, 1.7).unwrap(), &c, 1e-12));
    assert!(kernels::gaussian_blur(&x, -0.1).is_err());
}

#[test]
fn blur_vjp_matches_differences() {
    let w = random(11, &[8 * 8]);
    let x = random(12, &[8, 8, 1]);
    let err = grad_check_tape(projected(|t, x| t.gaussian_blur(x, 1.3), w), &x, 1e-5).unwrap();
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn reduce_op_examples() {
    let c = Tensor::filled(&[4, 5, 3], 2.5);
    assert_eq!(
        kernels::global_avg_pool(&c).unwrap(),
        Tensor::vector(vec![2.5; 3])
    );
    let r = kernels::relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(r, Tensor::vector(vec![0.0, 0.0, 2.0]));
    let g = kernels::relu_vjp(
        &Tensor::vector(vec![1.0, 1.0, 1.0]),
        &Tensor::vector(vec![-1.0, 0.0, 2.0]),
    );
    assert_eq!(g, Tensor::vector(vec![0.0, 0.0, 1.0]));
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
    assert_eq!(kernels::linear_map(&x, &eye).unwrap(), x);
}

#[test]
fn shape_mismatches_rejected() {
    let x = random(13, &[6, 6, 2]);
    assert!(kernels::conv2d(&x, &random(14, &[3, 3, 3, 1]), 1, 1).is_err());
    assert!(kernels::conv2d(&x, &random(14, &[2, 2, 2, 1]), 1, 1).is_err());
    assert!(kernels::linear_map(&Tensor::vector(vec![1.0; 4]), &Tensor::zeros(&[3, 2])).is_err());
}

#[test]
fn sum_of_squares_is_exact() {
    let x = random(15, &[10]);
    let err = grad_check(
        |p| Ok(p.data().iter().map(|v| v * v).sum()),
        |p| Ok(p.map(|v| 2.0 * v)),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn grad_check_rejects_non_finite_values() {
    let x = random(16, &[3]);
    assert!(grad_check(|_| Ok(f64::NAN), |p| Ok(p.clone()), &x, 1e-5).is_err());
    assert!(grad_check(|_| Ok(0.0), |p| Ok(p.clone()), &x, 0.0).is_err());
}

#[test]
fn conv_relu_pool_chain() {
    let k = random(17, &[3, 3, 2, 3]);
    let w = random(18, &[3]);
    let mut x = random(19, &[6, 6, 2]);
    // Nudge until no pre-activation sits near the kink.
    let mut salt = 0;
    while kernels::conv2d(&x, &k, 1, 1)
        .unwrap()
        .data()
        .iter()
        .any(|v| v.abs() < 1e-3)
    {
        salt += 1;
        x = random(100 + salt, &[6, 6, 2]);
    }
    let err = grad_check_tape(
        projected(
            move |t, x| {
                let kv = t.constant(k.clone());
                let c = t.conv2d(x, kv, 1, 1)?;
                let a = t.relu(c)?;
                t.global_avg_pool(a)
            },
            w,
        ),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn image_kernels_are_linear() {
    let (a, b) = (1.7, -0.6);
    let x = random(20, &[8, 8, 3]);
    let y = random(21, &[8, 8, 3]);
    let mut mix = x.map(|v| a * v);
    mix.add_scaled(b, &y);
    let k = random(22, &[3, 3, 3, 2]);
    let ops: Vec<Box<dyn Fn(&Tensor) -> Tensor>> = vec![
        Box::new(|t| kernels::conv2d(t, &k, 2, 1).unwrap()),
        Box::new(|t| kernels::gaussian_blur(t, 1.1).unwrap()),
        Box::new(|t| kernels::affine_warp(t, -8.0, 0.75, 8, 8).unwrap()),
    ];
    for op in &ops {
        let mut want = op(&x).map(|v| a * v);
        want.add_scaled(b, &op(&y));
        assert!(close(&op(&mix), &want, 1e-10));
    }
}

#[test]
fn backward_is_deterministic() {
    let k = random(23, &[3, 3, 3, 4]);
    let x = random(24, &[8, 8, 3]);
    let run = || {
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let kv = t.leaf(k.clone());
        let c = t.conv2d(xv, kv, 2, 1).unwrap();
        let a = t.relu(c).unwrap();
        let b = t.gaussian_blur(a, 0.8).unwrap();
        let p = t.global_avg_pool(b).unwrap();
        let s = t.sum(p).unwrap();
        let mut g = t.backward(s, Tensor::scalar(1.0)).unwrap();
        (g.take(xv).unwrap(), g.take(kv).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn shared_subexpressions_accumulate() {
    // d/dx (x.x + sum(x)) = 2x + 1 with x used three times.
    let x = random(25, &[5]);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let d = t.dot(xv, xv).unwrap();
    let s = t.sum(xv).unwrap();
    let y = t.add(d, s).unwrap();
    let g = t
        .backward(y, Tensor::scalar(1.0))
        .unwrap()
        .take(xv)
        .unwrap();
    assert!(close(&g, &x.map(|v| 2.0 * v + 1.0), 1e-14));
}

/// `sum_i |x_i - 0.0004|` has a kink 4e-4 above 0 in every
/// coordinate; the gradient at 0 is `-1` per component.
fn kinked(p: &Tensor) -> latentwm::Result<f64> {
    Ok(p.data().iter().map(|v| (v - 4e-4).abs()).sum())
}

#[test]
fn refined_check_tolerates_a_nearby_kink() {
    let x = Tensor::zeros(&[4]);
    let truth = || Ok(Tensor::new(vec![4], vec![-1.0; 4]).unwrap());
    // The central quotient straddles the kink.
    assert!(grad_check(kinked, |_| truth(), &x, 1e-3).unwrap() > 0.1);
    assert!(grad_check_refined(kinked, |_| truth(), &x, &[1e-3]).unwrap() <= 1e-9);
}

#[test]
fn refined_check_still_rejects_wrong_gradients() {
    let x = Tensor::zeros(&[4]);
    let wrong = |_: &Tensor| Ok(Tensor::new(vec![4], vec![-1.01; 4]).unwrap());
    let err = grad_check_refined(kinked, wrong, &x, &[0.1, 1e-2, 1e-3]).unwrap();
    assert!(err > 5e-3, "{err}");
    // Smooth functions agree at every step.
    let smooth = |p: &Tensor| Ok(p.data().iter().map(|v| v.sin()).sum::<f64>());
    let x = random(31, &[6]);
    let grad = x.map(f64::cos);
    let err = grad_check_refined(smooth, |_| Ok(grad), &x, &[1e-3, 1e-4]).unwrap();
    assert!(err <= 1e-6, "{err}");
    assert!(grad_check_refined(smooth, |p: &Tensor| Ok(p.clone()), &x, &[]).is_err());
}

mod common;

use proptest::prelude::*;
use trajdiff::numkernel::{matmul, Adam, AdamConfig, Tape, Tensor, Var};
use trajdiff::Result;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::matrix(rows, cols, d).unwrap())
}

fn naive(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i * m + j] += a.get(i, l) * b.get(l, j);
            }
        }
    }
    out
}

/// Analytic vs central-difference gradient of `sum(op(inputs) ⊙ weights)` with
/// respect to every input entry, as `|a - n| / (1 + |a|)`.
fn primitive_check(inputs: &[Tensor], op: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>) -> f64 {
    let scalar = |ins: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.variable(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let shape = tape.value(out).shape().to_vec();
        let n = tape.value(out).len();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * (i % 7) as f64).collect())?;
        let w = tape.constant(w);
        let prod = tape.mul(out, w)?;
        let loss = tape.sum(prod)?;
        let g = tape.backward(loss)?;
        let grads = vars.iter().zip(ins).map(|(v, t)| g.get_or_zeros(*v, t)).collect();
        Ok((tape.value(loss).data()[0], grads))
    };
    let (_, grads) = scalar(inputs).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let shifted = |d: f64| {
                let mut ins = inputs.to_vec();
                ins[i].data_mut()[j] += d;
                scalar(&ins).unwrap().0
            };
            let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
            let a = grads[i].data()[j];
            worst = worst.max((a - numeric).abs() / (1.0 + a.abs()));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_triple_loop((a, b) in (1usize..=16, 1usize..=16, 1usize..=16)
        .prop_flat_map(|(n, k, m)| (tensor(n, k), tensor(k, m))))
    {
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn binary_primitive_gradients((a, b, c) in (1usize..=4, 1usize..=4, 1usize..=4)
        .prop_flat_map(|(n, k, m)| (tensor(n, k), tensor(n, k), tensor(k, m))))
    {
        prop_assert!(primitive_check(&[a.clone(), c.clone()], |t, v| t.matmul(v[0], v[1])) < 1e-6);
        prop_assert!(primitive_check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1])) < 1e-6);
        prop_assert!(primitive_check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])) < 1e-6);
        prop_assert!(primitive_check(&[a, b], |t, v| t.mse(v[0], v[1])) < 1e-6);
    }

    #[test]
    fn unary_primitive_gradients(a in (1usize..=4, 1usize..=4).prop_flat_map(|(n, k)| tensor(n, k)),
                                 s in -3.0f64..3.0)
    {
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.scale(v[0], s)) < 1e-6);
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.activation(v[0])) < 1e-6);
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.sigmoid(v[0])) < 1e-6);
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.sum(v[0])) < 1e-6);
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.mean(v[0])) < 1e-6);
    }

    #[test]
    fn cross_entropy_gradient(a in (1usize..=5, 2usize..=4).prop_flat_map(|(n, k)| tensor(n, k)), pick in any::<u64>()) {
        let k = a.cols();
        let targets: Vec<usize> = (0..a.rows()).map(|r| ((pick >> (r * 3)) as usize) % k).collect();
        prop_assert!(primitive_check(std::slice::from_ref(&a), |t, v| t.softmax_cross_entropy(v[0], &targets)) < 1e-6);
    }

    #[test]
    fn adam_counts_steps(steps in 1usize..20, g in -1.0f64..1.0) {
        let mut p = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        for k in 1..=steps {
            let grad = Tensor::matrix(1, 2, vec![g, -g]).unwrap();
            opt.step(&mut [&mut p], &[grad]).unwrap();
            prop_assert_eq!(opt.step_count(), k as u64);
        }
        prop_assert!(p.is_finite());
    }
}

#[test]
fn two_layer_net_matches_finite_differences() {
    use trajdiff::numkernel::{ones_column, randn};
    let mut rng = trajdiff::seed::rng(11);
    let x = randn(8, 5, 1.0, &mut rng);
    let y = randn(8, 3, 1.0, &mut rng);
    let params = vec![
        randn(5, 7, 0.5, &mut rng),
        randn(1, 7, 0.5, &mut rng),
        randn(7, 3, 0.5, &mut rng),
        randn(1, 3, 0.5, &mut rng),
    ];
    let loss = |p: &Vec<Tensor>| {
        let mut tape = Tape::new();
        let v: Vec<Var> = p.iter().map(|t| tape.param(t)).collect();
        let xi = tape.constant(x.clone());
        let ones = tape.constant(ones_column(8));
        let l1 = tape.matmul(xi, v[0]).unwrap();
        let b1 = tape.matmul(ones, v[1]).unwrap();
        let h = tape.add(l1, b1).unwrap();
        let h = tape.activation(h).unwrap();
        let l2 = tape.matmul(h, v[2]).unwrap();
        let b2 = tape.matmul(ones, v[3]).unwrap();
        let out = tape.add(l2, b2).unwrap();
        let yt = tape.constant(y.clone());
        let l = tape.mse(out, yt).unwrap();
        let g = tape.backward(l).unwrap();
        let grads = v.iter().zip(p).map(|(var, t)| g.get_or_zeros(*var, t)).collect();
        (tape.value(l).data()[0], grads)
    };
    fn all_mut(p: &mut Vec<Tensor>) -> Vec<&mut Tensor> {
        p.iter_mut().collect()
    }
    let worst = common::fd_check(&params, 200, 5, 1e-5, all_mut, loss);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn non_finite_values_are_errors() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(1e300));
    let err = tape.mul(a, a).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

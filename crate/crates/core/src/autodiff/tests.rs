use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller; avoids pulling rand_distr into the test path
            let u: f64 = rng.gen_range(1e-12..1.0);
            let v: f64 = rng.gen();
            (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
        })
        .collect()
}

/// Builds `sum(op(inputs) * R)` for a random projection `R`, over a flat
/// point holding all inputs back to back, and grad-checks it.
fn check_op<F>(shapes: &[Vec<usize>], point: Vec<f64>, seed: u64, op: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shapes = shapes.to_vec();
    let point = Tensor::from_vec(point);
    let out_numel = {
        let tape = Tape::new();
        let parts = split(&tape, tape.constant(&point), &shapes).unwrap();
        op(&parts).unwrap().numel()
    };
    let proj = randn(&mut rng, out_numel);
    let f = program(move |tape, x| {
        let parts = split(tape, x, &shapes)?;
        let y = op(&parts)?;
        let r = tape.constant_from(&y.shape(), proj.clone())?;
        Ok(y.mul(r)?.sum())
    });
    grad_check(f, &point, 1e-5).unwrap().max_rel_error
}

fn split<'t>(_tape: &'t Tape, x: Var<'t>, shapes: &[Vec<usize>]) -> Result<Vec<Var<'t>>> {
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let part = x.slice(0, offset, offset + n)?.reshape(s);
            offset += n;
            part
        })
        .collect()
}

fn rand_dims(rng: &mut ChaCha8Rng, k: usize, budget: usize) -> Vec<usize> {
    loop {
        let dims: Vec<usize> = (0..k).map(|_| rng.gen_range(1..=4)).collect();
        if dims.iter().product::<usize>() <= budget {
            return dims;
        }
    }
}

fn away_from_zero(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.signum() * (0.1 + x.abs())).collect()
}

#[test]
fn l2_normalize_three_four_five() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::from_vec(vec![3.0, 4.0]));
    let y = x.l2_normalize(NORM_FLOOR);
    assert_eq!(&*y.value(), &vec![0.6, 0.8]);
}

#[test]
fn l2_normalize_zero_vector_uses_floor() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![0.0, 0.0, 0.0]));
    let y = x.l2_normalize(NORM_FLOOR);
    assert!(y.value().iter().all(|v| *v == 0.0));
    let g = tape.backward(y.sum()).unwrap();
    assert!(g.get(&x).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::zeros(&[4]));
    let y = x.softmax(1.0).unwrap();
    assert_eq!(&*y.value(), &vec![0.25; 4]);
}

#[test]
fn stop_gradient_product_rule() {
    // y = x * sg(x)  =>  dy/dx = sg(x) = x
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![1.5, -2.0, 0.25]));
    let y = x.mul(x.stop_gradient()).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.5, -2.0, 0.25]);
}

#[test]
fn stop_gradient_passes_value_and_blocks_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![0.3, 0.7]));
    let s = x.stop_gradient();
    assert_eq!(&*s.value(), &*x.value());
    let g = tape.backward(s.exp().sum()).unwrap();
    assert!(g.get(&x).is_none());
    assert_eq!(g.tensor(&x).data(), &[0.0, 0.0]);
}

#[test]
fn grad_reverse_negates() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![0.5, 2.0]));
    let y = x.grad_reverse().mul(x).unwrap().sum(); // forward x^2
    assert_eq!(y.item(), 4.25);
    // d/dx [r(x) * x] = -x + x = 0
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(&x).unwrap(), &[0.0, 0.0]);
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::from_vec(vec![2.0]));
    let a = x.scale(3.0);
    let b = x.exp();
    let y = a.add(b).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert!((g.get(&x).unwrap()[0] - (3.0 + 2f64.exp())).abs() < 1e-12);
}

#[test]
fn shape_mismatch_names_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[3, 2]));
    let err = a.add(b).err().unwrap().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    assert!(a.matmul(a).is_err());
}

#[test]
fn grad_check_quadratic() {
    let r = grad_check(|_, x| Ok(x.mul(x)?.sum()), &Tensor::from_vec(vec![3.0]), 1e-5).unwrap();
    assert!((r.analytic[0] - 6.0).abs() < 1e-12);
    assert!(r.max_rel_error < 1e-8);
}

#[test]
fn grad_check_constant_function() {
    let r = grad_check(|t, _x| Ok(t.scalar(4.0)), &Tensor::from_vec(vec![1.0, 2.0]), 1e-5).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
}

#[test]
fn grad_check_cross_entropy_of_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits = Tensor::from_vec(randn(&mut rng, 3));
    let f = program(|t, x| {
        let target = t.constant(&Tensor::from_vec(vec![0.2, 0.5, 0.3]));
        Ok(x.log_softmax(1.0)?.mul(target)?.sum().neg())
    });
    assert!(grad_check(f, &logits, 1e-5).unwrap().max_rel_error < 1e-6);
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite() {
    let p = Tensor::from_vec(vec![1.0]);
    assert!(grad_check(|_, x| Ok(x.sum()), &p, 0.0).is_err());
    assert!(grad_check(|_, x| Ok(x.sum()), &p, 0.1).is_err());
    let z = Tensor::from_vec(vec![0.0]);
    assert!(grad_check(|_, x| Ok(x.ln().sum()), &z, 1e-5).is_err());
}

#[test]
fn subset_check_agrees_with_the_full_one() {
    let p = Tensor::from_vec(vec![0.3, -1.2, 2.0, 0.7]);
    let f = program(|_, x| Ok(x.mul(x)?.exp().sum()));
    let full = grad_check(f, &p, 1e-5).unwrap();
    let part = grad_check_at(f, &p, 1e-5, &[3, 1]).unwrap();
    assert_eq!(part.analytic, vec![full.analytic[3], full.analytic[1]]);
    assert_eq!(part.numeric, vec![full.numeric[3], full.numeric[1]]);
    assert!([1, 3].contains(&part.worst_index));
    assert!(grad_check_at(f, &p, 1e-5, &[4]).is_err());
}

#[test]
fn backward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::new(vec![4, 5], randn(&mut rng, 20)).unwrap();
    let run = || {
        let tape = Tape::new();
        let x = tape.leaf(&a);
        let y = x.matmul_nt(x).unwrap().softmax(0.5).unwrap().ln().sum();
        let g = tape.backward(y).unwrap();
        (y.item().to_bits(), g.tensor(&x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn permute_matches_manual_transpose() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    assert_eq!(&*x.transpose().unwrap().value(), &vec![1., 4., 2., 5., 3., 6.]);
    let y = tape.constant(&Tensor::new(vec![2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let p = y.permute(&[2, 0, 1]).unwrap();
    assert_eq!(p.shape(), vec![3, 2, 1]);
    assert_eq!(&*p.value(), &vec![1., 4., 2., 5., 3., 6.]);
}

const TOL: f64 = 1e-5;

#[test]
fn every_op_passes_grad_check_on_random_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..24u64 {
        let d2 = rand_dims(&mut rng, 2, 32);
        let d3 = rand_dims(&mut rng, 3, 32);
        let n2: usize = d2.iter().product();
        let n3: usize = d3.iter().product();
        let seed = case * 31;
        let check = |name: &str, shapes: Vec<Vec<usize>>, point: Vec<f64>, f: &dyn for<'t> Fn(&[Var<'t>]) -> Result<Var<'t>>| {
            let err = check_op(&shapes, point, seed, |p| f(p));
            assert!(err < TOL, "{name} {shapes:?}: rel err {err}");
        };
        let pair = randn(&mut rng, 2 * n2);
        check("add", vec![d2.clone(), d2.clone()], pair.clone(), &|p| p[0].add(p[1]));
        check("sub", vec![d2.clone(), d2.clone()], pair.clone(), &|p| p[0].sub(p[1]));
        check("mul", vec![d2.clone(), d2.clone()], pair, &|p| p[0].mul(p[1]));
        let single = randn(&mut rng, n2);
        check("scale", vec![d2.clone()], single.clone(), &|p| Ok(p[0].scale(-1.7)));
        check("add_scalar", vec![d2.clone()], single.clone(), &|p| Ok(p[0].add_scalar(0.3)));
        check("exp", vec![d2.clone()], single.clone(), &|p| Ok(p[0].exp()));
        let positive: Vec<f64> = single.iter().map(|v| 0.5 + v.abs()).collect();
        check("ln", vec![d2.clone()], positive, &|p| Ok(p[0].ln()));
        check("gelu", vec![d2.clone()], single.clone(), &|p| Ok(p[0].gelu()));
        check("relu", vec![d2.clone()], away_from_zero(single.clone()), &|p| Ok(p[0].relu()));
        check("softplus", vec![d2.clone()], single.clone(), &|p| Ok(p[0].softplus()));
        check("sum", vec![d2.clone()], single.clone(), &|p| Ok(p[0].sum()));
        check("mean", vec![d2.clone()], single.clone(), &|p| Ok(p[0].mean()));
        check("sum_last", vec![d2.clone()], single.clone(), &|p| Ok(p[0].sum_last()));
        check("mean_axis0", vec![d2.clone()], single.clone(), &|p| p[0].mean_axis0());
        check("softmax", vec![d2.clone()], single.clone(), &|p| p[0].softmax(0.7));
        check("log_softmax", vec![d2.clone()], single.clone(), &|p| p[0].log_softmax(0.7));
        check("logsumexp", vec![d2.clone()], single.clone(), &|p| p[0].logsumexp(0.7));
        check("layer_norm", vec![d2.clone()], single.clone(), &|p| Ok(p[0].layer_norm(1e-5)));
        check("l2_normalize", vec![d2.clone()], single.clone(), &|p| Ok(p[0].l2_normalize(NORM_FLOOR)));
        check("transpose", vec![d2.clone()], single.clone(), &|p| p[0].transpose());
        check("reshape", vec![d2.clone()], single.clone(), &|p| p[0].reshape(&[n2]));
        let rows = d2[0];
        check("slice", vec![d2.clone()], single.clone(), &|p| p[0].slice(1, 0, 1));
        check("index_select", vec![d2.clone()], single.clone(), &|p| p[0].index_select(&[rows - 1, 0, rows - 1]));
        let last = d2[1];
        let with_row = randn(&mut rng, n2 + last);
        check("add_row", vec![d2.clone(), vec![last]], with_row.clone(), &|p| p[0].add_row(p[1]));
        check("mul_row", vec![d2.clone(), vec![last]], with_row, &|p| p[0].mul_row(p[1]));
        check("mul_col", vec![d2.clone(), vec![rows]], randn(&mut rng, n2 + rows), &|p| p[0].mul_col(p[1]));
        check("concat", vec![d2.clone(), d2.clone()], randn(&mut rng, 2 * n2), &|p| Var::concat(p, 1));
        let (m, k) = (d2[0], d2[1]);
        let n = rng.gen_range(1..=4);
        check("matmul", vec![vec![m, k], vec![k, n]], randn(&mut rng, m * k + k * n), &|p| p[0].matmul(p[1]));
        check("matmul_nt", vec![vec![m, k], vec![n, k]], randn(&mut rng, m * k + k * n), &|p| p[0].matmul_nt(p[1]));
        let (g, bm, bk) = (d3[0], d3[1], d3[2]);
        check("bmm", vec![vec![g, bm, bk], vec![g, bk, n]], randn(&mut rng, g * bm * bk + g * bk * n), &|p| p[0].bmm(p[1]));
        check("bmm_nt", vec![vec![g, bm, bk], vec![g, n, bk]], randn(&mut rng, g * bm * bk + g * bk * n), &|p| p[0].bmm_nt(p[1]));
        check("permute", vec![d3.clone()], randn(&mut rng, n3), &|p| p[0].permute(&[1, 2, 0]));
    }
}

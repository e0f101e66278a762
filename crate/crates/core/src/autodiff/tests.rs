use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>>;

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// Central differences of `f` at `x`, step `h`.
fn finite_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NumericArray {
    let n = shape.iter().product();
    NumericArray::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Every op kind with random input shapes, wrapped so the output is
/// contracted against fixed random weights into a scalar.
fn op_cases() -> Vec<(&'static str, Vec<Vec<usize>>, (f64, f64), Builder)> {
    vec![
        ("matmul", vec![vec![2, 3], vec![3, 4]], (-1.0, 1.0), Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("matmul_ta", vec![vec![3, 2], vec![3, 4]], (-1.0, 1.0), Box::new(|t, x| t.matmul_t(x[0], x[1], true, false))),
        ("matmul_tb", vec![vec![2, 3], vec![4, 3]], (-1.0, 1.0), Box::new(|t, x| t.matmul_t(x[0], x[1], false, true))),
        ("matmul_tab", vec![vec![3, 2], vec![4, 3]], (-1.0, 1.0), Box::new(|t, x| t.matmul_t(x[0], x[1], true, true))),
        ("matmul_vec", vec![vec![3], vec![3, 2]], (-1.0, 1.0), Box::new(|t, x| t.matmul(x[0], x[1]))),
        ("add", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.add(x[0], x[1]))),
        ("sub", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.sub(x[0], x[1]))),
        ("mul", vec![vec![2, 3], vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.mul(x[0], x[1]))),
        ("affine", vec![vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.affine(x[0], -1.7, 0.3))),
        (
            "mul_const",
            vec![vec![2, 2]],
            (-1.0, 1.0),
            Box::new(|t, x| t.mul_const(x[0], NumericArray::matrix(2, 2, vec![0.0, 1.25, 1.25, 0.0]).unwrap())),
        ),
        ("add_row", vec![vec![3, 2], vec![2]], (-1.0, 1.0), Box::new(|t, x| t.add_row(x[0], x[1]))),
        ("sum_rows", vec![vec![3, 2]], (-1.0, 1.0), Box::new(|t, x| t.sum_rows(x[0]))),
        ("broadcast_rows", vec![vec![1, 3]], (-1.0, 1.0), Box::new(|t, x| t.broadcast_rows(x[0], 4))),
        ("sum_cols", vec![vec![3, 2]], (-1.0, 1.0), Box::new(|t, x| t.sum_cols(x[0]))),
        ("broadcast_cols", vec![vec![3, 1]], (-1.0, 1.0), Box::new(|t, x| t.broadcast_cols(x[0], 2))),
        ("sum", vec![vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.sum(x[0]))),
        ("fill", vec![vec![]], (-1.0, 1.0), Box::new(|t, x| t.fill(x[0], &[2, 2]))),
        ("sigmoid", vec![vec![2, 3]], (-3.0, 3.0), Box::new(|t, x| t.sigmoid(x[0]))),
        ("tanh", vec![vec![2, 3]], (-2.0, 2.0), Box::new(|t, x| t.tanh(x[0]))),
        ("exp", vec![vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.exp(x[0]))),
        ("log", vec![vec![2, 3]], (0.5, 2.0), Box::new(|t, x| t.log(x[0]))),
        ("recip", vec![vec![2, 3]], (0.5, 2.0), Box::new(|t, x| t.recip(x[0]))),
        ("softmax", vec![vec![2, 4]], (-2.0, 2.0), Box::new(|t, x| t.softmax(x[0]))),
        ("softmax_vec", vec![vec![4]], (-2.0, 2.0), Box::new(|t, x| t.softmax(x[0]))),
        ("log_softmax", vec![vec![2, 4]], (-2.0, 2.0), Box::new(|t, x| t.log_softmax(x[0]))),
        ("log_softmax_vec", vec![vec![4]], (-2.0, 2.0), Box::new(|t, x| t.log_softmax(x[0]))),
        ("neg", vec![vec![3]], (-1.0, 1.0), Box::new(|t, x| t.neg(x[0]))),
        ("concat", vec![vec![2, 1], vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.concat(&[x[0], x[1]]))),
        ("slice", vec![vec![2, 5]], (-1.0, 1.0), Box::new(|t, x| t.slice_cols(x[0], 1, 3))),
        ("pad", vec![vec![2, 2]], (-1.0, 1.0), Box::new(|t, x| t.pad_cols(x[0], 1, 4))),
        ("gather", vec![vec![4, 2]], (-1.0, 1.0), Box::new(|t, x| t.gather_rows(x[0], &[3, 0, 3]))),
        ("scatter_add", vec![vec![3, 2]], (-1.0, 1.0), Box::new(|t, x| t.scatter_add_rows(x[0], &[1, 1, 2], 4))),
        ("reshape", vec![vec![2, 3]], (-1.0, 1.0), Box::new(|t, x| t.reshape(x[0], &[3, 2]))),
    ]
}

/// Scalar `Σ w ⊙ op(x)` with a fixed weight array. Non-linear weights via
/// squaring make second derivatives non-trivial for linear ops.
fn contracted(tape: &mut Tape, build: &Builder, inputs: &[Var], weights_seed: u64) -> Result<Var, AutodiffError> {
    let y = build(tape, inputs)?;
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = random_array(&mut rng, &shape, -1.0, 1.0);
    let sq = tape.mul(y, y)?;
    let yy = tape.add(y, sq)?;
    let wy = tape.mul_const(yy, w)?;
    tape.sum(wy)
}

fn flatten_inputs(arrays: &[NumericArray]) -> (Vec<f64>, Vec<Vec<usize>>) {
    let shapes = arrays.iter().map(|a| a.shape().to_vec()).collect();
    (arrays.iter().flat_map(|a| a.data().to_vec()).collect(), shapes)
}

fn unflatten(x: &[f64], shapes: &[Vec<usize>]) -> Vec<NumericArray> {
    let mut off = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let a = NumericArray::new(s.clone(), x[off..off + n].to_vec()).unwrap();
            off += n;
            a
        })
        .collect()
}

fn eval_case(build: &Builder, x: &[f64], shapes: &[Vec<usize>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = unflatten(x, shapes).into_iter().map(|a| tape.leaf(a).unwrap()).collect();
    let loss = contracted(&mut tape, build, &vars, 99).unwrap();
    tape.value(loss).item()
}

fn numeric_grad_case(build: &Builder, x: &[f64], shapes: &[Vec<usize>]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = unflatten(x, shapes).into_iter().map(|a| tape.leaf(a).unwrap()).collect();
    let loss = contracted(&mut tape, build, &vars, 99).unwrap();
    tape.backward(loss, &vars).unwrap().into_iter().flat_map(|g| g.into_data()).collect()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let mut t = Tape::new();
    let x = t.leaf(NumericArray::vector(vec![0.0])).unwrap();
    let y = t.sigmoid(x).unwrap();
    assert_eq!(t.value(y).data(), &[0.5]);
}

#[test]
fn softmax_of_equal_entries_is_uniform() {
    let mut t = Tape::new();
    let x = t.leaf(NumericArray::vector(vec![2.5, 2.5, 2.5])).unwrap();
    let y = t.softmax(x).unwrap();
    for &v in t.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn matmul_matches_dot_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_array(&mut rng, &[2, 3], -1.0, 1.0);
    let b = random_array(&mut rng, &[3, 1], -1.0, 1.0);
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a.clone()).unwrap(), t.leaf(b.clone()).unwrap());
    let c = t.matmul(va, vb).unwrap();
    assert_eq!(t.value(c).shape(), &[2, 1]);
    for r in 0..2 {
        let mut dot = 0.0;
        for k in 0..3 {
            dot += a.data()[r * 3 + k] * b.data()[k];
        }
        assert!((t.value(c).data()[r] - dot).abs() < 1e-15);
    }
}

#[test]
fn grad_of_half_square() {
    let layout = Arc::new(Layout::new([("theta", vec![1])]));
    let theta = ParameterVector::from_vec(layout, vec![3.0]).unwrap();
    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let x = p.vars()[0];
    let sq = t.mul(x, x).unwrap();
    let half = t.scale(sq, 0.5).unwrap();
    let loss = t.sum(half).unwrap();
    let g = grad(&t, loss, &p).unwrap();
    assert_eq!(g.as_slice(), &[3.0]);
}

#[test]
fn grad_of_sum_sigmoid_at_zero() {
    let layout = Arc::new(Layout::new([("theta", vec![1])]));
    let theta = ParameterVector::from_vec(layout, vec![0.0]).unwrap();
    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let s = t.sigmoid(p.vars()[0]).unwrap();
    let loss = t.sum(s).unwrap();
    assert_eq!(grad(&t, loss, &p).unwrap().as_slice(), &[0.25]);
}

#[test]
fn unused_segment_gets_zero_gradient() {
    let layout = Arc::new(Layout::new([("a", vec![2]), ("b", vec![3])]));
    let theta = ParameterVector::from_vec(layout, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let loss = t.sum(p.get("a").unwrap()).unwrap();
    assert_eq!(grad(&t, loss, &p).unwrap().as_slice(), &[1.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (name, shapes, (lo, hi), build) in op_cases() {
        for _ in 0..5 {
            let arrays: Vec<_> = shapes.iter().map(|s| random_array(&mut rng, s, lo, hi)).collect();
            let (x, shapes) = flatten_inputs(&arrays);
            let analytic = numeric_grad_case(&build, &x, &shapes);
            let fd = finite_diff(&|z| eval_case(&build, z, &shapes), &x, 1e-5);
            for (a, f) in analytic.iter().zip(&fd) {
                assert!(close(*a, *f, 1e-4, 1e-7), "{name}: analytic {a} vs fd {f}");
            }
        }
    }
}

#[test]
fn symbolic_and_numeric_backward_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (name, shapes, (lo, hi), build) in op_cases() {
        let arrays: Vec<_> = shapes.iter().map(|s| random_array(&mut rng, s, lo, hi)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.leaf(a.clone()).unwrap()).collect();
        let loss = contracted(&mut tape, &build, &vars, 99).unwrap();
        let numeric = tape.backward(loss, &vars).unwrap();
        let symbolic = tape.grad_graph(loss, &vars).unwrap();
        for (n, s) in numeric.iter().zip(&symbolic) {
            let s = tape.value(*s);
            assert_eq!(n.shape(), s.shape(), "{name}");
            for (a, b) in n.data().iter().zip(s.data()) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{name}: {a} vs {b}");
            }
        }
    }
}

/// Differentiating the recorded backward pass gives Hessian-vector
/// products; checked against finite differences of the numeric gradient.
#[test]
fn every_op_second_derivative_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for (name, shapes, (lo, hi), build) in op_cases() {
        let arrays: Vec<_> = shapes.iter().map(|s| random_array(&mut rng, s, lo, hi)).collect();
        let (x, shapes) = flatten_inputs(&arrays);
        let v: Vec<f64> = (0..x.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut tape = Tape::new();
        let vars: Vec<Var> = unflatten(&x, &shapes).into_iter().map(|a| tape.leaf(a).unwrap()).collect();
        let loss = contracted(&mut tape, &build, &vars, 99).unwrap();
        let g = tape.grad_graph(loss, &vars).unwrap();
        let mut off = 0;
        let mut terms = Vec::new();
        for (gi, s) in g.iter().zip(&shapes) {
            let n: usize = s.iter().product();
            let vi = NumericArray::new(s.clone(), v[off..off + n].to_vec()).unwrap();
            off += n;
            let p = tape.mul_const(*gi, vi).unwrap();
            terms.push(tape.sum(p).unwrap());
        }
        let mut gv = terms[0];
        for t in &terms[1..] {
            gv = tape.add(gv, *t).unwrap();
        }
        let hv: Vec<f64> = tape.backward(gv, &vars).unwrap().into_iter().flat_map(|a| a.into_data()).collect();

        let directional = |z: &[f64]| -> f64 {
            numeric_grad_case(&build, z, &shapes).iter().zip(&v).map(|(a, b)| a * b).sum()
        };
        let fd = finite_diff(&directional, &x, 1e-5);
        for (a, f) in hv.iter().zip(&fd) {
            assert!(close(*a, *f, 1e-4, 1e-7), "{name}: Hv {a} vs fd {f}");
        }
    }
}

/// Composite of most op kinds over a 10-parameter vector.
fn composite(tape: &mut Tape, p: &ParamNodes) -> Result<Var, AutodiffError> {
    let w = p.get("w").unwrap(); // [2,3]
    let b = p.get("b").unwrap(); // [3]
    let e = p.get("e").unwrap(); // [1]
    let x = tape.constant(NumericArray::matrix(2, 2, vec![0.3, -0.2, 0.7, 0.1]).unwrap())?;
    let h = tape.matmul(x, w)?;
    let h = tape.add_row(h, b)?;
    let s = tape.sigmoid(h)?;
    let th = tape.tanh(h)?;
    let m = tape.mul(s, th)?;
    let c = tape.concat(&[m, s])?;
    let sl = tape.slice_cols(c, 2, 3)?;
    let ls = tape.log_softmax(sl)?;
    let sm = tape.softmax(c)?;
    let lg = tape.log(sm)?;
    let a = tape.sum(ls)?;
    let bsum = tape.sum(lg)?;
    let ee = tape.exp(e)?;
    let ee = tape.reshape(ee, &[])?;
    let scaled = tape.mul(a, ee)?;
    let out = tape.sub(scaled, bsum)?;
    tape.scale(out, 0.1)
}

fn composite_layout() -> Arc<Layout> {
    Arc::new(Layout::new([("w", vec![2, 3]), ("b", vec![3]), ("e", vec![1])]))
}

#[test]
fn composite_matches_finite_differences() {
    let layout = composite_layout();
    assert_eq!(layout.len(), 10);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let theta = ParameterVector::from_vec(layout.clone(), x.clone()).unwrap();
        let mut t = Tape::new();
        let p = ParamNodes::bind(&mut t, &theta).unwrap();
        let loss = composite(&mut t, &p).unwrap();
        let g = grad(&t, loss, &p).unwrap();
        let f = |z: &[f64]| {
            let th = ParameterVector::from_vec(layout.clone(), z.to_vec()).unwrap();
            let mut t = Tape::new();
            let p = ParamNodes::bind(&mut t, &th).unwrap();
            let l = composite(&mut t, &p).unwrap();
            t.value(l).item()
        };
        let fd = finite_diff(&f, &x, 1e-5);
        for (a, b) in g.as_slice().iter().zip(&fd) {
            assert!(close(*a, *b, 1e-4, 1e-7), "{a} vs {b}");
        }
    }
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let layout = composite_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let theta = ParameterVector::from_vec(layout, x).unwrap();
    let (a, b) = (0.7, -1.3);

    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let l1 = composite(&mut t, &p).unwrap();
    let sq = t.mul(p.vars()[0], p.vars()[0]).unwrap();
    let l2 = t.sum(sq).unwrap();
    let g1 = grad(&t, l1, &p).unwrap();
    let g2 = grad(&t, l2, &p).unwrap();
    let s1 = t.scale(l1, a).unwrap();
    let s2 = t.scale(l2, b).unwrap();
    let comb = t.add(s1, s2).unwrap();
    let gc = grad(&t, comb, &p).unwrap();
    for i in 0..10 {
        let expect = a * g1.as_slice()[i] + b * g2.as_slice()[i];
        assert!((gc.as_slice()[i] - expect).abs() <= 1e-12, "{i}");
    }
}

#[test]
fn replaying_a_tape_is_bit_identical() {
    let layout = composite_layout();
    let theta = ParameterVector::from_vec(layout, (0..10).map(|i| i as f64 * 0.1 - 0.4).collect()).unwrap();
    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let loss = composite(&mut t, &p).unwrap();
    let g1 = grad(&t, loss, &p).unwrap();
    let g2 = grad(&t, loss, &p).unwrap();
    assert_eq!(g1, g2);
}

fn half_square_scaled(a: f64) -> impl Fn(&mut Tape, &ParamNodes) -> Result<Var, AutodiffError> {
    move |t: &mut Tape, p: &ParamNodes| {
        let x = p.vars()[0];
        let sq = t.mul(x, x)?;
        let s = t.sum(sq)?;
        t.scale(s, 0.5 * a)
    }
}

fn scalar_theta(v: f64) -> ParameterVector {
    ParameterVector::from_vec(Arc::new(Layout::new([("theta", vec![1])])), vec![v]).unwrap()
}

#[test]
fn second_order_quadratic_closed_form() {
    let g = grad_through_update(half_square_scaled(1.0), half_square_scaled(1.0), &scalar_theta(1.0), 0.1, false).unwrap();
    assert!((g.as_slice()[0] - 0.81).abs() <= 1e-10, "{}", g.as_slice()[0]);
}

#[test]
fn first_order_quadratic_drops_jacobian() {
    let g = grad_through_update(half_square_scaled(1.0), half_square_scaled(1.0), &scalar_theta(1.0), 0.1, true).unwrap();
    assert!((g.as_slice()[0] - 0.9).abs() <= 1e-12);
}

#[test]
fn second_order_random_quadratics_match_composed_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let a: f64 = rng.gen_range(0.01..=2.0);
        let b: f64 = rng.gen_range(0.01..=2.0);
        let theta: f64 = rng.gen_range(-2.0..2.0);
        let alpha = 0.1;
        let g = grad_through_update(half_square_scaled(b), half_square_scaled(a), &scalar_theta(theta), alpha, false)
            .unwrap();
        // composed map: θ ↦ ½ b (θ - α a θ)²
        let f = |z: &[f64]| {
            let adapted = z[0] - alpha * a * z[0];
            0.5 * b * adapted * adapted
        };
        let fd = finite_diff(&f, &[theta], 1e-5)[0];
        assert!(close(g.as_slice()[0], fd, 1e-4, 1e-7), "{} vs {fd}", g.as_slice()[0]);
    }
}

/// Quadratic inner `½θᵀAθ` and outer `½(θ-c)ᵀB(θ-c)`: the exact meta
/// gradient is `(I - αA) B (θ' - c)` with `θ' = θ - αAθ`.
#[test]
fn second_order_matches_hessian_closed_form() {
    let n = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let sym = |rng: &mut ChaCha8Rng| {
        let m: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
            }
        }
        s
    };
    let a = sym(&mut rng);
    let b = sym(&mut rng);
    let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let alpha = 0.3;
    let quad = |m: Vec<f64>, shift: Vec<f64>| {
        move |t: &mut Tape, p: &ParamNodes| -> Result<Var, AutodiffError> {
            let th = p.vars()[0];
            let sh = t.constant(NumericArray::matrix(n, 1, shift.clone()).unwrap())?;
            let d = t.sub(th, sh)?;
            let mm = t.constant(NumericArray::matrix(n, n, m.clone()).unwrap())?;
            let md = t.matmul(mm, d)?;
            let q = t.matmul_t(d, md, true, false)?;
            let q = t.sum(q)?;
            t.scale(q, 0.5)
        }
    };
    let layout = Arc::new(Layout::new([("theta", vec![n, 1])]));
    let theta = ParameterVector::from_vec(layout, x.clone()).unwrap();
    let g = grad_through_update(quad(b.clone(), c.clone()), quad(a.clone(), vec![0.0; n]), &theta, alpha, false).unwrap();

    let matvec = |m: &[f64], v: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| m[i * n + j] * v[j]).sum()).collect() };
    let ax = matvec(&a, &x);
    let adapted: Vec<f64> = (0..n).map(|i| x[i] - alpha * ax[i]).collect();
    let outer_grad = matvec(&b, &adapted.iter().zip(&c).map(|(p, q)| p - q).collect::<Vec<_>>());
    let a_og = matvec(&a, &outer_grad);
    for i in 0..n {
        let expect = outer_grad[i] - alpha * a_og[i];
        assert!((g.as_slice()[i] - expect).abs() <= 1e-10, "{i}: {} vs {expect}", g.as_slice()[i]);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let theta = ParameterVector::from_vec(Arc::new(Layout::new([("t", vec![2])])), vec![1.0, 2.0]).unwrap();
    let mut t = Tape::new();
    let p = ParamNodes::bind(&mut t, &theta).unwrap();
    let y = t.sigmoid(p.vars()[0]).unwrap();
    assert!(matches!(grad(&t, y, &p), Err(AutodiffError::NonScalarLoss(_))));
    let err = grad_through_update(
        |t: &mut Tape, p: &ParamNodes| t.sigmoid(p.vars()[0]),
        |t: &mut Tape, p: &ParamNodes| t.sum(p.vars()[0]),
        &theta,
        0.1,
        false,
    );
    assert!(matches!(err, Err(AutodiffError::NonScalarLoss(_))));
}

#[test]
fn parameters_from_another_tape_are_rejected() {
    let theta = scalar_theta(1.0);
    let mut t1 = Tape::new();
    let p1 = ParamNodes::bind(&mut t1, &theta).unwrap();
    let mut t2 = Tape::new();
    let p2 = ParamNodes::bind(&mut t2, &theta).unwrap();
    let loss = t2.sum(p2.vars()[0]).unwrap();
    assert_eq!(grad(&t2, loss, &p1), Err(AutodiffError::ForeignNode));
    assert!(matches!(t1.sigmoid(p2.vars()[0]), Err(AutodiffError::ForeignNode)));
}

#[test]
fn shape_and_kind_errors() {
    let mut t = Tape::new();
    let a = t.leaf(NumericArray::zeros(&[2, 3])).unwrap();
    let b = t.leaf(NumericArray::zeros(&[2, 3])).unwrap();
    assert!(matches!(t.matmul(a, b), Err(AutodiffError::ShapeMismatch(_))));
    assert!(matches!(t.apply(Op::Leaf, &[]), Err(AutodiffError::UnsupportedOp(_))));
    assert!(matches!(t.apply(Op::Add, &[a]), Err(AutodiffError::ShapeMismatch(_))));
}

#[test]
fn non_finite_values_surface_as_errors() {
    let mut t = Tape::new();
    let a = t.leaf(NumericArray::vector(vec![0.0])).unwrap();
    assert_eq!(t.log(a), Err(AutodiffError::NonFinite("log")));
    assert!(t.leaf(NumericArray::vector(vec![f64::NAN])).is_err());
    let bad = grad_through_update(half_square_scaled(1.0), half_square_scaled(1.0), &scalar_theta(1.0), 0.0, false);
    assert!(matches!(bad, Err(AutodiffError::InvalidStepSize(_))));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut t = Tape::new();
            let x = t.leaf(NumericArray::vector(v)).unwrap();
            let y = t.softmax(x).unwrap();
            prop_assert!((t.value(y).sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn second_order_quadratic_any_theta(theta in -5.0f64..5.0, alpha in 0.001f64..1.0) {
            let g = grad_through_update(half_square_scaled(1.0), half_square_scaled(1.0), &scalar_theta(theta), alpha, false).unwrap();
            let expect = (1.0 - alpha) * (1.0 - alpha) * theta;
            prop_assert!((g.as_slice()[0] - expect).abs() <= 1e-10);
        }
    }
}

use super::*;
use crate::gradcheck;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Contracts an arbitrary-shaped output into a scalar with fixed random weights.
fn probe(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::randn(&shape, 1.0, &mut rng(seed ^ 0xabcd));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn assert_fd(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let res = gradcheck::check(inputs, H, f).unwrap();
    assert!(
        res.max_rel_error() < TOL,
        "fd mismatch: {:?}",
        res.rel_errors
    );
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_uniform() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[5]));
    let s = tape.softmax(z);
    for v in tape.value(s).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn conv2d_ones_stride_two() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 4, 4]));
    let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
    let y = tape.conv2d(x, w, None, 2, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn shape_mismatch_names_the_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::Shape {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    let c = tape.constant(Tensor::zeros(&[3]));
    assert!(matches!(
        tape.add(a, c),
        Err(TensorError::Shape { op: "add", .. })
    ));
}

#[test]
fn grad_of_sum_is_ones() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::randn(&[3, 4], 1.0, &mut rng(1)));
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p), Tensor::ones(&[3, 4]));
}

#[test]
fn grad_of_half_square() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::from_vec(vec![1.0, -2.0, 3.0]));
    let sq = tape.mul(p, p).unwrap();
    let s = tape.sum(sq);
    let l = tape.scale(s, 0.5);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(p).data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn unused_param_gets_zero_grad() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::ones(&[2]));
    let q = tape.param(Tensor::ones(&[3]));
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.get(q), Tensor::zeros(&[3]));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::ones(&[2]));
    assert_eq!(
        tape.backward(p).unwrap_err(),
        TensorError::NonScalarLoss(vec![2])
    );
}

#[test]
fn fd_elementwise() {
    for seed in 0..4 {
        let mut r = rng(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[3, 4], 1.0, &mut r);
        assert_fd(&[a.clone(), b.clone()], |tp, v| {
            let s = tp.add(v[0], v[1])?;
            let d = tp.sub(s, v[1])?;
            let m = tp.mul(d, v[1])?;
            let m = tp.scale(m, 0.7);
            probe(tp, m, seed)
        });
        assert_fd(std::slice::from_ref(&a), |tp, v| {
            let g = tp.gelu(v[0]);
            probe(tp, g, seed)
        });
        assert_fd(std::slice::from_ref(&a), |tp, v| {
            let g = tp.abs(v[0]);
            probe(tp, g, seed)
        });
        let bias = Tensor::randn(&[4], 1.0, &mut r);
        assert_fd(&[a.clone(), bias], |tp, v| {
            let y = tp.add_row(v[0], v[1])?;
            probe(tp, y, seed)
        });
    }
}

#[test]
fn fd_matmul_both_layouts() {
    for seed in 0..4 {
        let mut r = rng(10 + seed);
        let a = Tensor::randn(&[3, 5], 1.0, &mut r);
        let b = Tensor::randn(&[5, 2], 1.0, &mut r);
        let bt = Tensor::randn(&[4, 5], 1.0, &mut r);
        assert_fd(&[a.clone(), b], |tp, v| {
            let c = tp.matmul(v[0], v[1])?;
            probe(tp, c, seed)
        });
        assert_fd(&[a, bt], |tp, v| {
            let c = tp.matmul_nt(v[0], v[1])?;
            probe(tp, c, seed)
        });
    }
}

#[test]
fn fd_conv_and_transpose() {
    for seed in 0..4 {
        let mut r = rng(20 + seed);
        let x = Tensor::randn(&[2, 2, 5, 6], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let b = Tensor::randn(&[3], 0.5, &mut r);
        assert_fd(&[x.clone(), w, b], |tp, v| {
            let y = tp.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            probe(tp, y, seed)
        });
        let xi = Tensor::randn(&[2, 3, 3, 3], 1.0, &mut r);
        let wt = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let bt = Tensor::randn(&[2], 0.5, &mut r);
        assert_fd(&[xi, wt, bt], |tp, v| {
            let y = tp.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 5, 6)?;
            probe(tp, y, seed)
        });
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for matching geometry.
    let mut r = rng(5);
    let x = Tensor::randn(&[1, 2, 7, 6], 1.0, &mut r);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let cx = tape.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = Tensor::randn(tape.shape(cx), 1.0, &mut r);
    let yv = tape.constant(y.clone());
    let ty = tape.conv_transpose2d(yv, wv, None, 2, 1, 7, 6).unwrap();
    let lhs: f64 = tape
        .value(cx)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| a * b)
        .sum();
    let rhs: f64 = tape
        .value(ty)
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
}

#[test]
fn conv_transpose_rejects_bad_output_size() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
    assert!(tape.conv_transpose2d(x, w, None, 2, 1, 9, 9).is_err());
}

#[test]
fn fd_norms() {
    for seed in 0..4 {
        let mut r = rng(30 + seed);
        let x = Tensor::randn(&[6, 5], 2.0, &mut r);
        let g = Tensor::randn(&[5], 1.0, &mut r);
        let b = Tensor::randn(&[5], 1.0, &mut r);
        assert_fd(&[x.clone(), g.clone(), b.clone()], |tp, v| {
            let y = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(tp, y, seed)
        });
        assert_fd(&[x.clone(), g.clone(), b.clone()], |tp, v| {
            let y = tp.batch_norm(v[0], v[1], v[2], None, 1e-5)?;
            probe(tp, y, seed)
        });
        let mean = vec![0.3; 5];
        let var = vec![1.7; 5];
        assert_fd(&[x, g, b], |tp, v| {
            let y = tp.batch_norm(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)?;
            probe(tp, y, seed)
        });
    }
}

#[test]
fn fd_softmax_family_and_reductions() {
    for seed in 0..4 {
        let mut r = rng(40 + seed);
        let x = Tensor::randn(&[4, 6], 2.0, &mut r);
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let y = tp.softmax(v[0]);
            probe(tp, y, seed)
        });
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let y = tp.log_softmax(v[0]);
            probe(tp, y, seed)
        });
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let m = tp.mean(v[0]);
            let s = tp.sum(v[0]);
            let p = tp.mul(m, s)?;
            Ok(p)
        });
    }
}

#[test]
fn fd_shape_ops() {
    for seed in 0..4 {
        let mut r = rng(50 + seed);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[4, 3], 1.0, &mut r);
        assert_fd(&[a.clone(), b.clone()], |tp, v| {
            let c = tp.concat(&[v[0], v[1]])?;
            let rows = tp.select_rows(c, &[5, 0, 0, 3])?;
            let flat = tp.reshape(rows, &[12])?;
            let g = tp.gather(flat, vec![11, 2, 2, 7], vec![2, 2])?;
            probe(tp, g, seed)
        });
    }
}

#[test]
fn fd_attention() {
    for (seed, causal) in [(0, false), (1, true), (2, false), (3, true)] {
        let mut r = rng(60 + seed);
        let qkv = Tensor::randn(&[2 * 5, 3 * 4], 1.0, &mut r);
        assert_fd(&[qkv], |tp, v| {
            let y = tp.attention(v[0], 2, 5, 2, causal)?;
            probe(tp, y, seed)
        });
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(7);
    let mut tape = Tape::new();
    let qkv = tape.constant(Tensor::randn(&[3 * 6, 3 * 8], 3.0, &mut r));
    for causal in [false, true] {
        let y = tape.attention(qkv, 3, 6, 2, causal).unwrap();
        let probs = tape.attention_probs(y).unwrap();
        for row in probs.chunks(6) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn backward_is_deterministic() {
    let build = || {
        let mut r = rng(99);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[4, 6], 1.0, &mut r));
        let w = tape.param(Tensor::randn(&[6, 6], 1.0, &mut r));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.gelu(h);
        let s = tape.softmax(h);
        let l = tape.sum(s);
        let l2 = tape.mul(l, l).unwrap();
        let g = tape.backward(l2).unwrap();
        (g.get(x), g.get(w))
    };
    let (a1, b1) = build();
    let (a2, b2) = build();
    assert_eq!(a1.data(), a2.data());
    assert_eq!(b1.data(), b2.data());
}

proptest! {
    #[test]
    fn softmax_rows_normalized(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1000, spread in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[rows, cols], spread, &mut rng(seed)));
        let s = tape.softmax(x);
        for row in tape.value(s).data().chunks(cols) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

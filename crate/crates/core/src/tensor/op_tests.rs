use super::gradcheck;
use super::{Tape, Tensor};
use crate::error::Error;

fn mat(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn scalar_loop_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at2(i, p) * b.at2(p, j);
            }
            out.data_mut()[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_zero() {
    let mut tape = Tape::new();
    let m = mat(&[&[1.5, -2.0], &[0.25, 4.0]]);
    let i = tape.constant(Tensor::eye(2));
    let mv = tape.constant(m.clone());
    let out = tape.matmul(i, mv).unwrap();
    assert_eq!(tape.value(out), &m);

    let z = tape.constant(Tensor::zeros(&[3, 2]));
    let out = tape.matmul(z, mv).unwrap();
    assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_small_case_matches_loop_oracle() {
    let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = mat(&[&[0.0], &[1.0]]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(av, bv).unwrap();
    assert_eq!(tape.value(out), &mat(&[&[2.0], &[4.0]]));
    assert_eq!(tape.value(out), &scalar_loop_matmul(&a, &b));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

fn ln(tape: &mut Tape, row: &[f64], eps: f64) -> Vec<f64> {
    let d = row.len();
    let x = tape.constant(Tensor::new(vec![1, d], row.to_vec()).unwrap());
    let g = tape.constant(Tensor::ones(&[d]));
    let b = tape.constant(Tensor::zeros(&[d]));
    let y = tape.layer_norm(x, g, b, eps).unwrap();
    tape.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    assert!(ln(&mut tape, &[3.0; 5], 1e-5).iter().all(|&v| v == 0.0));

    let y = ln(&mut tape, &[1.0, 3.0], 1e-12);
    assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);

    let row = [0.3, -1.2, 2.5, 0.7, -0.4, 1.1];
    let eps = 1e-5;
    let y = ln(&mut tape, &row, eps);
    let mean_x = row.iter().sum::<f64>() / 6.0;
    let var_x = row.iter().map(|v| (v - mean_x).powi(2)).sum::<f64>() / 6.0;
    let mean_y = y.iter().sum::<f64>() / 6.0;
    let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / 6.0;
    assert!(mean_y.abs() < 1e-12);
    assert!((var_y - 1.0 / (1.0 + eps / var_x)).abs() < 1e-6);
}

#[test]
fn layer_norm_rejects_empty_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 0]));
    let g = tape.constant(Tensor::zeros(&[0]));
    let b = tape.constant(Tensor::zeros(&[0]));
    assert!(matches!(tape.layer_norm(x, g, b, 1e-5), Err(Error::EmptyAxis { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 5], 0.3));
    let y = tape.softmax(x).unwrap();
    assert!(tape.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));

    let x = tape.constant(mat(&[&[1000.0, 0.0]]));
    let y = tape.softmax(x).unwrap();
    let p = tape.value(y).data();
    assert!(p.iter().all(|v| v.is_finite()));
    assert_eq!(p[0], 1.0);
    assert!(p[1] < 1e-300);

    let x = tape.constant(mat(&[&[0.0, 3f64.ln()]]));
    let y = tape.softmax(x).unwrap();
    let p = tape.value(y).data();
    assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
}

#[test]
fn cosine_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::vector(vec![0.3, -2.0, 1.7]));
    let neg = tape.constant(Tensor::vector(vec![-0.3, 2.0, -1.7]));
    let c = tape.cosine_similarity(u, u).unwrap();
    assert!((tape.value(c).item().unwrap() - 1.0).abs() < 1e-15);
    let c = tape.cosine_similarity(u, neg).unwrap();
    assert!((tape.value(c).item().unwrap() + 1.0).abs() < 1e-15);

    let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let b = tape.constant(Tensor::vector(vec![1.0, 1.0]));
    let c = tape.cosine_similarity(a, b).unwrap();
    // 1/sqrt(2) to 25 digits: 0.7071067811865475244008444
    assert!((tape.value(c).item().unwrap() - 0.707_106_781_186_547_5).abs() < 1e-15);

    let z = tape.constant(Tensor::zeros(&[2]));
    assert!(matches!(tape.cosine_similarity(a, z), Err(Error::DegenerateVector { .. })));
}

fn ce(sims: &[f64], label: usize, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(sims.to_vec()));
    let l = tape.cross_entropy(s, &[label], tau).unwrap();
    tape.value(l).item().unwrap()
}

#[test]
fn cross_entropy_examples() {
    assert!((ce(&[0.4; 5], 2, 0.01) - 5f64.ln()).abs() < 1e-12);
    assert!(ce(&[1.0, 0.0, 0.0], 0, 1e-4) < 1e-300);
    // log(1 + 4·exp(-80)) evaluated at 50 digits.
    let want = 7.219_405_551_381_655_849e-35;
    let got = ce(&[0.9, 0.1, 0.1, 0.1, 0.1], 0, 0.01);
    assert!(((got - want) / want).abs() < 1e-12, "{got:e}");
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::vector(vec![0.1, 0.2]));
    assert!(matches!(tape.cross_entropy(s, &[2], 0.01), Err(Error::Index { .. })));
}

#[test]
fn backward_sum_gives_ones() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::full(&[2, 3, 4], 0.7));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g.shape(), &[2, 3, 4]);
    assert!(g.data().iter().all(|&v| v == 1.0));
}

#[test]
fn backward_square_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 6.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item().unwrap(), 12.0);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Rank { .. })));
}

#[test]
fn constants_never_receive_gradients() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(p).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn cosine_gradient_matches_finite_differences() {
    let v_const = Tensor::vector(vec![0.4, -1.3, 0.8, 2.0]);
    let u = Tensor::vector(vec![1.1, 0.2, -0.7, 0.5]);
    let check = gradcheck::check(&[u], 1e-5, |t, xs| {
        let v = t.constant(v_const.clone());
        t.cosine_similarity(xs[0], v)
    })
    .unwrap();
    assert!(check.max_rel_error < 1e-6, "{}", check.max_rel_error);
}

#[test]
fn trivial_elementwise_identities() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let g = tape.gelu(z).unwrap();
    assert_eq!(tape.value(g).item().unwrap(), 0.0);

    let x = Tensor::vector(vec![1.5, -2.25, 1e-3]);
    let xv = tape.constant(x.clone());
    let zeros = tape.constant(Tensor::zeros(&[3]));
    let s = tape.add(xv, zeros).unwrap();
    assert_eq!(tape.value(s), &x);
    let s = tape.scale(xv, 1.0).unwrap();
    assert_eq!(tape.value(s), &x);
}

#[test]
fn gather_rows_checks_range() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.gather_rows(x, &[0, 3]), Err(Error::Index { .. })));
}

#[test]
fn gather_rows_backward_scatter_adds_repeats() {
    let mut tape = Tape::new();
    let x = tape.param(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let g = tape.gather_rows(x, &[1, 1, 0]).unwrap();
    let s = tape.sum(g).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
}

/// Per-head loop reference for multi-head attention.
fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, batch: usize, seq: usize, heads: usize) -> Vec<f64> {
    let d = q.shape()[1];
    let dh = d / heads;
    let mut out = vec![0.0; batch * seq * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..seq {
                let mut scores = vec![0.0; seq];
                for (j, s) in scores.iter_mut().enumerate() {
                    for t in 0..dh {
                        *s += q.at2(b * seq + i, h * dh + t) * k.at2(b * seq + j, h * dh + t);
                    }
                    *s /= (dh as f64).sqrt();
                }
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..seq {
                    let p = (scores[j] - m).exp() / z;
                    for t in 0..dh {
                        out[(b * seq + i) * d + h * dh + t] += p * v.at2(b * seq + j, h * dh + t);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn attention_matches_per_head_loops() {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let (batch, seq, heads, d) = (2, 3, 2, 4);
    let q = Tensor::randn(&[batch * seq, d], 1.0, &mut rng);
    let k = Tensor::randn(&[batch * seq, d], 1.0, &mut rng);
    let v = Tensor::randn(&[batch * seq, d], 1.0, &mut rng);
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(qv, kv, vv, batch, seq, heads).unwrap();
    let want = naive_attention(&q, &k, &v, batch, seq, heads);
    for (a, b) in tape.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

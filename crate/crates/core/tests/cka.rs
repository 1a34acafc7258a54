use atha_core::analysis::cka;
use atha_core::{Error, Tensor};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn exact(t: &Tensor) -> Vec<Vec<BigRational>> {
    (0..t.rows())
        .map(|i| t.row(i).iter().map(|&x| BigRational::from_float(x).unwrap()).collect())
        .collect()
}

fn centered_gram(x: &[Vec<BigRational>]) -> Vec<Vec<BigRational>> {
    let n = x.len();
    let k: Vec<Vec<BigRational>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| x[i].iter().zip(&x[j]).fold(BigRational::zero(), |acc, (a, b)| acc + a * b))
                .collect()
        })
        .collect();
    let nn = BigRational::from_integer(BigInt::from(n));
    // H K H with H = I − 11ᵀ/n, written out entrywise.
    let row: Vec<BigRational> = k.iter().map(|r| r.iter().fold(BigRational::zero(), |a, b| a + b) / &nn).collect();
    let col: Vec<BigRational> =
        (0..n).map(|j| k.iter().fold(BigRational::zero(), |a, r| a + &r[j]) / &nn).collect();
    let all = row.iter().fold(BigRational::zero(), |a, b| a + b) / &nn;
    (0..n).map(|i| (0..n).map(|j| &k[i][j] - &row[i] - &col[j] + &all).collect()).collect()
}

fn trace_product(a: &[Vec<BigRational>], b: &[Vec<BigRational>]) -> BigRational {
    let n = a.len();
    let mut acc = BigRational::zero();
    for i in 0..n {
        for k in 0..n {
            acc += &a[i][k] * &b[k][i];
        }
    }
    acc
}

/// CKA from exact rational traces; only the final square root is inexact.
fn oracle(x: &Tensor, y: &Tensor) -> f64 {
    let kc = centered_gram(&exact(x));
    let lc = centered_gram(&exact(y));
    let num = trace_product(&kc, &lc);
    let squared = &num * &num / (trace_product(&kc, &kc) * trace_product(&lc, &lc));
    let mag = squared.to_f64().unwrap().sqrt();
    if num < BigRational::zero() {
        -mag
    } else {
        mag
    }
}

fn orthogonal(d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..2 {
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.iter().map(|a| a / n).collect());
        }
    }
    Tensor::from_rows(&q).unwrap()
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.last_dim(), b.last_dim());
    let data = (0..m)
        .flat_map(|i| (0..n).map(move |j| (0..k).map(|p| a.at2(i, p) * b.at2(p, j)).sum::<f64>()))
        .collect();
    Tensor::new(vec![m, n], data).unwrap()
}

#[test]
fn agrees_with_exact_rational_oracle_on_100_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc4a);
    for i in 0..100 {
        let n = rng.random_range(3..=12);
        let x = Tensor::randn(&[n, rng.random_range(1..=6)], 1.0, &mut rng);
        let y = Tensor::randn(&[n, rng.random_range(1..=6)], 1.0, &mut rng);
        let (got, want) = (cka(&x, &y).unwrap(), oracle(&x, &y));
        assert!((got - want).abs() < 1e-9, "pair {i}: {got} vs {want}");
    }
}

#[test]
fn small_fixed_pair_matches_oracle() {
    let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
    let y = Tensor::from_rows(&[vec![0.5], vec![-1.0], vec![2.0], vec![0.0]]).unwrap();
    assert!((cka(&x, &y).unwrap() - oracle(&x, &y)).abs() < 1e-12);
}

#[test]
fn errors() {
    let x = Tensor::zeros(&[4, 3]);
    let y = Tensor::randn(&[4, 2], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    assert!(matches!(cka(&x, &y), Err(Error::DegenerateInput { .. })));
    assert!(matches!(cka(&y, &Tensor::zeros(&[5, 2])), Err(Error::Shape { .. })));
    assert!(matches!(cka(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1, 2])), Err(Error::EmptyAxis { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn self_similarity_is_one(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[rng.random_range(3..=30), rng.random_range(1..=16)], 1.0, &mut rng);
        prop_assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn invariant_to_isotropic_scaling(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=30);
        let x = Tensor::randn(&[n, rng.random_range(1..=16)], 1.0, &mut rng);
        let y = Tensor::randn(&[n, rng.random_range(1..=16)], 1.0, &mut rng);
        let base = cka(&x, &y).unwrap();
        prop_assert!((cka(&x.map(|v| v * c), &y).unwrap() - base).abs() < 1e-9);
        prop_assert!((cka(&x, &y.map(|v| v * c)).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn invariant_to_orthogonal_transforms(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d) = (rng.random_range(3..=30), rng.random_range(1..=16));
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let y = Tensor::randn(&[n, rng.random_range(1..=16)], 1.0, &mut rng);
        let q = orthogonal(d, &mut rng);
        prop_assert!((cka(&matmul(&x, &q), &y).unwrap() - cka(&x, &y).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn lies_in_unit_interval_and_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(3..=20);
        let x = Tensor::randn(&[n, rng.random_range(1..=8)], 1.0, &mut rng);
        let y = Tensor::randn(&[n, rng.random_range(1..=8)], 1.0, &mut rng);
        let v = cka(&x, &y).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&v));
        prop_assert!((v - cka(&y, &x).unwrap()).abs() < 1e-12);
    }
}

//! Central finite-difference checks for tape gradients.
//!
//! The numeric side only ever evaluates the forward pass on constant leaves,
//! so it shares no code with the backward rules it is checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Gradient magnitudes below this are treated as zero when forming the
/// relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Largest per-input `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
    pub max_rel_error: f64,
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = super::norm(a);
    let nb = super::norm(b);
    diff / na.max(nb).max(ABS_FLOOR)
}

/// Compares `d f / d inputs` from the tape against central differences with
/// step `h`. `f` must build a scalar from the given leaves.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        numeric.push(g);
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n.data()))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

type Builder = fn(&mut Tape, &[Var], &Case) -> Result<Var>;

/// Random shapes and auxiliary arguments for one op instance.
#[derive(Debug, Clone)]
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub idx: Vec<usize>,
    pub pairs: Vec<(usize, usize)>,
    pub dims: [usize; 3],
    pub c: f64,
    /// Constant weights that reduce a non-scalar output to a scalar.
    pub weights: Tensor,
}

/// Every differentiable tape op, with a generator of random instances.
pub struct OpCase {
    pub name: &'static str,
    generate: fn(&mut ChaCha8Rng) -> Case,
    build: Builder,
}

impl OpCase {
    pub fn instance(&self, seed: u64) -> Case {
        (self.generate)(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn check(&self, case: &Case, h: f64) -> Result<GradCheck> {
        check(&case.inputs, h, |tape, vars| {
            let out = (self.build)(tape, vars, case)?;
            reduce(tape, out, &case.weights)
        })
    }
}

fn reduce(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let w = tape.constant(weights.reshape(tape.shape(out))?);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn case(rng: &mut ChaCha8Rng, inputs: Vec<Tensor>, out_len: usize) -> Case {
    let weights = randn(rng, &[out_len]);
    Case {
        inputs,
        idx: Vec::new(),
        pairs: Vec::new(),
        dims: [0; 3],
        c: 0.0,
        weights,
    }
}

fn binary_same(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
    let inputs = vec![randn(rng, &[m, n]), randn(rng, &[m, n])];
    case(rng, inputs, m * n)
}

fn unary(rng: &mut ChaCha8Rng) -> Case {
    let (m, n) = (dim(rng, 1, 5), dim(rng, 2, 6));
    let inputs = vec![randn(rng, &[m, n])];
    case(rng, inputs, m * n)
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            generate: |rng| {
                let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
                let inputs = vec![randn(rng, &[m, k]), randn(rng, &[k, n])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.matmul(v[0], v[1]),
        },
        OpCase {
            name: "matmul_nt",
            generate: |rng| {
                let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
                let inputs = vec![randn(rng, &[m, k]), randn(rng, &[n, k])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.matmul_nt(v[0], v[1]),
        },
        OpCase {
            name: "transpose",
            generate: unary,
            build: |t, v, _| t.transpose(v[0]),
        },
        OpCase {
            name: "reshape",
            generate: unary,
            build: |t, v, _| {
                let s = t.shape(v[0]).to_vec();
                t.reshape(v[0], &[s[1], s[0]])
            },
        },
        OpCase {
            name: "add",
            generate: binary_same,
            build: |t, v, _| t.add(v[0], v[1]),
        },
        OpCase {
            name: "sub",
            generate: binary_same,
            build: |t, v, _| t.sub(v[0], v[1]),
        },
        OpCase {
            name: "mul",
            generate: binary_same,
            build: |t, v, _| t.mul(v[0], v[1]),
        },
        OpCase {
            name: "add_row",
            generate: |rng| {
                let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
                let inputs = vec![randn(rng, &[m, n]), randn(rng, &[n])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.add_row(v[0], v[1]),
        },
        OpCase {
            name: "add_tiled",
            generate: |rng| {
                let (b, s, n) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
                let inputs = vec![randn(rng, &[b * s, n]), randn(rng, &[s, n])];
                case(rng, inputs, b * s * n)
            },
            build: |t, v, _| t.add_tiled(v[0], v[1]),
        },
        OpCase {
            name: "scale",
            generate: |rng| {
                let mut c = unary(rng);
                c.c = rng.random_range(-3.0..3.0);
                c
            },
            build: |t, v, c| t.scale(v[0], c.c),
        },
        OpCase {
            name: "scale_by",
            generate: |rng| {
                let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
                let inputs = vec![randn(rng, &[m, n]), randn(rng, &[])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.scale_by(v[0], v[1]),
        },
        OpCase {
            name: "gelu",
            generate: unary,
            build: |t, v, _| t.gelu(v[0]),
        },
        OpCase {
            name: "layer_norm",
            generate: |rng| {
                let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 6));
                let inputs = vec![randn(rng, &[m, n]), randn(rng, &[n]), randn(rng, &[n])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        OpCase {
            name: "softmax",
            generate: unary,
            build: |t, v, _| t.softmax(v[0]),
        },
        OpCase {
            name: "gather_rows",
            generate: |rng| {
                let (m, n, k) = (dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 6));
                let inputs = vec![randn(rng, &[m, n])];
                let mut c = case(rng, inputs, k * n);
                c.idx = (0..k).map(|_| rng.random_range(0..m)).collect();
                c
            },
            build: |t, v, c| t.gather_rows(v[0], &c.idx),
        },
        OpCase {
            name: "index_add_rows",
            generate: |rng| {
                let (m, n, k) = (dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 6));
                let inputs = vec![randn(rng, &[m, n]), randn(rng, &[k, n])];
                let mut c = case(rng, inputs, m * n);
                c.idx = (0..k).map(|_| rng.random_range(0..m)).collect();
                c
            },
            build: |t, v, c| t.index_add_rows(v[0], &c.idx, v[1]),
        },
        OpCase {
            name: "gather_elements",
            generate: |rng| {
                let (m, n, k) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 6));
                let inputs = vec![randn(rng, &[m, n])];
                let mut c = case(rng, inputs, k);
                c.pairs = (0..k).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
                c
            },
            build: |t, v, c| t.gather_elements(v[0], &c.pairs),
        },
        OpCase {
            name: "pick",
            generate: |rng| {
                let mut c = unary(rng);
                c.idx = vec![rng.random_range(0..c.inputs[0].len())];
                c
            },
            build: |t, v, c| t.pick(v[0], c.idx[0]),
        },
        OpCase {
            name: "concat_rows",
            generate: |rng| {
                let n = dim(rng, 1, 4);
                let (a, b, c) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
                let inputs = vec![randn(rng, &[a, n]), randn(rng, &[b, n]), randn(rng, &[c, n])];
                case(rng, inputs, (a + b + c) * n)
            },
            build: |t, v, _| t.concat_rows(v),
        },
        OpCase {
            name: "sum",
            generate: unary,
            build: |t, v, _| t.sum(v[0]),
        },
        OpCase {
            name: "reduce_mean",
            generate: unary,
            build: |t, v, _| t.reduce_mean(v[0]),
        },
        OpCase {
            name: "cosine_matrix",
            generate: |rng| {
                let (m, n, d) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 2, 6));
                let inputs = vec![randn(rng, &[m, d]), randn(rng, &[n, d])];
                case(rng, inputs, m * n)
            },
            build: |t, v, _| t.cosine_matrix(v[0], v[1]),
        },
        OpCase {
            name: "cosine_similarity",
            generate: |rng| {
                let d = dim(rng, 2, 8);
                let inputs = vec![randn(rng, &[d]), randn(rng, &[d])];
                case(rng, inputs, 1)
            },
            build: |t, v, _| t.cosine_similarity(v[0], v[1]),
        },
        OpCase {
            name: "cross_entropy",
            generate: |rng| {
                let (m, n) = (dim(rng, 1, 5), dim(rng, 2, 6));
                let inputs = vec![Tensor::randn(&[m, n], 0.02, rng)];
                let mut c = case(rng, inputs, 1);
                c.idx = (0..m).map(|_| rng.random_range(0..n)).collect();
                c.c = 0.01;
                c
            },
            build: |t, v, c| t.cross_entropy(v[0], &c.idx, c.c),
        },
        OpCase {
            name: "attention",
            generate: |rng| {
                let (batch, seq, heads) = (dim(rng, 1, 2), dim(rng, 1, 4), dim(rng, 1, 2));
                let d = heads * dim(rng, 1, 3);
                let rows = batch * seq;
                let inputs = vec![randn(rng, &[rows, d]), randn(rng, &[rows, d]), randn(rng, &[rows, d])];
                let mut c = case(rng, inputs, rows * d);
                c.dims = [batch, seq, heads];
                c
            },
            build: |t, v, c| t.attention(v[0], v[1], v[2], c.dims[0], c.dims[1], c.dims[2]),
        },
    ]
}

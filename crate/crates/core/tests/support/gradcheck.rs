//! Central finite-difference oracle for the differentiable kernels.

use pfgt::numerics::{Graph, Tensor, Var};
use pfgt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
pub const DENOM_FLOOR: f64 = 1e-8;

type Build = Box<dyn for<'a> Fn(&mut Graph<'a, f64>, &[Var]) -> Result<Var>>;

pub struct Instance {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn randn_matrix(rng: &mut ChaCha8Rng, rows: (usize, usize), cols: (usize, usize)) -> Tensor<f64> {
    let shape = vec![dim(rng, rows.0, rows.1), dim(rng, cols.0, cols.1)];
    randn(rng, shape)
}

/// Reduces any 1-D or 2-D output to a scalar through fixed random weights
/// so every output entry influences the loss.
fn reduce<'a>(g: &mut Graph<'a, f64>, y: Var, weights: &[f64]) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let (rows, cols) = match shape.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        other => panic!("unsupported output shape {other:?}"),
    };
    let mut terms = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = if shape.len() == 1 { y } else { g.row(y, i)? };
        let w = g.constant(vec![cols, 1], weights[i * cols..(i + 1) * cols].to_vec())?;
        terms.push(g.matmul(r, w)?);
    }
    g.sum_scalars(&terms)
}

fn evaluate(inst: &Instance, inputs: &[Tensor<f64>], weights: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = (inst.build)(&mut g, &vars)?;
    let loss = reduce(&mut g, y, weights)?;
    Ok(g.scalar(loss))
}

/// Largest relative error between analytic and central-difference
/// gradients over every input entry.
pub fn max_relative_error(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inst
        .inputs
        .iter()
        .map(|t| g.input(t.clone().with_requires_grad(true)))
        .collect();
    let y = (inst.build)(&mut g, &vars)?;
    let n_out = g.shape(y).iter().product();
    let weights: Vec<f64> = (0..n_out).map(|_| rng.sample(StandardNormal)).collect();
    let loss = reduce(&mut g, y, &weights)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (i, input) in inst.inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        for j in 0..input.numel() {
            let mut plus = inst.inputs.clone();
            plus[i].values_mut()[j] += STEP;
            let mut minus = inst.inputs.clone();
            minus[i].values_mut()[j] -= STEP;
            let numeric = (evaluate(inst, &plus, &weights)? - evaluate(inst, &minus, &weights)?) / (2.0 * STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(DENOM_FLOOR);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

pub type Generator = fn(&mut ChaCha8Rng) -> Instance;

/// One random-instance generator per differentiable kernel.
pub fn kernels() -> Vec<(&'static str, Generator)> {
    vec![
        ("add", |rng| {
            let s = vec![dim(rng, 1, 4), dim(rng, 1, 4)];
            Instance {
                inputs: vec![randn(rng, s.clone()), randn(rng, s)],
                build: Box::new(|g, v| g.add(v[0], v[1])),
            }
        }),
        ("add_row_bias", |rng| {
            let (n, m) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Instance {
                inputs: vec![randn(rng, vec![n, m]), randn(rng, vec![m])],
                build: Box::new(|g, v| g.add_row_bias(v[0], v[1])),
            }
        }),
        ("scale", |rng| {
            let s: f64 = rng.sample(StandardNormal);
            Instance {
                inputs: vec![randn_matrix(rng, (1, 4), (1, 4))],
                build: Box::new(move |g, v| Ok(g.scale(v[0], s))),
            }
        }),
        ("matmul", |rng| {
            let (n, k, m) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Instance {
                inputs: vec![randn(rng, vec![n, k]), randn(rng, vec![k, m])],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }),
        ("matmul_vector", |rng| {
            let (k, m) = (dim(rng, 1, 5), dim(rng, 1, 4));
            Instance {
                inputs: vec![randn(rng, vec![k]), randn(rng, vec![k, m])],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }),
        ("layer_norm", |rng| {
            // d = 2 makes the normalized row constant up to eps.
            let (n, d) = (dim(rng, 1, 3), dim(rng, 3, 5));
            Instance {
                inputs: vec![randn(rng, vec![n, d]), randn(rng, vec![d]), randn(rng, vec![d])],
                build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
            }
        }),
        ("gelu", |rng| Instance {
            inputs: vec![randn_matrix(rng, (1, 4), (1, 4))],
            build: Box::new(|g, v| Ok(g.gelu(v[0]))),
        }),
        ("concat_rows", |rng| {
            let (a, b, d) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            Instance {
                inputs: vec![randn(rng, vec![a, d]), randn(rng, vec![b, d])],
                build: Box::new(|g, v| g.concat_rows(&[v[0], v[1], v[0]])),
            }
        }),
        ("row", |rng| {
            let n = dim(rng, 1, 4);
            let i = rng.gen_range(0..n);
            Instance {
                inputs: vec![randn_matrix(rng, (n, n), (1, 4))],
                build: Box::new(move |g, v| g.row(v[0], i)),
            }
        }),
        ("rows", |rng| {
            let n = dim(rng, 1, 5);
            let start = rng.gen_range(0..n);
            let count = rng.gen_range(1..=n - start);
            Instance {
                inputs: vec![randn_matrix(rng, (n, n), (1, 4))],
                build: Box::new(move |g, v| g.rows(v[0], start, count)),
            }
        }),
        ("attention", |rng| {
            let heads = dim(rng, 1, 2);
            let d = heads * dim(rng, 1, 3);
            let (nq, nk) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let (nq, nk) = (nq.max(nk), nq.max(nk));
            Instance {
                inputs: vec![randn(rng, vec![nq, d]), randn(rng, vec![nk, d]), randn(rng, vec![nk, d])],
                build: Box::new(move |g, v| g.attention(v[0], v[1], v[2], heads)),
            }
        }),
        ("softmax", |rng| {
            let axis = rng.gen_range(0..2);
            Instance {
                inputs: vec![randn_matrix(rng, (1, 4), (1, 4))],
                build: Box::new(move |g, v| g.softmax(v[0], axis)),
            }
        }),
        ("cross_entropy", |rng| {
            let k = dim(rng, 2, 6);
            let label = rng.gen_range(0..k);
            Instance {
                inputs: vec![randn(rng, vec![k])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], label)),
            }
        }),
        ("kl_to_uniform", |rng| Instance {
            inputs: vec![{
                let k = dim(rng, 2, 6);
                randn(rng, vec![k])
            }],
            build: Box::new(|g, v| g.kl_to_uniform(v[0])),
        }),
        ("sum_scalars", |rng| Instance {
            inputs: vec![randn(rng, vec![1]), randn(rng, vec![1])],
            build: Box::new(|g, v| g.sum_scalars(&[v[0], v[1], v[0]])),
        }),
        ("lora_apply", |rng| {
            let (n, d, r) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 2));
            let scale = rng.gen_range(0.5..4.0);
            Instance {
                inputs: vec![
                    randn(rng, vec![n, d]),
                    randn(rng, vec![d, d]),
                    randn(rng, vec![d, r]),
                    randn(rng, vec![r, d]),
                ],
                build: Box::new(move |g, v| pfgt::encoder::lora_apply(g, v[0], v[1], v[2], v[3], scale)),
            }
        }),
    ]
}

/// Worst error of every kernel over `instances` random instances each.
pub fn run_all(instances: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kernels()
        .into_iter()
        .map(|(name, make)| {
            let worst = (0..instances)
                .map(|_| {
                    let inst = make(&mut rng);
                    max_relative_error(&inst, &mut rng).unwrap_or_else(|e| panic!("{name}: {e}"))
                })
                .fold(0.0f64, f64::max);
            (name, worst)
        })
        .collect()
}

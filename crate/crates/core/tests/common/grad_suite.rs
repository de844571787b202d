//! Finite-difference checks for every differentiable op and loss, shared
//! by the unit tests and the acceptance runner.

use alqt_core::adapters::{adapted_forward, lora_forward, ortho_penalty, AdapterVars, LoraVars};
use alqt_core::metrics::{qat_loss, stage1_loss};
use alqt_core::tensor::{finite_difference_check, Graph, Tensor, Var};
use alqt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 20;
pub const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

pub fn rnd(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=4)
}

/// Random tensor whose axis `i` has `dim + extra[i]` entries.
fn shaped(rng: &mut ChaCha8Rng, extra: &[usize]) -> Tensor<f64> {
    let shape: Vec<usize> = extra.iter().map(|e| dim(rng) + e).collect();
    rnd(rng, &shape)
}

/// Contracts `y` with a fixed random tensor of its shape.
pub fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng));
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Worst relative error per checked op, over all seeds.
#[derive(Default)]
pub struct Suite {
    pub results: Vec<(String, f64)>,
}

impl Suite {
    fn check<F>(&mut self, name: &str, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>, f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var], u64) -> Result<Var>,
    {
        let mut worst = 0.0f64;
        for seed in 0..SEEDS {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = make(&mut rng);
            let err = finite_difference_check(|g, v| f(g, v, seed), &params, EPS).unwrap_or(f64::INFINITY);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        self.results.push((name.to_string(), worst));
    }

    pub fn assert_passing(&self) {
        for (name, worst) in &self.results {
            assert!(*worst <= TOL, "{name}: relative error {worst:e}");
        }
    }
}

pub fn run_all(s: &mut Suite) {
    matmul_all_transpose_combinations(s);
    batched_matmul_broadcasts_weight(s);
    broadcasting_binary_ops(s);
    unary_ops(s);
    layer_norm_all_inputs(s);
    shape_ops(s);
    reductions(s);
    upsample(s);
    bce_and_losses(s);
    adapter_paths(s);
}

pub fn matmul_all_transpose_combinations(s: &mut Suite) {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        s.check(
            "matmul_t",
            |r| {
                let (m, k, n) = (dim(r), dim(r), dim(r));
                let a = if ta { [k, m] } else { [m, k] };
                let b = if tb { [n, k] } else { [k, n] };
                vec![rnd(r, &a), rnd(r, &b)]
            },
            |g, v, s| {
                let y = g.matmul_t(v[0], v[1], ta, tb)?;
                project(g, y, s)
            },
        );
    }
}

pub fn batched_matmul_broadcasts_weight(s: &mut Suite) {
    s.check(
        "batched matmul",
        |r| {
            let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            vec![rnd(r, &[b, 2, m, k]), rnd(r, &[n, k])]
        },
        |g, v, s| {
            let y = g.matmul_t(v[0], v[1], false, true)?;
            project(g, y, s)
        },
    );
    s.check(
        "batched matmul both",
        |r| {
            let (b, m, k, n) = (dim(r), dim(r), dim(r), dim(r));
            vec![rnd(r, &[b, m, k]), rnd(r, &[b, n, k])]
        },
        |g, v, s| {
            let y = g.matmul_t(v[0], v[1], false, true)?;
            project(g, y, s)
        },
    );
}

pub fn broadcasting_binary_ops(s: &mut Suite) {
    type Op = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;
    let ops: [(&str, Op); 4] = [
        ("add", |g, a, b| g.add(a, b)),
        ("sub", |g, a, b| g.sub(a, b)),
        ("mul", |g, a, b| g.mul(a, b)),
        ("div", |g, a, b| {
            let sq = g.square(b)?;
            let d = g.add_scalar(sq, 1.5)?;
            g.div(a, d)
        }),
    ];
    for (name, op) in ops {
        s.check(
            name,
            |r| {
                let (a, b, c) = (dim(r), dim(r), dim(r));
                vec![rnd(r, &[a, b, c]), rnd(r, &[1, b, 1])]
            },
            |g, v, s| {
                let y = op(g, v[0], v[1])?;
                project(g, y, s)
            },
        );
    }
}

pub fn unary_ops(s: &mut Suite) {
    type Op = fn(&mut Graph<f64>, Var) -> Result<Var>;
    let ops: [(&str, Op); 6] = [
        ("scale", |g, x| g.scale(x, -1.7)),
        ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
        ("square", |g, x| g.square(x)),
        ("gelu", |g, x| g.gelu(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("softmax", |g, x| g.softmax(x)),
    ];
    for (name, op) in ops {
        s.check(
            name,
            |r| {
                let (a, b) = (dim(r), dim(r) + 1);
                vec![rnd(r, &[a, b])]
            },
            |g, v, s| {
                let y = op(g, v[0])?;
                project(g, y, s)
            },
        );
    }
}

pub fn layer_norm_all_inputs(s: &mut Suite) {
    s.check(
        "layer_norm",
        |r| {
            let (a, w) = (dim(r), dim(r) + 2);
            vec![rnd(r, &[a, w]), rnd(r, &[w]), rnd(r, &[w])]
        },
        |g, v, s| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, s)
        },
    );
}

pub fn shape_ops(s: &mut Suite) {
    s.check(
        "reshape+permute+transpose",
        |r| vec![shaped(r, &[0, 0, 0])],
        |g, v, s| {
            let sh = g.shape(v[0]).to_vec();
            let y = g.reshape(v[0], &[sh[0] * sh[1], sh[2]])?;
            let y = g.transpose(y)?;
            let y = g.reshape(y, &[sh[2], sh[0], sh[1]])?;
            let y = g.permute(y, &[1, 2, 0])?;
            project(g, y, s)
        },
    );
    s.check(
        "narrow+concat",
        |r| vec![shaped(r, &[0, 2]), rnd(r, &[1, 1])],
        |g, v, s| {
            let sh = g.shape(v[0]).to_vec();
            let a = g.narrow(v[0], 1, 1, sh[1] - 1)?;
            let b = g.expand(v[1], &[sh[0], 2])?;
            let y = g.concat(&[a, b, a], 1)?;
            project(g, y, s)
        },
    );
}

pub fn reductions(s: &mut Suite) {
    s.check(
        "sum/mean/sum_last",
        |r| vec![shaped(r, &[0, 0, 0])],
        |g, v, s| {
            let a = g.sum_last(v[0], 2)?;
            let a = project(g, a, s)?;
            let sq = g.square(v[0])?;
            let b = g.mean(sq)?;
            let c = g.sum(v[0])?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
    );
}

pub fn upsample(s: &mut Suite) {
    s.check(
        "upsample2x",
        |r| vec![shaped(r, &[0, 1, 1])],
        |g, v, s| {
            let y = g.upsample2x(v[0])?;
            project(g, y, s)
        },
    );
}

pub fn bce_and_losses(s: &mut Suite) {
    s.check(
        "bce_with_logits",
        |r| vec![shaped(r, &[0, 0])],
        |g, v, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let shape = g.shape(v[0]).to_vec();
            let t: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
                .collect();
            let y = g.bce_with_logits(v[0], &Tensor::new(&shape, t).unwrap())?;
            project(g, y, s)
        },
    );
    let target_for = |s: u64, shape: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 100);
        let t: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| f64::from(u8::from(rng.random_bool(0.4))))
            .collect();
        Tensor::new(shape, t).unwrap()
    };
    s.check(
        "qat_loss",
        |r| vec![shaped(r, &[0, 2, 2])],
        |g, v, s| {
            let shape = g.shape(v[0]).to_vec();
            qat_loss(g, v[0], &target_for(s, &shape))
        },
    );
    s.check(
        "stage1_loss",
        |r| {
            let (d_out, d_in, rank) = (dim(r) + 1, dim(r) + 1, dim(r));
            vec![rnd(r, &[2, 3, 4]), rnd(r, &[d_out, rank]), rnd(r, &[rank, d_in])]
        },
        |g, v, s| {
            let shape = g.shape(v[0]).to_vec();
            stage1_loss(g, v[0], &target_for(s, &shape), &[(v[1], v[2])], 0.3)
        },
    );
}

pub fn adapter_paths(s: &mut Suite) {
    s.check(
        "adapted_forward",
        |r| {
            let (n, d_in, d_out, rank) = (dim(r), dim(r) + 1, dim(r) + 1, dim(r));
            vec![
                rnd(r, &[n, d_in]),
                rnd(r, &[d_out, d_in]),
                rnd(r, &[d_out]),
                rnd(r, &[d_out, rank]),
                rnd(r, &[rank, d_in]),
                rnd(r, &[rank]),
            ]
        },
        |g, v, s| {
            let rank = g.shape(v[5])[0];
            let mask: Vec<f64> = (0..rank).map(|i| if i % 3 == 1 { 0.0 } else { 1.0 }).collect();
            let mask = g.constant(Tensor::new(&[rank], mask).unwrap());
            let vars = AdapterVars {
                p: v[3],
                q: v[4],
                lambda: v[5],
                mask,
            };
            let y = adapted_forward(g, v[0], v[1], Some(v[2]), &vars)?;
            project(g, y, s)
        },
    );
    s.check(
        "lora_forward",
        |r| {
            let (n, d_in, d_out, rank) = (dim(r), dim(r) + 1, dim(r) + 1, dim(r));
            vec![rnd(r, &[n, d_in]), rnd(r, &[d_out, d_in]), rnd(r, &[rank, d_in]), rnd(r, &[d_out, rank])]
        },
        |g, v, s| {
            let y = lora_forward(g, v[0], v[1], None, &LoraVars { a: v[2], b: v[3] })?;
            project(g, y, s)
        },
    );
    s.check(
        "ortho_penalty",
        |r| {
            let (d_out, d_in, rank) = (dim(r) + 1, dim(r) + 1, dim(r));
            vec![rnd(r, &[d_out, rank]), rnd(r, &[rank, d_in])]
        },
        |g, v, _| ortho_penalty(g, v[0], v[1]),
    );
}

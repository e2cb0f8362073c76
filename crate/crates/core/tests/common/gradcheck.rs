//! Central finite differences against the tape's reverse pass.

use lowres_mt::autodiff::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖)` over one input's gradient; 0 when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = l2(analytic).max(l2(numeric));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks like relu.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Checks every input of `f`. `f` builds a scalar from the given leaves; the
/// same closure is reused for the perturbed evaluations. Returns the worst
/// relative error across inputs.
pub fn check<Fn_>(inputs: &[Tensor<f64>], f: Fn_) -> f64
where
    Fn_: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.len()];
        let mut ins = inputs.to_vec();
        for j in 0..t.len() {
            let x = t.data()[j];
            ins[i].data_mut()[j] = x + H;
            let up = eval(&ins);
            ins[i].data_mut()[j] = x - H;
            let down = eval(&ins);
            ins[i].data_mut()[j] = x;
            numeric[j] = (up - down) / (2.0 * H);
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Reduces a tensor to a scalar through fixed random weights so every
/// output element gets a distinct upstream gradient.
pub fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(v));
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

type Case = (&'static str, fn(u64) -> f64);

/// One entry per differentiable operator; each returns the worst relative
/// error for random inputs drawn from `seed`.
pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 4]), random(&mut r, &[4, 5])], |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("matmul_batched", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 4]), random(&mut r, &[2, 4, 2])], |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("matmul_shared_rhs", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 4]), random(&mut r, &[4, 3])], |g, v| {
                let m = g.matmul(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("add_broadcast", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 4]), random(&mut r, &[4])], |g, v| {
                let m = g.add(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("sub_broadcast", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 4]), random(&mut r, &[3, 1])], |g, v| {
                let m = g.sub(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("mul_broadcast", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 1, 4]), random(&mut r, &[3, 4])], |g, v| {
                let m = g.mul(v[0], v[1]).unwrap();
                project(g, m, s)
            })
        }),
        ("scale", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[5])], |g, v| {
                let m = g.scale(v[0], -1.7);
                project(g, m, s)
            })
        }),
        ("permute", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 4])], |g, v| {
                let m = g.permute(v[0], &[2, 0, 1]).unwrap();
                project(g, m, s)
            })
        }),
        ("transpose", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 4, 2])], |g, v| {
                let m = g.transpose(v[0], 1, 2).unwrap();
                project(g, m, s)
            })
        }),
        ("reshape", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 6])], |g, v| {
                let m = g.reshape(v[0], &[3, 4]).unwrap();
                project(g, m, s)
            })
        }),
        ("concat", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3]), random(&mut r, &[2, 2])], |g, v| {
                let m = g.concat(&[v[0], v[1], v[0]], 1).unwrap();
                project(g, m, s)
            })
        }),
        ("embedding", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[6, 3])], |g, v| {
                let m = g.embedding(v[0], &[1, 4, 1, 0, 5, 4], &[2, 3]).unwrap();
                project(g, m, s)
            })
        }),
        ("softmax", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 5])], |g, v| {
                let m = g.softmax(v[0], 1).unwrap();
                project(g, m, s)
            })
        }),
        ("softmax_inner_axis", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 4, 3])], |g, v| {
                let m = g.softmax(v[0], 1).unwrap();
                project(g, m, s)
            })
        }),
        ("layer_norm", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 6]), random(&mut r, &[6]), random(&mut r, &[6])], |g, v| {
                let m = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                project(g, m, s)
            })
        }),
        ("relu", |s| {
            let mut r = rng(s);
            check(&[away_from_zero(&mut r, &[4, 3])], |g, v| {
                let m = g.relu(v[0]);
                project(g, m, s)
            })
        }),
        ("dropout", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[4, 5])], |g, v| {
                let m = g.dropout(v[0], 0.3, s, true).unwrap();
                project(g, m, s)
            })
        }),
        ("sum", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 3])], |g, v| {
                let sq = g.mul(v[0], v[0]).unwrap();
                g.sum(sq)
            })
        }),
        ("mean", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 5])], |g, v| {
                let sq = g.mul(v[0], v[0]).unwrap();
                g.mean(sq)
            })
        }),
        ("l2_normalize", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[3, 4])], |g, v| {
                let m = g.l2_normalize(v[0]).unwrap();
                project(g, m, s)
            })
        }),
        ("cross_entropy", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[2, 3, 6])], |g, v| g.cross_entropy(v[0], &[4, 2, 0, 5, 1, 3], 0, 0.0).unwrap())
        }),
        ("cross_entropy_smoothed", |s| {
            let mut r = rng(s);
            check(&[random(&mut r, &[4, 6])], |g, v| g.cross_entropy(v[0], &[4, 2, 0, 5], 0, 0.1).unwrap())
        }),
    ]
}

/// Full quarter-scale T1 training loss (dropout on, label smoothing off)
/// checked on a random sample of coordinates from every parameter tensor.
pub fn transformer_case(seed: u64) -> f64 {
    use lowres_mt::autodiff::ParamSet;
    use lowres_mt::transformer::{batch_loss, build_model, Binder, Ctx, Example, TransformerConfig};

    let vocab = 11;
    let mut config = TransformerConfig::t1_quarter(vocab);
    config.dropout = 0.1;
    config.label_smoothing = 0.0;
    config.max_len = 16;
    let model = build_model::<f64>(&config, seed).unwrap();
    let mut r = rng(seed);
    let mut seq = |n: usize| -> Vec<usize> { (0..n).map(|_| r.random_range(4..vocab)).collect() };
    let examples: Vec<Example> = [(4, 3), (2, 5)]
        .iter()
        .map(|&(ls, lt)| {
            let t = seq(lt);
            let mut src = seq(ls);
            src.push(3);
            let mut tgt_in = vec![2];
            tgt_in.extend(&t);
            let mut tgt_out = t;
            tgt_out.push(3);
            Example { src, tgt_in, tgt_out }
        })
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();
    let loss_of = |params: &ParamSet<f64>, record: bool| -> (f64, Option<std::collections::BTreeMap<String, Tensor<f64>>>) {
        let mut g = if record { Graph::new() } else { Graph::inference() };
        let mut b = Binder::new().source(params, true);
        let mut ctx = Ctx::train(seed, 7, true);
        if record {
            let l = batch_loss(&config, &mut b, &mut g, &mut ctx, &batch).unwrap();
            (l, Some(b.grads(&g)))
        } else {
            let src: Vec<Vec<usize>> = batch.iter().map(|e| e.src.clone()).collect();
            let tin: Vec<Vec<usize>> = batch.iter().map(|e| e.tgt_in.clone()).collect();
            let targets: Vec<usize> = {
                let t = tin.iter().map(Vec::len).max().unwrap();
                batch
                    .iter()
                    .flat_map(|e| e.tgt_out.iter().copied().chain(std::iter::repeat_n(0, t - e.tgt_out.len())))
                    .collect()
            };
            let logits = lowres_mt::transformer::Net::new(&config).forward(&mut g, &mut b, &mut ctx, &src, &tin).unwrap();
            let l = g.cross_entropy(logits, &targets, 0, config.label_smoothing).unwrap();
            (g.value(l).item(), None)
        }
    };
    let (_, grads) = loss_of(&model.params, true);
    let grads = grads.unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut params = model.params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().len();
        for _ in 0..2 {
            let j = r.random_range(0..n);
            let x = params.get(&name).unwrap().data()[j];
            params.get_mut(&name).unwrap().data_mut()[j] = x + H;
            let up = loss_of(&params, false).0;
            params.get_mut(&name).unwrap().data_mut()[j] = x - H;
            let down = loss_of(&params, false).0;
            params.get_mut(&name).unwrap().data_mut()[j] = x;
            numeric.push((up - down) / (2.0 * H));
            analytic.push(grads.get(&name).map(|t| t.data()[j]).unwrap_or(0.0));
        }
    }
    rel_err(&analytic, &numeric)
}

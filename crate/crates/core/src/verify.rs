//! Finite-difference gradient checks for every differentiable primitive
//! and for the encoder and decoder blocks built from them.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::decoder::{decode_step, gm_attention_step, DecoderParams, StateVars};
use crate::dsp::StftPlan;
use crate::encoder::{encode_graph, smrc_graph};
use crate::model::{Bound, Mode, ModelConfig, ModelError, ParamStore};
use crate::nn::{blend_rows, dropout, grad_check, linear, lstm_step, Graph, LstmParams, LstmVars, NnError, NormStats, Tensor, Var};

/// Central-difference step.
pub const EPS: f64 = 1e-5;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: &'static str,
    pub seed: u64,
    pub error: f64,
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "mul_const",
    "relu",
    "sigmoid",
    "tanh",
    "softplus",
    "exp",
    "log_floor",
    "concat",
    "slice_cols",
    "gather_rows",
    "blend_rows",
    "conv1d",
    "batch_norm_train",
    "batch_norm_eval",
    "embed",
    "mse",
    "sum",
    "dropout",
    "lstm_step",
    "gm_attention",
    "assemble_memory",
    "stack_steps",
    "stft_mag",
];

pub const BLOCKS: &[&str] = &["smrc_forward", "encode", "gm_attention_step", "decode_step"];

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| 0.5 + rng.gen::<f64>())
}

/// Reduces any tensor to a scalar with fixed random weights, so every
/// output coordinate carries a distinct gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let n = g.value(x).len();
    let w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let y = g.mul_const(x, w)?;
    Ok(g.sum(y))
}

/// Maximum relative error of primitive `name` on random inputs from `seed`.
pub fn check_primitive(name: &str, seed: u64) -> Result<f64, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.gen_range(2..5);
    let c = rng.gen_range(2..5);
    let k = rng.gen_range(2..5);
    let ws = seed;
    let check = |f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var, NnError>, inputs: &[Tensor]| {
        grad_check(|g, v| f(g, v), inputs, EPS, None, seed)
    };
    match name {
        "matmul" => check(
            &|g, v| {
                let y = g.matmul(v[0], v[1])?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, k], 1.0), normal(&mut rng, &[k, c], 1.0)],
        ),
        "linear" => check(
            &|g, v| {
                let y = linear(g, v[0], v[1], v[2])?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, k], 1.0), normal(&mut rng, &[k, c], 1.0), normal(&mut rng, &[c], 1.0)],
        ),
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            check(
                &move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[r, c], 1.0), normal(&mut rng, &[r, c], 1.0)],
            )
        }
        "scale" => check(
            &|g, v| {
                let y = g.scale(v[0], -1.7);
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, c], 1.0)],
        ),
        "mul_const" => {
            let m: Vec<f64> = (0..r * c).map(|_| rng.sample(StandardNormal)).collect();
            check(
                &move |g, v| {
                    let y = g.mul_const(v[0], m.clone())?;
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[r, c], 1.0)],
            )
        }
        "relu" | "sigmoid" | "tanh" | "softplus" | "exp" => {
            let op = name.to_string();
            let mut x = normal(&mut rng, &[r, c], 2.0);
            // keep relu inputs away from the kink
            x.data_mut().iter_mut().for_each(|v| {
                if v.abs() < 1e-3 {
                    *v = 0.1
                }
            });
            check(
                &move |g, v| {
                    let y = match op.as_str() {
                        "relu" => g.relu(v[0]),
                        "sigmoid" => g.sigmoid(v[0]),
                        "tanh" => g.tanh(v[0]),
                        "softplus" => g.softplus(v[0]),
                        _ => g.exp(v[0]),
                    };
                    weighted_sum(g, y, ws)
                },
                &[x],
            )
        }
        "log_floor" => check(
            &|g, v| {
                let y = g.log_floor(v[0], 1e-5);
                weighted_sum(g, y, ws)
            },
            &[positive(&mut rng, &[r, c])],
        ),
        "concat" => check(
            &|g, v| {
                let y = g.concat(&[v[0], v[1], v[2]])?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, 1], 1.0), normal(&mut rng, &[r, c], 1.0), normal(&mut rng, &[r, k], 1.0)],
        ),
        "slice_cols" => check(
            &|g, v| {
                let y = g.slice_cols(v[0], 1, 2)?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, c + 2], 1.0)],
        ),
        "gather_rows" => {
            let idx: Vec<Option<usize>> = (0..r + 2)
                .map(|_| (rng.gen::<f64>() < 0.8).then(|| rng.gen_range(0..r)))
                .collect();
            check(
                &move |g, v| {
                    let y = g.gather_rows(v[0], idx.clone())?;
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[r, c], 1.0)],
            )
        }
        "blend_rows" => {
            let take: Vec<bool> = (0..r).map(|i| i % 2 == 0).collect();
            check(
                &move |g, v| {
                    let y = blend_rows(g, v[0], v[1], &take)?;
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[r, c], 1.0), normal(&mut rng, &[r, c], 1.0)],
            )
        }
        "conv1d" => {
            let kernel = [1, 3, 5][rng.gen_range(0..3)];
            let t1 = rng.gen_range(1..6);
            let t2 = rng.gen_range(1..6);
            check(
                &move |g, v| {
                    let y = g.conv1d(v[0], v[1], v[2], &[(0, t1), (t1, t2)])?;
                    weighted_sum(g, y, ws)
                },
                &[
                    normal(&mut rng, &[t1 + t2, c], 1.0),
                    normal(&mut rng, &[kernel, c, k], 1.0),
                    normal(&mut rng, &[k], 1.0),
                ],
            )
        }
        "batch_norm_train" => check(
            &|g, v| {
                let y = g.batch_norm(v[0], v[1], v[2], NormStats::Batch { eps: 1e-5 })?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r + 1, c], 1.0), normal(&mut rng, &[c], 1.0), normal(&mut rng, &[c], 1.0)],
        ),
        "batch_norm_eval" => {
            let mean: Vec<f64> = (0..c).map(|_| rng.sample(StandardNormal)).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.5 + rng.gen::<f64>()).collect();
            check(
                &move |g, v| {
                    let stats = NormStats::Fixed {
                        mean: &mean,
                        var: &var,
                        eps: 1e-5,
                    };
                    let y = g.batch_norm(v[0], v[1], v[2], stats)?;
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[r, c], 1.0), normal(&mut rng, &[c], 1.0), normal(&mut rng, &[c], 1.0)],
            )
        }
        "embed" => {
            let ids: Vec<usize> = (0..r + 3).map(|_| rng.gen_range(0..k)).collect();
            check(
                &move |g, v| {
                    let y = g.embed(v[0], &ids)?;
                    weighted_sum(g, y, ws)
                },
                &[normal(&mut rng, &[k, c], 1.0)],
            )
        }
        "mse" => {
            let target = normal(&mut rng, &[r, c], 1.0);
            check(&move |g, v| g.mse(v[0], &target), &[normal(&mut rng, &[r, c], 1.0)])
        }
        "sum" => check(&|g, v| Ok(g.sum(v[0])), &[normal(&mut rng, &[r, c], 1.0)]),
        "dropout" => check(
            &|g, v| {
                let mut mask_rng = ChaCha8Rng::seed_from_u64(ws);
                let y = dropout(g, v[0], 0.6, &mut mask_rng, true)?;
                weighted_sum(g, y, ws)
            },
            &[normal(&mut rng, &[r, c], 1.0)],
        ),
        "lstm_step" => {
            let (din, h) = (k, c);
            check(
                &|g, v| {
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(ws);
                    let p = LstmParams {
                        wx: v[1],
                        wh: v[2],
                        b: v[3],
                    };
                    let out = lstm_step(g, v[0], LstmVars { h: v[4], c: v[5] }, &p, 0.7, &mut mask_rng, true)?;
                    let both = g.concat(&[out.h, out.c])?;
                    weighted_sum(g, both, ws)
                },
                &[
                    normal(&mut rng, &[r, din], 1.0),
                    normal(&mut rng, &[din, 4 * h], 0.5),
                    normal(&mut rng, &[h, 4 * h], 0.5),
                    normal(&mut rng, &[4 * h], 0.5),
                    normal(&mut rng, &[r, h], 1.0),
                    normal(&mut rng, &[r, h], 1.0),
                ],
            )
        }
        "gm_attention" => {
            let t = rng.gen_range(3..7);
            let lengths: Vec<usize> = (0..r).map(|b| if b == 0 { t } else { rng.gen_range(1..=t) }).collect();
            let kappa = Tensor::from_fn(&[r, k], |_| rng.gen::<f64>() * t as f64);
            check(
                &move |g, v| {
                    let y = g.gm_attention(v[0], v[1], v[2], v[3], &lengths)?;
                    weighted_sum(g, y, ws)
                },
                &[positive(&mut rng, &[r, k]), positive(&mut rng, &[r, k]), kappa, normal(&mut rng, &[r, t, c], 1.0)],
            )
        }
        "assemble_memory" => {
            let t = rng.gen_range(2..5);
            let lengths: Vec<usize> = (0..r).map(|b| if b == 0 { t } else { rng.gen_range(1..=t) }).collect();
            let inputs: Vec<Tensor> = (0..2 * t).map(|_| normal(&mut rng, &[r, c], 1.0)).collect();
            check(
                &move |g, v| {
                    let y = g.assemble_memory(&v[..t], &v[t..], &lengths)?;
                    weighted_sum(g, y, ws)
                },
                &inputs,
            )
        }
        "stack_steps" => {
            let inputs: Vec<Tensor> = (0..k).map(|_| normal(&mut rng, &[r, c], 1.0)).collect();
            check(
                &|g, v| {
                    let y = g.stack_steps(v)?;
                    weighted_sum(g, y, ws)
                },
                &inputs,
            )
        }
        "stft_mag" => {
            let plan = Arc::new(StftPlan::new(512, 128));
            let x = normal(&mut rng, &[1024], 0.1);
            grad_check(
                |g, v| {
                    let y = g.stft_mag(v[0], plan.clone())?;
                    weighted_sum(g, y, ws)
                },
                &[x],
                EPS,
                Some(64),
                seed,
            )
        }
        other => Err(NnError::ShapeMismatch(format!("unknown primitive {other}"))),
    }
}

fn nn_err(e: ModelError) -> NnError {
    match e {
        ModelError::Nn(e) => e,
        other => NnError::ShapeMismatch(other.to_string()),
    }
}

/// Checks a model block of a [`ModelConfig::tiny`] model: every parameter
/// tensor is an input, with up to `coords` coordinates sampled from each.
pub fn check_block(name: &str, seed: u64, coords: usize) -> Result<f64, ModelError> {
    let cfg = ModelConfig::tiny();
    let store = ParamStore::init(&cfg, seed)?;
    let names: Vec<String> = store.params.keys().cloned().collect();
    let mut inputs: Vec<Tensor> = store.params.values().cloned().collect();
    let np = inputs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let bind = |v: &[Var]| Bound::from_vars(names.iter().cloned().zip(v[..np].iter().copied()).collect::<BTreeMap<_, _>>());
    let segments = [(0usize, 4usize), (4, 3)];
    let ws = seed;
    let out = match name {
        "smrc_forward" | "encode" => {
            inputs.push(normal(&mut rng, &[7, cfg.embed_dim], 1.0));
            let full = name == "encode";
            grad_check(
                |g, v| {
                    let params = bind(v);
                    let y = if full {
                        encode_graph(g, &cfg, &params, &store, v[np], &segments, Mode::Train)
                            .map_err(nn_err)?
                            .memory
                    } else {
                        smrc_graph(g, &cfg, &params, &store, v[np], &segments, Mode::Train).map_err(nn_err)?.0
                    };
                    weighted_sum(g, y, ws)
                },
                &inputs,
                EPS,
                Some(coords),
                seed,
            )
        }
        "gm_attention_step" | "decode_step" => {
            let (b, t) = (2, 3);
            let mem = cfg.memory_dim();
            // prenet output, memory, previous context, kappa, attention h and c
            inputs.push(normal(&mut rng, &[b, cfg.prenet_hidden], 1.0));
            inputs.push(normal(&mut rng, &[b, t, mem], 1.0));
            inputs.push(normal(&mut rng, &[b, mem], 0.5));
            inputs.push(Tensor::from_fn(&[b, cfg.num_mixes], |_| rng.gen::<f64>()));
            inputs.push(normal(&mut rng, &[b, cfg.attn_hidden], 0.5));
            inputs.push(normal(&mut rng, &[b, cfg.attn_hidden], 0.5));
            // decoder layer states and previous frame
            for _ in 0..cfg.dec_layers {
                inputs.push(normal(&mut rng, &[b, cfg.dec_hidden], 0.5));
                inputs.push(normal(&mut rng, &[b, cfg.dec_hidden], 0.5));
            }
            inputs.push(normal(&mut rng, &[b, cfg.n_mels], 1.0));
            let lengths = [t, 2];
            let whole = name == "decode_step";
            grad_check(
                |g, v| {
                    let params = bind(v);
                    let p = DecoderParams::bind(&cfg, &params).map_err(nn_err)?;
                    let alpha = g.constant(Tensor::from_fn(&[b, cfg.num_mixes], |_| 1.0));
                    let beta = alpha;
                    let layers = (0..cfg.dec_layers)
                        .map(|l| LstmVars {
                            h: v[np + 6 + 2 * l],
                            c: v[np + 7 + 2 * l],
                        })
                        .collect();
                    let state = StateVars {
                        kappa: v[np + 3],
                        alpha,
                        beta,
                        attn: LstmVars {
                            h: v[np + 4],
                            c: v[np + 5],
                        },
                        context: v[np + 2],
                        layers,
                        prev_frame: v[np + 6 + 2 * cfg.dec_layers],
                    };
                    let mut mask_rng = ChaCha8Rng::seed_from_u64(ws);
                    if whole {
                        let (frame, next, _) =
                            decode_step(g, &cfg, &p, &state, v[np + 1], &lengths, &mut mask_rng, Mode::Train)
                                .map_err(nn_err)?;
                        let parts = g.concat(&[frame, next.kappa, next.layers[0].c])?;
                        weighted_sum(g, parts, ws)
                    } else {
                        let att = gm_attention_step(g, &cfg, &p, v[np], &state, v[np + 1], &lengths, &mut mask_rng)
                            .map_err(nn_err)?;
                        let parts = g.concat(&[att.context, att.kappa, att.lstm.c])?;
                        weighted_sum(g, parts, ws)
                    }
                },
                &inputs,
                EPS,
                Some(coords),
                seed,
            )
        }
        other => return Err(ModelError::Invalid(format!("unknown block {other}"))),
    };
    out.map_err(ModelError::from)
}

/// Runs every primitive and block check for each seed.
pub fn gradient_suite(seeds: std::ops::Range<u64>, block_coords: usize) -> Result<Vec<GradReport>, ModelError> {
    let mut out = Vec::new();
    for seed in seeds {
        for &name in PRIMITIVES {
            out.push(GradReport {
                name,
                seed,
                error: check_primitive(name, seed)?,
            });
        }
        for &name in BLOCKS {
            out.push(GradReport {
                name,
                seed,
                error: check_block(name, seed, block_coords)?,
            });
        }
    }
    Ok(out)
}

//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Property criteria decide the exit status. Criteria that train models are
//! measured and reported; they do not fail the run. Set `MOVE_ACCEPTANCE_FAST=1`
//! to skip the training criteria.

use std::collections::VecDeque;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use move_core::compose::{
    build_training_batch, compose_shifted, downsample_mask, shift_map, union_mask, ComposeOptions, Shift,
};
use move_core::eval::{box_iou, connected_components, evaluate, f_beta, BBox, Connectivity, EvalConfig};
use move_core::inpaint::{default_sparse_inpaint, inpaint_compare, soft_mask_embeddings};
use move_core::losses::{loss_adv_d, loss_adv_s, loss_bin, loss_min, pooled_mask_losses, recon_mse};
use move_core::nn::{Mode, Module, Param, Segmenter, TinyMae};
use move_core::synthdata::{dataset_checksum, gen_dataset, load_dataset, GeneratorParams};
use move_core::tensor::{grad_check_many, GradCheckReport, PoolKind};
use move_core::train::{
    load_mae, run_move, run_pretrain, run_supervised, Adam, AdamConfig, Checkpoint, FeatureCache, MoveTrainer,
    TrainConfig,
};
use move_core::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type BoxError = Box<dyn std::error::Error>;
type Check = std::result::Result<(bool, String), BoxError>;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Property,
    Measured,
}

struct Outcome {
    id: usize,
    name: &'static str,
    kind: Kind,
    status: Option<bool>,
    detail: String,
}

fn run(id: usize, name: &'static str, kind: Kind, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let (status, detail) = match f() {
        Ok((pass, detail)) => (Some(pass), detail),
        Err(e) => (Some(false), format!("error: {e}")),
    };
    let o = Outcome {
        id,
        name,
        kind,
        status,
        detail: format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64()),
    };
    print_outcome(&o);
    o
}

fn skipped(id: usize, name: &'static str, kind: Kind) -> Outcome {
    let o = Outcome {
        id,
        name,
        kind,
        status: None,
        detail: "skipped (MOVE_ACCEPTANCE_FAST)".into(),
    };
    print_outcome(&o);
    o
}

fn print_outcome(o: &Outcome) {
    let tag = match o.status {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    println!("{tag} {:>2} {}: {}", o.id, o.name, o.detail);
}

// ---------------------------------------------------------------------------
// Helpers

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values with `|v| >= gap` so kinks at zero are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Mask values in (0.02, 0.98) that stay clear of 0.5.
fn mask_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(0.02..0.46);
        if rng.gen_bool(0.5) {
            v
        } else {
            1.0 - v
        }
    })
}

/// Scalar readout `sum(w * y)` with fixed pseudo-random weights.
fn readout(g: &mut Graph<f64>, y: Var) -> move_core::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| (1.3 * i as f64 + 0.5).sin());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn temp_root() -> Result<tempfile::TempDir, BoxError> {
    Ok(tempfile::Builder::new().prefix("move-acceptance").tempdir()?)
}

// ---------------------------------------------------------------------------
// 1. Gradient suite

type GradCase = (&'static str, fn(&mut ChaCha8Rng) -> move_core::Result<GradCheckReport>);

const GRAD_EPS: f64 = 1e-5;

fn check1<F>(f: F, inputs: &[Tensor<f64>]) -> move_core::Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> move_core::Result<Var>,
{
    grad_check_many(
        |g, xs| {
            let y = f(g, xs)?;
            if g.value(y).numel() == 1 {
                Ok(y)
            } else {
                readout(g, y)
            }
        },
        inputs,
        GRAD_EPS,
    )
}

fn grad_cases() -> Vec<GradCase> {
    vec![
        ("add", |r| check1(|g, x| g.add(x[0], x[1]), &[uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)])),
        ("sub", |r| check1(|g, x| g.sub(x[0], x[1]), &[uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)])),
        ("mul", |r| check1(|g, x| g.mul(x[0], x[1]), &[uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)])),
        ("div", |r| check1(|g, x| g.div(x[0], x[1]), &[uniform(r, &[2, 3], -1.0, 1.0), away_from_zero(r, &[2, 3], 0.5, 1.5)])),
        ("minimum", |r| check1(|g, x| g.minimum(x[0], x[1]), &[uniform(r, &[3, 3], -1.0, 1.0), uniform(r, &[3, 3], -1.0, 1.0)])),
        ("maximum", |r| check1(|g, x| g.maximum(x[0], x[1]), &[uniform(r, &[3, 3], -1.0, 1.0), uniform(r, &[3, 3], -1.0, 1.0)])),
        ("scalar ops", |r| {
            check1(
                |g, x| {
                    let y = g.add_scalar(x[0], 0.3);
                    let y = g.mul_scalar(y, -1.7);
                    let y = g.square(y);
                    let y = g.one_minus(y);
                    Ok(g.neg(y))
                },
                &[uniform(r, &[2, 4], -1.0, 1.0)],
            )
        }),
        ("min/max scalar", |r| {
            check1(
                |g, x| {
                    let y = g.min_scalar(x[0], 0.0);
                    let z = g.max_scalar(x[0], 0.0);
                    let z = g.mul_scalar(z, 2.0);
                    g.add(y, z)
                },
                &[away_from_zero(r, &[3, 4], 0.05, 1.0)],
            )
        }),
        ("clamp", |r| {
            let x = uniform(r, &[3, 4], -1.0, 1.0).map(|v| if (v.abs() - 0.5).abs() < 0.02 { v * 0.8 } else { v });
            check1(|g, x| Ok(g.clamp(x[0], -0.5, 0.5)), &[x])
        }),
        ("matmul", |r| check1(|g, x| g.matmul(x[0], x[1]), &[uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)])),
        ("matmul a^T b^T", |r| {
            check1(
                |g, x| g.matmul_t(x[0], x[1], true, true),
                &[uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)],
            )
        }),
        ("matmul a b^T", |r| {
            check1(
                |g, x| g.matmul_t(x[0], x[1], false, true),
                &[uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[5, 4], -1.0, 1.0)],
            )
        }),
        ("add_bias", |r| check1(|g, x| g.add_bias(x[0], x[1]), &[uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)])),
        ("conv2d 3x3", |r| {
            check1(
                |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1),
                &[uniform(r, &[2, 2, 5, 5], -1.0, 1.0), uniform(r, &[3, 2, 3, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            )
        }),
        ("conv2d 4x4 stride 2", |r| {
            check1(
                |g, x| g.conv2d(x[0], x[1], None, 2, 1),
                &[uniform(r, &[2, 2, 6, 6], -1.0, 1.0), uniform(r, &[2, 2, 4, 4], -1.0, 1.0)],
            )
        }),
        ("maxpool", |r| check1(|g, x| g.pool2d(x[0], 2, 2, PoolKind::Max), &[uniform(r, &[2, 2, 4, 4], -1.0, 1.0)])),
        ("avgpool", |r| check1(|g, x| g.pool2d(x[0], 2, 2, PoolKind::Avg), &[uniform(r, &[2, 2, 4, 4], -1.0, 1.0)])),
        ("upsample", |r| check1(|g, x| g.upsample_nearest(x[0], 2), &[uniform(r, &[2, 2, 3, 3], -1.0, 1.0)])),
        ("shift", |r| {
            let s = [(r.gen_range(-2..=2), r.gen_range(-2..=2)), (r.gen_range(-2..=2), r.gen_range(-2..=2))];
            grad_check_many(
                move |g, x| {
                    let y = g.shift(x[0], &s)?;
                    readout(g, y)
                },
                &[uniform(r, &[2, 2, 5, 5], -1.0, 1.0)],
                GRAD_EPS,
            )
        }),
        ("blend", |r| {
            check1(
                |g, x| g.blend(x[0], x[1], x[2]),
                &[uniform(r, &[2, 1, 3, 3], 0.0, 1.0), uniform(r, &[2, 3, 3, 3], 0.0, 1.0), uniform(r, &[2, 3, 3, 3], 0.0, 1.0)],
            )
        }),
        ("color_jitter", |r| {
            let (b, s) = ([r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2)], [r.gen_range(0.8..1.2), r.gen_range(0.8..1.2)]);
            grad_check_many(
                move |g, x| {
                    let y = g.color_jitter(x[0], &b, &s)?;
                    readout(g, y)
                },
                &[uniform(r, &[2, 3, 3, 3], 0.0, 1.0)],
                GRAD_EPS,
            )
        }),
        ("sigmoid", |r| check1(|g, x| Ok(g.sigmoid(x[0])), &[uniform(r, &[3, 4], -3.0, 3.0)])),
        ("leaky_relu", |r| check1(|g, x| Ok(g.leaky_relu(x[0], 0.2)), &[away_from_zero(r, &[3, 4], 0.05, 2.0)])),
        ("gelu", |r| check1(|g, x| Ok(g.gelu(x[0])), &[uniform(r, &[3, 4], -3.0, 3.0)])),
        ("softmax", |r| check1(|g, x| Ok(g.softmax(x[0])), &[uniform(r, &[3, 5], -2.0, 2.0)])),
        ("layer_norm", |r| {
            check1(
                |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5),
                &[uniform(r, &[3, 6], -2.0, 2.0), uniform(r, &[6], 0.5, 1.5), uniform(r, &[6], -0.5, 0.5)],
            )
        }),
        ("batch_norm2d", |r| {
            check1(
                |g, x| Ok(g.batch_norm2d(x[0], x[1], x[2], &[0.0; 2], &[1.0; 2], true, 1e-5)?.0),
                &[uniform(r, &[3, 2, 2, 2], -2.0, 2.0), uniform(r, &[2], 0.5, 1.5), uniform(r, &[2], -0.5, 0.5)],
            )
        }),
        ("reductions", |r| {
            check1(
                |g, x| {
                    let a = g.sum_last(x[0]);
                    let a = g.square(a);
                    let a = g.sum(a);
                    let b = g.square(x[0]);
                    let b = g.mean(b);
                    g.add(a, b)
                },
                &[uniform(r, &[3, 4], -1.0, 1.0)],
            )
        }),
        ("reshape/permute", |r| {
            check1(
                |g, x| {
                    let y = g.permute(x[0], &[2, 0, 1])?;
                    g.reshape(y, &[4, 6])
                },
                &[uniform(r, &[2, 3, 4], -1.0, 1.0)],
            )
        }),
        ("concat/slice/gather", |r| {
            check1(
                |g, x| {
                    let c = g.concat0(&[x[0], x[1]])?;
                    let s = g.slice0(c, 1, 3)?;
                    g.gather_rows(s, &[2, 0, 0, 1])
                },
                &[uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[2, 3], -1.0, 1.0)],
            )
        }),
        ("bce_mean", |r| {
            let target = Tensor::from_fn([2, 5], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            grad_check_many(move |g, x| g.bce_mean(x[0], &target), &[uniform(r, &[2, 5], 0.05, 0.95)], GRAD_EPS)
        }),
        ("soft_mask_embeddings", |r| {
            check1(
                |g, x| soft_mask_embeddings(g, x[0], x[1], x[2]),
                &[uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[1, 1, 2, 2], 0.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            )
        }),
        ("union_mask", |r| {
            check1(|g, x| union_mask(g, x[0], x[1]), &[uniform(r, &[2, 1, 3, 3], 0.0, 1.0), uniform(r, &[2, 1, 3, 3], 0.0, 1.0)])
        }),
        ("compose_shifted", |r| {
            let shifts = [Shift::new(r.gen_range(-2..=2), r.gen_range(-2..=2)), Shift::new(r.gen_range(-2..=2), r.gen_range(-2..=2))];
            grad_check_many(
                move |g, x| {
                    let (y, _) = compose_shifted(g, x[0], x[1], &shifts, x[2])?;
                    readout(g, y)
                },
                &[uniform(r, &[2, 3, 4, 4], 0.0, 1.0), uniform(r, &[2, 1, 4, 4], 0.0, 1.0), uniform(r, &[2, 3, 4, 4], 0.0, 1.0)],
                GRAD_EPS,
            )
        }),
        ("loss_min", |r| {
            let m = Tensor::from_fn([3, 1, 4, 4], |i| {
                let v = r.gen_range(0.0..1.0);
                if i < 32 {
                    0.08 * v
                } else {
                    0.3 + 0.7 * v
                }
            });
            grad_check_many(|g, x| loss_min(g, x[0], 0.05), &[m], GRAD_EPS)
        }),
        ("loss_bin", |r| grad_check_many(|g, x| loss_bin(g, x[0]), &[mask_values(r, &[2, 1, 4, 4])], GRAD_EPS)),
        ("pooled mask losses", |r| {
            let m = Tensor::from_fn([2, 1, 4, 4], |i| {
                let v = r.gen_range(0.02..0.46);
                if i < 16 {
                    0.1 * v
                } else {
                    v
                }
            });
            grad_check_many(
                |g, x| {
                    let mp = g.pool2d(x[0], 2, 2, PoolKind::Max)?;
                    let p = pooled_mask_losses(g, x[0], Some(mp), 2, 0.05, true)?;
                    g.add(p.min.expect("min"), p.bin.expect("bin"))
                },
                &[m],
                GRAD_EPS,
            )
        }),
        ("hinge D", |r| {
            let logits = |r: &mut ChaCha8Rng| {
                Tensor::from_fn([4], |_| {
                    let v: f64 = r.gen_range(-3.0..3.0);
                    if (v.abs() - 1.0).abs() < 0.05 {
                        v * 0.9
                    } else {
                        v
                    }
                })
            };
            let (a, b) = (logits(r), logits(r));
            grad_check_many(|g, x| loss_adv_d(g, &[x[0]], &[x[1]]), &[a, b], GRAD_EPS)
        }),
        ("hinge S", |r| grad_check_many(|g, x| Ok(loss_adv_s(g, x[0])), &[uniform(r, &[4], -3.0, 3.0)], GRAD_EPS)),
        ("recon_mse", |r| {
            let mask = Tensor::new([1, 1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).expect("shape");
            grad_check_many(
                move |g, x| {
                    let m = g.constant(mask.clone());
                    recon_mse(g, x[0], x[1], m, 2)
                },
                &[uniform(r, &[1, 2, 4, 4], 0.0, 1.0), uniform(r, &[1, 2, 4, 4], 0.0, 1.0)],
                GRAD_EPS,
            )
        }),
    ]
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    let cases = grad_cases();
    for (name, case) in &cases {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let rep = case(&mut rng)?;
            if rep.max_rel_error > worst.0 || !rep.max_rel_error.is_finite() {
                worst = (rep.max_rel_error, name);
            }
            if !(rep.max_rel_error < 1e-4) {
                failures.push(format!("{name} seed {seed}: {:.2e}", rep.max_rel_error));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 60.0;
    let mut detail = format!(
        "{} ops x 10 seeds, max rel err {:.2e} ({}), {:.1}s",
        cases.len(),
        worst.0,
        worst.1,
        secs
    );
    if !failures.is_empty() {
        detail.push_str(&format!("; failing: {}", failures.join(", ")));
    }
    Ok((pass, detail))
}

// ---------------------------------------------------------------------------
// 2. Oracles

fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &[f64],
    w: &[f64],
    (batch, cin, h, wd): (usize, usize, usize, usize),
    (cout, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; batch * cout * oh * ow];
    for b in 0..batch {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-6))
        .fold(0.0, f64::max)
}

fn kernel_oracles() -> std::result::Result<f64, BoxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for (m, k, n) in [(1, 1, 1), (5, 7, 4), (17, 33, 9), (64, 48, 40)] {
        let a = uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[k, n], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.matmul(av, bv)?;
        worst = worst.max(max_rel(g.value(c).data(), &naive_matmul(a.data(), b.data(), m, k, n)));

        let mut g = Graph::<f32>::new();
        let (av, bv) = (g.constant(a.cast()), g.constant(b.cast()));
        let c = g.matmul(av, bv)?;
        let got: Vec<f64> = g.value(c).data().iter().map(|&v| v as f64).collect();
        let want = naive_matmul(a.data(), b.data(), m, k, n);
        let scale = want.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1.0);
        let err = got.iter().zip(&want).fold(0.0f64, |s, (x, y)| s.max((x - y).abs())) / scale;
        worst = worst.max(err);
    }
    let geoms = [
        ((1, 1, 5, 5), (1, 3, 3), 1, 1),
        ((2, 3, 8, 8), (4, 3, 3), 1, 1),
        ((2, 3, 8, 8), (5, 4, 4), 2, 1),
        ((1, 4, 7, 9), (2, 1, 1), 1, 0),
        ((2, 2, 7, 7), (3, 3, 3), 2, 0),
    ];
    for (xs, ws, stride, pad) in geoms {
        let x = uniform(&mut rng, &[xs.0, xs.1, xs.2, xs.3], -1.0, 1.0);
        let w = uniform(&mut rng, &[ws.0, xs.1, ws.1, ws.2], -1.0, 1.0);
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, stride, pad)?;
        let want = naive_conv(x.data(), w.data(), xs, ws, stride, pad);
        worst = worst.max(max_rel(g.value(y).data(), &want));
    }
    Ok(worst)
}

/// Breadth-first labelling in raster order of first pixel.
fn bfs_labels(mask: &[bool], h: usize, w: usize, eight: bool) -> Vec<u32> {
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (y, x) = ((p / w) as i64, (p % w) as i64);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if (dy == 0 && dx == 0) || (!eight && dy != 0 && dx != 0) {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    labels
}

/// Relabel by order of first appearance so labelings compare as partitions.
fn canonical(labels: &[u32]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l == 0 {
                0
            } else {
                let n = map.len() as u32 + 1;
                *map.entry(l).or_insert(n)
            }
        })
        .collect()
}

fn components_oracle() -> std::result::Result<usize, BoxError> {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut mismatches = 0;
    for i in 0..100 {
        let density = 0.3 + 0.4 * (i as f64 / 100.0);
        let mask: Vec<bool> = (0..32 * 32).map(|_| rng.gen_bool(density)).collect();
        let t = Tensor::from_fn([32, 32], |j| if mask[j] { 1.0f32 } else { 0.0 });
        for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
            let got = connected_components(&t, conn)?;
            let want = bfs_labels(&mask, 32, 32, eight);
            let count = want.iter().copied().max().unwrap_or(0) as usize;
            if canonical(&got.labels) != canonical(&want) || got.count != count {
                mismatches += 1;
            }
        }
    }
    Ok(mismatches)
}

struct One(Param);

impl Module for One {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.0)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.0)
    }
}

fn adam_oracle() -> std::result::Result<f64, BoxError> {
    let grad_at = |t: usize, i: usize| ((t * 7 + i * 3) as f64 * 0.37).sin() * (1.0 + i as f64);
    let mut worst = 0.0f64;
    for (lr, betas) in [(2e-4, [0.9, 0.95]), (2e-4, [0.0, 0.99]), (1e-3, [0.9, 0.999])] {
        let init = [0.3f32, -1.2, 2.0, 0.75];
        let mut module = One(Param::new("w", Tensor::new([4], init.to_vec())?));
        let mut opt = Adam::new(AdamConfig::new(lr, betas), &module);
        let mut w: Vec<f64> = init.iter().map(|&v| v as f64).collect();
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=100 {
            let grads: Vec<f32> = (0..4).map(|i| grad_at(t, i) as f32).collect();
            let mut g = Graph::new();
            let p = module.0.bind(&mut g, true);
            let c = g.constant(Tensor::new([4], grads.clone())?);
            let prod = g.mul(p, c)?;
            let loss = g.sum(prod);
            g.backward(loss)?;
            opt.step(&mut module, &g)?;
            for i in 0..4 {
                let gi = grads[i] as f64;
                m[i] = betas[0] * m[i] + (1.0 - betas[0]) * gi;
                v[i] = betas[1] * v[i] + (1.0 - betas[1]) * gi * gi;
                let mh = m[i] / (1.0 - betas[0].powi(t as i32));
                let vh = v[i] / (1.0 - betas[1].powi(t as i32));
                w[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in module.0.value.data().iter().zip(&w) {
            worst = worst.max(((*a as f64 - b) / b).abs());
        }
    }
    Ok(worst)
}

fn oracles() -> Check {
    let start = Instant::now();
    let kernel = kernel_oracles()?;
    let cc = components_oracle()?;
    let adam = adam_oracle()?;
    let secs = start.elapsed().as_secs_f64();
    let pass = kernel < 1e-5 && cc == 0 && adam < 1e-6 && secs < 60.0;
    Ok((
        pass,
        format!("conv/matmul max rel {kernel:.2e}; components mismatches {cc}/200; adam max rel {adam:.2e}; {secs:.1}s"),
    ))
}

// ---------------------------------------------------------------------------
// 3. Mask-loss unit values

fn scalar_of(f: impl FnOnce(&mut Graph<f64>) -> move_core::Result<Var>) -> std::result::Result<f64, BoxError> {
    let mut g = Graph::new();
    let v = f(&mut g)?;
    Ok(g.value(v).item())
}

fn loss_values() -> Check {
    let t = |shape: &[usize], d: Vec<f64>| Tensor::new(shape.to_vec(), d);
    let mut two = vec![0.0; 100];
    two[0] = 1.0;
    two[1] = 1.0;
    let cases: Vec<(&str, f64, f64)> = vec![
        (
            "L_min empty",
            scalar_of(|g| {
                let m = g.constant(Tensor::zeros([2, 1, 8, 8]));
                loss_min(g, m, 0.05)
            })?,
            0.05,
        ),
        (
            "L_min coverage 0.02",
            scalar_of(|g| {
                let m = g.constant(t(&[1, 1, 10, 10], two)?);
                loss_min(g, m, 0.05)
            })?,
            0.03,
        ),
        (
            "L_min full",
            scalar_of(|g| {
                let m = g.constant(Tensor::ones([2, 1, 8, 8]));
                loss_min(g, m, 0.05)
            })?,
            0.0,
        ),
        (
            "L_bin binary",
            scalar_of(|g| {
                let m = g.constant(t(&[1, 1, 1, 2], vec![0.0, 1.0])?);
                loss_bin(g, m)
            })?,
            0.0,
        ),
        (
            "L_bin all 0.5",
            scalar_of(|g| {
                let m = g.constant(Tensor::full([2, 1, 4, 4], 0.5));
                loss_bin(g, m)
            })?,
            0.5,
        ),
        (
            "L_bin [0.2, 0.9]",
            scalar_of(|g| {
                let m = g.constant(t(&[1, 1, 1, 2], vec![0.2, 0.9])?);
                loss_bin(g, m)
            })?,
            0.15,
        ),
        (
            "union(0.5, 0.5)",
            scalar_of(|g| {
                let a = g.constant(Tensor::scalar(0.5));
                union_mask(g, a, a)
            })?,
            0.75,
        ),
    ];
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, got, want) in &cases {
        worst = worst.max((got - want).abs());
        parts.push(format!("{name} = {got}"));
    }
    Ok((worst < 1e-6, format!("max abs err {worst:.1e}; {}", parts.join(", "))))
}

// ---------------------------------------------------------------------------
// 4. Max-pooled binarization gradient

fn maxpool_asymmetry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = 0;
    let n = 1000;
    for _ in 0..n {
        let p = 8;
        let data: Vec<f32> = loop {
            let d: Vec<f32> = (0..p * p).map(|_| rng.gen_range(0.0..0.5)).collect();
            let max = d.iter().copied().fold(f32::MIN, f32::max);
            if d.iter().filter(|&&v| v == max).count() == 1 {
                break d;
            }
        };
        let argmax = (0..p * p).max_by(|&a, &b| data[a].total_cmp(&data[b])).expect("non-empty");
        let mut g = Graph::<f32>::new();
        let m = g.variable(Tensor::new([1, 1, p, p], data)?);
        let mp = g.pool2d(m, p, p, PoolKind::Max)?;
        let l = loss_bin(&mut g, mp)?;
        g.backward(l)?;
        let grad = g.grad(m).ok_or("no gradient")?;
        let support: Vec<usize> = (0..p * p).filter(|&i| grad[i] != 0.0).collect();
        if support == [argmax] && grad[argmax] > 0.0 {
            ok += 1;
        }
    }
    Ok((ok == n, format!("{ok}/{n} patches with gradient only on the maximum")))
}

// ---------------------------------------------------------------------------
// 5. Union max-pool safety

fn union_safety() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (size, patch) = (64, 8);
    let n = 1000;
    let mut violations = 0usize;
    for _ in 0..n {
        let sharpness = rng.gen_range(0.5..20.0);
        let (cy, cx, r) = (rng.gen_range(8.0..56.0), rng.gen_range(8.0..56.0), rng.gen_range(4.0..24.0));
        let m = Tensor::from_fn([1, 1, size, size], |i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let noise: f32 = rng.gen_range(-1.0..1.0);
            1.0 / (1.0 + (-(sharpness * (r - d) / r + noise)).exp())
        });
        let shift = Shift::new(rng.gen_range(-8..=8), rng.gen_range(-8..=8));
        let mut g = Graph::<f32>::new();
        let mv = g.constant(m);
        let md = shift_map(&mut g, mv, &[shift])?;
        let u = union_mask(&mut g, mv, md)?;
        let hat = downsample_mask(&mut g, u, patch, PoolKind::Max)?;
        let (mvals, dvals, hvals) = (g.value(mv).data(), g.value(md).data(), g.value(hat).data());
        let grid = size / patch;
        for j in 0..grid * grid {
            let (py, px) = (j / grid, j % grid);
            let mut need = 0.0f32;
            for y in py * patch..(py + 1) * patch {
                for x in px * patch..(px + 1) * patch {
                    let i = y * size + x;
                    need = need.max(mvals[i]).max(dvals[i]);
                }
            }
            if hvals[j] < need {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{n} pairs, {violations} cells below the patch maximum")))
}

// ---------------------------------------------------------------------------
// Shared data for the training criteria

struct Fixture {
    _root: tempfile::TempDir,
    dir: PathBuf,
    train: PathBuf,
    val: PathBuf,
    test: PathBuf,
}

fn fixture() -> std::result::Result<Fixture, BoxError> {
    let root = temp_root()?;
    let dir = root.path().to_path_buf();
    let params = GeneratorParams::default();
    let (train, val, test) = (dir.join("train"), dir.join("val"), dir.join("test"));
    gen_dataset(2048, 1, 64, &params, &train)?;
    gen_dataset(256, 2, 64, &params, &val)?;
    gen_dataset(64, 3, 64, &params, &test)?;
    Ok(Fixture {
        _root: root,
        dir,
        train,
        val,
        test,
    })
}

fn base_config(fx: &Fixture, out: &str) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.paths.train_data = fx.train.clone();
    cfg.paths.val_data = fx.val.clone();
    cfg.paths.mae_checkpoint = fx.dir.join("mae").join("mae.ckpt");
    cfg.paths.out_dir = fx.dir.join(out);
    cfg
}

// ---------------------------------------------------------------------------
// 6. Gradient-flow contract

fn small_images(n: usize, seed: u64) -> std::result::Result<Vec<Tensor>, BoxError> {
    (0..n)
        .map(|i| {
            let s = move_core::synthdata::gen_scene(seed + i as u64, 64, &GeneratorParams::default())?;
            Ok(s.image)
        })
        .collect()
}

fn seg_grads_nonzero(seg: &Segmenter, g: &Graph) -> usize {
    seg.params()
        .iter()
        .filter(|p| !p.buffer)
        .filter(|p| p.grad(g).is_some_and(|d| d.iter().any(|&v| v != 0.0)))
        .count()
}

fn gradient_flow() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = TrainConfig::default();
    let mut mae = TinyMae::new(cfg.mae.clone(), &mut rng)?;
    mae.set_frozen(true);
    let seg = Segmenter::new(cfg.segmenter.clone(), &mut rng)?;
    let images = small_images(4, 600)?;
    let cache = FeatureCache::build(&mae, &images)?;
    let inputs = cache.batch(&[0, 1, 2, 3])?;
    let opts = ComposeOptions::default();

    let mut leaks = 0;
    let mut trials = 0;
    for trial in 0..5u64 {
        for branch in ["x_tilde_delta", "x_hat_zero"] {
            let mut brng = ChaCha8Rng::seed_from_u64(trial);
            let mut g = Graph::new();
            let (cs, _) = build_training_batch(&mut g, &inputs, &seg, &mae, &opts, Mode::TRAIN, &mut brng)?;
            let v = if branch == "x_tilde_delta" { cs.x_tilde_delta } else { cs.x_hat_zero };
            let sq = g.square(v);
            let loss = g.sum(sq);
            g.backward(loss)?;
            leaks += seg_grads_nonzero(&seg, &g);
            trials += 1;
        }
    }
    let mut g = Graph::new();
    let mut brng = ChaCha8Rng::seed_from_u64(0);
    let (cs, _) = build_training_batch(&mut g, &inputs, &seg, &mae, &opts, Mode::TRAIN, &mut brng)?;
    let sq = g.square(cs.x_hat_delta);
    let loss = g.sum(sq);
    g.backward(loss)?;
    let live = seg_grads_nonzero(&seg, &g);

    let mut tcfg = TrainConfig::default();
    tcfg.moves.batch_size = 4;
    let before = mae.checksum();
    let mut trainer = MoveTrainer::new(tcfg, mae)?;
    let train_images = small_images(16, 700)?;
    let train_cache = FeatureCache::build(&trainer.mae, &train_images)?;
    for _ in 0..100 {
        trainer.step(&train_cache)?;
    }
    let after = trainer.mae.checksum();
    let pass = leaks == 0 && live > 0 && before == after;
    Ok((
        pass,
        format!(
            "segmenter params with nonzero grad from detached branches: {leaks} over {trials} passes; \
             from x_hat_delta: {live}; MAE checksum unchanged after 100 iters: {}",
            before == after
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7. Inpainting without leakage

fn inpaint_experiment(fx: &Fixture) -> Check {
    let start = Instant::now();
    let mut cfg = base_config(fx, "mae");
    cfg.pretrain.iters = 2000;
    cfg.pretrain.val_every = 1000;
    cfg.pretrain.checkpoint_every = 0;
    let summary = run_pretrain(&cfg, None, &mut |_| {})?;
    let mae = load_mae(&Checkpoint::load(&summary.checkpoint)?)?;
    let val = load_dataset(&fx.val, Some(200))?;
    let images: Vec<Tensor> = val.samples.iter().map(|s| s.image.clone()).collect();
    let (report, cases) = inpaint_compare(&mae, &images, (0.8, 0.95), 7)?;
    let gap = report.relative_gap();

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let patch = mae.cfg.patch;
    let mut identical = 0;
    let probes = 20;
    for case in cases.iter().take(probes) {
        let mut noisy = case.image.clone();
        let w = noisy.shape()[2];
        let gw = w / patch;
        for &j in &case.masked {
            let (py, px) = (j / gw, j % gw);
            for c in 0..3 {
                for y in py * patch..(py + 1) * patch {
                    for x in px * patch..(px + 1) * patch {
                        noisy.data_mut()[(c * w + y) * w + x] = rng.gen_range(0.0..1.0);
                    }
                }
            }
        }
        let again = default_sparse_inpaint(&noisy, &case.masked, &mae)?;
        if again.data() == case.default.data() {
            identical += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = gap <= 0.5 && identical == probes && secs < 300.0;
    Ok((
        pass,
        format!(
            "pretrain val mse {:.4} -> {:.4}; default {:.4}±{:.4}, modified {:.4}±{:.4}, delta {:.4}±{:.4}; \
             relative gap {gap:.3} (limit 0.5); noise substitution identical {identical}/{probes}; {secs:.0}s",
            summary.initial_val_mse.unwrap_or(f64::NAN),
            summary.final_val_mse,
            report.mse_default.mean,
            report.mse_default.std,
            report.mse_modified.mean,
            report.mse_modified.std,
            report.delta.mean,
            report.delta.std,
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8. Supervised capacity check

fn supervised(fx: &Fixture) -> Check {
    let mut cfg = base_config(fx, "supervised");
    cfg.supervised.iters = 1500;
    cfg.moves.val_images = 64;
    let s = run_supervised(&cfg, &mut |_| {})?;
    let iou = s.final_val.mean_iou;
    Ok((
        iou >= 0.9 && s.seconds < 600.0,
        format!("val IoU {iou:.4} (limit 0.90) after {} iters in {:.0}s", s.iters, s.seconds),
    ))
}

// ---------------------------------------------------------------------------
// 9. End-to-end MOVE

fn test_iou(fx: &Fixture, ckpt: &Path) -> std::result::Result<(f64, f64), BoxError> {
    let (seg, mae, cfg) = move_core::train::load_pipeline(ckpt, None)?;
    let test = load_dataset(&fx.test, None)?;
    let images: Vec<Tensor> = test.samples.iter().map(|s| s.image.clone()).collect();
    let gts: Vec<Tensor> = test.samples.iter().map(|s| s.mask.clone()).collect();
    let cache = FeatureCache::build(&mae, &images)?;
    let preds = move_core::train::predict_masks(&seg, &cache)?;
    let r = evaluate(&preds, &gts, &cfg.eval)?;
    Ok((r.mean_iou, r.mean_coverage))
}

fn move_budget() -> u64 {
    std::env::var("MOVE_ACCEPTANCE_ITERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(MOVE_ITERS)
}

const MOVE_ITERS: u64 = 2000;
const ABLATION_ITERS: u64 = 1000;

fn move_config(fx: &Fixture, out: &str, seed: u64, iters: u64) -> TrainConfig {
    let mut cfg = base_config(fx, out);
    cfg.seed = seed;
    cfg.moves.iters = iters;
    cfg.moves.val_every = 250;
    cfg.moves.checkpoint_every = 0;
    cfg.moves.val_images = 64;
    cfg
}

fn end_to_end(fx: &Fixture) -> Check {
    let start = Instant::now();
    let iters = move_budget();
    let mut seeds = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for seed in 0..3u64 {
        let mut cfg = move_config(fx, &format!("move_seed{seed}"), seed, iters);
        cfg.moves.target_iou = Some(0.6);
        let s = run_move(&cfg, None, &mut |_| {})?;
        let (iou, _) = test_iou(fx, &s.best_checkpoint)?;
        seeds.push(format!(
            "seed {seed}: test IoU {iou:.3} (best val {:.3} at iter {}, {:.0}s)",
            s.best_val_iou, s.best_iter, s.seconds
        ));
        best = best.max(iou);
        if best >= 0.5 {
            break;
        }
    }

    let mut cfg = move_config(fx, "move_no_min", 0, ABLATION_ITERS);
    cfg.loss.lambda_min = 0.0;
    let s = run_move(&cfg, None, &mut |_| {})?;
    let (_, no_min_cov) = test_iou(fx, &s.last_checkpoint)?;

    let mut cfg = move_config(fx, "move_no_shift", 0, ABLATION_ITERS);
    cfg.moves.delta = 0.0;
    let s = run_move(&cfg, None, &mut |_| {})?;
    let (no_shift_iou, _) = test_iou(fx, &s.last_checkpoint)?;

    let secs = start.elapsed().as_secs_f64();
    let pass = best >= 0.5 && no_min_cov < 0.01 && no_shift_iou < 0.1;
    Ok((
        pass,
        format!(
            "best-of-seeds test IoU {best:.3} (limit 0.5, budget {iters} iters) [{}]; \
             lambda_min=0 coverage {no_min_cov:.4} (limit 0.01); delta=0 IoU {no_shift_iou:.3} (limit 0.1); {secs:.0}s",
            seeds.join("; ")
        ),
    ))
}

// ---------------------------------------------------------------------------
// 10. Metric identities

fn metric_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gts: Vec<Tensor> = (0..8)
        .map(|i| {
            let s = move_core::synthdata::gen_scene(rng.gen(), 64, &GeneratorParams::default());
            s.map(|s| s.mask).map_err(|e| format!("scene {i}: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    let r = evaluate(&gts, &gts, &EvalConfig::default())?;
    let perfect = r.mean_acc == 1.0 && r.mean_iou == 1.0 && r.max_f_beta == 1.0 && r.corloc == 1.0;

    let mut fb_err = 0.0f64;
    for i in 1..=9 {
        let p = i as f64 / 10.0;
        for beta_sq in [0.09, 0.3, 1.0] {
            fb_err = fb_err.max((f_beta(p, p, beta_sq) - p).abs());
        }
    }
    let a = BBox { x0: 0, y0: 0, x1: 9, y1: 9 };
    let b = BBox { x0: 5, y0: 5, x1: 14, y1: 14 };
    let biou = box_iou(&a, &b);
    let pass = perfect && fb_err < 1e-9 && (biou - 0.142857).abs() < 1e-6;
    Ok((
        pass,
        format!(
            "perfect: acc {} iou {} maxF {} corloc {}%; P=R F-beta max err {fb_err:.1e}; box IoU 25/175 = {biou:.6}",
            r.mean_acc,
            r.mean_iou,
            r.max_f_beta,
            r.corloc * 100.0
        ),
    ))
}

// ---------------------------------------------------------------------------
// 11. Determinism and persistence

fn tensors_equal(a: &Checkpoint, b: &Checkpoint) -> bool {
    a.tensors.len() == b.tensors.len()
        && a.tensors.iter().all(|(name, t)| b.get(name).is_some_and(|u| u.data() == t.data() && u.shape() == t.shape()))
}

fn small_move_config(dir: &Path, out: &str, iters: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = 11;
    cfg.paths.train_data = dir.join("train");
    cfg.paths.val_data = dir.join("val");
    cfg.paths.mae_checkpoint = dir.join("mae.ckpt");
    cfg.paths.out_dir = dir.join(out);
    cfg.moves.iters = iters;
    cfg.moves.batch_size = 4;
    cfg.moves.val_every = 10;
    cfg.moves.checkpoint_every = 20;
    cfg.moves.val_images = 8;
    cfg.moves.train_images = Some(32);
    cfg
}

fn determinism() -> Check {
    let root = temp_root()?;
    let dir = root.path();
    let params = GeneratorParams::default();
    gen_dataset(32, 5, 64, &params, &dir.join("train"))?;
    gen_dataset(32, 5, 64, &params, &dir.join("train_again"))?;
    gen_dataset(8, 6, 64, &params, &dir.join("val"))?;
    let data_same = dataset_checksum(&dir.join("train"))? == dataset_checksum(&dir.join("train_again"))?;

    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mae = TinyMae::new(cfg.mae.clone(), &mut rng)?;
    move_core::train::mae_checkpoint(&mae, &cfg, None).save(&dir.join("mae.ckpt"))?;

    let a = small_move_config(dir, "a", 40);
    let b = small_move_config(dir, "b", 40);
    run_move(&a, None, &mut |_| {})?;
    run_move(&b, None, &mut |_| {})?;
    let csv = |out: &str| fs::read(dir.join(out).join("loss.csv"));
    let runs_same = csv("a")? == csv("b")? && fs::read(dir.join("a/val.csv"))? == fs::read(dir.join("b/val.csv"))?;

    let half = small_move_config(dir, "c", 20);
    run_move(&half, None, &mut |_| {})?;
    let resumed = small_move_config(dir, "c", 40);
    run_move(&resumed, Some(&dir.join("c/last.ckpt")), &mut |_| {})?;
    let resume_same = csv("a")? == csv("c")?
        && tensors_equal(
            &Checkpoint::load(&dir.join("a/last.ckpt"))?,
            &Checkpoint::load(&dir.join("c/last.ckpt"))?,
        );

    Ok((
        data_same && runs_same && resume_same,
        format!(
            "dataset checksum stable: {data_same}; repeated run CSVs identical: {runs_same}; \
             resume at 20 matches straight 40 (CSV + checkpoint tensors): {resume_same}"
        ),
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let fast = std::env::var("MOVE_ACCEPTANCE_FAST").is_ok_and(|v| v != "0");
    let mut outcomes = vec![
        run(1, "gradient suite", Kind::Property, gradient_suite),
        run(2, "oracle equivalence", Kind::Property, oracles),
        run(3, "mask-loss unit values", Kind::Property, loss_values),
        run(4, "max-pooled binarization gradient", Kind::Property, maxpool_asymmetry),
        run(5, "union max-pool safety", Kind::Property, union_safety),
        run(6, "gradient-flow contract", Kind::Property, gradient_flow),
    ];
    if fast {
        outcomes.push(skipped(7, "inpainting without leakage", Kind::Measured));
        outcomes.push(skipped(8, "supervised capacity", Kind::Measured));
        outcomes.push(skipped(9, "end-to-end MOVE", Kind::Measured));
    } else {
        match fixture() {
            Ok(fx) => {
                outcomes.push(run(7, "inpainting without leakage", Kind::Measured, || inpaint_experiment(&fx)));
                outcomes.push(run(8, "supervised capacity", Kind::Measured, || supervised(&fx)));
                outcomes.push(run(9, "end-to-end MOVE", Kind::Measured, || end_to_end(&fx)));
            }
            Err(e) => {
                for (id, name) in [(7, "inpainting without leakage"), (8, "supervised capacity"), (9, "end-to-end MOVE")] {
                    outcomes.push(run(id, name, Kind::Measured, || Err(format!("fixture: {e}").into())));
                }
            }
        }
    }
    outcomes.push(run(10, "metric identities", Kind::Property, metric_identities));
    outcomes.push(run(11, "determinism and persistence", Kind::Property, determinism));

    let count = |pred: &dyn Fn(&Outcome) -> bool| outcomes.iter().filter(|o| pred(o)).count();
    let passed = count(&|o| o.status == Some(true));
    let failed = count(&|o| o.status == Some(false));
    let hard = count(&|o| o.status == Some(false) && o.kind == Kind::Property);
    println!("acceptance: {passed} passed, {failed} failed ({hard} property), {} skipped", outcomes.len() - passed - failed);
    if hard > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

//! Independent f64 reference implementations used as test oracles.
#![allow(dead_code, clippy::needless_range_loop)]

use lyapnet::nn::{LayerSpec, Model};
use lyapnet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Model parameters as f64 vectors, weight then bias per linear layer.
pub fn params_f64(model: &Model) -> Vec<Vec<f64>> {
    model
        .params()
        .iter()
        .map(|p| p.data().iter().map(|&v| v as f64).collect())
        .collect()
}

/// Forward pass of one sample through `specs`, written from the layer
/// definitions without touching the library's kernels.
pub fn reference_forward(
    shape: &[usize],
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    x: &[f64],
) -> Vec<f64> {
    let mut next = 0;
    let (y, _) = run(shape.to_vec(), specs, params, &mut next, x.to_vec());
    assert_eq!(next, params.len(), "every parameter tensor consumed");
    y
}

fn run(
    mut shape: Vec<usize>,
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    next: &mut usize,
    mut x: Vec<f64>,
) -> (Vec<f64>, Vec<usize>) {
    for s in specs {
        match s {
            LayerSpec::Dense { input, output } => {
                let (w, b) = (&params[*next], &params[*next + 1]);
                *next += 2;
                x = (0..*output)
                    .map(|o| b[o] + (0..*input).map(|i| w[o * input + i] * x[i]).sum::<f64>())
                    .collect();
                shape = vec![*output];
            }
            LayerSpec::Conv {
                out_ch,
                in_ch,
                kh,
                kw,
                stride,
                pad,
            } => {
                let (w, b) = (&params[*next], &params[*next + 1]);
                *next += 2;
                let (h, wd) = (shape[1] as isize, shape[2] as isize);
                let oh = ((h + 2 * *pad as isize - *kh as isize) / *stride as isize + 1) as usize;
                let ow = ((wd + 2 * *pad as isize - *kw as isize) / *stride as isize + 1) as usize;
                let mut y = vec![0.0; out_ch * oh * ow];
                for o in 0..*out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b[o];
                            for c in 0..*in_ch {
                                for ky in 0..*kh {
                                    for kx in 0..*kw {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if iy < 0 || ix < 0 || iy >= h || ix >= wd {
                                            continue;
                                        }
                                        let xi = (c as isize * h + iy) * wd + ix;
                                        acc += w[((o * in_ch + c) * kh + ky) * kw + kx]
                                            * x[xi as usize];
                                    }
                                }
                            }
                            y[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![*out_ch, oh, ow];
            }
            LayerSpec::LeakyRelu { slope } => {
                let a = *slope as f64;
                x.iter_mut().for_each(|v| *v = v.max(a * *v));
            }
            LayerSpec::MaxPool { window } | LayerSpec::AvgPool { window } => {
                let max = matches!(s, LayerSpec::MaxPool { .. });
                let (c, h, w) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = (h / window, w / window);
                let mut y = Vec::with_capacity(c * oh * ow);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let vals = (0..*window).flat_map(|dy| {
                                let x = &x;
                                (0..*window).map(move |dx| {
                                    x[(ch * h + oy * window + dy) * w + ox * window + dx]
                                })
                            });
                            y.push(if max {
                                vals.fold(f64::NEG_INFINITY, f64::max)
                            } else {
                                vals.sum::<f64>() / (window * window) as f64
                            });
                        }
                    }
                }
                x = y;
                shape = vec![c, oh, ow];
            }
            LayerSpec::Flatten => shape = vec![shape.iter().product()],
            LayerSpec::Residual { branch } => {
                let (fx, out) = run(shape.clone(), branch, params, next, x.clone());
                assert_eq!(out, shape);
                x.iter_mut().zip(fx).for_each(|(a, f)| *a += f);
            }
        }
    }
    (x, shape)
}

/// Mean softmax cross-entropy in f64.
pub fn reference_loss(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            lse - row[y]
        })
        .sum::<f64>()
        / labels.len() as f64
}

pub fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize], batch: usize) -> Tensor {
    let mut full = vec![batch];
    full.extend_from_slice(shape);
    let n: usize = full.iter().product();
    Tensor::new(
        full,
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> lyapnet::Tensor64 {
    lyapnet::Tensor64::from_fn(vec![rows, cols], |_| rng.random_range(-1.0..1.0))
}

pub fn l2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖b‖, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    l2(&d) / l2(b).max(floor)
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None`
/// when the system is (numerically) singular.
pub fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Best dominance margin over positive diagonal scalings:
/// `max t` subject to `m_ii p_i − Σ_{j≠i} |m_ij| p_j ≥ t`, `Σ p = 1`, `p ≥ 0`,
/// found by enumerating every vertex of the feasible polytope. Returns
/// `None` when some diagonal entry is not positive.
pub fn dominance_margin(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    if (0..n).any(|i| m[i][i] <= 0.0) {
        return None;
    }
    // Variables (p_0..p_{n-1}, t). Inequalities g·z ≥ 0, 2n of them.
    let mut ineq: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        let mut row: Vec<f64> = (0..n)
            .map(|j| if i == j { m[i][i] } else { -m[i][j].abs() })
            .collect();
        row.push(-1.0);
        ineq.push(row);
    }
    for i in 0..n {
        let mut row = vec![0.0; n + 1];
        row[i] = 1.0;
        ineq.push(row);
    }
    let mut sum_row = vec![1.0; n];
    sum_row.push(0.0);
    let mut best = f64::NEG_INFINITY;
    let total = ineq.len();
    // Choose n active inequalities; together with Σp = 1 they pin a vertex.
    let mut pick: Vec<usize> = (0..n).collect();
    loop {
        let mut a: Vec<Vec<f64>> = pick.iter().map(|&k| ineq[k].clone()).collect();
        a.push(sum_row.clone());
        let mut rhs = vec![0.0; n];
        rhs.push(1.0);
        if let Some(z) = solve(a, rhs) {
            let feasible = ineq
                .iter()
                .all(|g| g.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() >= -1e-10);
            if feasible {
                best = best.max(z[n]);
            }
        }
        // Next combination in lexicographic order.
        let mut i = n;
        loop {
            if i == 0 {
                return Some(best);
            }
            i -= 1;
            if pick[i] < total - n + i {
                break;
            }
        }
        pick[i] += 1;
        for j in i + 1..n {
            pick[j] = pick[j - 1] + 1;
        }
    }
}

/// Plain Cholesky factorization; `true` iff every pivot is positive.
pub fn cholesky_succeeds(a: &[Vec<f64>]) -> bool {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = a[i][i] - s;
                if d <= 0.0 {
                    return false;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    true
}

pub fn rows(m: &lyapnet::Tensor64) -> Vec<Vec<f64>> {
    (0..m.shape()[0]).map(|i| m.row(i).to_vec()).collect()
}

const FD_STEP: f64 = 1e-6;

fn loss_at(
    shape: &[usize],
    specs: &[LayerSpec],
    params: &[Vec<f64>],
    x: &[Vec<f64>],
    y: &[usize],
) -> f64 {
    let logits: Vec<Vec<f64>> = x
        .iter()
        .map(|s| reference_forward(shape, specs, params, s))
        .collect();
    reference_loss(&logits, y)
}

/// Relative errors between analytic and central-difference gradients of the
/// mean cross-entropy: one entry per parameter tensor, then the input
/// gradient. Also checks the reference forward against the library.
pub fn gradient_errors(shape: &[usize], specs: &[LayerSpec], seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut model = Model::new(shape.to_vec(), specs, &mut r).unwrap();
    // Nonzero biases so every term of the bias gradient is exercised.
    for p in model.params_mut() {
        if p.rank() == 1 {
            p.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, v)| *v = 0.05 * ((i % 5) as f32 - 2.0));
        }
    }
    let batch = 3;
    let x = random_batch(&mut r, shape, batch);
    let classes = model.output_shape()[0];
    let y: Vec<usize> = (0..batch).map(|i| i % classes).collect();

    let (logits, cache) = model.forward(&x).unwrap();
    let (_, g) = lyapnet::nn::cross_entropy(&logits, &y).unwrap();
    let grads = model.backward(&cache, &g, true).unwrap();

    let params = params_f64(&model);
    let xs: Vec<Vec<f64>> = (0..batch)
        .map(|i| x.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let predicted = model.predict(&x).unwrap();
    for (i, s) in xs.iter().enumerate() {
        let want = reference_forward(shape, specs, &params, s);
        let got: Vec<f64> = predicted.row(i).iter().map(|&v| v as f64).collect();
        assert!(
            rel_err(&got, &want, 1.0) < 1e-5,
            "reference forward disagrees"
        );
    }

    let mut errors = Vec::new();
    for (t, analytic) in grads.params.iter().enumerate() {
        let mut fd = vec![0.0; params[t].len()];
        for j in 0..params[t].len() {
            let mut p = params.clone();
            p[t][j] += FD_STEP;
            let up = loss_at(shape, specs, &p, &xs, &y);
            p[t][j] -= 2.0 * FD_STEP;
            let down = loss_at(shape, specs, &p, &xs, &y);
            fd[j] = (up - down) / (2.0 * FD_STEP);
        }
        let a: Vec<f64> = analytic.data().iter().map(|&v| v as f64).collect();
        errors.push(rel_err(&a, &fd, 1e-3));
    }
    let width = xs[0].len();
    let mut fd = vec![0.0; batch * width];
    for s in 0..batch {
        for j in 0..width {
            let mut xp = xs.clone();
            xp[s][j] += FD_STEP;
            let up = loss_at(shape, specs, &params, &xp, &y);
            xp[s][j] -= 2.0 * FD_STEP;
            let down = loss_at(shape, specs, &params, &xp, &y);
            fd[s * width + j] = (up - down) / (2.0 * FD_STEP);
        }
    }
    let a: Vec<f64> = grads.input.data().iter().map(|&v| v as f64).collect();
    errors.push(rel_err(&a, &fd, 1e-3));
    errors
}

pub fn dense(input: usize, output: usize) -> LayerSpec {
    LayerSpec::Dense { input, output }
}

pub fn conv(out_ch: usize, in_ch: usize, k: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::Conv {
        out_ch,
        in_ch,
        kh: k,
        kw: k,
        stride,
        pad,
    }
}

pub fn leaky() -> LayerSpec {
    LayerSpec::LeakyRelu { slope: 0.1 }
}

/// One small network per layer kind, named.
pub fn gradient_cases() -> Vec<(&'static str, Vec<usize>, Vec<LayerSpec>)> {
    vec![
        ("dense", vec![5], vec![dense(5, 3)]),
        (
            "leaky relu",
            vec![6],
            vec![dense(6, 5), leaky(), dense(5, 3), leaky()],
        ),
        (
            "conv with stride and padding",
            vec![2, 5, 5],
            vec![
                conv(3, 2, 3, 2, 1),
                leaky(),
                LayerSpec::Flatten,
                dense(27, 4),
            ],
        ),
        (
            "max pool",
            vec![1, 6, 6],
            vec![
                conv(2, 1, 3, 1, 1),
                LayerSpec::MaxPool { window: 2 },
                LayerSpec::Flatten,
                dense(18, 3),
            ],
        ),
        (
            "avg pool",
            vec![1, 6, 6],
            vec![
                conv(2, 1, 3, 1, 0),
                LayerSpec::AvgPool { window: 2 },
                LayerSpec::Flatten,
                dense(8, 3),
            ],
        ),
        (
            "residual conv block",
            vec![1, 5, 5],
            vec![
                conv(2, 1, 3, 1, 1),
                leaky(),
                LayerSpec::Residual {
                    branch: vec![conv(2, 2, 3, 1, 1), leaky(), conv(2, 2, 3, 1, 1)],
                },
                leaky(),
                LayerSpec::Flatten,
                dense(50, 3),
            ],
        ),
        (
            "residual dense block",
            vec![4],
            vec![
                dense(4, 6),
                LayerSpec::Residual {
                    branch: vec![dense(6, 6), leaky()],
                },
                dense(6, 3),
            ],
        ),
    ]
}

//! Central finite-difference gradient checking in `f64`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Graph, Tensor, Var};

/// Worst disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error with a small absolute floor so exact zeros compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare reverse-mode gradients of `f` against central differences with step `h`.
///
/// `f` may return a tensor of any shape; it is reduced to a scalar by a dot
/// product with fixed random weights drawn from `seed`, so every output
/// element contributes to the check.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |values: &[Tensor<f64>], weights: &Tensor<f64>| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let wv = g.constant(weights.clone());
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss))
    };

    let out_shape = {
        let mut probe = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| probe.param(t.clone())).collect();
        let out = f(&mut probe, &vars)?;
        probe.shape(out).to_vec()
    };
    let numel: usize = out_shape.iter().product();
    let weights = Tensor::new(&out_shape, (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect())?;

    let (g, vars, loss) = eval(inputs, &weights)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let (gp, _, lp) = eval(&perturbed, &weights)?;
            let plus = gp.value(lp).item();
            perturbed[i].data_mut()[j] = orig - h;
            let (gm, _, lm) = eval(&perturbed, &weights)?;
            let minus = gm.value(lm).item();
            perturbed[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    input: i,
                    index: j,
                    analytic: a,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Result of checking one primitive.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type CaseFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so kinks (ReLU) are never straddled by `±h`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    random_tensor(rng, shape).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Every differentiable primitive with small random inputs drawn from `seed`.
pub fn check_all_primitives(seed: u64, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, CaseFn)> = vec![
        (
            "add",
            vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])],
            |g, v| g.add(v[0], v[1]),
        ),
        (
            "sub",
            vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])],
            |g, v| g.sub(v[0], v[1]),
        ),
        (
            "mul",
            vec![random_tensor(r, &[3, 4]), random_tensor(r, &[3, 4])],
            |g, v| g.mul(v[0], v[1]),
        ),
        ("scale", vec![random_tensor(r, &[5])], |g, v| Ok(g.scale(v[0], -1.7))),
        ("add_scalar", vec![random_tensor(r, &[5])], |g, v| {
            Ok(g.add_scalar(v[0], 0.3))
        }),
        (
            "add_broadcast",
            vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[3, 4])],
            |g, v| g.add_broadcast(v[0], v[1]),
        ),
        (
            "matmul",
            vec![random_tensor(r, &[3, 5]), random_tensor(r, &[5, 2])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        (
            "linear",
            vec![
                random_tensor(r, &[4, 3]),
                random_tensor(r, &[3, 5]),
                random_tensor(r, &[5]),
            ],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        (
            "batch_matmul",
            vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[2, 4, 5])],
            |g, v| g.batch_matmul(v[0], v[1], false),
        ),
        (
            "batch_matmul_nt",
            vec![random_tensor(r, &[2, 3, 4]), random_tensor(r, &[2, 5, 4])],
            |g, v| g.batch_matmul(v[0], v[1], true),
        ),
        (
            "layer_norm",
            vec![
                random_tensor(r, &[4, 6]),
                random_tensor(r, &[6]),
                random_tensor(r, &[6]),
            ],
            |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        ),
        ("softmax", vec![random_tensor(r, &[3, 5])], |g, v| g.softmax(v[0])),
        ("gelu", vec![random_tensor(r, &[10])], |g, v| Ok(g.gelu(v[0]))),
        ("relu", vec![away_from_zero(r, &[10])], |g, v| Ok(g.relu(v[0]))),
        ("reshape", vec![random_tensor(r, &[2, 6])], |g, v| {
            g.reshape(v[0], &[3, 4])
        }),
        (
            "concat_axis0",
            vec![random_tensor(r, &[2, 3]), random_tensor(r, &[1, 3])],
            |g, v| g.concat(&[v[0], v[1]], 0),
        ),
        (
            "concat_axis1",
            vec![random_tensor(r, &[2, 3]), random_tensor(r, &[2, 2])],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        (
            "conv2d_3x3",
            vec![
                random_tensor(r, &[2, 2, 5, 4]),
                random_tensor(r, &[3, 2, 3, 3]),
                random_tensor(r, &[3]),
            ],
            |g, v| g.conv2d(v[0], v[1], Some(v[2])),
        ),
        (
            "conv2d_1x1",
            vec![random_tensor(r, &[1, 3, 3, 3]), random_tensor(r, &[2, 3, 1, 1])],
            |g, v| g.conv2d(v[0], v[1], None),
        ),
        ("upsample_nearest2x", vec![random_tensor(r, &[1, 2, 3, 2])], |g, v| {
            g.upsample_nearest2x(v[0])
        }),
        ("center_crop", vec![random_tensor(r, &[1, 2, 6, 5])], |g, v| {
            g.center_crop(v[0], 3, 2)
        }),
        ("split_heads", vec![random_tensor(r, &[6, 4])], |g, v| {
            g.split_heads(v[0], 2, 3, 2)
        }),
        ("merge_heads", vec![random_tensor(r, &[4, 3, 2])], |g, v| {
            g.merge_heads(v[0], 2, 3, 2)
        }),
        (
            "attention",
            vec![
                random_tensor(r, &[6, 4]),
                random_tensor(r, &[6, 4]),
                random_tensor(r, &[6, 4]),
            ],
            |g, v| g.attention(v[0], v[1], v[2], 2, 3, 2),
        ),
        ("mean_axis1", vec![random_tensor(r, &[2, 3, 4])], |g, v| {
            g.mean_axis1(v[0])
        }),
        ("sum", vec![random_tensor(r, &[3, 3])], |g, v| Ok(g.sum(v[0]))),
        ("mean", vec![random_tensor(r, &[3, 3])], |g, v| Ok(g.mean(v[0]))),
        (
            "mse_loss",
            vec![random_tensor(r, &[2, 5]), random_tensor(r, &[2, 5])],
            |g, v| g.mse_loss(v[0], v[1]),
        ),
        (
            "ssim",
            vec![random_tensor(r, &[1, 2, 12, 13]), random_tensor(r, &[1, 2, 12, 13])],
            |g, v| g.ssim(v[0], v[1], super::SsimParams::with_data_range(2.0)),
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, f))| {
            let report = check_gradients(&inputs, h, seed.wrapping_mul(1000).wrapping_add(i as u64), f)?;
            Ok(PrimitiveCheck { name, report })
        })
        .collect()
}

//! Central finite-difference gradient checks in double precision.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Location of the worst element: (input or parameter name, flat index).
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

impl GradCheck {
    fn record(&mut self, what: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((what.to_string(), idx));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn sample_indices(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        (0..max).map(|i| i * n / max).collect()
    }
}

/// Checks d(loss)/d(input) for every element of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape().to_vec());
        let analytic = grads.wrt(*v).unwrap_or(&zeros).clone();
        for idx in 0..inputs[k].numel() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[idx] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            report.record(&format!("input{k}"), idx, analytic.data()[idx], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

/// Checks parameter gradients, sampling at most `max_per_param` elements of each.
pub fn check_params<F>(store: &ParamStore<f64>, h: f64, max_per_param: usize, f: F) -> Result<GradCheck>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let mut work = store.clone();
    let mut report = GradCheck::default();
    for id in (0..store.len()).map(ParamId) {
        let name = store.get(id).name.clone();
        let n = store.value(id).numel();
        let zeros = Tensor::zeros(store.value(id).shape().to_vec());
        let analytic = grads.param(id).unwrap_or(&zeros).clone();
        for idx in sample_indices(n, max_per_param) {
            let orig = work.value(id).data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + h;
            let up = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                g.value(l).item()
            };
            work.value_mut(id).data_mut()[idx] = orig - h;
            let down = {
                let mut g = Graph::with_params(&work);
                let l = f(&mut g)?;
                g.value(l).item()
            };
            work.value_mut(id).data_mut()[idx] = orig;
            report.record(&name, idx, analytic.data()[idx], (up - down) / (2.0 * h));
        }
    }
    Ok(report)
}

fn random_tensor(shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Projects an op output onto fixed random weights so every output element
/// contributes to the scalar being differentiated.
fn project(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let w = random_tensor(g.shape(v), &mut rng);
    let w = g.input(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

/// Finite-difference checks of every differentiable primitive on small random
/// shapes (each tensor at most 64 elements). Returns one report per case.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(shape, &mut rng);
    let away_from_zero = Tensor::from_fn(vec![4, 5], |i| {
        let m = 0.1 + (i as f64 * 0.37).fract() * 0.9;
        if i % 3 == 0 {
            -m
        } else {
            m
        }
    });
    let mut simplex = r(&[3, 5]).map(|x| x.exp());
    for row in 0..3 {
        let s: f64 = simplex.row(row).iter().sum();
        simplex.row_mut(row).iter_mut().for_each(|x| *x /= s);
    }
    let mask: Vec<bool> = (0..3 * 4).map(|i| (i % 4) <= (i / 4) + 1).collect();
    let ce_weights = vec![1.0, 0.5, 2.0];
    let cases: Vec<Case> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 5])], Box::new(|g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 1) })),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| { let y = g.add(v[0], v[1])?; project(g, y, 2) })),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| { let y = g.sub(v[0], v[1])?; project(g, y, 3) })),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 4) })),
        ("add_bias", vec![r(&[3, 4]), r(&[4])], Box::new(|g, v| { let y = g.add_bias(v[0], v[1])?; project(g, y, 5) })),
        ("scale", vec![r(&[2, 3])], Box::new(|g, v| { let y = g.scale(v[0], -1.7)?; project(g, y, 6) })),
        ("add_scalar", vec![r(&[2, 3])], Box::new(|g, v| { let y = g.add_scalar(v[0], 0.3)?; let y = g.mul(y, y)?; project(g, y, 7) })),
        ("sigmoid", vec![r(&[4, 5])], Box::new(|g, v| { let y = g.sigmoid(v[0])?; project(g, y, 8) })),
        ("tanh", vec![r(&[4, 5])], Box::new(|g, v| { let y = g.tanh(v[0])?; project(g, y, 9) })),
        ("gelu", vec![r(&[4, 5]).map(|x| 3.0 * x)], Box::new(|g, v| { let y = g.gelu(v[0])?; project(g, y, 10) })),
        ("relu", vec![away_from_zero], Box::new(|g, v| { let y = g.relu(v[0])?; project(g, y, 11) })),
        ("softmax_last", vec![r(&[3, 5])], Box::new(|g, v| { let y = g.softmax(v[0], 1)?; project(g, y, 12) })),
        ("softmax_first", vec![r(&[3, 5])], Box::new(|g, v| { let y = g.softmax(v[0], 0)?; project(g, y, 13) })),
        ("log_softmax", vec![r(&[3, 5])], Box::new(|g, v| { let y = g.log_softmax(v[0], 1)?; project(g, y, 14) })),
        ("layer_norm_last", vec![r(&[3, 6])], Box::new(|g, v| { let y = g.layer_norm(v[0], 1, 1e-5)?; project(g, y, 15) })),
        ("layer_norm_first", vec![r(&[4, 3])], Box::new(|g, v| { let y = g.layer_norm(v[0], 0, 1e-5)?; project(g, y, 16) })),
        (
            "conv1d",
            vec![r(&[2 * 5, 3]), r(&[3, 3, 4]), r(&[4])],
            Box::new(|g, v| { let y = g.conv1d(v[0], v[1], Some(v[2]), 5, 2)?; project(g, y, 17) }),
        ),
        (
            "multi_head_attention",
            vec![r(&[2 * 3, 4]), r(&[2 * 4, 4]), r(&[2 * 4, 4])],
            Box::new(|g, v| { let y = g.multi_head_attention(v[0], v[1], v[2], 2, 2, None)?; project(g, y, 18) }),
        ),
        (
            "masked_attention",
            vec![r(&[3, 4]), r(&[4, 4]), r(&[4, 4])],
            Box::new(move |g, v| { let y = g.multi_head_attention(v[0], v[1], v[2], 2, 1, Some(&mask))?; project(g, y, 19) }),
        ),
        ("embedding", vec![r(&[5, 3])], Box::new(|g, v| { let y = g.embedding(v[0], &[4, 0, 4, 2])?; project(g, y, 20) })),
        ("concat_cols", vec![r(&[3, 2]), r(&[3, 4])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; project(g, y, 21) })),
        ("concat_rows", vec![r(&[2, 3]), r(&[1, 3])], Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 0)?; project(g, y, 22) })),
        ("slice_cols", vec![r(&[3, 6])], Box::new(|g, v| { let y = g.slice_cols(v[0], 2, 3)?; project(g, y, 23) })),
        ("broadcast_rows", vec![r(&[2, 3])], Box::new(|g, v| { let y = g.broadcast_rows(v[0], 3)?; project(g, y, 24) })),
        ("reshape", vec![r(&[2, 6])], Box::new(|g, v| { let y = g.reshape(v[0], &[3, 4])?; project(g, y, 25) })),
        ("sum", vec![r(&[2, 3])], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.sum(y) })),
        ("mean", vec![r(&[2, 3])], Box::new(|g, v| { let y = g.mul(v[0], v[0])?; g.mean(y) })),
        ("sum_axis", vec![r(&[2, 3, 2])], Box::new(|g, v| { let y = g.sum_axis(v[0], 1)?; project(g, y, 26) })),
        ("mean_groups", vec![r(&[6, 2])], Box::new(|g, v| { let y = g.mean_groups(v[0], 3)?; project(g, y, 27) })),
        ("mse", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|g, v| g.mse(v[0], v[1]))),
        (
            "cross_entropy",
            vec![r(&[3, 5])],
            Box::new(move |g, v| g.cross_entropy(v[0], &[1, 4, 0], Some(&ce_weights))),
        ),
        (
            "kl_div",
            vec![r(&[3, 5])],
            Box::new(move |g, v| { let lp = g.log_softmax(v[0], 1)?; g.kl_div(lp, &simplex) }),
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (name, inputs, f) in cases {
        out.push((name, check_inputs(&inputs, 1e-3, |g, v| f(g, v))?));
    }
    Ok(out)
}

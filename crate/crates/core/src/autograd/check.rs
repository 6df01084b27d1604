use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::tensor::{NdArray, Result, TensorError};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of `|analytic - numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

// Fixed projection so every output coordinate contributes to the scalar.
const PROJECTION_SEED: u64 = 0x6772_6164_6368_6b;

fn projection(len: usize) -> Option<NdArray<f64>> {
    (len > 1).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ len as u64);
        NdArray::from_fn([len], |_| rng.random_range(-1.0..1.0))
    })
}

fn scalar_output<F>(f: &F, inputs: &[NdArray<f64>], track: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| if track { g.param(x.clone()) } else { g.input(x.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let y = g.value(out);
    let out = match projection(y.len()) {
        Some(r) => {
            let r = r.reshape(y.shape().to_vec())?;
            let m = g.mul_const(out, r)?;
            g.sum(m)?
        }
        None => out,
    };
    Ok((g, vars, out))
}

fn eval_scalar<F>(f: &F, inputs: &[NdArray<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (g, _, out) = scalar_output(f, inputs, false)?;
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(TensorError::NonFinite("grad_check"));
    }
    Ok(v)
}

/// Central-difference check of every coordinate of every input.
///
/// `f` builds the function on a fresh graph; non-scalar outputs are reduced
/// with a fixed random projection.
pub fn grad_check<F>(f: F, inputs: &[NdArray<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|x| (0..x.len()).collect()).collect();
    check_coords(&f, inputs, eps, &coords)
}

/// Like [`grad_check`], but only probes up to `per_input` random coordinates
/// of each input. Used for whole-model checks where the full sweep is too slow.
pub fn grad_check_sampled<F>(
    f: F,
    inputs: &[NdArray<f64>],
    eps: f64,
    per_input: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|x| {
            if x.len() <= per_input {
                (0..x.len()).collect()
            } else {
                index::sample(&mut rng, x.len(), per_input).into_vec()
            }
        })
        .collect();
    check_coords(&f, inputs, eps, &coords)
}

fn check_coords<F>(
    f: &F,
    inputs: &[NdArray<f64>],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) || inputs.iter().any(|x| !x.all_finite()) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            detail: "eps must be positive and inputs finite".into(),
        });
    }
    let (g, vars, out) = scalar_output(f, inputs, true)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe: Vec<NdArray<f64>> = inputs.to_vec();
    for (i, (var, idxs)) in vars.iter().zip(coords).enumerate() {
        let zero = NdArray::zeros(inputs[i].shape().to_vec());
        let analytic = grads.get(*var).unwrap_or(&zero);
        for &j in idxs {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval_scalar(f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval_scalar(f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}

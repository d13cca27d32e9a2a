//! Central finite-difference checks of recorded gradients (64-bit).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub points: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates probed per checked input.
    pub points: usize,
    /// Denominator floor so that vanishing gradients compare absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            points: 5,
            floor: 1e-3,
            seed: 0,
        }
    }
}

fn evaluate<F>(inputs: &[Tensor<f64>], projection: &mut Option<Tensor<f64>>, seed: u64, f: &F) -> Result<(Tape<f64>, Var, f64)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    // Non-scalar outputs are reduced with a fixed random projection.
    let loss = if tape.value(out).len() == 1 {
        out
    } else {
        let proj = projection.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            Tensor::from_fn(tape.shape(out), |_| rng.gen_range(-1.0..1.0))
        });
        let p = tape.constant(proj.clone());
        let prod = tape.mul(out, p)?;
        tape.sum(prod)
    };
    let value = tape.value(loss).item()?;
    Ok((tape, loss, value))
}

/// Compare the tape gradient of `f` with central differences at
/// `opts.points` random coordinates of every input listed in `checked`.
/// `f` receives one leaf per input, in order.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], checked: &[usize], opts: GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut projection = None;
    let (mut tape, loss, _) = evaluate(inputs, &mut projection, opts.seed, &f)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = (0..inputs.len())
        .map(|i| {
            let v = tape.leaf_var(i);
            tape.grad(v).unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst: f64 = 0.0;
    let mut points = 0;
    let mut probe = inputs.to_vec();
    for &i in checked {
        let n = inputs[i].len();
        if n == 0 {
            continue;
        }
        let coords: Vec<usize> = if n <= opts.points {
            (0..n).collect()
        } else {
            (0..opts.points).map(|_| rng.gen_range(0..n)).collect()
        };
        for c in coords {
            let orig = probe[i].data()[c];
            probe[i].data_mut()[c] = orig + opts.step;
            let (_, _, plus) = evaluate(&probe, &mut projection, opts.seed, &f)?;
            probe[i].data_mut()[c] = orig - opts.step;
            let (_, _, minus) = evaluate(&probe, &mut projection, opts.seed, &f)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let rel = (a - numeric).abs() / denom;
            worst = if rel.is_nan() { f64::INFINITY } else { worst.max(rel) };
            points += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        points,
    })
}

impl<T: crate::tensor::Scalar> Tape<T> {
    /// Handle of the `i`-th record (leaves pushed first are `0..n`).
    pub fn leaf_var(&self, i: usize) -> Var {
        assert!(i < self.len(), "record {i} does not exist");
        Var::from(crate::params::ParamId(i))
    }
}

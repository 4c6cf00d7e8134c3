//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation is `rel_step * max(1, |θ|)`.
    pub rel_step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Op whose gradient is sign-flipped during the analytic pass (negative control).
    pub fault: Option<&'static str>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            rel_step: 1e-5,
            tol: 1e-5,
            floor: 1e-4,
            fault: None,
        }
    }
}

impl GradCheckOptions {
    pub fn with_tol(tol: f64) -> Self {
        GradCheckOptions {
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.params.extend(other.params);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` gradients against central differences of `f` around
/// `params`.
pub fn finite_diff_check(
    names: &[String],
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    mut f: impl FnMut(&[Tensor<f64>]) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut reports = Vec::with_capacity(params.len());
    for (p, name) in names.iter().enumerate().take(params.len()) {
        let mut max_err = 0.0f64;
        let mut worst = 0;
        for i in 0..params[p].numel() {
            let theta = params[p].data()[i];
            let h = opts.rel_step * theta.abs().max(1.0);
            work[p].data_mut()[i] = theta + h;
            let up = f(&work)?;
            work[p].data_mut()[i] = theta - h;
            let down = f(&work)?;
            work[p].data_mut()[i] = theta;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[p].data()[i], numeric, opts.floor);
            if err > max_err || err.is_nan() {
                max_err = if err.is_nan() { f64::INFINITY } else { err };
                worst = i;
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            numel: params[p].numel(),
            max_rel_err: max_err,
            worst_index: worst,
            passed: max_err < opts.tol,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params: reports,
    })
}

/// Builds the scalar function with `build` on fresh tapes and checks every
/// input tensor's gradient.
pub fn check_fn<F>(
    names: &[&str],
    params: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_sign_flip(op);
    }
    let vars: Vec<_> = params.iter().map(|p| tape.param(p)).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<_> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    finite_diff_check(
        &names,
        params,
        &analytic,
        |ps| {
            let tape = Tape::inference();
            let vars: Vec<_> = ps.iter().map(|p| tape.constant(p.clone())).collect();
            build(&tape, &vars)?.value().item()
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_passes_tight_tolerance() {
        let x = Tensor::from_f64([4], &[0.3, -1.2, 2.5, 0.0]).unwrap();
        let report = check_fn(
            &["x"],
            &[x],
            |_, v| Ok(v[0].mul(v[0])?.scale(0.5).sum()),
            &GradCheckOptions::with_tol(1e-7),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let x = Tensor::from_f64([3], &[0.3, -1.2, 2.5]).unwrap();
        let opts = GradCheckOptions {
            fault: Some("mul"),
            ..Default::default()
        };
        let report = check_fn(&["x"], &[x], |_, v| Ok(v[0].mul(v[0])?.sum()), &opts).unwrap();
        assert!(!report.passed());
    }

    /// Every registered op is exercised against central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 5], &mut rng);
        let c = random(&[3, 4], &mut rng);
        let w = random(&[3, 5], &mut rng);
        let g = random(&[4], &mut rng);
        let bias = random(&[4], &mut rng);
        let opts = GradCheckOptions::default();

        type Case = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;
        let cases: Vec<(&str, Case)> = vec![
            ("matmul", Box::new(|_, v| v[0].matmul(v[1])?.mul(v[3]).map(|x| x.sum()))),
            ("matmul_t", Box::new(|_, v| Ok(v[0].matmul_t(v[2])?.mul(v[0].matmul_t(v[2])?)?.sum()))),
            ("add_sub_mul", Box::new(|_, v| Ok(v[0].add(v[2])?.mul(v[0].sub(v[2])?)?.mul(v[0])?.sum()))),
            ("relu_gelu", Box::new(|_, v| Ok(v[0].gelu().mul(v[2].scale(3.0).relu())?.sum()))),
            ("transpose", Box::new(|_, v| Ok(v[0].transpose()?.matmul(v[2])?.mul(v[0].transpose()?.matmul(v[2])?)?.sum()))),
            ("softmax", Box::new(|_, v| {
                Ok(v[0].softmax(1)?.mul(v[2])?.sum().add(v[0].softmax(0)?.mul(v[2])?.sum())?)
            })),
            ("log_softmax", Box::new(|_, v| Ok(v[0].log_softmax(1)?.mul(v[2])?.sum()))),
            ("layer_norm", Box::new(|_, v| Ok(v[0].layer_norm(v[4], v[5], 1e-5)?.mul(v[2])?.sum()))),
            ("normalize_rows", Box::new(|_, v| Ok(v[0].normalize_rows(1e-8)?.mul(v[2])?.sum()))),
            ("concat_slice", Box::new(|_, v| {
                let c = Var::concat(&[v[0], v[2]], 1)?;
                Ok(c.slice(1, 2, 7)?.mul(c.slice(1, 1, 6)?)?.sum())
            })),
            ("sum_axis_repeat", Box::new(|_, v| {
                let s = v[0].sum_axis(1)?.reshape([3, 1])?.repeat_axis(1, 4)?;
                Ok(s.mul(v[2])?.mul(v[0])?.sum())
            })),
            ("pick", Box::new(|_, v| Ok(v[0].pick(&[1, 3, 0])?.mul(v[0].pick(&[2, 2, 2])?)?.sum()))),
            ("reshape", Box::new(|_, v| Ok(v[0].reshape([4, 3])?.matmul(v[0])?.sum()))),
        ];
        let params = [a, b, c, w, g, bias];
        let names = ["a", "b", "c", "w", "g", "bias"];
        for (name, build) in cases {
            let report = check_fn(&names, &params, |t, v| build(t, v), &opts).unwrap();
            assert!(report.passed(), "{name}: {report:#?}");
        }
    }
}

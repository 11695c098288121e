//! Central finite-difference check of tape gradients.

use super::{RngState, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Perturbation step.
    pub h: f64,
    /// Check at most this many coordinates, sampled uniformly over all inputs
    /// that require a gradient. `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates where `f` was not finite at a perturbed point.
    pub non_finite: Vec<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.checked > 0 && self.max_rel_error < tol
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(tape.item(out))
}

/// Compares tape gradients of the scalar program `f` against
/// `(f(x + h·e) − f(x − h·e)) / 2h` for every checked coordinate `e` of
/// every input with `requires_grad`.
///
/// `f` is re-run from scratch for each perturbation, so any randomness it
/// uses must be seeded inside the closure.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad())
        .flat_map(|(i, t)| (0..t.numel()).map(move |k| (i, k)))
        .collect();
    if let Some(limit) = opts.max_coords {
        if coords.len() > limit {
            let mut rng = RngState::new(opts.seed);
            rng.shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort_unstable();
        }
    }

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for &(i, k) in &coords {
        let analytic = tape.grad(vars[i]).map_or(0.0, |g| g[k]);
        let x0 = work[i].data()[k];
        work[i].data_mut()[k] = x0 + opts.h;
        let plus = evaluate(&f, &work);
        work[i].data_mut()[k] = x0 - opts.h;
        let minus = evaluate(&f, &work);
        work[i].data_mut()[k] = x0;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => {
                report.non_finite.push((i, k));
                continue;
            }
        };
        let numeric = (plus - minus) / (2.0 * opts.h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((i, k));
        }
    }
    Ok(report)
}


type Program = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One differentiable operation wired into a scalar program for checking.
pub struct OpCheck {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub program: Program,
}

impl OpCheck {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        grad_check(&self.program, &self.inputs, opts)
    }
}

/// `Σ w ⊙ y` with fixed N(0, 1) weights, so no output coordinate gets a
/// structurally zero gradient.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = RngState::derive(seed, 0x5eed);
    let w = Tensor::randn(tape.shape(y).to_vec(), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &'static str, inputs: Vec<Tensor>, f: F) -> OpCheck
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
{
    OpCheck {
        name,
        inputs: inputs.into_iter().map(|t| t.with_requires_grad(true)).collect(),
        program: Box::new(move |t, v| {
            let y = f(t, v)?;
            weighted_sum(t, y, 17)
        }),
    }
}

/// Every differentiable tensor operation, each on N(0, 1) inputs (shifted
/// away from domain boundaries where needed) at shapes no larger than
/// (2, 8, 8, 8).
pub fn registered_op_checks(seed: u64) -> Vec<OpCheck> {
    use super::{Mode, RunningStats, UnaryKind};
    let mut rng = RngState::new(seed);
    let mut randn = |shape: &[usize]| Tensor::randn(shape.to_vec(), &mut rng);
    let positive = |t: Tensor| {
        let data = t.data().iter().map(|v| v.abs() + 0.5).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    };

    let mut checks = Vec::new();
    for kind in UnaryKind::ALL {
        let x = match kind {
            UnaryKind::Log | UnaryKind::Sqrt | UnaryKind::Reciprocal => positive(randn(&[3, 4])),
            _ => randn(&[3, 4]),
        };
        checks.push(check(kind.name(), vec![x], move |t, v| t.unary(kind, v[0])));
    }
    let (a, b) = (randn(&[2, 3, 4]), randn(&[2, 3, 4]));
    checks.push(check("add", vec![a.clone(), b.clone()], |t, v| t.add(v[0], v[1])));
    checks.push(check("sub", vec![a.clone(), b.clone()], |t, v| t.sub(v[0], v[1])));
    checks.push(check("mul", vec![a.clone(), b.clone()], |t, v| t.mul(v[0], v[1])));
    checks.push(check("div", vec![a.clone(), positive(b)], |t, v| t.div(v[0], v[1])));
    let small = randn(&[2, 1, 4]);
    checks.push(check("add_broadcast", vec![a.clone(), small.clone()], |t, v| {
        t.add(v[0], v[1])
    }));
    checks.push(check("mul_broadcast", vec![a.clone(), small.clone()], |t, v| {
        t.mul(v[0], v[1])
    }));
    checks.push(check("div_broadcast", vec![a.clone(), positive(small)], |t, v| {
        t.div(v[0], v[1])
    }));
    checks.push(check("scale", vec![a.clone()], |t, v| Ok(t.scale(v[0], -1.7))));
    checks.push(check("add_scalar", vec![a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3))));
    checks.push(check("clamp", vec![a.clone()], |t, v| Ok(t.clamp(v[0], -0.5, 0.5))));
    checks.push(check("smooth_l1", vec![a.clone()], |t, v| t.smooth_l1_elementwise(v[0], 0.8)));
    let maps = randn(&[2, 3, 4, 5]);
    checks.push(check("softmax", vec![maps.clone()], |t, v| t.softmax(v[0], &[2, 3])));
    checks.push(check("moments_mean", vec![maps.clone()], |t, v| {
        Ok(t.reduce_moments(v[0])?.0)
    }));
    checks.push(check("moments_var", vec![maps.clone()], |t, v| {
        Ok(t.reduce_moments(v[0])?.1)
    }));
    checks.push(check("sum", vec![a.clone()], |t, v| Ok(t.sum(v[0]))));
    checks.push(check("mean", vec![a.clone()], |t, v| Ok(t.mean(v[0]))));
    let other = randn(&[2, 2, 4, 5]);
    checks.push(check("concat", vec![maps.clone(), other], |t, v| {
        t.concat(&[v[0], v[1]], 1)
    }));
    checks.push(check("reshape", vec![maps.clone()], |t, v| t.reshape(v[0], &[6, 20])));
    checks.push(check("narrow", vec![maps.clone()], |t, v| t.narrow(v[0], 3, 1, 3)));
    checks.push(check("expand", vec![randn(&[2, 1, 1, 5])], |t, v| {
        t.expand(v[0], &[2, 3, 4, 5])
    }));
    checks.push(check("mean_pool2d", vec![randn(&[2, 3, 8, 8])], |t, v| {
        t.mean_pool2d(v[0], (3, 2))
    }));
    checks.push(check("dropout", vec![maps.clone()], |t, v| {
        let mut rng = RngState::new(99);
        t.dropout(v[0], 0.3, Mode::Train, &mut rng)
    }));
    checks.push(check("linear", vec![randn(&[3, 5]), randn(&[4, 5]), randn(&[4])], |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    }));
    for (name, k, stride, pad) in [
        ("conv2d_3x3_s1", 3, 1, 1),
        ("conv2d_3x3_s2", 3, 2, 1),
        ("conv2d_1x1", 1, 1, 0),
    ] {
        let inputs = vec![randn(&[2, 3, 6, 6]), randn(&[4, 3, k, k]), randn(&[4])];
        checks.push(check(name, inputs, move |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), stride, pad)
        }));
    }
    for (name, mode) in [("batchnorm_train", Mode::Train), ("batchnorm_eval", Mode::Eval)] {
        let inputs = vec![maps.clone(), randn(&[3]), randn(&[3])];
        checks.push(check(name, inputs, move |t, v| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.2, -0.1, 0.4];
            stats.var = vec![0.8, 1.3, 0.6];
            t.batchnorm2d(v[0], v[1], v[2], &mut stats, mode, super::DEFAULT_BN_EPS)
        }));
    }
    checks.push(check("pairwise_abs_mean", vec![randn(&[3, 9])], |t, v| {
        t.pairwise_abs_mean(v[0])
    }));
    checks
}

//! Central-difference validation of analytic gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn finite(v: f64, at: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("function value not finite at {at}")))
    }
}

/// Worst relative error between `gradient(point)` and central differences of
/// `value`, over the listed components (all components when `components` is
/// `None`).
///
/// The relative error of a component is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check_components<V, G>(
    value: V,
    gradient: G,
    point: &Tensor,
    step: f64,
    components: Option<&[usize]>,
) -> Result<f64>
where
    V: FnMut(&Tensor) -> Result<f64>,
    G: FnOnce(&Tensor) -> Result<Tensor>,
{
    check_with_steps(value, gradient, point, &[step], components, false)
}

/// Gradient check for piecewise-smooth functions (ReLU, bilinear sampling).
///
/// Each component keeps its best agreement over `steps` and over the central,
/// forward and backward quotients. A kink inside `[x - h, x + h]` corrupts the
/// central quotient, but the one-sided quotient away from it stays exact; a
/// wrong gradient disagrees with all of them.
pub fn grad_check_refined<V, G>(value: V, gradient: G, point: &Tensor, steps: &[f64]) -> Result<f64>
where
    V: FnMut(&Tensor) -> Result<f64>,
    G: FnOnce(&Tensor) -> Result<Tensor>,
{
    check_with_steps(value, gradient, point, steps, None, true)
}

fn check_with_steps<V, G>(
    mut value: V,
    gradient: G,
    point: &Tensor,
    steps: &[f64],
    components: Option<&[usize]>,
    one_sided: bool,
) -> Result<f64>
where
    V: FnMut(&Tensor) -> Result<f64>,
    G: FnOnce(&Tensor) -> Result<Tensor>,
{
    if steps.is_empty() {
        return Err(Error::Parameter("at least one step is required".into()));
    }
    if let Some(s) = steps.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Parameter(format!("step must be > 0, got {s}")));
    }
    let f0 = finite(value(point)?, "the base point")?;
    let analytic = gradient(point)?;
    point.same_shape(&analytic)?;

    let all: Vec<usize>;
    let comps = match components {
        Some(c) => c,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let mut probe = point.clone();
    let mut worst = 0.0_f64;
    for &i in comps {
        let x0 = probe.data()[i];
        let a = analytic.data()[i];
        let mut best = f64::INFINITY;
        for &step in steps {
            probe.data_mut()[i] = x0 + step;
            let fp = finite(value(&probe)?, "a forward probe")?;
            probe.data_mut()[i] = x0 - step;
            let fm = finite(value(&probe)?, "a backward probe")?;
            let central = (fp - fm) / (2.0 * step);
            let sided = [(fp - f0) / step, (f0 - fm) / step];
            let candidates = if one_sided { &sided[..] } else { &[][..] };
            for &numeric in std::iter::once(&central).chain(candidates) {
                let denom = a.abs().max(numeric.abs()).max(1e-12);
                best = best.min((a - numeric).abs() / denom);
            }
        }
        probe.data_mut()[i] = x0;
        worst = worst.max(best);
    }
    Ok(worst)
}

/// [`grad_check_components`] over every component.
pub fn grad_check<V, G>(value: V, gradient: G, point: &Tensor, step: f64) -> Result<f64>
where
    V: FnMut(&Tensor) -> Result<f64>,
    G: FnOnce(&Tensor) -> Result<Tensor>,
{
    grad_check_components(value, gradient, point, step, None)
}

/// Evaluates a scalar function built on a fresh tape, returning its value and
/// the gradient with respect to the single leaf.
pub fn tape_value_and_grad<F>(build: &F, point: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = build(&mut tape, x)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Dimension("grad_check needs a scalar output".into()));
    }
    let value = tape.value(out).data()[0];
    let mut grads = tape.backward(out, Tensor::scalar(1.0))?;
    let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(point.dims()));
    Ok((value, g))
}

/// Gradient check of a tape-built scalar function.
pub fn grad_check_tape<F>(build: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check(
        |p| tape_value_and_grad(&build, p).map(|(v, _)| v),
        |p| tape_value_and_grad(&build, p).map(|(_, g)| g),
        point,
        step,
    )
}

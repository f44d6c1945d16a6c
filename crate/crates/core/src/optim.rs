//! Adam and the constrained image-optimization loop shared by embedding and
//! every attack.

use crate::error::{dim_err, param_err, Error, Result};
use crate::percept::{Constraint, ConstraintSpec, ImagePlane};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction over an image-shaped parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    learning_rate: f64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            learning_rate,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the moments with `gradient` and returns the update to add to
    /// the parameter (`-lr * m_hat / (sqrt(v_hat) + eps)`).
    pub fn step(&mut self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.len() != self.first.len() {
            return dim_err(format!(
                "gradient of length {} for Adam state of length {}",
                gradient.len(),
                self.first.len()
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        Ok(gradient
            .iter()
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                -lr * m_hat / (v_hat.sqrt() + ADAM_EPS)
            })
            .collect())
    }
}

/// Loop length, step size, loss weighting and the admissible set.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationPlan {
    pub iterations: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub constraint: ConstraintSpec,
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return param_err("iteration count must be >= 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return param_err(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return param_err(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        Ok(())
    }
}

/// A differentiable loss over images. `iteration` lets stochastic objectives
/// (EoT) draw their randomness in a replayable order.
pub trait Objective {
    fn value_and_grad(&mut self, x: &ImagePlane, iteration: usize) -> Result<(f64, ImagePlane)>;
}

impl<F> Objective for F
where
    F: FnMut(&ImagePlane, usize) -> Result<(f64, ImagePlane)>,
{
    fn value_and_grad(&mut self, x: &ImagePlane, iteration: usize) -> Result<(f64, ImagePlane)> {
        self(x, iteration)
    }
}

/// Output of [`optimize_image_traced`].
#[derive(Clone, Debug)]
pub struct Optimized {
    pub image: ImagePlane,
    /// Objective value at each iteration, evaluated on the projected iterate.
    pub losses: Vec<f64>,
}

/// Runs the constrained loop and returns the quantized result.
pub fn optimize_image(
    start: &ImagePlane,
    reference: &ImagePlane,
    objective: &mut dyn Objective,
    plan: &IterationPlan,
) -> Result<ImagePlane> {
    optimize_image_traced(start, reference, objective, plan).map(|o| o.image)
}

/// Each iteration projects the running iterate onto the admissible set
/// around `reference`, evaluates the objective and its gradient there, and
/// applies the Adam update to the running iterate. The iterate itself stays
/// unprojected, so repeated attenuation does not compound. After the loop the
/// iterate is projected once more and quantized.
pub fn optimize_image_traced(
    start: &ImagePlane,
    reference: &ImagePlane,
    objective: &mut dyn Objective,
    plan: &IterationPlan,
) -> Result<Optimized> {
    plan.validate()?;
    start.same_shape(reference)?;
    let constraint = Constraint::new(reference.clone(), plan.constraint)?;
    let mut iterate = start.clone();
    let mut adam = AdamState::new(start.data().len(), plan.learning_rate);
    let mut losses = Vec::with_capacity(plan.iterations);

    for it in 0..plan.iterations {
        let x = constraint.project(&iterate)?;
        let (loss, grad) = objective.value_and_grad(&x, it)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss} at iteration {it}")));
        }
        grad.same_shape(&x)?;
        if grad.data().iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient at iteration {it}"
            )));
        }
        losses.push(loss);
        let update = adam.step(grad.data())?;
        iterate
            .data_mut()
            .iter_mut()
            .zip(&update)
            .for_each(|(v, u)| *v += u);
    }
    Ok(Optimized {
        image: constraint.project_quantized(&iterate)?,
        losses,
    })
}

/// `mse(x, reference)` and its gradient `2 (x - reference) / n`.
pub fn mse_with_grad(x: &ImagePlane, reference: &ImagePlane) -> Result<(f64, ImagePlane)> {
    let diff = x.difference(reference)?;
    let n = diff.data().len() as f64;
    let value = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    let mut grad = diff;
    grad.data_mut().iter_mut().for_each(|d| *d *= 2.0 / n);
    Ok((value, grad))
}

/// `a + s * b` for equally shaped images.
pub(crate) fn add_scaled(a: &mut ImagePlane, s: f64, b: &ImagePlane) {
    a.data_mut()
        .iter_mut()
        .zip(b.data())
        .for_each(|(x, y)| *x += s * y);
}

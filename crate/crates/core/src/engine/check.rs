//! Central finite-difference gradient checking.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{EngineError, Graph, Tensor, Var};

/// Which coordinates [`finite_diff_check`] probes.
#[derive(Clone, Copy, Debug)]
pub enum CoordSample {
    All,
    /// A seeded random subset of `count` coordinates.
    Random {
        count: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over probed coordinates of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (parameter index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

/// Compares the engine's gradient of `f` against central differences
/// `(f(p + eps e) - f(p - eps e)) / (2 eps)`.
///
/// `f` builds a scalar loss from one graph leaf per entry of `params`; it is
/// called once with differentiable leaves and then twice per probed
/// coordinate, so it must be deterministic.
pub fn finite_diff_check<F>(
    mut f: F,
    params: &[Tensor],
    epsilon: f64,
    coords: CoordSample,
) -> Result<GradCheck, EngineError>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, EngineError>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(EngineError::InvalidArgument(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).item().is_finite() {
        return Err(EngineError::NonFinite { what: "unperturbed loss".into() });
    }
    let mut grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars.iter().zip(params).map(|(&v, p)| grads.take_or_zeros(v, p.shape())).collect();
    drop(g);

    let mut all: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(pi, p)| (0..p.len()).map(move |ei| (pi, ei))).collect();
    if let CoordSample::Random { count, seed } = coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        all.shuffle(&mut rng);
        all.truncate(count);
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut eval = |work: &[Tensor]| -> Result<f64, EngineError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = work.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, worst: None };
    for &(pi, ei) in &all {
        let original = work[pi].data()[ei];
        work[pi].data_mut()[ei] = original + epsilon;
        let plus = eval(&work)?;
        work[pi].data_mut()[ei] = original - epsilon;
        let minus = eval(&work)?;
        work[pi].data_mut()[ei] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(EngineError::NonFinite { what: format!("parameter {pi} element {ei}") });
        }
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic[pi].data()[ei] - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((pi, ei));
            }
        }
        report.checked += 1;
    }
    Ok(report)
}

//! Levenberg–Marquardt over the corrected normal equations, a steepest-descent
//! baseline, and a finite-difference gradient check.

use std::fmt;
use std::time::Instant;

use thiserror::Error;

use crate::energy::{
    self, assemble_of, central_difference, energy_of, gradient_of, EnergyError, Problem,
    DAMPING_DIAG_MAX, DAMPING_DIAG_MIN,
};
use crate::image::Image;
use crate::sparse;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizeError {
    #[error(transparent)]
    Energy(#[from] EnergyError),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
}

/// Levenberg–Marquardt settings.
///
/// Damping starts at `initial_damping`. After an accepted step with gain ratio
/// `q` it is multiplied by `max(1/3, 1 - (2q - 1)^3)`; after a rejection it is
/// multiplied by `nu`, which starts at `damping_increase` and doubles on each
/// consecutive rejection.
#[derive(Clone, Debug, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the objective by less than this
    /// fraction of its previous value.
    pub function_tolerance: f64,
    /// Stop when `||grad f||_inf` falls below this fraction of its initial value.
    pub gradient_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub min_damping: f64,
    pub max_damping: f64,
    /// Relative residual required of each linear solve.
    pub linear_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            function_tolerance: 1e-6,
            gradient_tolerance: 1e-10,
            initial_damping: 1e-4,
            damping_increase: 2.0,
            min_damping: 1e-32,
            max_damping: 1e32,
            linear_tolerance: 1e-9,
        }
    }
}

impl LmOptions {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |what: &str| Err(OptimizeError::InvalidOptions(what.to_string()));
        if self.max_iterations < 1 {
            return bad("max_iterations must be at least 1");
        }
        for (name, v) in [
            ("function_tolerance", self.function_tolerance),
            ("gradient_tolerance", self.gradient_tolerance),
            ("initial_damping", self.initial_damping),
            ("min_damping", self.min_damping),
            ("max_damping", self.max_damping),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.damping_increase > 1.0 && self.damping_increase.is_finite()) {
            return bad("damping_increase must exceed 1");
        }
        if self.max_damping < self.min_damping {
            return bad("max_damping must be at least min_damping");
        }
        if !(self.linear_tolerance > 0.0 && self.linear_tolerance < 1.0) {
            return bad("linear_tolerance must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    FunctionTolerance,
    GradientTolerance,
    MaxIterations,
    NumericalFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::FunctionTolerance => "function_tol",
            Termination::GradientTolerance => "gradient_tol",
            Termination::MaxIterations => "max_iter",
            Termination::NumericalFailure => "numerical_failure",
        })
    }
}

/// One row of the solver trace. Row 0 is the starting point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Objective at the trial point (the current point for row 0).
    pub objective: f64,
    pub step_norm: f64,
    /// LM damping used for the trial; step length for gradient descent.
    pub damping: f64,
    pub accepted: bool,
    pub cumulative_seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub iterations: Vec<IterationRecord>,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub initial_gradient_norm: f64,
    pub final_gradient_norm: f64,
    pub termination: Termination,
    pub wall_seconds: f64,
}

impl SolveReport {
    /// Accepted steps, not counting the starting row.
    pub fn accepted_steps(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.accepted && r.iteration > 0)
            .count()
    }

    /// Objectives of the start point and every accepted step.
    pub fn accepted_objectives(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .filter(|r| r.accepted)
            .map(|r| r.objective)
            .collect()
    }

    pub const CSV_HEADER: &'static str = "iter,objective,step_norm,damping,accepted,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.iterations {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{},{:.6}\n",
                r.iteration,
                r.objective,
                r.step_norm,
                r.damping,
                u8::from(r.accepted),
                r.cumulative_seconds
            ));
        }
        out
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn check_start(problem: &Problem, x0: &Image) -> Result<(), OptimizeError> {
    if !problem.noisy().same_shape(x0) {
        // Reuse the energy module's dimension error.
        energy::energy(problem, x0)?;
    }
    Ok(())
}

/// Minimizes the energy from `x0` with Levenberg–Marquardt.
///
/// Each outer iteration assembles `J~^T J~` and `g` once; rejected steps only
/// change the damping. A trial point is accepted iff it lowers the objective.
pub fn lm_denoise(
    problem: &Problem,
    x0: &Image,
    opts: &LmOptions,
) -> Result<(Image, SolveReport), OptimizeError> {
    opts.validate()?;
    check_start(problem, x0)?;
    let start = Instant::now();
    let n = x0.len();
    let mut x = x0.data().to_vec();
    let mut f = energy_of(problem, &x).total;
    let initial_objective = f;
    let mut records = vec![IterationRecord {
        iteration: 0,
        objective: f,
        step_norm: 0.0,
        damping: opts.initial_damping,
        accepted: true,
        cumulative_seconds: 0.0,
    }];

    let mut damping = opts.initial_damping;
    let mut nu = opts.damping_increase;
    let mut gram: Option<sparse::GridSystem> = None;
    let mut initial_gradient_norm = None;
    let mut termination = Termination::MaxIterations;
    let mut trial = vec![0.0; n];

    if !f.is_finite() {
        termination = Termination::NumericalFailure;
    }

    for iteration in 1..=opts.max_iterations {
        if termination == Termination::NumericalFailure {
            break;
        }
        if gram.is_none() {
            let sys = match assemble_of(problem, &x) {
                Ok(s) => s,
                Err(_) => {
                    termination = Termination::NumericalFailure;
                    break;
                }
            };
            let grad_norm = 2.0 * max_abs(sys.rhs());
            let g0 = *initial_gradient_norm.get_or_insert(grad_norm);
            if grad_norm <= opts.gradient_tolerance * g0 {
                termination = Termination::GradientTolerance;
                break;
            }
            gram = Some(sys);
        }
        let gn = gram.as_ref().expect("assembled above");
        let damped = gn.damped(damping, DAMPING_DIAG_MIN, DAMPING_DIAG_MAX);

        let outcome = sparse::solve_spd(&damped, opts.linear_tolerance);
        let step = match outcome {
            Ok(o) => o.solution,
            Err(_) => {
                records.push(IterationRecord {
                    iteration,
                    objective: f64::NAN,
                    step_norm: 0.0,
                    damping,
                    accepted: false,
                    cumulative_seconds: start.elapsed().as_secs_f64(),
                });
                damping *= nu;
                nu *= 2.0;
                if damping > opts.max_damping {
                    termination = Termination::NumericalFailure;
                    break;
                }
                continue;
            }
        };

        for ((t, xi), d) in trial.iter_mut().zip(&x).zip(&step) {
            *t = xi + d;
        }
        let f_trial = energy_of(problem, &trial).total;
        let step_norm = step.iter().map(|d| d * d).sum::<f64>().sqrt();

        // Decrease predicted by the Gauss-Newton model of f = sum rho:
        // 2 (J~^T J~ + lambda D) delta = -2 g  gives  delta^T (lambda D delta - g).
        let predicted: f64 = step
            .iter()
            .zip(gn.diagonal())
            .zip(gn.rhs())
            .map(|((d, diag), g)| {
                d * (damping * diag.clamp(DAMPING_DIAG_MIN, DAMPING_DIAG_MAX) * d - g)
            })
            .sum();

        let accepted = f_trial.is_finite() && f_trial < f;
        records.push(IterationRecord {
            iteration,
            objective: f_trial,
            step_norm,
            damping,
            accepted,
            cumulative_seconds: start.elapsed().as_secs_f64(),
        });

        if accepted {
            let gain = (f - f_trial) / predicted;
            let factor = if gain.is_finite() {
                (1.0 - (2.0 * gain - 1.0).powi(3)).max(1.0 / 3.0)
            } else {
                1.0 / 3.0
            };
            damping = (damping * factor).max(opts.min_damping);
            nu = opts.damping_increase;
            let f_prev = f;
            f = f_trial;
            std::mem::swap(&mut x, &mut trial);
            gram = None;
            if f_prev - f <= opts.function_tolerance * f_prev.abs() {
                termination = Termination::FunctionTolerance;
                break;
            }
        } else {
            if predicted.abs() <= opts.function_tolerance * f.abs() {
                termination = Termination::FunctionTolerance;
                break;
            }
            damping *= nu;
            nu *= 2.0;
            if damping > opts.max_damping {
                termination = Termination::NumericalFailure;
                break;
            }
        }
    }

    let final_gradient_norm = max_abs(&gradient_of(problem, &x));
    let report = SolveReport {
        iterations: records,
        initial_objective,
        final_objective: f,
        initial_gradient_norm: initial_gradient_norm.unwrap_or(final_gradient_norm),
        final_gradient_norm,
        termination,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let image = x0.with_data(x).map_err(EnergyError::from)?;
    Ok((image, report))
}

/// Armijo backtracking parameters for the steepest-descent baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BacktrackingRule {
    pub initial_step: f64,
    pub shrink: f64,
    /// Sufficient-decrease constant `c` in `f(x - t g) <= f(x) - c t ||g||^2`.
    pub armijo: f64,
    pub max_backtracks: usize,
    pub gradient_tolerance: f64,
}

impl Default for BacktrackingRule {
    fn default() -> Self {
        Self {
            initial_step: 1.0,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 40,
            gradient_tolerance: 1e-10,
        }
    }
}

/// Steepest descent with Armijo backtracking. Each iteration restarts from
/// `initial_step`. The trace's damping column holds the accepted step length.
pub fn gd_denoise(
    problem: &Problem,
    x0: &Image,
    rule: &BacktrackingRule,
    max_iterations: usize,
) -> Result<(Image, SolveReport), OptimizeError> {
    if !(rule.initial_step > 0.0 && rule.shrink > 0.0 && rule.shrink < 1.0 && rule.armijo > 0.0) {
        return Err(OptimizeError::InvalidOptions(
            "backtracking needs initial_step > 0, shrink in (0, 1), armijo > 0".into(),
        ));
    }
    check_start(problem, x0)?;
    let start = Instant::now();
    let mut x = x0.data().to_vec();
    let mut f = energy_of(problem, &x).total;
    let initial_objective = f;
    let mut records = vec![IterationRecord {
        iteration: 0,
        objective: f,
        step_norm: 0.0,
        damping: 0.0,
        accepted: true,
        cumulative_seconds: 0.0,
    }];
    let mut termination = if f.is_finite() {
        Termination::MaxIterations
    } else {
        Termination::NumericalFailure
    };
    let mut initial_gradient_norm = None;
    let mut trial = vec![0.0; x.len()];

    for iteration in 1..=max_iterations {
        if termination == Termination::NumericalFailure {
            break;
        }
        let grad = gradient_of(problem, &x);
        let grad_norm = max_abs(&grad);
        if !grad_norm.is_finite() {
            termination = Termination::NumericalFailure;
            break;
        }
        let g0 = *initial_gradient_norm.get_or_insert(grad_norm);
        if grad_norm <= rule.gradient_tolerance * g0 {
            termination = Termination::GradientTolerance;
            break;
        }
        let gg: f64 = grad.iter().map(|g| g * g).sum();
        let mut t = rule.initial_step;
        let mut accepted = None;
        for _ in 0..=rule.max_backtracks {
            for ((y, xi), g) in trial.iter_mut().zip(&x).zip(&grad) {
                *y = xi - t * g;
            }
            let f_trial = energy_of(problem, &trial).total;
            if f_trial.is_finite() && f_trial < f && f_trial <= f - rule.armijo * t * gg {
                accepted = Some(f_trial);
                break;
            }
            t *= rule.shrink;
        }
        match accepted {
            Some(f_trial) => {
                records.push(IterationRecord {
                    iteration,
                    objective: f_trial,
                    step_norm: t * gg.sqrt(),
                    damping: t,
                    accepted: true,
                    cumulative_seconds: start.elapsed().as_secs_f64(),
                });
                f = f_trial;
                std::mem::swap(&mut x, &mut trial);
            }
            None => {
                termination = Termination::FunctionTolerance;
                break;
            }
        }
    }

    let final_gradient_norm = max_abs(&gradient_of(problem, &x));
    let report = SolveReport {
        iterations: records,
        initial_objective,
        final_objective: f,
        initial_gradient_norm: initial_gradient_norm.unwrap_or(final_gradient_norm),
        final_gradient_norm,
        termination,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let image = x0.with_data(x).map_err(EnergyError::from)?;
    Ok((image, report))
}

/// Worst relative disagreement between `analytic` and central differences of
/// the energy with step `h`, `max_i |a - fd| / max(|a|, |fd|, 1e-8)`.
pub fn compare_gradient(
    problem: &Problem,
    x: &Image,
    h: f64,
    analytic: &[f64],
) -> Result<f64, OptimizeError> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(OptimizeError::InvalidOptions(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    check_start(problem, x)?;
    if analytic.len() != x.len() {
        return Err(OptimizeError::InvalidOptions(format!(
            "gradient has {} entries for {} pixels",
            analytic.len(),
            x.len()
        )));
    }
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let fd = central_difference(problem, x.data(), i, h);
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Checks the analytic gradient at `x` against central differences.
pub fn check_gradient(problem: &Problem, x: &Image, h: f64) -> Result<f64, OptimizeError> {
    let analytic = energy::gradient(problem, x)?;
    compare_gradient(problem, x, h, &analytic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, FoeModel};

    fn ramp(w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|i| ((i * 37) % 101) as f64).collect()).unwrap()
    }

    #[test]
    fn options_validation() {
        assert!(LmOptions::default().validate().is_ok());
        let mut o = LmOptions::default();
        o.max_iterations = 0;
        assert!(o.validate().is_err());
        let mut o = LmOptions::default();
        o.min_damping = 1.0;
        o.max_damping = 0.5;
        assert!(o.validate().is_err());
        let mut o = LmOptions::default();
        o.linear_tolerance = 1.0;
        assert!(o.validate().is_err());
        let mut o = LmOptions::default();
        o.damping_increase = 1.0;
        assert!(o.validate().is_err());
    }

    #[test]
    fn start_at_minimum_stops_on_gradient() {
        let u = ramp(5, 4);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), 3.0).unwrap();
        let (x, report) = lm_denoise(&p, &u, &LmOptions::default()).unwrap();
        assert_eq!(x, u);
        assert_eq!(report.termination, Termination::GradientTolerance);
        assert_eq!(report.final_objective, 0.0);
    }

    #[test]
    fn quadratic_reaches_observation() {
        let u = ramp(6, 5);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), 20.0).unwrap();
        let x0 = u.map(|v| v + 50.0).unwrap();
        let opts = LmOptions {
            initial_damping: 1e-12,
            ..LmOptions::default()
        };
        let (x, report) = lm_denoise(&p, &x0, &opts).unwrap();
        let err = max_abs(
            &x.data()
                .iter()
                .zip(u.data())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        assert!(err <= 1e-8, "err {err}");
        assert!(report.accepted_steps() <= 2, "{report:?}");
    }

    #[test]
    fn gd_single_exact_step() {
        let u = ramp(4, 4);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), 1.0).unwrap();
        let x0 = u.map(|v| v - 7.0).unwrap();
        let (x, report) = gd_denoise(&p, &x0, &BacktrackingRule::default(), 10).unwrap();
        assert_eq!(x, u);
        assert_eq!(report.accepted_steps(), 1);
        assert_eq!(report.final_objective, 0.0);
        assert_eq!(report.termination, Termination::GradientTolerance);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let u = ramp(6, 6);
        let p = Problem::new(u.clone(), builtin_model("diff2x2").unwrap(), 20.0).unwrap();
        let (_, report) = lm_denoise(&p, &u, &LmOptions::default()).unwrap();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(SolveReport::CSV_HEADER));
        assert_eq!(lines.count(), report.iterations.len());
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 6);
            for f in &fields {
                assert!(f.parse::<f64>().is_ok(), "{f}");
            }
        }
    }

    #[test]
    fn bad_finite_difference_step() {
        let u = ramp(3, 3);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), 1.0).unwrap();
        assert!(check_gradient(&p, &u, 0.0).is_err());
        assert!(compare_gradient(&p, &u, 1e-5, &[0.0; 4]).is_err());
    }

    #[test]
    fn linear_gradient_check_is_tight() {
        let u = ramp(5, 5);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), 2.0).unwrap();
        let x = u.map(|v| v * 0.5 + 3.0).unwrap();
        assert!(check_gradient(&p, &x, 1e-5).unwrap() <= 1e-9);
    }
}

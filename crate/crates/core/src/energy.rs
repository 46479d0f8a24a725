//! The FoE denoising energy
//!
//! ```text
//! f(x) = sum_i (x_i - u_i)^2 / (2 sigma^2)
//!      + sum_P sum_k alpha_k ln(1 + (b_k . x_P)^2 / 2)
//! ```
//!
//! and its robustified least-squares form: one identity-loss block
//! `(x_i - u_i) / (sqrt(2) sigma)` per pixel and one log-loss block
//! `b_k . x_P` per (patch, expert). Patches are the fully interior `m x m`
//! windows, enumerated row-major by top-left corner.
//!
//! Gradient convention: the assembled right-hand side is `g = J~^T r~`, and the
//! true gradient of `f` is `2 g`.

use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::loss::{self, LossDescriptor};
use crate::model::FoeModel;
use crate::sparse::GridSystem;

/// Lower and upper clamp for the diagonal damping matrix.
pub const DAMPING_DIAG_MIN: f64 = 1e-12;
pub const DAMPING_DIAG_MAX: f64 = 1e32;

#[derive(Debug, Error, PartialEq)]
pub enum EnergyError {
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("patch size {m} does not fit in a {width}x{height} image")]
    PatchTooLarge {
        m: usize,
        width: usize,
        height: usize,
    },
    #[error("damping must be non-negative and finite, got {0}")]
    InvalidDamping(f64),
    #[error("non-finite residual or Jacobian entry in {0}")]
    NonFinite(&'static str),
}

/// Noisy observation, prior, and noise level.
#[derive(Clone, Debug)]
pub struct Problem {
    noisy: Image,
    model: FoeModel,
    sigma: f64,
}

impl Problem {
    pub fn new(noisy: Image, model: FoeModel, sigma: f64) -> Result<Self, EnergyError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(EnergyError::InvalidSigma(sigma));
        }
        let m = model.patch_size();
        if model.num_experts() > 0 && (noisy.width() < m || noisy.height() < m) {
            return Err(EnergyError::PatchTooLarge {
                m,
                width: noisy.width(),
                height: noisy.height(),
            });
        }
        Ok(Self {
            noisy,
            model,
            sigma,
        })
    }

    pub fn noisy(&self) -> &Image {
        &self.noisy
    }

    pub fn model(&self) -> &FoeModel {
        &self.model
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn width(&self) -> usize {
        self.noisy.width()
    }

    pub fn height(&self) -> usize {
        self.noisy.height()
    }

    /// Patch positions per axis, zero when the prior is empty or does not fit.
    fn patch_counts(&self) -> (usize, usize) {
        let m = self.model.patch_size();
        if self.model.num_experts() == 0 || self.width() < m || self.height() < m {
            (0, 0)
        } else {
            (self.height() - m + 1, self.width() - m + 1)
        }
    }

    pub fn num_patches(&self) -> usize {
        let (rows, cols) = self.patch_counts();
        rows * cols
    }

    fn check(&self, x: &Image) -> Result<(), EnergyError> {
        Ok(self.noisy.check_shape(x)?)
    }

    /// Response `b . x_P` of `filter` on the patch at `(top, left)`.
    #[inline]
    fn response(&self, x: &[f64], top: usize, left: usize, filter: &[f64]) -> f64 {
        let m = self.model.patch_size();
        let w = self.width();
        let mut acc = 0.0;
        for a in 0..m {
            let row = &x[(top + a) * w + left..(top + a) * w + left + m];
            for (b, v) in filter[a * m..(a + 1) * m].iter().zip(row) {
                acc += b * v;
            }
        }
        acc
    }
}

/// Top-left corner of an `m x m` patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PatchIndex {
    pub top: usize,
    pub left: usize,
}

/// All interior `m x m` patches, row-major.
pub fn patch_set(width: usize, height: usize, m: usize) -> Result<Vec<PatchIndex>, EnergyError> {
    if m == 0 || width < m || height < m {
        return Err(EnergyError::PatchTooLarge { m, width, height });
    }
    Ok((0..=height - m)
        .flat_map(|top| (0..=width - m).map(move |left| PatchIndex { top, left }))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyBreakdown {
    pub data_term: f64,
    pub prior_term: f64,
    pub total: f64,
}

fn data_sum(problem: &Problem, x: &[f64]) -> f64 {
    let u = problem.noisy.data();
    let sq: f64 = x.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum();
    sq / (2.0 * problem.sigma * problem.sigma)
}

fn prior_sum(problem: &Problem, x: &[f64]) -> f64 {
    let (rows, cols) = problem.patch_counts();
    let mut acc = 0.0;
    for top in 0..rows {
        for left in 0..cols {
            for e in problem.model.experts() {
                let r = problem.response(x, top, left, &e.filter);
                acc += e.alpha * (0.5 * r * r).ln_1p();
            }
        }
    }
    acc
}

pub fn energy(problem: &Problem, x: &Image) -> Result<EnergyBreakdown, EnergyError> {
    problem.check(x)?;
    Ok(energy_of(problem, x.data()))
}

/// Energy of a raw pixel vector; the caller guarantees its length.
pub(crate) fn energy_of(problem: &Problem, x: &[f64]) -> EnergyBreakdown {
    let data_term = data_sum(problem, x);
    let prior_term = prior_sum(problem, x);
    EnergyBreakdown {
        data_term,
        prior_term,
        total: data_term + prior_term,
    }
}

/// Central difference `(f(x + h e_i) - f(x - h e_i)) / (2h)` of the energy
/// along pixel `index`, differenced one term at a time. The data term is a
/// quadratic, so its difference quotient is taken in closed form (the slope at
/// the midpoint).
pub fn central_difference(problem: &Problem, x: &[f64], index: usize, h: f64) -> f64 {
    let orig = x[index];
    let (plus, minus) = (orig + h, orig - h);
    let step = plus - minus;
    let u = problem.noisy.data()[index];
    let mut acc = ((plus - u) + (minus - u)) / (2.0 * problem.sigma * problem.sigma);
    let (rows, cols) = problem.patch_counts();
    if rows > 0 {
        let m = problem.model.patch_size();
        let (r, c) = (index / problem.width(), index % problem.width());
        for top in r.saturating_sub(m - 1)..=r.min(rows - 1) {
            for left in c.saturating_sub(m - 1)..=c.min(cols - 1) {
                let tap = (r - top) * m + (c - left);
                for e in problem.model.experts() {
                    // The response is linear in x, so the two shifted responses
                    // differ by exactly `step * b`. Forming the log difference as
                    // one ln_1p keeps full relative precision.
                    let r0 = problem.response(x, top, left, &e.filter);
                    let b = e.filter[tap];
                    let rp = r0 + (plus - orig) * b;
                    let rm = r0 + (minus - orig) * b;
                    let ratio = 0.5 * step * b * (rp + rm) / (1.0 + 0.5 * rm * rm);
                    acc += e.alpha * ratio.ln_1p() / step;
                }
            }
        }
    }
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockId {
    Data { pixel: usize },
    Prior { patch: PatchIndex, expert: usize },
}

/// One scalar residual with its loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualBlock {
    pub id: BlockId,
    pub residual: f64,
    pub loss: LossDescriptor,
}

impl ResidualBlock {
    /// `rho(r^2)` for this block.
    pub fn cost(&self) -> f64 {
        loss::rho(&self.loss, self.residual * self.residual).unwrap_or(f64::NAN)
    }

    /// Nonzero entries `(pixel, d residual / d x_pixel)` of the raw Jacobian row.
    pub fn jacobian(&self, problem: &Problem) -> Vec<(usize, f64)> {
        match self.id {
            BlockId::Data { pixel } => {
                vec![(pixel, 1.0 / (std::f64::consts::SQRT_2 * problem.sigma))]
            }
            BlockId::Prior { patch, expert } => {
                let m = problem.model.patch_size();
                let w = problem.width();
                let filter = &problem.model.experts()[expert].filter;
                (0..m * m)
                    .map(|t| {
                        let pixel = (patch.top + t / m) * w + patch.left + t % m;
                        (pixel, filter[t])
                    })
                    .collect()
            }
        }
    }
}

/// Residual blocks at `x`: `n` data blocks in pixel order, then
/// `|patches| * K` prior blocks (patches row-major, experts inner).
pub fn residual_blocks<'a>(
    problem: &'a Problem,
    x: &'a Image,
) -> Result<impl Iterator<Item = ResidualBlock> + 'a, EnergyError> {
    problem.check(x)?;
    let scale = 1.0 / (std::f64::consts::SQRT_2 * problem.sigma);
    let xs = x.data();
    let data = xs
        .iter()
        .zip(problem.noisy.data())
        .enumerate()
        .map(move |(pixel, (a, b))| ResidualBlock {
            id: BlockId::Data { pixel },
            residual: (a - b) * scale,
            loss: LossDescriptor::IDENTITY,
        });
    let (rows, cols) = problem.patch_counts();
    let prior = (0..rows)
        .flat_map(move |top| (0..cols).map(move |left| PatchIndex { top, left }))
        .flat_map(move |patch| {
            problem
                .model
                .experts()
                .iter()
                .enumerate()
                .map(move |(expert, e)| ResidualBlock {
                    id: BlockId::Prior { patch, expert },
                    residual: problem.response(xs, patch.top, patch.left, &e.filter),
                    loss: LossDescriptor::foe_log_unchecked(e.alpha),
                })
        });
    Ok(data.chain(prior))
}

/// Analytic gradient of the energy.
pub fn gradient(problem: &Problem, x: &Image) -> Result<Vec<f64>, EnergyError> {
    problem.check(x)?;
    Ok(gradient_of(problem, x.data()))
}

pub(crate) fn gradient_of(problem: &Problem, x: &[f64]) -> Vec<f64> {
    let inv_var = 1.0 / (problem.sigma * problem.sigma);
    let mut grad: Vec<f64> = x
        .iter()
        .zip(problem.noisy.data())
        .map(|(a, b)| (a - b) * inv_var)
        .collect();
    let (rows, cols) = problem.patch_counts();
    let m = problem.model.patch_size();
    let w = problem.width();
    for top in 0..rows {
        for left in 0..cols {
            for e in problem.model.experts() {
                let r = problem.response(x, top, left, &e.filter);
                let weight = e.alpha * r / (1.0 + 0.5 * r * r);
                for a in 0..m {
                    let base = (top + a) * w + left;
                    for (g, b) in grad[base..base + m]
                        .iter_mut()
                        .zip(&e.filter[a * m..(a + 1) * m])
                    {
                        *g += weight * b;
                    }
                }
            }
        }
    }
    grad
}

/// Patch-local index pairs `(s <= t)` with their storage slot in the owner
/// pixel's stencil.
struct PairTable {
    pairs: Vec<(usize, usize, usize)>,
}

impl PairTable {
    fn new(m: usize, width: usize, stride: usize) -> Self {
        let band = m - 1;
        let mut pairs = Vec::with_capacity(m * m * (m * m + 1) / 2);
        for s in 0..m * m {
            for t in s..m * m {
                let (sr, sc) = ((s / m) as isize, (s % m) as isize);
                let (tr, tc) = ((t / m) as isize, (t % m) as isize);
                let slot = GridSystem::offset_index(band, tr - sr, tc - sc);
                // Storage position relative to the patch origin's first slot.
                let owner = (sr as usize) * width + sc as usize;
                pairs.push((s, t, owner * stride + slot));
            }
        }
        Self { pairs }
    }
}

/// Undamped Gauss–Newton system `(J~^T J~, g = J~^T r~)` at `x`.
pub fn assemble_gauss_newton(problem: &Problem, x: &Image) -> Result<GridSystem, EnergyError> {
    problem.check(x)?;
    assemble_of(problem, x.data())
}

pub(crate) fn assemble_of(problem: &Problem, x: &[f64]) -> Result<GridSystem, EnergyError> {
    let m = problem.model.patch_size();
    let (w, h) = (problem.width(), problem.height());
    let mut sys = GridSystem::new(w, h, m - 1);
    let stride = sys.stencil_len();
    let data_scale = 1.0 / (std::f64::consts::SQRT_2 * problem.sigma);
    let data_curv = data_scale * data_scale;

    {
        let u = problem.noisy.data();
        let values = sys.values_mut();
        for i in 0..w * h {
            values[i * stride] += data_curv;
        }
        let rhs = sys.rhs_mut();
        for i in 0..w * h {
            // Identity loss: r~ = r, J~ = J.
            let r = (x[i] - u[i]) * data_scale;
            rhs[i] += r * data_scale;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(EnergyError::NonFinite("data residuals"));
    }

    let (rows, cols) = problem.patch_counts();
    if rows > 0 {
        let taps = m * m;
        let table = PairTable::new(m, w, stride);
        let mut local = vec![0.0; table.pairs.len()];
        let mut local_g = vec![0.0; taps];
        for top in 0..rows {
            for left in 0..cols {
                local.fill(0.0);
                local_g.fill(0.0);
                for e in problem.model.experts() {
                    let r = problem.response(x, top, left, &e.filter);
                    let c = loss::correct(&LossDescriptor::foe_log_unchecked(e.alpha), r);
                    let j2 = c.jacobian_scale * c.jacobian_scale;
                    let gr = c.residual * c.jacobian_scale;
                    if !(j2.is_finite() && gr.is_finite()) {
                        return Err(EnergyError::NonFinite("prior residuals"));
                    }
                    let b = &e.filter;
                    for (slot, &(s, t, _)) in local.iter_mut().zip(&table.pairs) {
                        *slot += j2 * b[s] * b[t];
                    }
                    for (lg, bs) in local_g.iter_mut().zip(b) {
                        *lg += gr * bs;
                    }
                }
                let origin = top * w + left;
                let values = sys.values_mut();
                let base = origin * stride;
                for (v, &(_, _, pos)) in local.iter().zip(&table.pairs) {
                    values[base + pos] += v;
                }
                let rhs = sys.rhs_mut();
                for (t, lg) in local_g.iter().enumerate() {
                    rhs[origin + (t / m) * w + t % m] += lg;
                }
            }
        }
    }
    Ok(sys)
}

/// Damped system `H = J~^T J~ + damping * D`, `g = J~^T r~`, with
/// `D = clamp(diag(J~^T J~), 1e-12, 1e32)`. The step solves `H delta = -g`.
pub fn assemble_normal_system(
    problem: &Problem,
    x: &Image,
    damping: f64,
) -> Result<GridSystem, EnergyError> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(EnergyError::InvalidDamping(damping));
    }
    let gram = assemble_gauss_newton(problem, x)?;
    Ok(gram.damped(damping, DAMPING_DIAG_MIN, DAMPING_DIAG_MAX))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_model, Expert};

    fn image(w: usize, h: usize, data: &[f64]) -> Image {
        Image::new(w, h, data.to_vec()).unwrap()
    }

    fn single(m: usize, alpha: f64, filter: &[f64]) -> FoeModel {
        FoeModel::new(
            m,
            vec![Expert {
                alpha,
                filter: filter.to_vec(),
            }],
        )
        .unwrap()
    }

    #[test]
    fn patch_enumeration() {
        assert_eq!(
            patch_set(2, 2, 2).unwrap(),
            vec![PatchIndex { top: 0, left: 0 }]
        );
        assert_eq!(patch_set(240, 160, 2).unwrap().len(), 159 * 239);
        let got: Vec<(usize, usize)> = patch_set(3, 3, 2)
            .unwrap()
            .iter()
            .map(|p| (p.top, p.left))
            .collect();
        assert_eq!(got, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert!(matches!(
            patch_set(3, 1, 2),
            Err(EnergyError::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn problem_validation() {
        let img = image(1, 1, &[0.0]);
        assert!(matches!(
            Problem::new(img.clone(), builtin_model("diff2x2").unwrap(), 1.0),
            Err(EnergyError::PatchTooLarge { .. })
        ));
        assert!(Problem::new(img.clone(), FoeModel::empty(5).unwrap(), 1.0).is_ok());
        assert!(matches!(
            Problem::new(img, FoeModel::empty(1).unwrap(), 0.0),
            Err(EnergyError::InvalidSigma(_))
        ));
    }

    #[test]
    fn hand_evaluated_energies() {
        let zero = image(2, 2, &[0.0; 4]);
        let p = Problem::new(zero.clone(), single(2, 1.0, &[1.0, -1.0, -1.0, 1.0]), 1.0).unwrap();
        let e = energy(&p, &image(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(e.data_term, 15.0);
        assert_eq!(e.prior_term, 0.0);
        assert_eq!(e.total, 15.0);

        let p = Problem::new(zero, single(2, 1.0, &[1.0, 0.0, 0.0, 0.0]), 1.0).unwrap();
        let e = energy(&p, &image(2, 2, &[2.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(e.data_term, 2.0);
        assert!((e.prior_term - 3f64.ln()).abs() < 1e-15);
        assert!((e.total - 3.098_612_288_668_11).abs() < 1e-12);
    }

    #[test]
    fn empty_prior_at_observation_is_zero() {
        let u = image(3, 2, &[1.0, 5.0, 2.0, 7.0, 0.0, 3.0]);
        let p = Problem::new(u.clone(), FoeModel::empty(2).unwrap(), 4.0).unwrap();
        assert_eq!(energy(&p, &u).unwrap().total, 0.0);
        assert_eq!(gradient(&p, &u).unwrap(), vec![0.0; 6]);
        let blocks: Vec<_> = residual_blocks(&p, &u).unwrap().collect();
        assert_eq!(blocks.len(), 6);
        assert!(blocks
            .iter()
            .all(|b| b.loss == LossDescriptor::IDENTITY && b.residual == 0.0));
    }

    #[test]
    fn quadratic_gradient_is_unit_vector() {
        let u = image(3, 3, &[0.0; 9]);
        let p = Problem::new(u, FoeModel::empty(1).unwrap(), 1.0).unwrap();
        let mut x = vec![0.0; 9];
        x[4] = 1.0;
        let g = gradient(&p, &image(3, 3, &x)).unwrap();
        assert_eq!(g, x);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = Problem::new(image(2, 2, &[0.0; 4]), FoeModel::empty(1).unwrap(), 1.0).unwrap();
        let x = image(4, 1, &[0.0; 4]);
        assert!(matches!(energy(&p, &x), Err(EnergyError::Image(_))));
        assert!(gradient(&p, &x).is_err());
        assert!(residual_blocks(&p, &x).is_err());
        assert!(assemble_normal_system(&p, &x, 0.0).is_err());
        assert!(matches!(
            assemble_normal_system(&p, &image(2, 2, &[0.0; 4]), -1.0),
            Err(EnergyError::InvalidDamping(_))
        ));
    }

    #[test]
    fn block_counts_and_order() {
        let u = image(4, 3, &[0.0; 12]);
        let p = Problem::new(u.clone(), builtin_model("diff2x2").unwrap(), 2.0).unwrap();
        let blocks: Vec<_> = residual_blocks(&p, &u).unwrap().collect();
        assert_eq!(blocks.len(), 12 + 6 * 3);
        assert_eq!(blocks[11].id, BlockId::Data { pixel: 11 });
        assert_eq!(
            blocks[12 + 4].id,
            BlockId::Prior {
                patch: PatchIndex { top: 0, left: 1 },
                expert: 1
            }
        );
    }

    #[test]
    fn pure_quadratic_system() {
        let sigma = 3.0;
        let u = image(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = Problem::new(u.clone(), FoeModel::empty(1).unwrap(), sigma).unwrap();
        let x = image(3, 2, &[0.0; 6]);
        let sys = assemble_normal_system(&p, &x, 0.0).unwrap();
        for i in 0..6 {
            assert!((sys.entry(i, i) - 1.0 / (2.0 * sigma * sigma)).abs() < 1e-15);
        }
        let out = crate::sparse::solve_spd(&sys, 1e-12).unwrap();
        for (d, (xv, uv)) in out.solution.iter().zip(x.data().iter().zip(u.data())) {
            assert!((d - (uv - xv)).abs() < 1e-12);
        }
    }

    #[test]
    fn central_difference_matches_full_energy() {
        let u = image(
            4,
            4,
            &(0..16).map(|i| (i * 7 % 11) as f64).collect::<Vec<_>>(),
        );
        let p = Problem::new(u, builtin_model("diff2x2").unwrap(), 2.0).unwrap();
        let x: Vec<f64> = (0..16).map(|i| (i * 5 % 13) as f64 * 0.5).collect();
        for idx in [0, 5, 15] {
            let h = 0.25;
            let (mut up, mut down) = (x.clone(), x.clone());
            up[idx] += h;
            down[idx] -= h;
            let full = (energy_of(&p, &up).total - energy_of(&p, &down).total) / (2.0 * h);
            let local = central_difference(&p, &x, idx, h);
            assert!((full - local).abs() < 1e-12, "{full} vs {local}");
        }
    }
}

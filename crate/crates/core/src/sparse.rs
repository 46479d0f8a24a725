//! Symmetric grid-banded systems `H * delta = -g`.
//!
//! Pixels are numbered row-major. Pixel `i` at `(r, c)` couples to pixel `j` at
//! `(r + dr, c + dc)` only when `|dr| <= band` and `|dc| <= band`. Each pixel
//! stores the upper half of its stencil: offsets `(0, 0..=band)` followed by
//! `(dr, -band..=band)` for `dr` in `1..=band`. Entries whose target falls
//! outside the grid are kept at zero.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SolveError {
    #[error("vector length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("pixels {i} and {j} are not coupled within band {band}")]
    OutsideBand { i: usize, j: usize, band: usize },
    #[error("diagonal entry {index} is {value}, expected strictly positive")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("system is not positive definite (curvature {curvature} at iteration {iteration})")]
    Indefinite { iteration: usize, curvature: f64 },
    #[error(
        "conjugate gradient hit its {iterations}-iteration cap at relative residual {residual}"
    )]
    IterationLimit { iterations: usize, residual: f64 },
    #[error("non-finite value encountered in the linear system")]
    NonFinite,
    #[error("tolerance must lie in (0, 1), got {0}")]
    BadTolerance(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSystem {
    width: usize,
    height: usize,
    band: usize,
    offsets: Vec<(isize, isize)>,
    values: Vec<f64>,
    rhs: Vec<f64>,
}

/// Upper-half stencil offsets for a coupling radius, in storage order.
pub fn stencil_offsets(band: usize) -> Vec<(isize, isize)> {
    let b = band as isize;
    let mut out: Vec<(isize, isize)> = (0..=b).map(|dc| (0, dc)).collect();
    for dr in 1..=b {
        out.extend((-b..=b).map(|dc| (dr, dc)));
    }
    out
}

impl GridSystem {
    /// All-zero system on a `width x height` grid.
    pub fn new(width: usize, height: usize, band: usize) -> Self {
        let offsets = stencil_offsets(band);
        let n = width * height;
        Self {
            width,
            height,
            band,
            values: vec![0.0; n * offsets.len()],
            offsets,
            rhs: vec![0.0; n],
        }
    }

    pub fn identity(width: usize, height: usize, band: usize) -> Self {
        let mut sys = Self::new(width, height, band);
        for i in 0..sys.len() {
            sys.values[i * sys.offsets.len()] = 1.0;
        }
        sys
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn band(&self) -> usize {
        self.band
    }

    /// Unknown count `width * height`.
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn offsets(&self) -> &[(isize, isize)] {
        &self.offsets
    }

    pub fn stencil_len(&self) -> usize {
        self.offsets.len()
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    pub fn rhs_mut(&mut self) -> &mut [f64] {
        &mut self.rhs
    }

    /// Raw stencil storage, `len() * stencil_len()` values, pixel-major.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Storage slot of offset `(dr, dc)`, which must be in the upper half.
    pub(crate) fn offset_index(band: usize, dr: isize, dc: isize) -> usize {
        let b = band as isize;
        debug_assert!(dr > 0 || (dr == 0 && dc >= 0));
        if dr == 0 {
            dc as usize
        } else {
            (b + 1 + (dr - 1) * (2 * b + 1) + (dc + b)) as usize
        }
    }

    /// Locates `(i, j)` in storage as `(owner pixel, slot)`, or `None` when the
    /// pair is outside the band.
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (ri, ci) = ((i / self.width) as isize, (i % self.width) as isize);
        let (rj, cj) = ((j / self.width) as isize, (j % self.width) as isize);
        let (mut dr, mut dc) = (rj - ri, cj - ci);
        let b = self.band as isize;
        if dr.abs() > b || dc.abs() > b {
            return None;
        }
        let mut owner = i;
        if dr < 0 || (dr == 0 && dc < 0) {
            owner = j;
            dr = -dr;
            dc = -dc;
        }
        Some(owner * self.offsets.len() + Self::offset_index(self.band, dr, dc))
    }

    /// Matrix entry `H[i][j]`; zero outside the band.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.values[s])
    }

    /// Adds `v` to both `H[i][j]` and `H[j][i]` (once when `i == j`).
    pub fn add_entry(&mut self, i: usize, j: usize, v: f64) -> Result<(), SolveError> {
        let n = self.len();
        if i >= n || j >= n {
            return Err(SolveError::LengthMismatch {
                expected: n,
                actual: i.max(j) + 1,
            });
        }
        let s = self.slot(i, j).ok_or(SolveError::OutsideBand {
            i,
            j,
            band: self.band,
        })?;
        self.values[s] += v;
        Ok(())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.values
            .chunks_exact(self.offsets.len())
            .map(|c| c[0])
            .collect()
    }

    /// Copy with `lambda * clamp(diag(H), lo, hi)` added to the diagonal.
    pub fn damped(&self, lambda: f64, lo: f64, hi: f64) -> GridSystem {
        let mut out = self.clone();
        let stride = self.offsets.len();
        for chunk in out.values.chunks_exact_mut(stride) {
            chunk[0] += lambda * chunk[0].clamp(lo, hi);
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>, SolveError> {
        let mut out = vec![0.0; self.len()];
        self.matvec_into(v, &mut out)?;
        Ok(out)
    }

    /// `out = H * v`.
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) -> Result<(), SolveError> {
        let n = self.len();
        for len in [v.len(), out.len()] {
            if len != n {
                return Err(SolveError::LengthMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        out.fill(0.0);
        let (w, h, band) = (self.width, self.height, self.band);
        let stride = self.offsets.len();
        let deltas = self.linear_offsets();
        for r in 0..h {
            let interior_row = r + band < h;
            for c in 0..w {
                let p = r * w + c;
                let row = &self.values[p * stride..(p + 1) * stride];
                let xp = v[p];
                let mut acc = row[0] * xp;
                if interior_row && c >= band && c + band < w {
                    for (&d, &a) in deltas[1..].iter().zip(&row[1..]) {
                        let q = p + d;
                        acc += a * v[q];
                        out[q] += a * xp;
                    }
                } else {
                    for (k, &a) in row.iter().enumerate().skip(1) {
                        if let Some(q) = self.neighbor(r, c, k) {
                            acc += a * v[q];
                            out[q] += a * xp;
                        }
                    }
                }
                out[p] += acc;
            }
        }
        Ok(())
    }

    /// Row-major index distance of each stored offset. On grids narrower than
    /// the band some offsets never land inside the grid; their slots are always
    /// zero and they map to distance 0.
    fn linear_offsets(&self) -> Vec<usize> {
        self.offsets
            .iter()
            .map(|&(dr, dc)| (dr * self.width as isize + dc).max(0) as usize)
            .collect()
    }

    /// Pixel reached from `(r, c)` through stored offset `k`, if inside the grid.
    #[inline]
    fn neighbor(&self, r: usize, c: usize, k: usize) -> Option<usize> {
        let (dr, dc) = self.offsets[k];
        let rq = r + dr as usize;
        let cq = c as isize + dc;
        if rq >= self.height || cq < 0 || cq >= self.width as isize {
            None
        } else {
            Some(rq * self.width + cq as usize)
        }
    }
}

/// Incomplete Cholesky factor `H ~ U^T U` with `U` restricted to the stencil
/// pattern of `H`. With `relaxation > 0` the dropped fill is moved onto the
/// diagonal (modified IC), which keeps row sums for M-matrices.
#[derive(Clone, Debug)]
pub struct IncompleteCholesky {
    factor: GridSystem,
}

impl IncompleteCholesky {
    /// Factors `system + shift * diag(system)`. Fails on a non-positive pivot.
    pub fn new(system: &GridSystem, relaxation: f64, shift: f64) -> Result<Self, SolveError> {
        let mut u = system.clone();
        let (w, h) = (u.width, u.height);
        let stride = u.offsets.len();
        let orig = system.diagonal();
        for (row, d) in u.values.chunks_exact_mut(stride).zip(&orig) {
            row[0] += shift * d;
        }
        // Products of two forward offsets k1 <= k2 of a row land on pixel p + o1 at
        // relative offset o2 - o1; `None` when that falls outside the stencil.
        let b = u.band as isize;
        let mut pairs = Vec::new();
        for k1 in 1..stride {
            for k2 in k1..stride {
                let (r1, c1) = u.offsets[k1];
                let (r2, c2) = u.offsets[k2];
                let (dr, dc) = (r2 - r1, c2 - c1);
                let slot = if dr.abs() <= b && dc.abs() <= b {
                    Some(GridSystem::offset_index(u.band, dr, dc))
                } else {
                    None
                };
                pairs.push((k1, k2, slot));
            }
        }
        let mut targets = vec![None; stride];
        for p in 0..w * h {
            let (r, c) = (p / w, p % w);
            let d = u.values[p * stride];
            if !d.is_finite() || d <= 1e-14 * orig[p].abs() {
                return Err(SolveError::Indefinite {
                    iteration: 0,
                    curvature: d,
                });
            }
            let pivot = d.sqrt();
            u.values[p * stride] = pivot;
            for (k, target) in targets.iter_mut().enumerate().skip(1) {
                *target = u.neighbor(r, c, k);
                u.values[p * stride + k] /= pivot;
            }
            for &(k1, k2, slot) in &pairs {
                let a = u.values[p * stride + k1];
                let bv = u.values[p * stride + k2];
                if a == 0.0 || bv == 0.0 {
                    continue;
                }
                let (Some(q1), Some(q2)) = (targets[k1], targets[k2]) else {
                    continue;
                };
                let fill = a * bv;
                match slot {
                    Some(t) => u.values[q1 * stride + t] -= fill,
                    None => {
                        u.values[q1 * stride] -= relaxation * fill;
                        u.values[q2 * stride] -= relaxation * fill;
                    }
                }
            }
        }
        Ok(Self { factor: u })
    }

    /// `z = (U^T U)^{-1} r`.
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let u = &self.factor;
        let n = u.len();
        let stride = u.offsets.len();
        let deltas = u.linear_offsets();
        // Out-of-grid slots hold zeros, so row wrap only needs an upper bound check.
        let safe = n.saturating_sub(deltas.last().copied().unwrap_or(0));
        z.copy_from_slice(r);
        for p in 0..n {
            let row = &u.values[p * stride..(p + 1) * stride];
            let y = z[p] / row[0];
            z[p] = y;
            if p < safe {
                for (&d, &a) in deltas[1..].iter().zip(&row[1..]) {
                    z[p + d] -= a * y;
                }
            } else {
                for (&d, &a) in deltas[1..].iter().zip(&row[1..]) {
                    if p + d < n {
                        z[p + d] -= a * y;
                    }
                }
            }
        }
        for p in (0..n).rev() {
            let row = &u.values[p * stride..(p + 1) * stride];
            let mut acc = z[p];
            if p < safe {
                for (&d, &a) in deltas[1..].iter().zip(&row[1..]) {
                    acc -= a * z[p + d];
                }
            } else {
                for (&d, &a) in deltas[1..].iter().zip(&row[1..]) {
                    if p + d < n {
                        acc -= a * z[p + d];
                    }
                }
            }
            z[p] = acc / row[0];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveOutcome {
    pub solution: Vec<f64>,
    /// Conjugate gradient iterations performed.
    pub iterations: usize,
    /// `||H x + g|| / max(||g||, tiny)`, measured after the solve.
    pub residual_norm_rel: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `||H x + g|| / max(||g||, tiny)`.
pub fn relative_residual(system: &GridSystem, x: &[f64]) -> Result<f64, SolveError> {
    let mut r = system.matvec(x)?;
    for (ri, gi) in r.iter_mut().zip(&system.rhs) {
        *ri += gi;
    }
    Ok(norm(&r) / norm(&system.rhs).max(f64::MIN_POSITIVE))
}

/// Solves `H x = -g` with preconditioned conjugate gradients, capped at
/// `10 * n` iterations. The preconditioner is an incomplete Cholesky factor of
/// `H`, falling back to the diagonal when no usable factor exists.
pub fn solve_spd(system: &GridSystem, tol: f64) -> Result<SolveOutcome, SolveError> {
    solve_spd_capped(system, tol, 10 * system.len().max(1))
}

pub fn solve_spd_capped(
    system: &GridSystem,
    tol: f64,
    max_iterations: usize,
) -> Result<SolveOutcome, SolveError> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(SolveError::BadTolerance(tol));
    }
    let n = system.len();
    let diag = system.diagonal();
    for (index, &value) in diag.iter().enumerate() {
        if !value.is_finite() || value <= 0.0 {
            return Err(SolveError::NonPositiveDiagonal { index, value });
        }
    }
    if system.rhs.iter().any(|v| !v.is_finite()) || system.values.iter().any(|v| !v.is_finite()) {
        return Err(SolveError::NonFinite);
    }
    let precond = Preconditioner::build(system, &diag);
    let g_norm = norm(&system.rhs).max(f64::MIN_POSITIVE);

    let mut x = vec![0.0; n];
    let mut r: Vec<f64> = system.rhs.iter().map(|g| -g).collect();
    let mut z = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut hp = vec![0.0; n];
    let mut iterations = 0;

    // Restarts recompute the true residual so the final check is not fooled by drift.
    loop {
        precond.apply(&r, &mut z);
        p.copy_from_slice(&z);
        let mut rz = dot(&r, &z);
        while norm(&r) / g_norm > tol {
            if iterations >= max_iterations {
                return Err(SolveError::IterationLimit {
                    iterations,
                    residual: norm(&r) / g_norm,
                });
            }
            iterations += 1;
            system.matvec_into(&p, &mut hp)?;
            let curvature = dot(&p, &hp);
            if curvature.is_nan() || curvature <= 0.0 {
                return Err(SolveError::Indefinite {
                    iteration: iterations,
                    curvature,
                });
            }
            let step = rz / curvature;
            for i in 0..n {
                x[i] += step * p[i];
                r[i] -= step * hp[i];
            }
            precond.apply(&r, &mut z);
            let rz_next = dot(&r, &z);
            let beta = rz_next / rz;
            rz = rz_next;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        system.matvec_into(&x, &mut hp)?;
        for i in 0..n {
            r[i] = -system.rhs[i] - hp[i];
        }
        let residual_norm_rel = norm(&r) / g_norm;
        if !residual_norm_rel.is_finite() {
            return Err(SolveError::NonFinite);
        }
        if residual_norm_rel <= tol {
            return Ok(SolveOutcome {
                solution: x,
                iterations,
                residual_norm_rel,
            });
        }
    }
}

enum Preconditioner {
    Jacobi(Vec<f64>),
    Cholesky(IncompleteCholesky),
}

impl Preconditioner {
    fn build(system: &GridSystem, diag: &[f64]) -> Self {
        // Modified IC first; plain IC and then growing diagonal shifts if a pivot breaks down.
        let attempts = [
            (0.95, 0.0),
            (0.0, 0.0),
            (0.0, 1e-3),
            (0.0, 1e-2),
            (0.0, 1e-1),
        ];
        for (relaxation, shift) in attempts {
            if let Ok(f) = IncompleteCholesky::new(system, relaxation, shift) {
                return Preconditioner::Cholesky(f);
            }
        }
        Preconditioner::Jacobi(diag.iter().map(|d| 1.0 / d).collect())
    }

    fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::Jacobi(inv) => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(inv) {
                    *zi = ri * di;
                }
            }
            Preconditioner::Cholesky(f) => f.apply(r, z),
        }
    }
}

//! Shared instance generators and brute-force reference evaluations.
#![allow(dead_code)]

use foe_core::image::SplitMix64;
use foe_core::model::{random_model, Expert};
use foe_core::{builtin_model, FoeModel, Image};

pub fn uniform_image(w: usize, h: usize, lo: f64, hi: f64, rng: &mut SplitMix64) -> Image {
    let data = (0..w * h)
        .map(|_| lo + (hi - lo) * rng.next_f64())
        .collect();
    Image::new(w, h, data).unwrap()
}

/// Builtin model for `m == 2`, otherwise a random bank with `k` experts.
pub fn model_for(m: usize, k: usize, seed: u64) -> FoeModel {
    if m == 2 && k == 3 {
        builtin_model("diff2x2").unwrap()
    } else {
        random_model(m, k, seed).unwrap()
    }
}

/// Filters drawn from a normal distribution with random positive weights,
/// independent of the crate's own random bank.
pub fn gaussian_model(m: usize, k: usize, rng: &mut SplitMix64) -> FoeModel {
    let experts = (0..k)
        .map(|_| {
            let mut filter = Vec::with_capacity(m * m);
            while filter.len() < m * m {
                let (a, b) = rng.next_normal_pair();
                filter.push(a);
                filter.push(b);
            }
            filter.truncate(m * m);
            Expert {
                alpha: 0.1 + 2.0 * rng.next_f64(),
                filter,
            }
        })
        .collect();
    FoeModel::new(m, experts).unwrap()
}

/// Response of expert `e` on the patch at `(top, left)`.
pub fn response(model: &FoeModel, x: &Image, e: usize, top: usize, left: usize) -> f64 {
    let m = model.patch_size();
    let filter = &model.experts()[e].filter;
    let mut acc = 0.0;
    for i in 0..m {
        for j in 0..m {
            acc += filter[i * m + j] * x.get(top + i, left + j);
        }
    }
    acc
}

/// Patch origins in row-major order.
pub fn patches(w: usize, h: usize, m: usize) -> Vec<(usize, usize)> {
    if m > w || m > h {
        return Vec::new();
    }
    let mut out = Vec::new();
    for top in 0..=h - m {
        for left in 0..=w - m {
            out.push((top, left));
        }
    }
    out
}

/// Energy by direct summation over pixels, patches and experts, with patches
/// visited in the given order.
pub fn brute_energy_ordered(
    model: &FoeModel,
    u: &Image,
    x: &Image,
    sigma: f64,
    order: &[(usize, usize)],
) -> (f64, f64) {
    let mut data = 0.0;
    for r in 0..x.height() {
        for c in 0..x.width() {
            let d = x.get(r, c) - u.get(r, c);
            data += d * d / (2.0 * sigma * sigma);
        }
    }
    let mut prior = 0.0;
    for &(top, left) in order {
        for (e, ex) in model.experts().iter().enumerate() {
            let y = response(model, x, e, top, left);
            prior += ex.alpha * (1.0 + 0.5 * y * y).ln();
        }
    }
    (data, prior)
}

pub fn brute_energy(model: &FoeModel, u: &Image, x: &Image, sigma: f64) -> (f64, f64) {
    let order = patches(x.width(), x.height(), model.patch_size());
    brute_energy_ordered(model, u, x, sigma, &order)
}

/// Gradient by central differences taken separately on every energy term
/// that touches a pixel, so no term is lost to cancellation against the total.
pub fn termwise_fd_gradient(
    model: &FoeModel,
    u: &Image,
    x: &Image,
    sigma: f64,
    h: f64,
) -> Vec<f64> {
    let (w, ht) = (x.width(), x.height());
    let m = model.patch_size();
    let mut out = vec![0.0; w * ht];
    let mut work = x.data().to_vec();
    for idx in 0..w * ht {
        let (r, c) = (idx / w, idx % w);
        let orig = work[idx];
        let mut fd = 0.0;
        let data_term = |v: f64| {
            let d = v - u.data()[idx];
            d * d / (2.0 * sigma * sigma)
        };
        fd += (data_term(orig + h) - data_term(orig - h)) / (2.0 * h);
        for (top, left) in patches(w, ht, m) {
            if r < top || r >= top + m || c < left || c >= left + m {
                continue;
            }
            for (e, ex) in model.experts().iter().enumerate() {
                let mut term = |v: f64| {
                    work[idx] = v;
                    let img = Image::new(w, ht, work.clone()).unwrap();
                    let y = response(model, &img, e, top, left);
                    ex.alpha * (1.0 + 0.5 * y * y).ln()
                };
                let plus = term(orig + h);
                let minus = term(orig - h);
                fd += (plus - minus) / (2.0 * h);
            }
        }
        work[idx] = orig;
        out[idx] = fd;
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Worst `|a - b| / max(|a|, |b|, floor)` over two vectors.
pub fn worst_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

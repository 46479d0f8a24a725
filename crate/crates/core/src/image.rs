//! Grayscale rasters, PGM I/O, seeded Gaussian noise and quality metrics.
//!
//! Intensities are kept as `f64` on the unconstrained real line. Quantization
//! to `{0, ..., 255}` only happens in [`clamp_round`] and when writing PGM.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("PGM parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("pixel {index} has intensity {value} outside [-0.5, 255.5); clamp before writing")]
    OutOfRange { index: usize, value: f64 },
    #[error("image dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("expected {expected} pixels for the given dimensions, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("pixel {index} is not finite")]
    NonFinite { index: usize },
    #[error("dimension mismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: usize,
        left_height: usize,
        right_width: usize,
        right_height: usize,
    },
    #[error("noise sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
}

/// Dense row-major grayscale image.
#[derive(Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            f.debug_struct("Image")
                .field("width", &self.width)
                .field("height", &self.height)
                .field("data", &self.data)
                .finish()
        } else {
            write!(f, "Image {{ {}x{}, .. }}", self.width, self.height)
        }
    }
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        let expected = width
            .checked_mul(height)
            .ok_or(ImageError::EmptyDimensions { width, height })?;
        if data.len() != expected {
            return Err(ImageError::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImageError::NonFinite { index });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self, ImageError> {
        Self::new(width, height, vec![value; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of pixels.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_shape(&self, other: &Image) -> Result<(), ImageError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ImageError::DimensionMismatch {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            })
        }
    }

    /// Builds a same-shaped image from new pixel values, re-checking finiteness.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Image, ImageError> {
        Image::new(self.width, self.height, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Image, ImageError> {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn err(&self, message: impl Into<String>) -> ImageError {
        ImageError::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    /// Returns the token's starting offset along with its value.
    fn next_uint(&mut self, what: &str) -> Result<(usize, usize), ImageError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(if start >= self.bytes.len() {
                self.err(format!("unexpected end of file while reading {what}"))
            } else {
                self.err(format!("expected decimal {what}"))
            });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        let value = text.parse::<usize>().map_err(|_| ImageError::Parse {
            offset: start,
            message: format!("{what} does not fit in an integer"),
        })?;
        Ok((start, value))
    }
}

/// Parses a P2 (ASCII) or P5 (binary) graymap with maxval at most 255.
///
/// Sample values are taken as-is, without rescaling when maxval < 255.
pub fn read_pgm(bytes: &[u8]) -> Result<Image, ImageError> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if bytes.len() < 2 {
        return Err(cur.err("file too short for magic number"));
    }
    let binary = match &bytes[..2] {
        b"P5" => true,
        b"P2" => false,
        _ => return Err(cur.err("bad magic number, expected P2 or P5")),
    };
    cur.pos = 2;
    if cur.pos < bytes.len() && !bytes[cur.pos].is_ascii_whitespace() && bytes[cur.pos] != b'#' {
        return Err(cur.err("magic number must be followed by whitespace"));
    }
    let (_, width) = cur.next_uint("width")?;
    let (_, height) = cur.next_uint("height")?;
    let (maxval_at, maxval) = cur.next_uint("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::Parse {
            offset: maxval_at,
            message: format!("maxval {maxval} unsupported, must be in 1..=255"),
        });
    }
    if width == 0 || height == 0 {
        return Err(cur.err(format!("empty image {width}x{height}")));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| cur.err("image dimensions overflow"))?;

    let mut data = Vec::with_capacity(n.min(1 << 24));
    if binary {
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            Some(_) => return Err(cur.err("expected single whitespace before payload")),
            None => return Err(cur.err("truncated: missing payload")),
        }
        let payload = &bytes[cur.pos..];
        if payload.len() < n {
            return Err(ImageError::Parse {
                offset: bytes.len(),
                message: format!(
                    "truncated payload: expected {n} bytes, found {}",
                    payload.len()
                ),
            });
        }
        for (i, &b) in payload[..n].iter().enumerate() {
            if usize::from(b) > maxval {
                return Err(ImageError::Parse {
                    offset: cur.pos + i,
                    message: format!("sample {b} exceeds maxval {maxval}"),
                });
            }
            data.push(f64::from(b));
        }
    } else {
        for _ in 0..n {
            let (at, v) = cur.next_uint("sample")?;
            if v > maxval {
                return Err(ImageError::Parse {
                    offset: at,
                    message: format!("sample {v} exceeds maxval {maxval}"),
                });
            }
            data.push(v as f64);
        }
    }
    Image::new(width, height, data)
}

/// Quantizes one intensity for output, rounding half up. Fails outside [-0.5, 255.5).
fn quantize(index: usize, value: f64) -> Result<u8, ImageError> {
    if !(-0.5..255.5).contains(&value) {
        return Err(ImageError::OutOfRange { index, value });
    }
    Ok((value + 0.5).floor() as u8)
}

/// Writes a maxval-255 graymap, P5 by default or P2 when `ascii`.
///
/// The header is `P5\n<w> <h>\n255\n`, so exactly one newline separates it from
/// the binary payload. Comments are never written.
pub fn write_pgm(img: &Image, ascii: bool) -> Result<Vec<u8>, ImageError> {
    let samples = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| quantize(i, v))
        .collect::<Result<Vec<u8>, _>>()?;
    let magic = if ascii { "P2" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    if ascii {
        for row in samples.chunks(img.width) {
            let line = row
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
    } else {
        out.extend_from_slice(&samples);
    }
    Ok(out)
}

/// Gaussian noise parameters: standard deviation in intensity units and PRNG seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    sigma: f64,
    seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self, ImageError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(ImageError::InvalidSigma(sigma));
        }
        Ok(Self { sigma, seed })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// SplitMix64 (Steele, Lea and Flood), the reference 64-bit stream:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// return z ^ (z >> 31)
/// ```
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform double in [0, 1) from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Pair of independent standard normals by the basic Box–Muller transform:
    /// `u1 = 1 - next_f64()` (in (0, 1]), `u2 = next_f64()`,
    /// `(sqrt(-2 ln u1) cos(2 pi u2), sqrt(-2 ln u1) sin(2 pi u2))`.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        (radius * angle.cos(), radius * angle.sin())
    }
}

/// Adds i.i.d. N(0, sigma^2) noise, pixel by pixel in row-major order.
///
/// Normals are drawn in Box–Muller pairs from [`SplitMix64`] seeded with
/// `spec.seed`; pixel `2j` gets the cosine branch of pair `j` and pixel `2j+1`
/// the sine branch. The result is not clamped.
pub fn add_gaussian_noise(img: &Image, spec: &NoiseSpec) -> Image {
    let mut rng = SplitMix64::new(spec.seed);
    let mut data = Vec::with_capacity(img.len());
    let mut pending = None;
    for &v in &img.data {
        let z = match pending.take() {
            Some(z) => z,
            None => {
                let (a, b) = rng.next_normal_pair();
                pending = Some(b);
                a
            }
        };
        data.push(v + spec.sigma * z);
    }
    Image {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Nearest integer in `{0, ..., 255}` per pixel, ties away from zero.
pub fn clamp_round(img: &Image) -> Image {
    Image {
        width: img.width,
        height: img.height,
        data: img
            .data
            .iter()
            .map(|v| v.round().clamp(0.0, 255.0))
            .collect(),
    }
}

/// Clamps to [0, 255] without rounding. Returns the count of pixels that moved.
pub fn clamp(img: &Image) -> (Image, usize) {
    let mut moved = 0;
    let data = img
        .data
        .iter()
        .map(|&v| {
            let c = v.clamp(0.0, 255.0);
            if c != v {
                moved += 1;
            }
            c
        })
        .collect();
    (
        Image {
            width: img.width,
            height: img.height,
            data,
        },
        moved,
    )
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, ImageError> {
    a.check_shape(b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio for peak 255. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, ImageError> {
    let mse = mse(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

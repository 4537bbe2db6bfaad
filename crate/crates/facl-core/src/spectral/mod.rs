//! Frequency-domain operations: 2-D DCT, band masks, the randomizing
//! spectral transform, and band-pass/band-reject decomposition.
//!
//! Everything here is a pure function of its inputs plus an explicit seed.
//! Images are (C, H, W) grids of `f64` on the raw 0-255 pixel scale.

pub mod dct;

use ndarray::{Array2, Array3, ArrayView3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dct::{dct2_channels, dct2_plane, dct_matrix, idct2_channels, idct2_plane};

/// Per-channel 2-D DCT coefficients of an image, same shape as the source.
#[derive(Debug, Clone)]
pub struct SpectrumTensor {
    pub coefficients: Array3<f64>,
}

impl SpectrumTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        self.coefficients.dim()
    }
}

/// The (f_low, f_high) pair splitting the coefficient grid into low, mid,
/// and high bands, stated at `base_resolution` and scaled proportionally
/// to other resolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandThresholds {
    pub f_low: u32,
    pub f_high: u32,
    pub base_resolution: u32,
}

impl BandThresholds {
    pub fn new(f_low: u32, f_high: u32, base_resolution: u32) -> Result<Self> {
        if f_low >= f_high {
            return Err(Error::InvalidThreshold(format!(
                "f_low ({f_low}) must be < f_high ({f_high})"
            )));
        }
        if f_high > base_resolution {
            return Err(Error::InvalidThreshold(format!(
                "f_high ({f_high}) must be <= base_resolution ({base_resolution})"
            )));
        }
        Ok(BandThresholds {
            f_low,
            f_high,
            base_resolution,
        })
    }

    /// Scales both thresholds to `resolution` with round(f * S / base).
    /// The ordering f_low < f_high is preserved by bumping f_high when
    /// rounding would collapse the mid band.
    pub fn scaled_to(&self, resolution: usize) -> (u32, u32) {
        let s = resolution as f64 / self.base_resolution as f64;
        let lo = (self.f_low as f64 * s).round() as u32;
        let hi = ((self.f_high as f64 * s).round() as u32).max(lo + 1);
        (lo, hi)
    }

    /// Scaled thresholds validated against a concrete (H, W) grid.
    pub fn scaled_for_shape(&self, h: usize, w: usize) -> Result<(u32, u32)> {
        let res = h.max(w);
        let (lo, hi) = self.scaled_to(res);
        if hi as usize > res {
            return Err(Error::InvalidThreshold(format!(
                "scaled f_high ({hi}) exceeds grid bound ({res}) for shape {h}x{w}"
            )));
        }
        Ok((lo, hi))
    }
}

/// Which bands receive multiplicative jitter in a random mask. The shipped
/// transform jitters low and high; the ablation variants restrict or widen
/// this set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomBands {
    pub low: bool,
    pub mid: bool,
    pub high: bool,
}

impl Default for RandomBands {
    fn default() -> Self {
        RandomBands {
            low: true,
            mid: false,
            high: true,
        }
    }
}

impl RandomBands {
    pub fn all() -> Self {
        RandomBands {
            low: true,
            mid: true,
            high: true,
        }
    }

    pub fn only_low() -> Self {
        RandomBands {
            low: true,
            mid: false,
            high: false,
        }
    }

    pub fn only_mid() -> Self {
        RandomBands {
            low: false,
            mid: true,
            high: false,
        }
    }

    pub fn only_high() -> Self {
        RandomBands {
            low: false,
            mid: false,
            high: true,
        }
    }
}

/// Parameters of the randomizing transform: multiplicative mask jitter
/// half-width `rho`, additive pixel-noise standard deviation `sigma`
/// (0-255 scale), and the seed for both draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomizationParams {
    pub rho: f64,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub bands: RandomBands,
}

impl RandomizationParams {
    pub fn new(rho: f64, sigma: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidInput(format!("rho ({rho}) must be in [0, 1)")));
        }
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(Error::InvalidInput(format!(
                "sigma ({sigma}) must be finite and >= 0"
            )));
        }
        Ok(RandomizationParams {
            rho,
            sigma,
            seed,
            bands: RandomBands::default(),
        })
    }

    pub fn with_bands(mut self, bands: RandomBands) -> Self {
        self.bands = bands;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BandMaskKind {
    FadrRandom,
    BandPass,
    BandReject,
}

/// A (H, W) coefficient mask shared across channels.
#[derive(Debug, Clone)]
pub struct BandMask {
    pub values: Array2<f64>,
    pub kind: BandMaskKind,
}

/// Scalar frequency of a 2-D coefficient index: f = max(u, v).
///
/// This nested-square band metric is the one documented choice; swap here
/// to experiment with alternatives (u + v, Euclidean radius).
#[inline]
pub fn frequency_index(u: usize, v: usize) -> usize {
    u.max(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Low,
    Mid,
    High,
}

#[inline]
fn band_of(f: usize, lo: u32, hi: u32) -> Band {
    if (f as u32) < lo {
        Band::Low
    } else if (f as u32) < hi {
        Band::Mid
    } else {
        Band::High
    }
}

fn check_finite(image: &ArrayView3<f64>, what: &str) -> Result<()> {
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}

fn check_shape(image: &ArrayView3<f64>) -> Result<()> {
    let (c, h, w) = image.dim();
    if c == 0 || h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!(
            "image shape ({c}, {h}, {w}) must have C >= 1 and H, W >= 2"
        )));
    }
    Ok(())
}

/// Orthonormal type-II 2-D DCT applied to each channel separately.
pub fn dct2(image: &ArrayView3<f64>) -> Result<SpectrumTensor> {
    check_shape(image)?;
    check_finite(image, "dct2 input")?;
    Ok(SpectrumTensor {
        coefficients: dct2_channels(image),
    })
}

/// Exact inverse of [`dct2`].
pub fn idct2(spectrum: &SpectrumTensor) -> Result<Array3<f64>> {
    let view = spectrum.coefficients.view();
    check_shape(&view)?;
    check_finite(&view, "idct2 input")?;
    Ok(idct2_channels(&view))
}

/// Builds a band mask for a (H, W) grid. Thresholds are scaled to the grid
/// first; `params` is required (and consulted) only for `FadrRandom`.
pub fn build_band_mask(
    thresholds: &BandThresholds,
    shape: (usize, usize),
    kind: BandMaskKind,
    params: Option<&RandomizationParams>,
) -> Result<BandMask> {
    let (h, w) = shape;
    let (lo, hi) = thresholds.scaled_for_shape(h, w)?;
    let values = match kind {
        BandMaskKind::BandPass => Array2::from_shape_fn((h, w), |(u, v)| {
            match band_of(frequency_index(u, v), lo, hi) {
                Band::Mid => 1.0,
                _ => 0.0,
            }
        }),
        BandMaskKind::BandReject => Array2::from_shape_fn((h, w), |(u, v)| {
            match band_of(frequency_index(u, v), lo, hi) {
                Band::Mid => 0.0,
                _ => 1.0,
            }
        }),
        BandMaskKind::FadrRandom => {
            let params = params.ok_or_else(|| {
                Error::InvalidInput("fadr_random mask requires randomization params".into())
            })?;
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            let mut values = Array2::<f64>::ones((h, w));
            if params.rho > 0.0 {
                let (lo_b, hi_b) = (1.0 - params.rho, 1.0 + params.rho);
                // row-major draw order over jittered cells only
                for u in 0..h {
                    for v in 0..w {
                        let jitter = match band_of(frequency_index(u, v), lo, hi) {
                            Band::Low => params.bands.low,
                            Band::Mid => params.bands.mid,
                            Band::High => params.bands.high,
                        };
                        if jitter {
                            values[(u, v)] = rng.random_range(lo_b..hi_b);
                        }
                    }
                }
            }
            values
        }
    };
    Ok(BandMask { values, kind })
}

/// Multiplies each channel's spectrum by a shared (H, W) mask and inverts.
pub fn band_filter(image: &ArrayView3<f64>, mask: &BandMask) -> Result<Array3<f64>> {
    let (c, h, w) = image.dim();
    if mask.values.dim() != (h, w) {
        return Err(Error::InvalidInput(format!(
            "mask shape {:?} does not match image spatial shape ({h}, {w})",
            mask.values.dim()
        )));
    }
    let mut spec = dct2(image)?;
    for ch in 0..c {
        let mut plane = spec.coefficients.index_axis_mut(ndarray::Axis(0), ch);
        plane *= &mask.values;
    }
    idct2(&spec)
}

/// Output of [`fadr_transform_with_draws`], exposing the realized mask and
/// noise for verification.
#[derive(Debug, Clone)]
pub struct FadrDraws {
    pub output: Array3<f64>,
    pub mask: BandMask,
    pub noise: Array3<f64>,
}

/// The randomizing spectral transform with its draws exposed:
/// idct2(dct2(x + noise) * mask). The output is not clamped to the valid
/// pixel range; that is the caller's concern.
pub fn fadr_transform_with_draws(
    image: &ArrayView3<f64>,
    thresholds: &BandThresholds,
    params: &RandomizationParams,
) -> Result<FadrDraws> {
    check_shape(image)?;
    check_finite(image, "fadr input")?;
    let (c, h, w) = image.dim();
    let mask = build_band_mask(thresholds, (h, w), BandMaskKind::FadrRandom, Some(params))?;

    // noise stream is independent of the mask stream
    let mut noise = Array3::<f64>::zeros((c, h, w));
    if params.sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x9e37_79b9_7f4a_7c15);
        let normal = Normal::new(0.0, params.sigma)
            .map_err(|e| Error::InvalidInput(format!("bad sigma: {e}")))?;
        for v in noise.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }

    let noisy = image + &noise;
    let output = band_filter(&noisy.view(), &mask)?;
    instrument::FADR_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    Ok(FadrDraws {
        output,
        mask,
        noise,
    })
}

/// The randomizing spectral transform. See [`fadr_transform_with_draws`].
pub fn fadr_transform(
    image: &ArrayView3<f64>,
    thresholds: &BandThresholds,
    params: &RandomizationParams,
) -> Result<Array3<f64>> {
    Ok(fadr_transform_with_draws(image, thresholds, params)?.output)
}

/// Splits an image into its mid-band and low/high-band components using the
/// complementary band-pass and band-reject filters. The two outputs sum
/// back to the input (the filters partition the spectrum).
pub fn band_decompose(
    image: &ArrayView3<f64>,
    thresholds: &BandThresholds,
) -> Result<(Array3<f64>, Array3<f64>)> {
    check_shape(image)?;
    check_finite(image, "band_decompose input")?;
    let (_, h, w) = image.dim();
    let bp = build_band_mask(thresholds, (h, w), BandMaskKind::BandPass, None)?;
    let br = build_band_mask(thresholds, (h, w), BandMaskKind::BandReject, None)?;
    let mid = band_filter(image, &bp)?;
    let lowhigh = band_filter(image, &br)?;
    instrument::DECOMPOSE_CALLS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    Ok((mid, lowhigh))
}

/// Call counters used to prove the inference path never touches the
/// training-only transforms.
pub mod instrument {
    use std::sync::atomic::{AtomicU64, Ordering};

    pub(super) static FADR_CALLS: AtomicU64 = AtomicU64::new(0);
    pub(super) static DECOMPOSE_CALLS: AtomicU64 = AtomicU64::new(0);

    /// Counts in-graph band filters as decompositions too.
    pub(crate) fn note_decompose() {
        DECOMPOSE_CALLS.fetch_add(1, Ordering::Relaxed);
    }

    pub fn fadr_calls() -> u64 {
        FADR_CALLS.load(Ordering::Relaxed)
    }

    pub fn band_decompose_calls() -> u64 {
        DECOMPOSE_CALLS.load(Ordering::Relaxed)
    }
}

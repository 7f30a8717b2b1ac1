//! Tri-axis measurement from an axis image.
//!
//! Each channel is reduced to a line through its weighted mean along the
//! principal axis of its second-moment matrix. The three lines are
//! intersected in the least-squares sense to find the object origin, and
//! every direction is oriented from the origin toward its channel's mass.
//!
//! The hard extractor thresholds at 0.5. The soft extractor replaces the
//! threshold with a sigmoid so every output is a smooth function of every
//! pixel; [`soft_extract_vjp`] is its exact adjoint.

use nalgebra::{Matrix2, Vector2};
use thiserror::Error;

use crate::camera::{Axis, AxisLines};
use crate::image::TriAxisImage;

/// Minimum count of above-threshold pixels per channel.
pub const MIN_CHANNEL_PIXELS: usize = 8;
/// Major/minor eigenvalue ratio below which a channel is a blob.
pub const MIN_EIGEN_RATIO: f64 = 4.0;
pub const MIN_SOFT_MASS: f64 = 1e-6;
pub const DEFAULT_SHARPNESS: f64 = 50.0;
const MIN_INTERSECTION_DET: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("channel {0} has fewer than {MIN_CHANNEL_PIXELS} pixels above threshold")]
    EmptyChannel(Axis),
    #[error("channel {axis} is not line-like (eigenvalue ratio {ratio:.3})")]
    DegenerateChannel { axis: Axis, ratio: f64 },
    #[error("axis lines have no unique intersection")]
    NoIntersection,
    #[error("channel {0} has vanishing soft mass")]
    VanishingMass(Axis),
}

impl ExtractError {
    /// Variant name, stable across releases; used in failure records.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptyChannel(_) => "EmptyChannel",
            Self::DegenerateChannel { .. } => "DegenerateChannel",
            Self::NoIntersection => "NoIntersection",
            Self::VanishingMass(_) => "VanishingMass",
        }
    }
}

/// Tri-axis measurement: origin image, directed unit axes and the combined
/// intensity centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisObservation {
    pub origin_px: Vector2<f64>,
    pub dir: [Vector2<f64>; 3],
    pub centroid: Vector2<f64>,
}

impl AxisObservation {
    pub const LEN: usize = 10;

    pub fn zeros() -> Self {
        Self {
            origin_px: Vector2::zeros(),
            dir: [Vector2::zeros(); 3],
            centroid: Vector2::zeros(),
        }
    }

    /// Flat record: origin, X/Y/Z directions, centroid.
    pub fn to_array(&self) -> [f64; 10] {
        [
            self.origin_px.x,
            self.origin_px.y,
            self.dir[0].x,
            self.dir[0].y,
            self.dir[1].x,
            self.dir[1].y,
            self.dir[2].x,
            self.dir[2].y,
            self.centroid.x,
            self.centroid.y,
        ]
    }

    pub fn from_array(a: &[f64; 10]) -> Self {
        Self {
            origin_px: Vector2::new(a[0], a[1]),
            dir: [
                Vector2::new(a[2], a[3]),
                Vector2::new(a[4], a[5]),
                Vector2::new(a[6], a[7]),
            ],
            centroid: Vector2::new(a[8], a[9]),
        }
    }

    /// Observation of exact axis lines; the centroid is not observable from
    /// lines and is taken as the origin.
    pub fn from_lines(lines: &AxisLines) -> Self {
        Self {
            origin_px: lines.origin_px,
            dir: lines.dir,
            centroid: lines.origin_px,
        }
    }

    /// Every component multiplied by `s` (for cotangent arithmetic).
    pub fn scaled(&self, s: f64) -> Self {
        Self::from_array(&self.to_array().map(|v| v * s))
    }

    /// The same measurement in an image resized by `factor` in both axes,
    /// matching [`CameraIntrinsics::resized`](crate::camera::CameraIntrinsics::resized).
    pub fn resampled(&self, factor: f64) -> Self {
        let map = |p: Vector2<f64>| p.map(|v| (v + 0.5) * factor - 0.5);
        Self {
            origin_px: map(self.origin_px),
            dir: self.dir,
            centroid: map(self.centroid),
        }
    }
}

/// Weighted line fit of one channel.
#[derive(Debug, Clone, Copy)]
struct ChannelFit {
    mass: f64,
    mean: Vector2<f64>,
    sxx: f64,
    sxy: f64,
    syy: f64,
    phi: f64,
    e: Vector2<f64>,
}

fn fit_channel(
    img: &TriAxisImage,
    c: usize,
    weight: &impl Fn(f64) -> f64,
) -> Option<ChannelFit> {
    let w = img.width();
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (k, px) in img.data().chunks_exact(3).enumerate() {
        let wt = weight(px[c]);
        if wt != 0.0 {
            let (x, y) = ((k % w) as f64, (k / w) as f64);
            m += wt;
            sx += wt * x;
            sy += wt * y;
        }
    }
    if !(m > 0.0) {
        return None;
    }
    let mean = Vector2::new(sx / m, sy / m);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (k, px) in img.data().chunks_exact(3).enumerate() {
        let wt = weight(px[c]);
        if wt != 0.0 {
            let dx = (k % w) as f64 - mean.x;
            let dy = (k / w) as f64 - mean.y;
            sxx += wt * dx * dx;
            sxy += wt * dx * dy;
            syy += wt * dy * dy;
        }
    }
    let (sxx, sxy, syy) = (sxx / m, sxy / m, syy / m);
    let phi = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    Some(ChannelFit {
        mass: m,
        mean,
        sxx,
        sxy,
        syy,
        phi,
        e: Vector2::new(phi.cos(), phi.sin()),
    })
}

impl ChannelFit {
    fn eigen_ratio(&self) -> f64 {
        let half_tr = 0.5 * (self.sxx + self.syy);
        let r = (0.25 * (self.sxx - self.syy).powi(2) + self.sxy * self.sxy).sqrt();
        let (l1, l2) = (half_tr + r, half_tr - r);
        if l2 <= 0.0 {
            if l1 > 0.0 {
                f64::INFINITY
            } else {
                1.0
            }
        } else {
            l1 / l2
        }
    }
}

fn projector(e: &Vector2<f64>) -> Matrix2<f64> {
    Matrix2::identity() - e * e.transpose()
}

/// Least-squares intersection of lines `(mean_i, e_i)`; returns the origin
/// and the inverse normal matrix.
fn intersect(fits: &[ChannelFit; 3]) -> Result<(Vector2<f64>, Matrix2<f64>), ExtractError> {
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    for f in fits {
        let p = projector(&f.e);
        a += p;
        b += p * f.mean;
    }
    if !(a.determinant().abs() > MIN_INTERSECTION_DET) {
        return Err(ExtractError::NoIntersection);
    }
    let a_inv = a.try_inverse().ok_or(ExtractError::NoIntersection)?;
    Ok((a_inv * b, a_inv))
}

struct Extraction {
    obs: AxisObservation,
    fits: [ChannelFit; 3],
    signs: [f64; 3],
    a_inv: Matrix2<f64>,
    total_mass: f64,
}

fn extract_with(
    img: &TriAxisImage,
    weight: impl Fn(f64) -> f64,
    check: impl Fn(usize, &TriAxisImage) -> Result<(), ExtractError>,
) -> Result<Extraction, ExtractError> {
    let mut fits = Vec::with_capacity(3);
    for c in 0..3 {
        check(c, img)?;
        let fit = fit_channel(img, c, &weight).ok_or(ExtractError::EmptyChannel(Axis::from_index(c)))?;
        let ratio = fit.eigen_ratio();
        if !(ratio >= MIN_EIGEN_RATIO) {
            return Err(ExtractError::DegenerateChannel {
                axis: Axis::from_index(c),
                ratio,
            });
        }
        fits.push(fit);
    }
    let fits: [ChannelFit; 3] = [fits[0], fits[1], fits[2]];
    let (origin, a_inv) = intersect(&fits)?;

    let mut dir = [Vector2::zeros(); 3];
    let mut signs = [1.0; 3];
    for i in 0..3 {
        if fits[i].e.dot(&(fits[i].mean - origin)) < 0.0 {
            signs[i] = -1.0;
        }
        dir[i] = fits[i].e * signs[i];
    }

    let total_mass: f64 = fits.iter().map(|f| f.mass).sum();
    let centroid = fits.iter().map(|f| f.mean * f.mass).sum::<Vector2<f64>>() / total_mass;
    Ok(Extraction {
        obs: AxisObservation {
            origin_px: origin,
            dir,
            centroid,
        },
        fits,
        signs,
        a_inv,
        total_mass,
    })
}

fn hard_weight(p: f64) -> f64 {
    if p > 0.5 {
        p
    } else {
        0.0
    }
}

/// Deterministic extraction with a 0.5 threshold.
pub fn extract_axes_hard(img: &TriAxisImage) -> Result<AxisObservation, ExtractError> {
    let check = |c: usize, img: &TriAxisImage| {
        let n = img.data().chunks_exact(3).filter(|p| p[c] > 0.5).count();
        if n < MIN_CHANNEL_PIXELS {
            Err(ExtractError::EmptyChannel(Axis::from_index(c)))
        } else {
            Ok(())
        }
    };
    extract_with(img, hard_weight, check).map(|e| e.obs)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let ez = z.exp();
        ez / (1.0 + ez)
    }
}

/// Soft threshold `sigmoid(sharpness * (p - 0.5))`.
pub fn soft_threshold(p: f64, sharpness: f64) -> f64 {
    sigmoid(sharpness * (p - 0.5))
}

fn soft_weight(p: f64, sharpness: f64) -> f64 {
    p * soft_threshold(p, sharpness)
}

fn soft_weight_grad(p: f64, sharpness: f64) -> f64 {
    let s = soft_threshold(p, sharpness);
    s + p * sharpness * s * (1.0 - s)
}

fn soft_extract(img: &TriAxisImage, sharpness: f64) -> Result<Extraction, ExtractError> {
    assert!(sharpness > 0.0, "sharpness must be positive");
    let check = |c: usize, img: &TriAxisImage| {
        let mass: f64 = img
            .data()
            .chunks_exact(3)
            .map(|p| soft_threshold(p[c], sharpness))
            .sum();
        if mass > MIN_SOFT_MASS {
            Ok(())
        } else {
            Err(ExtractError::VanishingMass(Axis::from_index(c)))
        }
    };
    extract_with(img, |p| soft_weight(p, sharpness), check)
}

/// Differentiable extraction; this is the measurement operator used by
/// guidance.
pub fn extract_axes_soft(
    img: &TriAxisImage,
    sharpness: f64,
) -> Result<AxisObservation, ExtractError> {
    soft_extract(img, sharpness).map(|e| e.obs)
}

/// Gradient of `<cotangent, extract_axes_soft(img)>` with respect to `img`.
///
/// The orientation sign of each direction is locally constant and treated
/// as such.
pub fn soft_extract_vjp(
    img: &TriAxisImage,
    sharpness: f64,
    cotangent: &AxisObservation,
) -> Result<TriAxisImage, ExtractError> {
    let ex = soft_extract(img, sharpness)?;
    Ok(vjp_from(img, sharpness, &ex, cotangent))
}

/// Soft extraction together with the adjoint, sharing the forward pass.
pub fn extract_axes_soft_with_vjp(
    img: &TriAxisImage,
    sharpness: f64,
    cotangent: impl FnOnce(&AxisObservation) -> AxisObservation,
) -> Result<(AxisObservation, TriAxisImage), ExtractError> {
    let ex = soft_extract(img, sharpness)?;
    let cot = cotangent(&ex.obs);
    let grad = vjp_from(img, sharpness, &ex, &cot);
    Ok((ex.obs, grad))
}

fn vjp_from(
    img: &TriAxisImage,
    sharpness: f64,
    ex: &Extraction,
    cot: &AxisObservation,
) -> TriAxisImage {
    let fits = &ex.fits;
    let origin = ex.obs.origin_px;

    // origin = A⁻¹ b with A = Σ P_i, b = Σ P_i m_i
    let b_bar = ex.a_inv * cot.origin_px;
    let a_bar = -b_bar * origin.transpose();

    let mut mean_bar = [Vector2::zeros(); 3];
    let mut mom_bar = [(0.0, 0.0, 0.0); 3];
    for i in 0..3 {
        let f = &fits[i];
        let p = projector(&f.e);
        mean_bar[i] = p.transpose() * b_bar;
        let p_bar = b_bar * f.mean.transpose() + a_bar;
        let e_bar = cot.dir[i] * ex.signs[i] - (p_bar + p_bar.transpose()) * f.e;
        let phi_bar = e_bar.dot(&Vector2::new(-f.phi.sin(), f.phi.cos()));
        let d = f.sxx - f.syy;
        let den = d * d + 4.0 * f.sxy * f.sxy;
        let (sxx_bar, sxy_bar) = if den > 0.0 {
            (phi_bar * (-f.sxy / den), phi_bar * (d / den))
        } else {
            (0.0, 0.0)
        };
        mom_bar[i] = (sxx_bar, sxy_bar, -sxx_bar);
    }

    let w = img.width();
    let c_bar = cot.centroid;
    let centroid = ex.obs.centroid;
    let mut grad = TriAxisImage::zeros(img.width(), img.height());
    for (k, (px, g)) in img
        .data()
        .chunks_exact(3)
        .zip(grad.data_mut().chunks_exact_mut(3))
        .enumerate()
    {
        let pos = Vector2::new((k % w) as f64, (k / w) as f64);
        let centroid_term = c_bar.dot(&(pos - centroid)) / ex.total_mass;
        for i in 0..3 {
            let f = &fits[i];
            let dx = pos.x - f.mean.x;
            let dy = pos.y - f.mean.y;
            let (sxx_bar, sxy_bar, syy_bar) = mom_bar[i];
            let w_bar = (mean_bar[i].x * dx
                + mean_bar[i].y * dy
                + sxx_bar * (dx * dx - f.sxx)
                + sxy_bar * (dx * dy - f.sxy)
                + syy_bar * (dy * dy - f.syy))
                / f.mass
                + centroid_term;
            g[i] = w_bar * soft_weight_grad(px[i], sharpness);
        }
    }
    grad
}

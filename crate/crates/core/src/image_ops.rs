//! Plane and volume resampling: bilinear/nearest resize, mirroring, and
//! small-angle in-plane rotation.
//!
//! All coordinate mapping uses the half-pixel convention,
//! `src = (dst + 0.5) * n_in / n_out - 0.5`, clamped to the valid range.
//! The same tap tables drive the data pipeline (here) and the differentiable
//! resize on the tape, so the two can never disagree about geometry.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::scalar::{c, Scalar};

/// Per-output-index source taps `(lo, hi, frac)` for 1-D bilinear resampling:
/// `out[i] = (1 - frac) * in[lo] + frac * in[hi]`.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    assert!(n_in > 0 && n_out > 0, "resize dims must be positive");
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Nearest-neighbour source index per output index, under the same mapping
/// (ties at .5 round up). Used for label planes.
pub fn nearest_taps(n_in: usize, n_out: usize) -> Vec<usize> {
    bilinear_taps(n_in, n_out)
        .into_iter()
        .map(|(lo, hi, frac)| if frac < 0.5 { lo } else { hi })
        .collect()
}

pub fn resize_plane_bilinear<T: Scalar>(x: ArrayView2<'_, T>, oh: usize, ow: usize) -> Array2<T> {
    let (h, w) = x.dim();
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let (y0, y1, ty) = rt[oy];
        let (x0, x1, tx) = ct[ox];
        let (ty, tx) = (c::<T>(ty), c::<T>(tx));
        let one = T::one();
        (one - ty) * ((one - tx) * x[(y0, x0)] + tx * x[(y0, x1)])
            + ty * ((one - tx) * x[(y1, x0)] + tx * x[(y1, x1)])
    })
}

pub fn resize_plane_nearest(x: ArrayView2<'_, u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = x.dim();
    let rt = nearest_taps(h, oh);
    let ct = nearest_taps(w, ow);
    Array2::from_shape_fn((oh, ow), |(oy, ox)| x[(rt[oy], ct[ox])])
}

/// Resize every slice of a `(depth, h, w)` intensity volume in-plane.
pub fn resize_volume_bilinear<T: Scalar>(x: &Array3<T>, oh: usize, ow: usize) -> Array3<T> {
    let (d, _, _) = x.dim();
    let mut out = Array3::zeros((d, oh, ow));
    for k in 0..d {
        out.index_axis_mut(Axis(0), k)
            .assign(&resize_plane_bilinear(x.index_axis(Axis(0), k), oh, ow));
    }
    out
}

/// Resize every slice of a `(depth, h, w)` label volume in-plane. Nearest
/// resampling over the same coordinate map keeps labels aligned with intensity.
pub fn resize_volume_nearest(x: &Array3<u8>, oh: usize, ow: usize) -> Array3<u8> {
    let (d, _, _) = x.dim();
    let mut out = Array3::zeros((d, oh, ow));
    for k in 0..d {
        out.index_axis_mut(Axis(0), k)
            .assign(&resize_plane_nearest(x.index_axis(Axis(0), k), oh, ow));
    }
    out
}

/// Flip a volume along the width axis (left-right anatomical mirror).
pub fn mirror_lr<A: Clone>(x: &Array3<A>) -> Array3<A> {
    let mut out = x.clone();
    out.invert_axis(Axis(2));
    out
}

fn rotation_source(
    oy: usize,
    ox: usize,
    h: usize,
    w: usize,
    angle_rad: f64,
) -> (f64, f64) {
    // Inverse mapping: rotate output coordinates by -angle about the centre.
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_rad.sin_cos();
    let dy = oy as f64 - cy;
    let dx = ox as f64 - cx;
    (cy + cos * dy + sin * dx, cx - sin * dy + cos * dx)
}

/// Rotate a plane about its centre by `angle_rad` (bilinear, zero outside).
pub fn rotate_plane_bilinear<T: Scalar>(x: ArrayView2<'_, T>, angle_rad: f64) -> Array2<T> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        let (sy, sx) = rotation_source(oy, ox, h, w, angle_rad);
        if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
            return T::zero();
        }
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let ty = c::<T>(sy - y0 as f64);
        let tx = c::<T>(sx - x0 as f64);
        let one = T::one();
        (one - ty) * ((one - tx) * x[(y0, x0)] + tx * x[(y0, x1)])
            + ty * ((one - tx) * x[(y1, x0)] + tx * x[(y1, x1)])
    })
}

/// Rotate a label plane with nearest resampling over the same mapping.
pub fn rotate_plane_nearest(x: ArrayView2<'_, u8>, angle_rad: f64) -> Array2<u8> {
    let (h, w) = x.dim();
    Array2::from_shape_fn((h, w), |(oy, ox)| {
        let (sy, sx) = rotation_source(oy, ox, h, w, angle_rad);
        let (ry, rx) = (sy.round(), sx.round());
        if ry < 0.0 || rx < 0.0 || ry > (h - 1) as f64 || rx > (w - 1) as f64 {
            return 0;
        }
        x[(ry as usize, rx as usize)]
    })
}

pub fn rotate_volume_bilinear<T: Scalar>(x: &Array3<T>, angle_rad: f64) -> Array3<T> {
    let (d, h, w) = x.dim();
    let mut out = Array3::zeros((d, h, w));
    for k in 0..d {
        out.index_axis_mut(Axis(0), k)
            .assign(&rotate_plane_bilinear(x.index_axis(Axis(0), k), angle_rad));
    }
    out
}

pub fn rotate_volume_nearest(x: &Array3<u8>, angle_rad: f64) -> Array3<u8> {
    let (d, h, w) = x.dim();
    let mut out = Array3::zeros((d, h, w));
    for k in 0..d {
        out.index_axis_mut(Axis(0), k)
            .assign(&rotate_plane_nearest(x.index_axis(Axis(0), k), angle_rad));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn taps_are_identity_when_sizes_match() {
        for n in [1usize, 3, 7] {
            for (i, (lo, _hi, frac)) in bilinear_taps(n, n).into_iter().enumerate() {
                assert_eq!(lo, i);
                assert!(frac.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taps_match_direct_halfpixel_formula() {
        // Independent recomputation of the mapping, kept deliberately separate
        // from the implementation above.
        for (n_in, n_out) in [(4usize, 7usize), (10, 3), (5, 5), (2, 8)] {
            let taps = bilinear_taps(n_in, n_out);
            for (i, &(lo, hi, frac)) in taps.iter().enumerate() {
                let src = ((i as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5)
                    .max(0.0)
                    .min((n_in - 1) as f64);
                let expect_lo = src.floor() as usize;
                assert_eq!(lo, expect_lo, "in {n_in} out {n_out} idx {i}");
                assert_eq!(hi, (expect_lo + 1).min(n_in - 1));
                assert!((frac - (src - expect_lo as f64)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_resize_is_exact_on_affine_images() {
        // Bilinear interpolation reproduces a + b*y + c*x exactly at any
        // (clamped) source coordinate, so resizing an affine ramp must give
        // the affine function evaluated at the mapped coordinates.
        let (h, w) = (5usize, 8usize);
        let (a, b, cc) = (0.7, -0.3, 0.45);
        let img = Array2::from_shape_fn((h, w), |(y, x)| a + b * y as f64 + cc * x as f64);
        for (oh, ow) in [(9usize, 4usize), (3, 11), (5, 8)] {
            let out = resize_plane_bilinear(img.view(), oh, ow);
            let rt = bilinear_taps(h, oh);
            let ct = bilinear_taps(w, ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let sy = rt[oy].0 as f64 + rt[oy].2;
                    let sx = ct[ox].0 as f64 + ct[ox].2;
                    let expect = a + b * sy + cc * sx;
                    assert!(
                        (out[(oy, ox)] - expect).abs() < 1e-12,
                        "({oy},{ox}): {} vs {expect}",
                        out[(oy, ox)]
                    );
                }
            }
        }
    }

    #[test]
    fn nearest_resize_preserves_label_alphabet_and_identity() {
        let labels =
            Array2::from_shape_fn((6, 6), |(y, x)| ((y * 6 + x) % 5) as u8);
        let same = resize_plane_nearest(labels.view(), 6, 6);
        assert_eq!(same, labels);
        let up = resize_plane_nearest(labels.view(), 13, 9);
        for v in up.iter() {
            assert!(*v < 5, "nearest resize introduced a new label {v}");
        }
    }

    #[test]
    fn mirror_reverses_width_and_is_an_involution() {
        let vol = Array3::from_shape_fn((2, 3, 4), |(d, y, x)| (100 * d + 10 * y + x) as f64);
        let m = mirror_lr(&vol);
        for d in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    assert_eq!(m[(d, y, x)], vol[(d, y, 3 - x)]);
                }
            }
        }
        assert_eq!(mirror_lr(&m), vol);
    }

    #[test]
    fn rotation_by_zero_is_identity_and_small_angles_keep_interior_constant() {
        let vol = Array3::from_shape_fn((1, 9, 9), |_| 2.5f64);
        let r0 = rotate_volume_bilinear(&vol, 0.0);
        assert_eq!(r0, vol);
        let r = rotate_volume_bilinear(&vol, 0.1);
        // Interior pixels stay at the constant; corners may clip to zero.
        for y in 3..6 {
            for x in 3..6 {
                assert!((r[(0, y, x)] - 2.5).abs() < 1e-12);
            }
        }
        let labels = Array3::from_shape_fn((1, 9, 9), |(_, y, x)| ((y + x) % 3) as u8);
        assert_eq!(rotate_volume_nearest(&labels, 0.0), labels);
    }

    #[test]
    fn rotation_roundtrip_recovers_interior_of_smooth_image() {
        let vol = Array3::from_shape_fn((1, 15, 15), |(_, y, x)| {
            ((y as f64) * 0.2).sin() + ((x as f64) * 0.15).cos()
        });
        let there = rotate_volume_bilinear(&vol, 0.12);
        let back = rotate_volume_bilinear(&there, -0.12);
        for y in 5..10 {
            for x in 5..10 {
                assert!(
                    (back[(0, y, x)] - vol[(0, y, x)]).abs() < 0.02,
                    "roundtrip drifted at ({y},{x})"
                );
            }
        }
    }
}

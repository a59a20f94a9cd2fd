//! Bilinear resampling of `C×H×W` images.

use crate::tensor::{Tensor, TensorError};

/// Samples channel plane `plane` (`h×w`) at continuous pixel coordinates,
/// treating everything outside the frame as zero.
#[inline]
pub(crate) fn bilinear_zero(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let px = |xi: isize, yi: isize| -> f64 {
        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
            0.0
        } else {
            plane[yi as usize * w + xi as usize]
        }
    };
    if fx == 0.0 && fy == 0.0 {
        return px(x0, y0);
    }
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1, y0) * fx;
    let bottom = px(x0, y0 + 1) * (1.0 - fx) + px(x0 + 1, y0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of a `C×H×W` image to `C×size×size` (half-pixel centres,
/// edge clamping), with values clamped to `[0, 1]`.
pub fn resize_normalize(img: &Tensor, size: usize) -> Result<Tensor, TensorError> {
    let s = img.shape();
    if s.len() != 3 || size == 0 {
        return Err(TensorError::InvalidShape {
            shape: s.to_vec(),
            reason: "expected a non-empty C×H×W image and a positive target size".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let sy = h as f64 / size as f64;
    let sx = w as f64 / size as f64;
    let src_coord = |d: usize, scale: f64, len: usize| -> f64 {
        ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64)
    };
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..size {
            let y = src_coord(oy, sy, h);
            for ox in 0..size {
                let x = src_coord(ox, sx, w);
                out.push(bilinear_zero(plane, h, w, x, y).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[c, size, size], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f64> = (0..3 * 5 * 5).map(|i| (i as f64 * 0.13).sin().abs()).collect();
        let img = Tensor::new(&[3, 5, 5], data).unwrap();
        let out = resize_normalize(&img, 5).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constants_survive_resizing() {
        for (from, to) in [(7, 32), (40, 32), (3, 3), (1, 4)] {
            let img = Tensor::full(&[3, from, from], 0.3);
            let out = resize_normalize(&img, to).unwrap();
            assert_eq!(out.shape(), &[3, to, to]);
            assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        }
    }

    #[test]
    fn checkerboard_upscale_blends_interior() {
        // source coords of the 4 output pixels: -0.25→0, 0.25, 0.75, 1.25→1
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = resize_normalize(&img, 4).unwrap();
        let at = |y: usize, x: usize| out.data()[y * 4 + x];
        for y in 1..3 {
            for x in 1..3 {
                assert!(at(y, x) > 0.0 && at(y, x) < 1.0, "({y},{x}) = {}", at(y, x));
            }
        }
        // (0.25, 0.25): 0·.75·.75 + 1·.25·.75 + 1·.75·.25 + 0 = 0.375
        assert!((at(1, 1) - 0.375).abs() < 1e-12);
        assert_eq!(at(0, 0), 0.0);
    }

    #[test]
    fn rejects_wrong_rank() {
        assert!(resize_normalize(&Tensor::ones(&[4, 4]), 2).is_err());
    }
}

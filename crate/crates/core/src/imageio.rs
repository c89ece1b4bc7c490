//! PNG loading/saving and the pixel conversions used everywhere else.
//!
//! Images are `[3, H, W]` f32 arrays in [-1, 1]. A u8 channel value v maps to
//! `v / 127.5 - 1`; the inverse is `round_half_up((x + 1) * 127.5)` clamped
//! to [0, 255].

use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Array4, Axis};

use crate::error::{Error, Result};

pub fn u8_to_signed(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn signed_to_u8(x: f32) -> u8 {
    let scaled = (x + 1.0) * 127.5 + 0.5; // +0.5 then floor = round half up
    scaled.floor().clamp(0.0, 255.0) as u8
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f32>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = u8_to_signed(px[c]);
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(Error::Image(format!("expected 3 channels, got {c}")));
    }
    let mut buf = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in buf.enumerate_pixels_mut() {
        for ci in 0..3 {
            px[ci] = signed_to_u8(img[[ci, y as usize, x as usize]]);
        }
    }
    buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Bilinear resize of a `[3,H,W]` image. Corner-aligned sampling.
pub fn resize_bilinear(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    let sy = if out_h > 1 { (h - 1) as f32 / (out_h - 1) as f32 } else { 0.0 };
    let sx = if out_w > 1 { (w - 1) as f32 / (out_w - 1) as f32 } else { 0.0 };
    for ci in 0..c {
        for oy in 0..out_h {
            let fy = oy as f32 * sy;
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f32;
            for ox in 0..out_w {
                let fx = ox as f32 * sx;
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f32;
                let v = img[[ci, y0, x0]] * (1.0 - wy) * (1.0 - wx)
                    + img[[ci, y0, x1]] * (1.0 - wy) * wx
                    + img[[ci, y1, x0]] * wy * (1.0 - wx)
                    + img[[ci, y1, x1]] * wy * wx;
                out[[ci, oy, ox]] = v;
            }
        }
    }
    out
}

/// Area-averaging resize of a `[3,H,W]` image: every output pixel is the
/// (fractionally weighted) mean of its source rectangle. The right tool for
/// strong downscales, where point sampling would alias.
pub fn resize_area(img: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    let ry = h as f64 / out_h as f64;
    let rx = w as f64 / out_w as f64;
    for ci in 0..c {
        for oy in 0..out_h {
            let y0 = oy as f64 * ry;
            let y1 = (oy + 1) as f64 * ry;
            for ox in 0..out_w {
                let x0 = ox as f64 * rx;
                let x1 = (ox + 1) as f64 * rx;
                let mut acc = 0.0f64;
                let mut weight = 0.0f64;
                let mut sy = y0.floor() as usize;
                while (sy as f64) < y1 && sy < h {
                    let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                    let mut sx = x0.floor() as usize;
                    while (sx as f64) < x1 && sx < w {
                        let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                        acc += img[[ci, sy, sx]] as f64 * wy * wx;
                        weight += wy * wx;
                        sx += 1;
                    }
                    sy += 1;
                }
                out[[ci, oy, ox]] = (acc / weight) as f32;
            }
        }
    }
    out
}

/// Tiles images row-major into a `cols`-wide mosaic. All tiles must share one
/// shape; the last row may be ragged and is padded with black.
pub fn tile_mosaic(tiles: &[Array3<f32>], cols: usize) -> Result<Array3<f32>> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::Config("mosaic needs at least one tile and column".into()));
    }
    let (c, h, w) = (tiles[0].shape()[0], tiles[0].shape()[1], tiles[0].shape()[2]);
    if tiles.iter().any(|t| t.shape() != tiles[0].shape()) {
        return Err(Error::Config("mosaic tiles must share one shape".into()));
    }
    let rows = tiles.len().div_ceil(cols);
    let mut out = Array3::<f32>::from_elem((c, rows * h, cols * w), -1.0);
    for (i, t) in tiles.iter().enumerate() {
        let (r, cl) = (i / cols, i % cols);
        out.slice_mut(ndarray::s![.., r * h..(r + 1) * h, cl * w..(cl + 1) * w])
            .assign(t);
    }
    Ok(out)
}

/// Splits a batch into per-image arrays.
pub fn batch_to_images(batch: &Array4<f32>) -> Vec<Array3<f32>> {
    batch.axis_iter(Axis(0)).map(|v| v.to_owned()).collect()
}

/// Stacks per-image arrays into a batch.
pub fn images_to_batch(images: &[Array3<f32>]) -> Array4<f32> {
    let (c, h, w) = (images[0].shape()[0], images[0].shape()[1], images[0].shape()[2]);
    let mut out = Array4::<f32>::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_conversion_round_trips() {
        for v in 0..=255u8 {
            assert_eq!(signed_to_u8(u8_to_signed(v)), v);
        }
        assert_eq!(signed_to_u8(-1.0), 0);
        assert_eq!(signed_to_u8(1.0), 255);
        assert_eq!(signed_to_u8(-2.0), 0);
        assert_eq!(signed_to_u8(2.0), 255);
    }

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Array3::from_shape_fn((3, 9, 7), |(c, y, x)| {
            u8_to_signed(((c * 83 + y * 17 + x * 29) % 256) as u8)
        });
        save_png(&path, &img).unwrap();
        let back = load_png(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        for (a, b) in back.iter().zip(img.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn resize_identity_and_extremes() {
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| (c + y + x) as f32 * 0.01);
        let same = resize_bilinear(&img, 8, 8);
        for (a, b) in same.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        let up = resize_bilinear(&img, 16, 16);
        assert_eq!(up.shape(), &[3, 16, 16]);
        let down = resize_bilinear(&up, 8, 8);
        assert_eq!(down.shape(), &[3, 8, 8]);
    }

    #[test]
    fn mosaic_layout() {
        let tiles: Vec<Array3<f32>> = (0..6)
            .map(|i| Array3::from_elem((3, 2, 2), i as f32 * 0.1))
            .collect();
        let m = tile_mosaic(&tiles, 4).unwrap();
        assert_eq!(m.shape(), &[3, 4, 8]);
        assert_eq!(m[[0, 0, 0]], 0.0);
        assert_eq!(m[[0, 0, 2]], 0.1);
        assert_eq!(m[[0, 2, 0]], 0.4);
        // padding tile is black
        assert_eq!(m[[0, 2, 6]], -1.0);
    }
}

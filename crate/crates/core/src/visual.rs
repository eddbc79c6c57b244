//! Source-sequence construction: patchified raster images with a trainable
//! linear projection, or pre-extracted feature files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::Features;
use crate::tensor::io;

/// Grayscale-style raster with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::Argument(format!(
                "pixel buffer of length {} does not fill {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            pixels,
        })
    }
}

/// Split an image into `P x P` patches in reading order (left-to-right,
/// top-to-bottom), each flattened row-major to a `P*P*C` vector.
pub fn patchify(img: &RasterImage, patch: usize) -> Result<Features> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Argument(format!(
            "image {}x{} is not divisible into {patch}x{patch} patches",
            img.height, img.width
        )));
    }
    let (ph, pw) = (img.height / patch, img.width / patch);
    let c = img.channels;
    let dim = patch * patch * c;
    let mut data = Vec::with_capacity(ph * pw * dim);
    for py in 0..ph {
        for px in 0..pw {
            for dy in 0..patch {
                for dx in 0..patch {
                    let y = py * patch + dy;
                    let x = px * patch + dx;
                    for ch in 0..c {
                        data.push(img.pixels[(y * img.width + x) * c + ch]);
                    }
                }
            }
        }
    }
    Features::new(ph * pw, dim, data)
}

/// Reassemble patches produced by [`patchify`] back into the image.
pub fn unpatchify(
    patches: &Features,
    patch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> Result<RasterImage> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Argument(format!(
            "target {height}x{width} is not divisible by patch size {patch}"
        )));
    }
    let (ph, pw) = (height / patch, width / patch);
    if patches.len != ph * pw || patches.dim != patch * patch * channels {
        return Err(Error::Dimension {
            op: "unpatchify",
            lhs: vec![patches.len, patches.dim],
            rhs: vec![ph * pw, patch * patch * channels],
        });
    }
    let mut pixels = vec![0.0; height * width * channels];
    for (s, vec) in (0..patches.len).map(|s| (s, patches.vector(s))) {
        let (py, px) = (s / pw, s % pw);
        let mut k = 0;
        for dy in 0..patch {
            for dx in 0..patch {
                let y = py * patch + dy;
                let x = px * patch + dx;
                for ch in 0..channels {
                    pixels[(y * width + x) * channels + ch] = vec[k];
                    k += 1;
                }
            }
        }
    }
    RasterImage::new(height, width, channels, pixels)
}

/// Linear projection of each patch vector by `w[(P*P*C) x d]`.
pub fn project(patches: &Features, w: &[f64], out_dim: usize) -> Result<Features> {
    if w.len() != patches.dim * out_dim {
        return Err(Error::Dimension {
            op: "project",
            lhs: vec![patches.len, patches.dim],
            rhs: vec![w.len() / out_dim.max(1), out_dim],
        });
    }
    let mut data = vec![0.0; patches.len * out_dim];
    for s in 0..patches.len {
        let v = patches.vector(s);
        for (i, &x) in v.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wrow = &w[i * out_dim..(i + 1) * out_dim];
            let orow = &mut data[s * out_dim..(s + 1) * out_dim];
            for j in 0..out_dim {
                orow[j] += x * wrow[j];
            }
        }
    }
    Features::new(patches.len, out_dim, data)
}

/// Load a rank-2 feature file in the tensor serialization format.
/// `expected_dim`, when given, must match the second extent.
pub fn load_features(path: &Path, expected_dim: Option<usize>) -> Result<Features> {
    let (shape, data) = io::load_tensor(path)?;
    if shape.len() != 2 {
        return Err(Error::Format(format!(
            "feature file {} has rank {}, expected 2",
            path.display(),
            shape.len()
        )));
    }
    if let Some(d) = expected_dim {
        if shape[1] != d {
            return Err(Error::Dimension {
                op: "load_features",
                lhs: shape,
                rhs: vec![0, d],
            });
        }
    }
    Features::new(shape[0], shape[1], data)
}

pub fn save_features(path: &Path, features: &Features) -> Result<()> {
    io::save_tensor(path, &[features.len, features.dim], &features.data)
}

/// Concatenate per-view sequences in manifest order.
pub fn concat_views(views: &[Features]) -> Result<Features> {
    if views.is_empty() {
        return Err(Error::Argument("no views to concatenate".into()));
    }
    let dim = views[0].dim;
    let mut data = Vec::new();
    let mut len = 0;
    for v in views {
        if v.dim != dim {
            return Err(Error::Dimension {
                op: "concat_views",
                lhs: vec![views[0].len, dim],
                rhs: vec![v.len, v.dim],
            });
        }
        data.extend_from_slice(&v.data);
        len += v.len;
    }
    Features::new(len, dim, data)
}

/// Write a binary PGM (P5, maxval 255); single channel only.
pub fn write_pgm(path: &Path, img: &RasterImage) -> Result<()> {
    if img.channels != 1 {
        return Err(Error::Argument(format!(
            "PGM supports one channel, image has {}",
            img.channels
        )));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(
        img.pixels
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a binary PGM (P5).
pub fn read_pgm(path: &Path) -> Result<RasterImage> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut fields = Vec::new();
    // header: "P5", width, height, maxval, separated by whitespace/comments
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!(
                "truncated PGM header in {}",
                path.display()
            )));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| {
            Error::Format(format!("non-ascii PGM header in {}", path.display()))
        })?.to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!(
            "{} is not a binary PGM (magic {})",
            path.display(),
            fields[0]
        )));
    }
    let parse = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| Error::Format(format!("bad PGM header field `{s}`")))
    };
    let width = parse(&fields[1])?;
    let height = parse(&fields[2])?;
    let maxval = parse(&fields[3])?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(Error::Format(format!(
            "PGM {} truncated: expected {} pixels",
            path.display(),
            width * height
        )));
    }
    let pixels = bytes[pos..pos + width * height]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    RasterImage::new(height, width, 1, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_order_is_reading_order() {
        // 4x4 image, P=2: quadrant constants 1..4
        let mut pixels = vec![0.0; 16];
        for y in 0..4 {
            for x in 0..4 {
                let q = (y / 2) * 2 + x / 2;
                pixels[y * 4 + x] = (q + 1) as f64 / 10.0;
            }
        }
        let img = RasterImage::new(4, 4, 1, pixels).unwrap();
        let patches = patchify(&img, 2).unwrap();
        assert_eq!(patches.len, 4);
        for s in 0..4 {
            assert!(patches
                .vector(s)
                .iter()
                .all(|&v| (v - (s + 1) as f64 / 10.0).abs() < 1e-12));
        }
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = RasterImage::new(8, 8, 1, vec![0.25; 64]).unwrap();
        let patches = patchify(&img, 4).unwrap();
        assert_eq!(patches.len, 4);
        for s in 1..patches.len {
            assert_eq!(patches.vector(s), patches.vector(0));
        }
    }

    #[test]
    fn indivisible_dims_error_names_everything() {
        let img = RasterImage::new(6, 4, 1, vec![0.0; 24]).unwrap();
        let err = patchify(&img, 4).unwrap_err().to_string();
        assert!(err.contains('6') && err.contains('4'), "{err}");
    }

    #[test]
    fn projection_identity_and_zero() {
        let patches = Features::new(2, 2, vec![0.5, -0.5, 0.0, 0.0]).unwrap();
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let out = project(&patches, &eye, 2).unwrap();
        assert_eq!(out.data, patches.data);

        let zeros = Features::zeros(3, 2);
        let out = project(&zeros, &eye, 2).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn concat_views_preserves_order_and_lengths() {
        let a = Features::new(3, 2, vec![1.0; 6]).unwrap();
        let b = Features::new(5, 2, vec![2.0; 10]).unwrap();
        let out = concat_views(&[a, b]).unwrap();
        assert_eq!(out.len, 8);
        assert_eq!(out.vector(2), &[1.0, 1.0]);
        assert_eq!(out.vector(3), &[2.0, 2.0]);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let pixels: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let img = RasterImage::new(3, 4, 1, pixels).unwrap();
        write_pgm(&path, &img).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.height, 3);
        assert_eq!(back.width, 4);
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        let data: Vec<f64> = (0..6).map(|i| crate::tensor::io::snap_f32(i as f64 * 0.3)).collect();
        let f = Features::new(3, 2, data).unwrap();
        save_features(&path, &f).unwrap();
        let back = load_features(&path, Some(2)).unwrap();
        assert_eq!(back, f);
        assert!(matches!(
            load_features(&path, Some(5)),
            Err(Error::Dimension { .. })
        ));
    }
}

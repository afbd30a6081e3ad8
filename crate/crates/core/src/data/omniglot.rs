use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{Dataset, ImageClass, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Box-filter resampling where each output pixel is the overlap-weighted
/// mean of the source pixels it covers. Works for non-integer ratios such as
/// 105 → 28.
pub fn area_resize(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    assert_eq!(src.len(), w * h, "source buffer does not match {w}x{h}");
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    // per-axis (source index, weight) lists, shared by every row/column
    let spans = |n_out: usize, s: f64, n_src: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n_out)
            .map(|o| {
                let (a, b) = (o as f64 * s, (o + 1) as f64 * s);
                (a.floor() as usize..(b.ceil() as usize).min(n_src))
                    .map(|i| (i, (b.min(i as f64 + 1.0) - a.max(i as f64)) / s))
                    .filter(|&(_, wt)| wt > 0.0)
                    .collect()
            })
            .collect()
    };
    let xs = spans(out_w, sx, w);
    let ys = spans(out_h, sy, h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for yspan in &ys {
        for xspan in &xs {
            let mut acc = 0.0f64;
            for &(y, wy) in yspan {
                for &(x, wx) in xspan {
                    acc += wy * wx * src[y * w + x] as f64;
                }
            }
            out.push(acc as f32);
        }
    }
    out
}

/// Loads one glyph: grayscale, area-resized to 28×28, inverted so ink = 1.
pub fn load_omniglot_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray: Vec<f32> = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    let small = area_resize(&gray, w, h, IMAGE_SIDE, IMAGE_SIDE);
    let data = small.into_iter().map(|v| (1.0 - v).clamp(0.0, 1.0)).collect();
    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], data)
}

/// Walks `root` for PNG files and groups them by parent directory, which in
/// the standard layout is `alphabet/character`. Classes are ordered by path;
/// classes with fewer than `min_images` images are dropped with a warning.
pub fn load_omniglot(root: &Path, min_images: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("omniglot root {} is not a directory", root.display()),
        )));
    }
    let mut groups: BTreeMap<PathBuf, Vec<PathBuf>> = BTreeMap::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Io(e.into()))?;
        let p = entry.path();
        if entry.file_type().is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            let parent = p.parent().unwrap_or(root).strip_prefix(root).unwrap_or(Path::new("")).to_path_buf();
            groups.entry(parent).or_default().push(p.to_path_buf());
        }
    }
    let mut classes = Vec::with_capacity(groups.len());
    for (dir, files) in groups {
        let id = dir.to_string_lossy().replace('\\', "/");
        if files.len() < min_images {
            log::warn!("excluding class {id}: {} images, need {min_images}", files.len());
            continue;
        }
        let images = files.iter().map(|f| load_omniglot_image(f)).collect::<Result<Vec<_>>>()?;
        classes.push(ImageClass { id, images });
    }
    if classes.is_empty() {
        return Err(Error::input(format!("no usable classes under {}", root.display())));
    }
    log::info!("loaded {} classes from {}", classes.len(), root.display());
    Dataset::new(classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma};

    #[test]
    fn area_resize_integer_ratio_is_block_mean() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = area_resize(&src, 4, 4, 2, 2);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn area_resize_preserves_mean_for_fractional_ratio() {
        let src: Vec<f32> = (0..105 * 105).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
        let out = area_resize(&src, 105, 105, 28, 28);
        let m_in = src.iter().map(|&v| v as f64).sum::<f64>() / src.len() as f64;
        let m_out = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        assert!((m_in - m_out).abs() < 1e-5);
    }

    fn write_class(dir: &Path, n: usize, ink_at: Option<(u32, u32)>) {
        std::fs::create_dir_all(dir).unwrap();
        for i in 0..n {
            let mut img = GrayImage::from_pixel(105, 105, Luma([255]));
            if let Some((x, y)) = ink_at {
                for dx in 0..20 {
                    img.put_pixel(x + dx, y, Luma([0]));
                }
            }
            img.save(dir.join(format!("{i:02}.png"))).unwrap();
        }
    }

    #[test]
    fn loads_layout_and_excludes_small_classes() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        write_class(&root.join("Alpha/character02"), 3, Some((10, 50)));
        write_class(&root.join("Alpha/character01"), 3, None);
        write_class(&root.join("Beta/character01"), 1, None);
        let d = load_omniglot(root, 2).unwrap();
        let ids: Vec<&str> = d.classes().iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["Alpha/character01", "Alpha/character02"]);
        // all-white source is all zero after inversion
        assert!(d.class(0).images[0].data().iter().all(|&v| v == 0.0));
        for c in d.classes() {
            for img in &c.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        assert!(d.class(1).images[0].data().iter().any(|&v| v > 0.1));
        // order-stable reload
        assert_eq!(load_omniglot(root, 2).unwrap(), d);
    }

    #[test]
    fn missing_root_is_io_error() {
        assert!(matches!(
            load_omniglot(Path::new("/nonexistent/omniglot"), 20),
            Err(Error::Io(_))
        ));
    }
}

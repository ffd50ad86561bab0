//! Image/mask pairs on disk: `DIR/images/<stem>.<ext>` and `DIR/masks/<stem>.<ext>`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dad_core::train::Sample;
use dad_core::{synthetic, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, RgbImage};

use crate::error::{io_err, Error, Result};

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// A loaded dataset. `flags` records per-sample notes such as an image and
/// mask that disagreed in size before resizing.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub flags: Vec<(String, String)>,
}

fn list_by_stem(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Some(prev) = out.insert(stem.to_string(), path.clone()) {
            return Err(Error::Dataset(format!(
                "two files share the stem {stem:?}: {} and {}",
                prev.display(),
                path.display()
            )));
        }
    }
    Ok(out)
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

/// `[1, 3, H, W]` in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

/// Foreground is any value above 127.
pub fn mask_to_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 1, h, w], |i| (raw[i] > 127) as u8 as f64)
}

/// Bilinear for the image, nearest neighbour for the mask.
pub fn load_pair(image: &Path, mask: &Path, size: usize) -> Result<(Tensor, Tensor, Option<String>)> {
    let img = read_rgb(image)?;
    let m = read_gray(mask)?;
    let flag = (img.dimensions() != m.dimensions()).then(|| {
        format!(
            "image is {}x{} but mask is {}x{}",
            img.width(),
            img.height(),
            m.width(),
            m.height()
        )
    });
    let (s, s32) = (size, size as u32);
    let img = if img.dimensions() == (s32, s32) {
        img
    } else {
        image::imageops::resize(&img, s32, s32, FilterType::Triangle)
    };
    let m = if m.dimensions() == (s32, s32) {
        m
    } else {
        image::imageops::resize(&m, s32, s32, FilterType::Nearest)
    };
    debug_assert_eq!(img.dimensions(), (s as u32, s as u32));
    Ok((rgb_to_tensor(&img), mask_to_tensor(&m), flag))
}

/// Load every pair under `dir`, sorted by stem.
pub fn load_dataset(dir: &Path, size: usize) -> Result<Dataset> {
    let images = list_by_stem(&dir.join("images"))?;
    let masks = list_by_stem(&dir.join("masks"))?;
    let only_images: Vec<&String> = images.keys().filter(|k| !masks.contains_key(*k)).collect();
    let only_masks: Vec<&String> = masks.keys().filter(|k| !images.contains_key(*k)).collect();
    if !only_images.is_empty() || !only_masks.is_empty() {
        let mut report = format!("unmatched stems in {}:", dir.display());
        for s in &only_images {
            report.push_str(&format!("\n  image without mask: {s}"));
        }
        for s in &only_masks {
            report.push_str(&format!("\n  mask without image: {s}"));
        }
        return Err(Error::Dataset(report));
    }
    if images.is_empty() {
        return Err(Error::Dataset(format!("no image/mask pairs in {}", dir.display())));
    }
    let mut samples = Vec::with_capacity(images.len());
    let mut flags = Vec::new();
    for (stem, image_path) in &images {
        let (image, mask, flag) = load_pair(image_path, &masks[stem], size)?;
        if let Some(f) = flag {
            log::warn!("{stem}: {f}; both resized to {size}x{size}");
            flags.push((stem.clone(), f));
        }
        samples.push(Sample {
            id: stem.clone(),
            image,
            mask,
        });
    }
    Ok(Dataset { samples, flags })
}

pub fn tensor_to_rgb(image: &Tensor) -> Result<RgbImage> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::Dataset(format!("expected 3 channels, got {c}")));
    }
    let d = image.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(core::array::from_fn(|k| (d[k * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8))
    }))
}

pub fn tensor_to_gray(map: &Tensor) -> Result<GrayImage> {
    let (_, _, h, w) = map.dims4()?;
    let d = map.data();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(d[y as usize * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8])
    }))
}

pub fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Write `count` synthetic pairs as `DIR/images/NNNN.png` and `DIR/masks/NNNN.png`.
pub fn write_synthetic(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    for sub in ["images", "masks"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    for (i, s) in synthetic::dataset(seed, count, size, size).iter().enumerate() {
        let name = format!("{i:04}.png");
        save_png(&tensor_to_rgb(&s.image)?, &dir.join("images").join(&name))?;
        save_png(&tensor_to_gray(&s.mask)?, &dir.join("masks").join(&name))?;
    }
    Ok(())
}

//! PNG dataset directories: `root/images/<stem>.png` with optional
//! `root/masks/<stem>.png` (8-bit, foreground at 128 and above).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

use super::{Dataset, Item, CHANNELS};

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads and resizes every image (bilinear) and mask (nearest) to
/// `height x width`. Items come in lexicographic stem order. An absent or
/// empty `masks/` directory yields an unlabeled dataset; otherwise every
/// image needs a mask of its own size and every mask an image.
pub fn load_dataset(root: &Path, height: usize, width: usize) -> Result<Dataset> {
    let images_dir = root.join("images");
    if !images_dir.is_dir() {
        return Err(Error::Data(format!("{} has no images/ directory", root.display())));
    }
    let images = png_stems(&images_dir)?;
    let masks_dir = root.join("masks");
    let masks = if masks_dir.is_dir() {
        png_stems(&masks_dir)?
    } else {
        BTreeMap::new()
    };
    if let Some(stem) = masks.keys().find(|s| !images.contains_key(*s)) {
        return Err(Error::Data(format!("mask `{stem}` has no matching image")));
    }
    if !masks.is_empty() {
        if let Some(stem) = images.keys().find(|s| !masks.contains_key(*s)) {
            return Err(Error::Data(format!("image `{stem}` has no matching mask")));
        }
    }
    let (h32, w32) = (height as u32, width as u32);
    let mut items = Vec::with_capacity(images.len());
    for (stem, path) in &images {
        let rgb = open(path)?.to_rgb8();
        let dims = rgb.dimensions();
        let rgb = if dims == (w32, h32) {
            rgb
        } else {
            imageops::resize(&rgb, w32, h32, FilterType::Triangle)
        };
        let plane = height * width;
        let mut image = vec![0f32; CHANNELS * plane];
        for (k, px) in rgb.pixels().enumerate() {
            for c in 0..CHANNELS {
                image[c * plane + k] = px[c] as f32 / 255.0;
            }
        }
        let mask = match masks.get(stem) {
            None => None,
            Some(mp) => {
                let gray = open(mp)?.to_luma8();
                if gray.dimensions() != dims {
                    return Err(Error::Data(format!(
                        "mask `{stem}` is {}x{} but its image is {}x{}",
                        gray.width(),
                        gray.height(),
                        dims.0,
                        dims.1
                    )));
                }
                let gray = if dims == (w32, h32) {
                    gray
                } else {
                    imageops::resize(&gray, w32, h32, FilterType::Nearest)
                };
                Some(gray.pixels().map(|p| p[0] >= 128).collect())
            }
        };
        items.push(Item {
            id: stem.clone(),
            image,
            mask,
        });
    }
    let name = root
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Dataset::new(name, height, width, items)
}

/// Writes the layout [`load_dataset`] reads. Pixel values are rounded to
/// 8 bits; masks are written as 0/255.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let masks_dir = root.join("masks");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    if ds.items.iter().any(|it| it.mask.is_some()) {
        std::fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    }
    let (h, w) = (ds.height, ds.width);
    let plane = h * w;
    for it in &ds.items {
        let mut buf = Vec::with_capacity(CHANNELS * plane);
        for k in 0..plane {
            for c in 0..CHANNELS {
                buf.push((it.image[c * plane + k].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let path = images_dir.join(format!("{}.png", it.id));
        RgbImage::from_raw(w as u32, h as u32, buf)
            .expect("buffer sized to the image")
            .save(&path)
            .map_err(|source| Error::Image { path, source })?;
        if let Some(m) = &it.mask {
            let path = masks_dir.join(format!("{}.png", it.id));
            let buf = m.iter().map(|&f| if f { 255 } else { 0 }).collect();
            GrayImage::from_raw(w as u32, h as u32, buf)
                .expect("buffer sized to the mask")
                .save(&path)
                .map_err(|source| Error::Image { path, source })?;
        }
    }
    Ok(())
}

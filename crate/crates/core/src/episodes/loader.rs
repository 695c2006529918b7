//! Directory datasets: `root/<class>/<image>.png` plus a tab-separated split
//! manifest with lines `<class>\t<train|val|test>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, RgbImage};

use super::dataset::{ClassRecord, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Parses manifest text into class → split. Blank lines and `#` comments are
/// skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut out: BTreeMap<String, Split> = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, split) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("manifest line {}: expected `<class>\\t<split>`", n + 1))
        })?;
        let split: Split = split.trim().parse()?;
        if let Some(prev) = out.insert(name.to_string(), split) {
            return Err(Error::Data(format!(
                "manifest assigns class `{name}` to both {prev} and {split}"
            )));
        }
    }
    Ok(out)
}

pub fn format_manifest(dataset: &Dataset) -> String {
    dataset
        .classes()
        .iter()
        .map(|c| format!("{}\t{}\n", c.name, c.split))
        .collect()
}

pub fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Decodes one image file to a `size×size×channels` tensor in `[0, 1]`,
/// resizing bilinearly when needed.
pub fn load_image(path: &Path, size: usize, channels: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let side = size as u32;
    let resize = |img: DynamicImage| {
        if img.width() == side && img.height() == side {
            img
        } else {
            img.resize_exact(side, side, FilterType::Triangle)
        }
    };
    let data: Vec<f64> = match channels {
        1 => resize(DynamicImage::ImageLuma8(img.to_luma8()))
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        3 => resize(DynamicImage::ImageRgb8(img.to_rgb8()))
            .to_rgb8()
            .into_raw()
            .into_iter()
            .map(|v| f64::from(v) / 255.0)
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "images must have 1 or 3 channels, config asks for {other}"
            )))
        }
    };
    Tensor::new(&[size, size, channels], data)
}

/// Loads every class listed in the manifest, resizing images bilinearly to
/// `size×size` and scaling pixel values into `[0, 1]`.
pub fn load_dataset(root: &Path, manifest: &Path, size: usize, channels: usize) -> Result<Dataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let assignment = parse_manifest(&text)?;

    let mut on_disk = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.file_type().map_err(|e| Error::io(entry.path(), e))?.is_dir() {
            on_disk.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    on_disk.sort();
    if let Some(unknown) = assignment.keys().find(|k| !on_disk.contains(k)) {
        return Err(Error::Data(format!(
            "manifest names class `{unknown}` but {} has no such directory",
            root.display()
        )));
    }
    if let Some(unassigned) = on_disk.iter().find(|d| !assignment.contains_key(*d)) {
        return Err(Error::Data(format!(
            "class directory `{unassigned}` is not assigned to a split in the manifest"
        )));
    }

    let mut next_id = 0u64;
    let mut classes = Vec::with_capacity(on_disk.len());
    for name in on_disk {
        let dir = root.join(&name);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_png(p))
            .collect();
        files.sort();
        let mut images = Vec::with_capacity(files.len());
        for path in files {
            images.push(Image {
                id: next_id,
                source: path.display().to_string(),
                pixels: Arc::new(load_image(&path, size, channels)?),
            });
            next_id += 1;
        }
        classes.push(ClassRecord {
            split: assignment[&name],
            name,
            images,
        });
    }
    let ds = Dataset::new(classes)?;
    ds.check_disjoint()?;
    Ok(ds)
}

/// Quantizes a `[0, 1]` image to 8 bits per channel.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = match *image.shape() {
        [h, w, c] => [h, w, c],
        ref s => return Err(Error::shape("encode_png", format!("expected H×W×C, got {s:?}"))),
    };
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let dynamic = match c {
        1 => DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from shape"),
        ),
        3 => DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized from shape"),
        ),
        other => return Err(Error::Data(format!("cannot encode {other}-channel image"))),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynamic
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("png encoding failed: {e}")))?;
    Ok(out.into_inner())
}

/// Writes `dataset` in the directory layout [`load_dataset`] reads, with the
/// manifest at `root/manifest.tsv`. Returns the number of images written.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<usize> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut written = 0;
    for class in dataset.classes() {
        let dir = root.join(&class.name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, img) in class.images.iter().enumerate() {
            let path = dir.join(format!("{i:04}.png"));
            fs::write(&path, encode_png(&img.pixels)?).map_err(|e| Error::io(&path, e))?;
            written += 1;
        }
    }
    let manifest = root.join(MANIFEST_NAME);
    fs::write(&manifest, format_manifest(dataset)).map_err(|e| Error::io(&manifest, e))?;
    Ok(written)
}

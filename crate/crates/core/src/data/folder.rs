//! `root/<class>/<image>` layout. Class indices follow sorted directory names.

use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use super::{Dataset, Sample};
use crate::error::{Error, Result};

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads every image, resizing to `size × size` (Catmull-Rom) as the
/// canonical resolution. Empty class directories and undecodable files are
/// errors.
pub fn load_image_folder(root: &Path, size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", root.display())));
    }
    let class_dirs: Vec<_> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("no class directories under {}", root.display())));
    }
    let mut samples = Vec::new();
    let mut class_names = Vec::with_capacity(class_dirs.len());
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let files: Vec<_> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_image(p)).collect();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} has no images", dir.display())));
        }
        for file in files {
            let img = image::open(&file)
                .map_err(|e| Error::Dataset(format!("cannot decode {}: {e}", file.display())))?
                .resize_exact(size as u32, size as u32, FilterType::CatmullRom)
                .into_rgb8();
            let image = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
                img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
            });
            let rel = file.strip_prefix(root).unwrap_or(&file);
            samples.push(Sample {
                image_id: rel.to_string_lossy().replace('\\', "/"),
                image,
                label,
                lesion_mask: None,
            });
        }
        class_names.push(name);
    }
    Ok(Dataset {
        samples,
        num_classes: class_names.len(),
        class_names,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write(path: &Path, w: u32, h: u32, v: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, Rgb([v, v, v])).save(path).unwrap();
    }

    #[test]
    fn loads_sorted_classes_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("b_nevus/1.png"), 20, 10, 255);
        write(&dir.path().join("a_mel/2.png"), 8, 8, 0);
        write(&dir.path().join("a_mel/1.png"), 8, 8, 0);
        std::fs::write(dir.path().join("a_mel/notes.txt"), "x").unwrap();
        let d = load_image_folder(dir.path(), 16).unwrap();
        assert_eq!(d.class_names, vec!["a_mel", "b_nevus"]);
        assert_eq!(d.labels(), vec![0, 0, 1]);
        assert_eq!(d.samples[0].image_id, "a_mel/1.png");
        assert!(d.samples.iter().all(|s| s.image.dim() == (16, 16, 3)));
        assert!(d.samples[2].image.iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write(&dir.path().join("a/1.png"), 4, 4, 1);
        std::fs::create_dir_all(dir.path().join("b")).unwrap();
        assert!(matches!(load_image_folder(dir.path(), 8), Err(Error::Dataset(_))));
    }

    #[test]
    fn corrupt_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/bad.png"), b"not a png").unwrap();
        let err = load_image_folder(dir.path(), 8).unwrap_err();
        assert!(err.to_string().contains("bad.png"));
    }
}

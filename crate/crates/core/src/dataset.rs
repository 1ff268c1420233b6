//! Dataset manifests.
//!
//! One record per line: `image_path<TAB>gt_1[,gt_2,…]`. Relative paths are
//! resolved against the manifest's directory. Blank lines and lines
//! starting with `#` are ignored. Ground-truth files are single-channel
//! images holding only 0 and full-scale values, one per annotator.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{fuse_annotations, BinaryMap};
use crate::io::read_image;
use crate::tensor::{Shape, Tensor};
use crate::trainer::Sample;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub gts: Vec<PathBuf>,
}

impl ManifestEntry {
    /// File stem of the image path.
    pub fn id(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let resolve = |p: &str| {
        let p = Path::new(p.trim());
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, gts) = line.split_once('\t').ok_or_else(|| {
            Error::Invalid(format!(
                "manifest line {}: expected `image<TAB>gt[,gt…]`",
                n + 1
            ))
        })?;
        let gts: Vec<PathBuf> = gts
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(resolve)
            .collect();
        if img.trim().is_empty() || gts.is_empty() {
            return Err(Error::Invalid(format!(
                "manifest line {}: needs an image and at least one ground-truth path",
                n + 1
            )));
        }
        out.push(ManifestEntry {
            image: resolve(img),
            gts,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_manifest(&text, base)
}

/// Renders entries with paths as given.
pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    entries
        .iter()
        .map(|e| {
            let gts: Vec<String> = e.gts.iter().map(|p| p.display().to_string()).collect();
            format!("{}\t{}\n", e.image.display(), gts.join(","))
        })
        .collect()
}

/// Reads a binary annotation map.
pub fn read_binary_map(path: impl AsRef<Path>) -> Result<BinaryMap> {
    let path = path.as_ref();
    let t = read_image(path)?;
    if t.shape().c != 1 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: "ground truth must be a single-channel image".into(),
        });
    }
    BinaryMap::from_tensor(&t).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn read_annotations(entry: &ManifestEntry) -> Result<Vec<BinaryMap>> {
    entry.gts.iter().map(read_binary_map).collect()
}

/// Expands a single-channel image to three identical channels.
pub fn to_rgb(t: Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    if s.c != 1 {
        return t;
    }
    let mut data = Vec::with_capacity(3 * t.numel());
    for _ in 0..3 {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(Shape::new(s.n, 3, s.h, s.w), data).expect("three planes")
}

/// Loads every manifest entry as a training sample with fused ground truth.
pub fn load_samples(entries: &[ManifestEntry]) -> Result<Vec<Sample>> {
    entries
        .iter()
        .map(|e| {
            let image = to_rgb(read_image(&e.image)?);
            let gt = fuse_annotations(&read_annotations(e)?)?;
            Sample::new(image, gt, e.id()).map_err(|err| Error::Image {
                path: e.image.clone(),
                msg: err.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{write_image, BitDepth};

    #[test]
    fn parse_and_resolve() {
        let text = "# comment\na.png\tg1.pgm,g2.pgm\n\n/abs/b.png\t/abs/g.pgm\r\n";
        let m = parse_manifest(text, Path::new("/data")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].image, PathBuf::from("/data/a.png"));
        assert_eq!(
            m[0].gts,
            vec![PathBuf::from("/data/g1.pgm"), PathBuf::from("/data/g2.pgm")]
        );
        assert_eq!(m[1].gts, vec![PathBuf::from("/abs/g.pgm")]);
        assert_eq!(m[0].id(), "a");
        assert!(parse_manifest("a.png g.pgm\n", Path::new(".")).is_err());
        assert!(parse_manifest("a.png\t\n", Path::new(".")).is_err());
    }

    #[test]
    fn load_fuses_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::full(Shape::new(1, 1, 2, 2), 0.5);
        write_image(dir.path().join("i.png"), &img, BitDepth::Eight).unwrap();
        let g1 = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g2 = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        write_image(dir.path().join("g1.pgm"), &g1, BitDepth::Eight).unwrap();
        write_image(dir.path().join("g2.pgm"), &g2, BitDepth::Sixteen).unwrap();
        let mpath = dir.path().join("m.tsv");
        fs::write(&mpath, "i.png\tg1.pgm,g2.pgm\n").unwrap();
        let samples = load_samples(&read_manifest(&mpath).unwrap()).unwrap();
        assert_eq!(samples[0].image.shape(), Shape::new(1, 3, 2, 2));
        assert_eq!(samples[0].gt.values(), &[1.0, 0.5, 0.0, 0.5]);

        fs::write(&mpath, "i.png\tmissing.pgm\n").unwrap();
        let err = load_samples(&read_manifest(&mpath).unwrap()).unwrap_err();
        assert!(err.to_string().contains("missing.pgm"), "{err}");
    }

    #[test]
    fn soft_ground_truth_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 0.5]).unwrap();
        let p = dir.path().join("g.pgm");
        write_image(&p, &g, BitDepth::Eight).unwrap();
        assert!(read_binary_map(&p).is_err());
    }
}

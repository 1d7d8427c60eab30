//! Image-folder datasets described by a manifest file.
//!
//! One tracklet per line, tab-separated:
//!
//! ```text
//! <tracklet_id>\t<identity>\t<camera>\t<path1>,<path2>,...
//! ```
//!
//! Identity and camera are unsigned integers; frame paths are relative to
//! the manifest's directory (absolute paths are used as is). Blank lines and
//! lines starting with `#` are skipped. Accepted image formats: PNG, BMP
//! and PNM (PBM/PGM/PPM). Images are converted to RGB (or grey for one
//! channel), scaled to `[0, 1]` and resized to the configured shape.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::{Dataset, FrameFlags, TrackletRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads a manifest, loading every frame as `[C × H × W]` with
/// `shape = [C, H, W]` (`C` ∈ {1, 3}).
pub fn load_manifest(path: &Path, shape: [usize; 3]) -> Result<Dataset> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::Config(format!("images must have 1 or 3 channels, not {c}")));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut tracklets = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, identity, camera, frames] = fields[..] else {
            return Err(bad(format!("expected 4 tab-separated fields, found {}", fields.len())));
        };
        let identity: u32 = identity.trim().parse().map_err(|_| bad(format!("bad identity `{identity}`")))?;
        let camera: u32 = camera.trim().parse().map_err(|_| bad(format!("bad camera `{camera}`")))?;
        let paths: Vec<&str> = frames.split(',').map(str::trim).filter(|p| !p.is_empty()).collect();
        if paths.is_empty() {
            return Err(bad("tracklet has no frames".into()));
        }
        let mut data = Vec::with_capacity(paths.len() * c * h * w);
        for p in &paths {
            data.extend(load_image(&root.join(p), shape)?);
        }
        tracklets.push(TrackletRecord {
            id: id.to_string(),
            identity,
            camera,
            frames: Tensor::new([paths.len(), c, h, w], data)?,
            flags: vec![FrameFlags::default(); paths.len()],
        });
    }
    Ok(Dataset { tracklets })
}

fn load_image(path: &Path, [c, h, w]: [usize; 3]) -> Result<Vec<f64>> {
    let err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    let img = image::ImageReader::open(path)
        .map_err(|e| err(e.to_string()))?
        .with_guessed_format()
        .map_err(|e| err(e.to_string()))?
        .decode()
        .map_err(|e| err(e.to_string()))?;
    let img = if img.width() as usize != w || img.height() as usize != h {
        img.resize_exact(w as u32, h as u32, FilterType::Triangle)
    } else {
        img
    };
    let mut out = vec![0.0; c * h * w];
    if c == 1 {
        for (i, p) in img.to_luma8().pixels().enumerate() {
            out[i] = p.0[0] as f64 / 255.0;
        }
    } else {
        for (i, p) in img.to_rgb8().pixels().enumerate() {
            for ch in 0..3 {
                out[ch * h * w + i] = p.0[ch] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

fn to_image(frame: &[f64], [c, h, w]: [usize; 3]) -> DynamicImage {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if c == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([q(frame[y as usize * w + x as usize])])
        }))
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([q(frame[i]), q(frame[h * w + i]), q(frame[2 * h * w + i])])
        }))
    }
}

/// Writes every frame as a PNG under `dir/frames/` and the manifest to
/// `dir/manifest.tsv`, returning the manifest path.
pub fn export_manifest(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let manifest_path = dir.join("manifest.tsv");
    let mut manifest = fs::File::create(&manifest_path)?;
    for t in &dataset.tracklets {
        let s = t.frames.shape();
        let shape = [s[1], s[2], s[3]];
        let n = shape.iter().product::<usize>();
        if shape[0] != 1 && shape[0] != 3 {
            return Err(Error::Data(format!("cannot export {}-channel frames", shape[0])));
        }
        let mut paths = Vec::with_capacity(s[0]);
        for (i, frame) in t.frames.data().chunks(n).enumerate() {
            let rel = format!("frames/{}_{i:03}.png", t.id);
            to_image(frame, shape)
                .save(dir.join(&rel))
                .map_err(|e| Error::Image {
                    path: dir.join(&rel),
                    msg: e.to_string(),
                })?;
            paths.push(rel);
        }
        writeln!(manifest, "{}\t{}\t{}\t{}", t.id, t.identity, t.camera, paths.join(","))?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "").unwrap();
        assert!(load_manifest(&p, [3, 4, 4]).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "# header\n\nt1\tx\t0\ta.png\n").unwrap();
        let err = load_manifest(&p, [3, 4, 4]).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }), "{err}");
        fs::write(&p, "t1\t1\t0\n").unwrap();
        assert!(matches!(load_manifest(&p, [3, 4, 4]), Err(Error::Manifest { line: 1, .. })));
    }

    #[test]
    fn missing_and_unsupported_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "t1\t1\t0\tnope.png\n").unwrap();
        assert!(matches!(load_manifest(&p, [3, 4, 4]), Err(Error::Image { .. })));
        fs::write(dir.path().join("f.txt"), "not an image").unwrap();
        fs::write(&p, "t1\t1\t0\tf.txt\n").unwrap();
        assert!(matches!(load_manifest(&p, [3, 4, 4]), Err(Error::Image { .. })));
        assert!(load_manifest(&dir.path().join("absent.tsv"), [3, 4, 4]).is_err());
    }

    #[test]
    fn single_frame_tracklet_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(8, 8, |_, _| Rgb([255u8, 0, 51]));
        img.save(dir.path().join("a.png")).unwrap();
        let p = dir.path().join("m.tsv");
        fs::write(&p, "t1\t7\t2\ta.png\n").unwrap();
        let d = load_manifest(&p, [3, 4, 2]).unwrap();
        let t = &d.tracklets[0];
        assert_eq!((t.identity, t.camera, t.len()), (7, 2, 1));
        assert_eq!(t.frames.shape(), &[1, 3, 4, 2]);
        assert!(t.frames.data()[..8].iter().all(|&v| v == 1.0));
        assert!(t.frames.data()[16..].iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }
}

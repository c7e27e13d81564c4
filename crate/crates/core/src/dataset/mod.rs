//! Posed RGB-D sequence ingestion and the on-disk sequence format.
//!
//! Layout of a sequence directory:
//! ```text
//! <dir>/intrinsics.txt   # one line: fx fy cx cy width height depth_scale
//! <dir>/poses.txt        # one line per frame: 16 row-major floats (T_WC)
//! <dir>/rgb/%06d.png     # 8-bit RGB
//! <dir>/depth/%06d.png   # 16-bit grayscale, 0 = invalid
//! ```

pub mod synthetic;

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use image::{ImageReader, RgbImage};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, Pose};

#[derive(Error, Debug)]
pub enum DatasetError {
    #[error("missing intrinsics file {0}")]
    MissingIntrinsics(PathBuf),
    #[error("malformed intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("poses.txt has {poses} lines but {images} image pairs were found")]
    PoseCountMismatch { poses: usize, images: usize },
    #[error("bad image {name}: {reason}")]
    BadImage { name: String, reason: String },
    #[error("malformed pose line {line}: {reason}")]
    BadPose { line: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Depth image in meters, 0 = invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.data[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, meters: f64) {
        self.data[(y * self.width + x) as usize] = meters;
    }

    /// Nearest-neighbor lookup at a continuous pixel coordinate; `None`
    /// outside the image or where depth is invalid.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (x, y) = (u.floor(), v.floor());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let d = self.get(x as u32, y as u32);
        (d > 0.0 && d.is_finite()).then_some(d)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// One posed RGB-D frame of a sequence.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub pose: Pose,
}

/// A fully loaded sequence.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<Frame>,
}

/// Validated directory listing of a sequence, before any image decoding.
/// Lets transports ship raw PNG bytes without decoding them locally.
#[derive(Debug, Clone)]
pub struct SequenceDir {
    pub dir: PathBuf,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
}

impl SequenceDir {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
        let poses = read_poses(&dir.join("poses.txt"))?;
        let images = count_frame_images(dir)?;
        if images != poses.len() {
            return Err(DatasetError::PoseCountMismatch {
                poses: poses.len(),
                images,
            });
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            intrinsics,
            poses,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn rgb_path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("rgb/{index:06}.png"))
    }

    pub fn depth_path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("depth/{index:06}.png"))
    }

    /// Raw PNG bytes for a frame, undecoded.
    pub fn frame_bytes(&self, index: usize) -> Result<(Vec<u8>, Vec<u8>), DatasetError> {
        let rgb_path = self.rgb_path(index);
        let depth_path = self.depth_path(index);
        let rgb = std::fs::read(&rgb_path).map_err(io_err(&rgb_path))?;
        let depth = std::fs::read(&depth_path).map_err(io_err(&depth_path))?;
        Ok((rgb, depth))
    }

    pub fn decode_frame(&self, index: usize) -> Result<Frame, DatasetError> {
        let (rgb_bytes, depth_bytes) = self.frame_bytes(index)?;
        let rgb = decode_rgb_png(&rgb_bytes, &format!("rgb/{index:06}.png"), &self.intrinsics)?;
        let depth = decode_depth_png(
            &depth_bytes,
            &format!("depth/{index:06}.png"),
            &self.intrinsics,
        )?;
        Ok(Frame {
            index,
            rgb,
            depth,
            pose: self.poses[index],
        })
    }
}

/// Iterator over decoded frames with background read-ahead. A worker
/// thread decodes up to `lookahead` frames in advance; delivery stays in
/// index order.
pub struct FrameIter {
    rx: mpsc::Receiver<Result<Frame, DatasetError>>,
    remaining: usize,
}

impl FrameIter {
    fn spawn(seq: SequenceDir, lookahead: usize) -> Self {
        let remaining = seq.len();
        let (tx, rx) = mpsc::sync_channel(lookahead.max(1));
        std::thread::spawn(move || {
            for index in 0..seq.len() {
                let frame = seq.decode_frame(index);
                let failed = frame.is_err();
                if tx.send(frame).is_err() || failed {
                    break;
                }
            }
        });
        Self { rx, remaining }
    }
}

impl Iterator for FrameIter {
    type Item = Result<Frame, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        match self.rx.recv() {
            Ok(item) => {
                if item.is_err() {
                    self.remaining = 0;
                }
                Some(item)
            }
            Err(_) => None,
        }
    }
}

/// Open a sequence directory and yield frames in index order.
pub fn load_sequence(dir: &Path) -> Result<(Intrinsics, FrameIter), DatasetError> {
    let seq = SequenceDir::open(dir)?;
    let intrinsics = seq.intrinsics;
    Ok((intrinsics, FrameIter::spawn(seq, 4)))
}

/// Load every frame of a sequence into memory.
pub fn load_sequence_eager(dir: &Path) -> Result<Sequence, DatasetError> {
    let (intrinsics, iter) = load_sequence(dir)?;
    let frames = iter.collect::<Result<Vec<_>, _>>()?;
    Ok(Sequence { intrinsics, frames })
}

fn count_frame_images(dir: &Path) -> Result<usize, DatasetError> {
    let count_pngs = |sub: &str| -> Result<usize, DatasetError> {
        let path = dir.join(sub);
        let entries = std::fs::read_dir(&path).map_err(io_err(&path))?;
        let mut n = 0;
        for entry in entries {
            let entry = entry.map_err(io_err(&path))?;
            if entry.path().extension().is_some_and(|e| e == "png") {
                n += 1;
            }
        }
        Ok(n)
    };
    let rgb = count_pngs("rgb")?;
    let depth = count_pngs("depth")?;
    Ok(rgb.min(depth))
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| DatasetError::MissingIntrinsics(path.to_path_buf()))?;
    parse_intrinsics_line(&text)
}

pub fn parse_intrinsics_line(text: &str) -> Result<Intrinsics, DatasetError> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|e| DatasetError::BadIntrinsics(format!("{tok:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if vals.len() != 7 {
        return Err(DatasetError::BadIntrinsics(format!(
            "expected 7 values (fx fy cx cy width height depth_scale), got {}",
            vals.len()
        )));
    }
    Intrinsics::new(
        vals[0],
        vals[1],
        vals[2],
        vals[3],
        vals[4] as u32,
        vals[5] as u32,
        vals[6],
    )
    .map_err(DatasetError::from)
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| DatasetError::BadPose {
                    line: lineno + 1,
                    reason: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<_, _>>()?;
        if vals.len() != 16 {
            return Err(DatasetError::BadPose {
                line: lineno + 1,
                reason: format!("expected 16 values, got {}", vals.len()),
            });
        }
        let arr: [f64; 16] = vals.try_into().unwrap();
        poses.push(Pose::from_row_major(&arr).map_err(|e| DatasetError::BadPose {
            line: lineno + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(poses)
}

/// Decode an 8-bit RGB PNG, checking dimensions against the intrinsics.
pub fn decode_rgb_png(
    bytes: &[u8],
    name: &str,
    k: &Intrinsics,
) -> Result<RgbImage, DatasetError> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| bad_image(name, format!("unreadable: {e}")))?
        .decode()
        .map_err(|e| bad_image(name, format!("decode failed: {e}")))?;
    let rgb = match img {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(bad_image(
                name,
                format!("expected 8-bit RGB, got {:?}", other.color()),
            ))
        }
    };
    if rgb.width() != k.width || rgb.height() != k.height {
        return Err(bad_image(
            name,
            format!(
                "size {}x{} does not match intrinsics {}x{}",
                rgb.width(),
                rgb.height(),
                k.width,
                k.height
            ),
        ));
    }
    Ok(rgb)
}

/// Decode a 16-bit grayscale PNG into meters via the depth scale.
pub fn decode_depth_png(
    bytes: &[u8],
    name: &str,
    k: &Intrinsics,
) -> Result<DepthImage, DatasetError> {
    let img = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| bad_image(name, format!("unreadable: {e}")))?
        .decode()
        .map_err(|e| bad_image(name, format!("decode failed: {e}")))?;
    let gray = match img {
        image::DynamicImage::ImageLuma16(g) => g,
        other => {
            return Err(bad_image(
                name,
                format!("expected 16-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    if gray.width() != k.width || gray.height() != k.height {
        return Err(bad_image(
            name,
            format!(
                "size {}x{} does not match intrinsics {}x{}",
                gray.width(),
                gray.height(),
                k.width,
                k.height
            ),
        ));
    }
    let mut depth = DepthImage::new(k.width, k.height);
    for (x, y, px) in gray.enumerate_pixels() {
        let raw = px.0[0];
        if raw > 0 {
            depth.set(x, y, raw as f64 * k.depth_scale);
        }
    }
    Ok(depth)
}

fn bad_image(name: &str, reason: String) -> DatasetError {
    DatasetError::BadImage {
        name: name.to_string(),
        reason,
    }
}

/// Write one frame pair to `<dir>/rgb` and `<dir>/depth`.
pub fn write_frame_images(
    dir: &Path,
    index: usize,
    rgb: &RgbImage,
    depth: &DepthImage,
    depth_scale: f64,
) -> Result<(), DatasetError> {
    let rgb_path = dir.join(format!("rgb/{index:06}.png"));
    rgb.save(&rgb_path)
        .map_err(|e| bad_image(&rgb_path.display().to_string(), e.to_string()))?;
    let mut gray = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(depth.width, depth.height);
    for (x, y, px) in gray.enumerate_pixels_mut() {
        let meters = depth.get(x, y);
        let raw = if meters > 0.0 {
            (meters / depth_scale).round().clamp(0.0, u16::MAX as f64) as u16
        } else {
            0
        };
        *px = image::Luma([raw]);
    }
    let depth_path = dir.join(format!("depth/{index:06}.png"));
    gray.save(&depth_path)
        .map_err(|e| bad_image(&depth_path.display().to_string(), e.to_string()))?;
    Ok(())
}

/// Write intrinsics + poses and create the image directories.
pub fn write_sequence_headers(
    dir: &Path,
    k: &Intrinsics,
    poses: &[Pose],
) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir.join("rgb")).map_err(io_err(dir))?;
    std::fs::create_dir_all(dir.join("depth")).map_err(io_err(dir))?;
    let intr = format!(
        "{} {} {} {} {} {} {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.depth_scale
    );
    let intr_path = dir.join("intrinsics.txt");
    std::fs::write(&intr_path, intr).map_err(io_err(&intr_path))?;
    let mut poses_text = String::new();
    for pose in poses {
        let vals = pose.to_row_major();
        let line: Vec<String> = vals.iter().map(|v| format!("{v:.17}")).collect();
        poses_text.push_str(&line.join(" "));
        poses_text.push('\n');
    }
    let poses_path = dir.join("poses.txt");
    std::fs::write(&poses_path, poses_text).map_err(io_err(&poses_path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny_intrinsics() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 8.0, 6.0, 16, 12, 1e-3).unwrap()
    }

    fn write_well_formed(dir: &Path, frames: usize) {
        let k = tiny_intrinsics();
        let poses = vec![Pose::identity(); frames];
        write_sequence_headers(dir, &k, &poses).unwrap();
        for i in 0..frames {
            let rgb = RgbImage::from_pixel(16, 12, image::Rgb([10, 20, 30]));
            let mut depth = DepthImage::new(16, 12);
            depth.set(4, 4, 1.5);
            write_frame_images(dir, i, &rgb, &depth, k.depth_scale).unwrap();
        }
    }

    #[test]
    fn load_well_formed_sequence() {
        let tmp = tempfile::tempdir().unwrap();
        write_well_formed(tmp.path(), 3);
        let seq = load_sequence_eager(tmp.path()).unwrap();
        assert_eq!(seq.frames.len(), 3);
        for (i, f) in seq.frames.iter().enumerate() {
            assert_eq!(f.index, i);
            assert_eq!(f.depth.get(4, 4), 1.5);
            assert_eq!(f.depth.get(0, 0), 0.0);
        }
    }

    #[test]
    fn pose_count_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        write_well_formed(tmp.path(), 3);
        // Append a fourth pose line.
        let poses_path = tmp.path().join("poses.txt");
        let mut text = std::fs::read_to_string(&poses_path).unwrap();
        let one_line = text.lines().next().unwrap().to_string();
        text.push_str(&one_line);
        text.push('\n');
        std::fs::write(&poses_path, text).unwrap();
        let err = load_sequence_eager(tmp.path()).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::PoseCountMismatch { poses: 4, images: 3 }
        ));
    }

    #[test]
    fn wrong_depth_bit_depth_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        write_well_formed(tmp.path(), 1);
        // Overwrite the depth image with an 8-bit one.
        let bad = image::GrayImage::from_pixel(16, 12, image::Luma([7u8]));
        bad.save(tmp.path().join("depth/000000.png")).unwrap();
        let err = load_sequence_eager(tmp.path()).unwrap_err();
        match err {
            DatasetError::BadImage { name, .. } => assert!(name.contains("000000")),
            other => panic!("expected BadImage, got {other:?}"),
        }
    }

    #[test]
    fn missing_intrinsics() {
        let tmp = tempfile::tempdir().unwrap();
        let err = SequenceDir::open(tmp.path()).unwrap_err();
        assert!(matches!(err, DatasetError::MissingIntrinsics(_)));
    }

    #[test]
    fn depth_quantization_roundtrip_within_one_unit() {
        let tmp = tempfile::tempdir().unwrap();
        let k = tiny_intrinsics();
        write_sequence_headers(tmp.path(), &k, &[Pose::identity()]).unwrap();
        let rgb = RgbImage::new(16, 12);
        let mut depth = DepthImage::new(16, 12);
        depth.set(3, 3, 1.23456);
        depth.set(5, 5, 0.0); // invalid stays invalid
        write_frame_images(tmp.path(), 0, &rgb, &depth, k.depth_scale).unwrap();
        let seq = load_sequence_eager(tmp.path()).unwrap();
        let loaded = &seq.frames[0].depth;
        assert!((loaded.get(3, 3) - 1.23456).abs() <= k.depth_scale);
        assert_eq!(loaded.get(5, 5), 0.0);
    }

    #[test]
    fn pose_file_roundtrip_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let k = tiny_intrinsics();
        let rot = crate::geometry::rotation_about_axis(Vector3::new(0.3, 1.0, -0.2), 0.7);
        let pose = Pose::new(rot, Vector3::new(0.1, -0.2, 0.3)).unwrap();
        write_sequence_headers(tmp.path(), &k, &[pose]).unwrap();
        let poses = read_poses(&tmp.path().join("poses.txt")).unwrap();
        let diff = (poses[0].rotation - pose.rotation).abs().max();
        assert!(diff < 1e-9, "pose roundtrip diff {diff}");
        assert!((poses[0].translation - pose.translation).abs().max() < 1e-9);
    }
}

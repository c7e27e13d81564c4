//! On-disk persistence of the two maps: a 3DGS-viewer-compatible binary PLY
//! for the Gaussians and a compact block dump for the TSDF volume. Both
//! formats round-trip bitwise and are written deterministically (blocks
//! sorted by Morton code, Gaussians in index order).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use thiserror::Error;

use crate::gaussians::{Gaussian3D, GaussianMap};
use crate::tsdf::{FusionRule, TsdfVoxel, TsdfVolume, VoxelBlock, BLOCK_VOLUME};

#[derive(Error, Debug)]
pub enum ExportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed file: {0}")]
    Format(String),
}

const TSDF_MAGIC: &[u8; 4] = b"GSFU";
const TSDF_VERSION: u32 = 1;
/// Reserved header bytes padding the header to a fixed 44-byte size.
const TSDF_HEADER_RESERVED: usize = 16;
pub const TSDF_HEADER_BYTES: u64 = 44;
pub const TSDF_BLOCK_BYTES: u64 = 8 + (BLOCK_VOLUME as u64) * 8;

/// Number of f32 fields of one PLY record at a given SH degree.
fn ply_fields(coeff_count: usize) -> usize {
    // x y z nx ny nz f_dc(3) f_rest(3*(K-1)) opacity scale(3) rot(4)
    3 + 3 + 3 + 3 * (coeff_count - 1) + 1 + 3 + 4
}

fn ply_header(count: usize, coeff_count: usize) -> String {
    let mut header = String::new();
    header.push_str("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("element vertex {count}\n"));
    for name in ["x", "y", "z", "nx", "ny", "nz"] {
        header.push_str(&format!("property float {name}\n"));
    }
    for i in 0..3 {
        header.push_str(&format!("property float f_dc_{i}\n"));
    }
    for i in 0..3 * (coeff_count - 1) {
        header.push_str(&format!("property float f_rest_{i}\n"));
    }
    header.push_str("property float opacity\n");
    for i in 0..3 {
        header.push_str(&format!("property float scale_{i}\n"));
    }
    for i in 0..4 {
        header.push_str(&format!("property float rot_{i}\n"));
    }
    header.push_str("end_header\n");
    header
}

/// Write the map as binary little-endian PLY, omitting Gaussians with
/// opacity below `opacity_cull`. Returns the number of records written.
pub fn export_gaussians_ply(
    map: &GaussianMap,
    path: &Path,
    opacity_cull: f64,
) -> Result<usize, ExportError> {
    let coeff_count = map.coeff_count();
    let kept: Vec<&Gaussian3D> = map
        .gaussians()
        .iter()
        .filter(|g| g.alpha() >= opacity_cull)
        .collect();

    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(ply_header(kept.len(), coeff_count).as_bytes())?;
    let mut record: Vec<f32> = Vec::with_capacity(ply_fields(coeff_count));
    for g in kept.iter() {
        record.clear();
        record.extend([g.position.x as f32, g.position.y as f32, g.position.z as f32]);
        record.extend([0.0f32; 3]); // normals, unused
        record.extend([g.sh[0].x as f32, g.sh[0].y as f32, g.sh[0].z as f32]);
        // Higher-order coefficients, channel-major.
        for ch in 0..3 {
            for coeff in &g.sh[1..] {
                record.push(coeff[ch] as f32);
            }
        }
        record.push(g.opacity_logit as f32);
        record.extend([
            g.log_scale.x as f32,
            g.log_scale.y as f32,
            g.log_scale.z as f32,
        ]);
        record.extend([
            g.rotation[0] as f32,
            g.rotation[1] as f32,
            g.rotation[2] as f32,
            g.rotation[3] as f32,
        ]);
        for v in &record {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(kept.len())
}

/// Read a Gaussian PLY written by [`export_gaussians_ply`].
pub fn import_gaussians_ply(path: &Path) -> Result<GaussianMap, ExportError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = Vec::new();
    // Read byte-wise until the end_header line.
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte).map_err(|_| {
            ExportError::Format("unterminated PLY header".into())
        })?;
        header.push(byte[0]);
        if header.ends_with(b"end_header\n") {
            break;
        }
        if header.len() > 1 << 20 {
            return Err(ExportError::Format("header exceeds 1 MiB".into()));
        }
    }
    let header = String::from_utf8(header)
        .map_err(|_| ExportError::Format("header is not UTF-8".into()))?;
    if !header.starts_with("ply\nformat binary_little_endian 1.0\n") {
        return Err(ExportError::Format(
            "expected binary little-endian PLY".into(),
        ));
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("element vertex ") {
            count = Some(rest.trim().parse().map_err(|_| {
                ExportError::Format(format!("bad vertex count {rest:?}"))
            })?);
        } else if let Some(rest) = line.strip_prefix("property float ") {
            props.push(rest.trim().to_string());
        } else if line.starts_with("element ") {
            return Err(ExportError::Format(format!("unsupported {line}")));
        }
    }
    let count = count.ok_or_else(|| ExportError::Format("missing element vertex".into()))?;
    let rest_count = props.iter().filter(|p| p.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(ExportError::Format(format!(
            "f_rest property count {rest_count} is not a multiple of 3"
        )));
    }
    let coeff_count = rest_count / 3 + 1;
    let degree = match coeff_count {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        other => {
            return Err(ExportError::Format(format!(
                "unsupported SH coefficient count {other}"
            )))
        }
    };
    let expected_fields = ply_fields(coeff_count);
    if props.len() != expected_fields {
        return Err(ExportError::Format(format!(
            "expected {expected_fields} float properties, found {}",
            props.len()
        )));
    }

    let mut map = GaussianMap::new(degree);
    let mut buf = vec![0u8; expected_fields * 4];
    for _ in 0..count {
        reader.read_exact(&mut buf).map_err(|_| {
            ExportError::Format("truncated vertex data".into())
        })?;
        let field = |i: usize| -> f64 {
            f32::from_le_bytes(buf[i * 4..i * 4 + 4].try_into().unwrap()) as f64
        };
        let mut sh = vec![Vector3::zeros(); coeff_count];
        sh[0] = Vector3::new(field(6), field(7), field(8));
        for ch in 0..3 {
            for k in 1..coeff_count {
                sh[k][ch] = field(9 + ch * (coeff_count - 1) + (k - 1));
            }
        }
        let base = 9 + 3 * (coeff_count - 1);
        map.push(Gaussian3D {
            position: Vector3::new(field(0), field(1), field(2)),
            sh,
            opacity_logit: field(base),
            log_scale: Vector3::new(field(base + 1), field(base + 2), field(base + 3)),
            rotation: [
                field(base + 4),
                field(base + 5),
                field(base + 6),
                field(base + 7),
            ],
        });
    }
    Ok(map)
}

/// Write the TSDF volume: fixed 44-byte header, then blocks sorted by
/// Morton code, each morton u64 + 512 (tsdf f32, weight f32) pairs in
/// x-fastest order. Returns the number of blocks written.
pub fn export_tsdf(volume: &TsdfVolume, path: &Path) -> Result<usize, ExportError> {
    let blocks = volume.blocks_sorted();
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    out.write_all(TSDF_MAGIC)?;
    out.write_all(&TSDF_VERSION.to_le_bytes())?;
    out.write_all(&(volume.voxel_size() as f32).to_le_bytes())?;
    out.write_all(&(volume.trunc_band() as f32).to_le_bytes())?;
    out.write_all(&volume.w_max().to_le_bytes())?;
    out.write_all(&(blocks.len() as u64).to_le_bytes())?;
    out.write_all(&[0u8; TSDF_HEADER_RESERVED])?;
    for block in &blocks {
        out.write_all(&block.morton.to_le_bytes())?;
        for v in block.voxels.iter() {
            out.write_all(&v.tsdf.to_le_bytes())?;
            out.write_all(&v.weight.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(blocks.len())
}

/// Read a TSDF dump written by [`export_tsdf`].
pub fn import_tsdf(path: &Path, fusion_rule: FusionRule) -> Result<TsdfVolume, ExportError> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut header = [0u8; TSDF_HEADER_BYTES as usize];
    reader
        .read_exact(&mut header)
        .map_err(|_| ExportError::Format("truncated header".into()))?;
    if &header[0..4] != TSDF_MAGIC {
        return Err(ExportError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != TSDF_VERSION {
        return Err(ExportError::Format(format!("unsupported version {version}")));
    }
    let voxel_size = f32::from_le_bytes(header[8..12].try_into().unwrap()) as f64;
    let trunc_band = f32::from_le_bytes(header[12..16].try_into().unwrap()) as f64;
    let w_max = u32::from_le_bytes(header[16..20].try_into().unwrap());
    let block_count = u64::from_le_bytes(header[20..28].try_into().unwrap());

    let mut volume = TsdfVolume::new(voxel_size, trunc_band, w_max, fusion_rule);
    let mut buf = vec![0u8; TSDF_BLOCK_BYTES as usize];
    for _ in 0..block_count {
        reader
            .read_exact(&mut buf)
            .map_err(|_| ExportError::Format("truncated block data".into()))?;
        let morton = u64::from_le_bytes(buf[0..8].try_into().unwrap());
        let mut voxels = Box::new([TsdfVoxel::default(); BLOCK_VOLUME]);
        for (i, v) in voxels.iter_mut().enumerate() {
            let off = 8 + i * 8;
            v.tsdf = f32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
            v.weight = f32::from_le_bytes(buf[off + 4..off + 8].try_into().unwrap());
        }
        volume.insert_block(VoxelBlock { morton, voxels });
    }
    Ok(volume)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DepthImage;
    use crate::geometry::{Intrinsics, Pose};

    fn sample_map(n: usize, degree: usize) -> GaussianMap {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        let mut map = GaussianMap::new(degree);
        for _ in 0..n {
            map.push(Gaussian3D {
                position: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(0.5..3.0),
                ),
                rotation: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                log_scale: Vector3::new(
                    rng.random_range(-4.0..0.0),
                    rng.random_range(-4.0..0.0),
                    rng.random_range(-4.0..0.0),
                ),
                opacity_logit: rng.random_range(-2.0..2.0),
                sh: (0..crate::sh::coeff_count(degree))
                    .map(|_| {
                        Vector3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        )
                    })
                    .collect(),
            });
        }
        map
    }

    #[test]
    fn empty_map_is_valid_ply() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("empty.ply");
        let map = GaussianMap::new(0);
        let written = export_gaussians_ply(&map, &path, 0.0).unwrap();
        assert_eq!(written, 0);
        let loaded = import_gaussians_ply(&path).unwrap();
        assert_eq!(loaded.len(), 0);
    }

    #[test]
    fn ply_second_export_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        for degree in [0usize, 2] {
            let map = sample_map(17, degree);
            let p1 = tmp.path().join(format!("a{degree}.ply"));
            let p2 = tmp.path().join(format!("b{degree}.ply"));
            export_gaussians_ply(&map, &p1, 0.0).unwrap();
            let loaded = import_gaussians_ply(&p1).unwrap();
            assert_eq!(loaded.len(), 17);
            assert_eq!(loaded.sh_degree(), degree);
            export_gaussians_ply(&loaded, &p2, 0.0).unwrap();
            let b1 = std::fs::read(&p1).unwrap();
            let b2 = std::fs::read(&p2).unwrap();
            assert_eq!(b1, b2, "degree {degree} export not stable");
            // Imported parameters equal the stored f32 values exactly.
            for (orig, re) in map.gaussians().iter().zip(loaded.gaussians()) {
                assert_eq!(orig.position.x as f32, re.position.x as f32);
                assert_eq!(re.position.x, (orig.position.x as f32) as f64);
                assert_eq!(re.opacity_logit, (orig.opacity_logit as f32) as f64);
            }
        }
    }

    #[test]
    fn opacity_cull_drops_records() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("cull.ply");
        let mut map = GaussianMap::new(0);
        let mut g = sample_map(1, 0).gaussians()[0].clone();
        g.opacity_logit = 0.0; // alpha = 0.5
        map.push(g);
        assert_eq!(export_gaussians_ply(&map, &path, 0.9).unwrap(), 0);
        assert_eq!(export_gaussians_ply(&map, &path, 0.4).unwrap(), 1);
    }

    fn fused_volume() -> TsdfVolume {
        let k = Intrinsics::new(16.0, 16.0, 8.0, 8.0, 16, 16, 1e-3).unwrap();
        let mut depth = DepthImage::new(16, 16);
        for j in 0..16 {
            for i in 0..16 {
                depth.set(i, j, 1.0 + 0.01 * i as f64);
            }
        }
        let mut vol = TsdfVolume::new(0.01, 0.06, 100, FusionRule::Paper);
        vol.allocate_band(&depth, &Pose::identity(), &k).unwrap();
        vol.integrate(&depth, &Pose::identity(), &k).unwrap();
        vol
    }

    #[test]
    fn tsdf_roundtrip_bitwise_and_sized() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("map.tsdf");
        let vol = fused_volume();
        let blocks = export_tsdf(&vol, &path).unwrap();
        assert!(blocks > 0);
        let size = std::fs::metadata(&path).unwrap().len();
        assert_eq!(size, TSDF_HEADER_BYTES + blocks as u64 * TSDF_BLOCK_BYTES);
        assert_eq!(size, 44 + blocks as u64 * (8 + 4096));

        let loaded = import_tsdf(&path, FusionRule::Paper).unwrap();
        assert_eq!(loaded.block_count(), vol.block_count());
        let path2 = tmp.path().join("map2.tsdf");
        export_tsdf(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn tsdf_empty_volume_header_only() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("empty.tsdf");
        let vol = TsdfVolume::new(0.01, 0.06, 100, FusionRule::Paper);
        assert_eq!(export_tsdf(&vol, &path).unwrap(), 0);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 44);
    }

    #[test]
    fn tsdf_bad_magic_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("bad.tsdf");
        std::fs::write(&path, vec![0u8; 64]).unwrap();
        assert!(matches!(
            import_tsdf(&path, FusionRule::Paper),
            Err(ExportError::Format(_))
        ));
    }
}

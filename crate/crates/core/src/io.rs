//! On-disk formats: GPC1 point-cloud binary, GBV1 grid/tensor binary with an
//! optional JSON shape manifest, calibration JSON, and scene layout JSON.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraView, Mat3, PointCloud, Pose, Vec3};
use crate::scene::SceneLayout;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected {1}")]
    BadMagic([u8; 4], &'static str),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid payload: {0}")]
    BadPayload(String),
    #[error("geometry: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
}

const GPC_MAGIC: &[u8; 4] = b"GPC1";
const GBV_MAGIC: &[u8; 4] = b"GBV1";

/// Writes magic "GPC1", u32 count, then count x (x, y, z, intensity) f32,
/// all little-endian.
pub fn write_gpc1<W: Write>(mut w: W, cloud: &PointCloud) -> Result<(), IoError> {
    w.write_all(GPC_MAGIC)?;
    w.write_u32::<LittleEndian>(cloud.len() as u32)?;
    for i in 0..cloud.len() {
        let p = cloud.points[i];
        w.write_f32::<LittleEndian>(p[0])?;
        w.write_f32::<LittleEndian>(p[1])?;
        w.write_f32::<LittleEndian>(p[2])?;
        w.write_f32::<LittleEndian>(cloud.intensity[i])?;
    }
    Ok(())
}

pub fn read_gpc1<R: Read>(mut r: R) -> Result<PointCloud, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GPC_MAGIC {
        return Err(IoError::BadMagic(magic, "GPC1"));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut points = Vec::with_capacity(count);
    let mut intensity = Vec::with_capacity(count);
    for _ in 0..count {
        let x = r.read_f32::<LittleEndian>()?;
        let y = r.read_f32::<LittleEndian>()?;
        let z = r.read_f32::<LittleEndian>()?;
        let i = r.read_f32::<LittleEndian>()?;
        points.push([x, y, z]);
        intensity.push(i);
    }
    Ok(PointCloud { points, intensity, timestamp: 0.0 })
}

pub fn save_gpc1(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    write_gpc1(std::fs::File::create(path)?, cloud)
}

pub fn load_gpc1(path: &Path) -> Result<PointCloud, IoError> {
    read_gpc1(std::fs::File::open(path)?)
}

/// A GBV1 grid: magic, u32 H, W, C, then H*W*C little-endian f32 row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridBlob {
    pub h: u32,
    pub w: u32,
    pub c: u32,
    pub values: Vec<f32>,
}

impl GridBlob {
    pub fn from_f64(h: usize, w: usize, c: usize, values: &[f64]) -> Result<GridBlob, IoError> {
        if values.len() != h * w * c {
            return Err(IoError::BadPayload(format!(
                "{} values for {h}x{w}x{c}",
                values.len()
            )));
        }
        Ok(GridBlob {
            h: h as u32,
            w: w as u32,
            c: c as u32,
            values: values.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_gbv1<W: Write>(mut w: W, grid: &GridBlob) -> Result<(), IoError> {
    if grid.values.len() != (grid.h * grid.w * grid.c) as usize {
        return Err(IoError::BadPayload(format!(
            "{} values for {}x{}x{}",
            grid.values.len(),
            grid.h,
            grid.w,
            grid.c
        )));
    }
    w.write_all(GBV_MAGIC)?;
    w.write_u32::<LittleEndian>(grid.h)?;
    w.write_u32::<LittleEndian>(grid.w)?;
    w.write_u32::<LittleEndian>(grid.c)?;
    for &v in &grid.values {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_gbv1<R: Read>(mut r: R) -> Result<GridBlob, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GBV_MAGIC {
        return Err(IoError::BadMagic(magic, "GBV1"));
    }
    let h = r.read_u32::<LittleEndian>()?;
    let w = r.read_u32::<LittleEndian>()?;
    let c = r.read_u32::<LittleEndian>()?;
    let n = (h as usize)
        .checked_mul(w as usize)
        .and_then(|x| x.checked_mul(c as usize))
        .ok_or_else(|| IoError::BadPayload(format!("overflowing dims {h}x{w}x{c}")))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(r.read_f32::<LittleEndian>()?);
    }
    Ok(GridBlob { h, w, c, values })
}

pub fn save_gbv1(path: &Path, grid: &GridBlob) -> Result<(), IoError> {
    write_gbv1(std::fs::File::create(path)?, grid)
}

pub fn load_gbv1(path: &Path) -> Result<GridBlob, IoError> {
    read_gbv1(std::fs::File::open(path)?)
}

/// Tensor container: named GBV1 blobs next to a JSON manifest of shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

/// Saves `(name, shape, values)` tensors into `dir` as one GBV1 file each
/// plus a `manifest.json`. Multidimensional shapes flatten into H=len rows.
pub fn save_tensors(dir: &Path, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<(), IoError> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = TensorManifest { tensors: Vec::new() };
    for (name, shape, values) in tensors {
        let n: usize = shape.iter().product();
        if values.len() != n {
            return Err(IoError::BadPayload(format!(
                "tensor {name}: {} values for shape {shape:?}",
                values.len()
            )));
        }
        let file = format!("{name}.gbv");
        let blob = GridBlob::from_f64(values.len(), 1, 1, values)?;
        save_gbv1(&dir.join(&file), &blob)?;
        manifest.tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), file });
    }
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, IoError> {
    let manifest: TensorManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = Vec::new();
    for entry in manifest.tensors {
        let blob = load_gbv1(&dir.join(&entry.file))?;
        let n: usize = entry.shape.iter().product();
        if blob.values.len() != n {
            return Err(IoError::BadPayload(format!(
                "tensor {}: blob has {} values, manifest shape {:?}",
                entry.name,
                blob.values.len(),
                entry.shape
            )));
        }
        out.push((entry.name, entry.shape, blob.values_f64()));
    }
    Ok(out)
}

/// Serializable per-view calibration record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub view_id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Mat3,
    pub translation: Vec3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub views: Vec<CalibrationRecord>,
}

pub fn calibration_to_views(file: &CalibrationFile) -> Result<Vec<CameraView>, IoError> {
    file.views
        .iter()
        .map(|r| {
            Ok(CameraView {
                view_id: r.view_id,
                intrinsics: CameraIntrinsics::new(r.fx, r.fy, r.cx, r.cy, r.width, r.height)?,
                extrinsics: Pose::new(r.rotation, r.translation)?,
            })
        })
        .collect()
}

pub fn views_to_calibration(views: &[CameraView]) -> CalibrationFile {
    CalibrationFile {
        views: views
            .iter()
            .map(|v| CalibrationRecord {
                view_id: v.view_id,
                fx: v.intrinsics.fx,
                fy: v.intrinsics.fy,
                cx: v.intrinsics.cx,
                cy: v.intrinsics.cy,
                width: v.intrinsics.width,
                height: v.intrinsics.height,
                rotation: v.extrinsics.rotation,
                translation: v.extrinsics.translation,
            })
            .collect(),
    }
}

pub fn save_calibration(path: &Path, views: &[CameraView]) -> Result<(), IoError> {
    let json = serde_json::to_string_pretty(&views_to_calibration(views))?;
    Ok(std::fs::write(path, json)?)
}

pub fn load_calibration(path: &Path) -> Result<Vec<CameraView>, IoError> {
    let file: CalibrationFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    calibration_to_views(&file)
}

pub fn save_layout(path: &Path, layout: &SceneLayout) -> Result<(), IoError> {
    Ok(std::fs::write(path, serde_json::to_string_pretty(layout)?)?)
}

pub fn load_layout(path: &Path) -> Result<SceneLayout, IoError> {
    let layout: SceneLayout = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    layout
        .validate()
        .map_err(|e| IoError::BadPayload(e.to_string()))?;
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_rig, gen_scene, SceneParams};
    use proptest::prelude::*;

    #[test]
    fn gpc1_round_trip_and_magic() {
        let cloud = PointCloud::new(
            vec![[1.0, -2.5, 0.25], [0.0, 0.0, 0.0]],
            vec![0.3, 0.8],
            0.0,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_gpc1(&mut buf, &cloud).unwrap();
        assert_eq!(&buf[..4], b"GPC1");
        assert_eq!(buf.len(), 4 + 4 + 2 * 16);
        let back = read_gpc1(buf.as_slice()).unwrap();
        assert_eq!(back.points, cloud.points);
        assert_eq!(back.intensity, cloud.intensity);
        let mut bad = buf;
        bad[0] = b'X';
        assert!(matches!(read_gpc1(bad.as_slice()), Err(IoError::BadMagic(..))));
    }

    proptest! {
        #[test]
        fn gpc1_round_trip_random(seed in 0u64..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(0..200);
            let points: Vec<[f32; 3]> = (0..n)
                .map(|_| [rng.gen_range(-100.0..100.0), rng.gen_range(-100.0..100.0), rng.gen_range(-10.0..10.0)])
                .collect();
            let intensity: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let cloud = PointCloud::new(points, intensity, 0.0).unwrap();
            let mut buf = Vec::new();
            write_gpc1(&mut buf, &cloud).unwrap();
            let back = read_gpc1(buf.as_slice()).unwrap();
            prop_assert_eq!(back.points, cloud.points);
            prop_assert_eq!(back.intensity, cloud.intensity);
        }

        #[test]
        fn gbv1_round_trip_random(seed in 0u64..40) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (h, w, c) = (rng.gen_range(1..10u32), rng.gen_range(1..10u32), rng.gen_range(1..5u32));
            let values: Vec<f32> = (0..h * w * c).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let grid = GridBlob { h, w, c, values };
            let mut buf = Vec::new();
            write_gbv1(&mut buf, &grid).unwrap();
            prop_assert_eq!(read_gbv1(buf.as_slice()).unwrap(), grid);
        }
    }

    #[test]
    fn gbv1_rejects_inconsistent_payload() {
        let grid = GridBlob { h: 2, w: 2, c: 1, values: vec![0.0; 3] };
        assert!(write_gbv1(Vec::new(), &grid).is_err());
    }

    #[test]
    fn tensor_container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tensors = vec![
            ("weights".to_string(), vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            ("bias".to_string(), vec![3], vec![0.5, -0.5, 0.0]),
        ];
        save_tensors(dir.path(), &tensors).unwrap();
        assert!(dir.path().join("manifest.json").exists());
        let back = load_tensors(dir.path()).unwrap();
        assert_eq!(back, tensors);
    }

    #[test]
    fn calibration_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rig = gen_rig(3);
        let path = dir.path().join("calib.json");
        save_calibration(&path, &rig).unwrap();
        let back = load_calibration(&path).unwrap();
        assert_eq!(back, rig);
    }

    #[test]
    fn layout_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let (layout, _trajectory) = gen_scene(7, &SceneParams::default()).unwrap();
        let path = dir.path().join("scene.json");
        save_layout(&path, &layout).unwrap();
        let back = load_layout(&path).unwrap();
        assert_eq!(back, layout);
        // A layout with a malformed skeleton fails validation on load.
        std::fs::write(
            &path,
            r#"{"lanes":[],"skeletons":[{"joints":[[0,0,0]],"visible":[true]}],"boxes":[]}"#,
        )
        .unwrap();
        assert!(load_layout(&path).is_err());
    }
}

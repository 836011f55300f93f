//! Voxel grids with anisotropic physical spacing.
//!
//! Storage is x-fastest: voxel `(i, j, k)` lives at linear offset
//! `i + nx * (j + ny * k)`. Physical positions use the voxel-center
//! convention with voxel `(0, 0, 0)` at the origin, so
//! `position = (i * sx, j * sy, k * sz)` in µm.
//!
//! On disk a grid is a JSON header `<name>.json`
//! (`{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"u16"}`) next to a raw
//! little-endian payload `<name>.raw`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Point3;

pub type Index3 = [usize; 3];

/// Default light-sheet-style sampling, µm per voxel.
pub const DEFAULT_SPACING: [f64; 3] = [0.3, 0.3, 1.0];

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header {path}: {message}")]
    Header { path: PathBuf, message: String },
    #[error("dtype mismatch: expected {expected}, found {found}")]
    DtypeMismatch {
        expected: &'static str,
        found: String,
    },
    #[error("payload holds {found} samples but dims require {expected}")]
    SizeMismatch { expected: usize, found: usize },
    #[error("dims must all be >= 1, got {0:?}")]
    InvalidDims([usize; 3]),
    #[error("spacing must be finite and > 0, got {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("voxel {index:?} outside dims {dims:?}")]
    OutOfBounds { index: [i64; 3], dims: [usize; 3] },
    #[error("threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("probability {value} at offset {offset} outside [0, 1]")]
    ProbabilityOutOfRange { offset: usize, value: f32 },
    #[error("grids disagree on geometry: {0:?}/{1:?} vs {2:?}/{3:?}")]
    GeometryMismatch([usize; 3], [f64; 3], [usize; 3], [f64; 3]),
}

/// Scalar types that can be stored in the raw payload.
pub trait Sample: Copy + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn from_le(bytes: &[u8]) -> Self;
    fn extend_le(self, out: &mut Vec<u8>);
}

macro_rules! impl_sample {
    ($t:ty, $name:literal) => {
        impl Sample for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();
            fn from_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("sample width"))
            }
            fn extend_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
        }
    };
}

impl_sample!(u16, "u16");
impl_sample!(f32, "f32");
impl_sample!(u32, "u32");

/// A dense 3D grid of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<T>,
}

/// Observed intensities.
pub type Volume = Grid<u16>;
/// Per-voxel foreground probability in `[0, 1]`.
pub type ProbabilityMap = Grid<f32>;
pub type BinaryMask = Grid<bool>;
/// Per-voxel integer labels, `0` meaning background.
pub type LabelVolume = Grid<u32>;

fn check_geometry(dims: [usize; 3], spacing: [f64; 3]) -> Result<(), VolumeError> {
    if dims.contains(&0) {
        return Err(VolumeError::InvalidDims(dims));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(VolumeError::InvalidSpacing(spacing));
    }
    Ok(())
}

impl<T> Grid<T> {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self, VolumeError> {
        check_geometry(dims, spacing)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::SizeMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self, VolumeError>
    where
        T: Clone,
    {
        check_geometry(dims, spacing)?;
        Ok(Self {
            dims,
            spacing,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn contains(&self, index: Index3) -> bool {
        index[0] < self.dims[0] && index[1] < self.dims[1] && index[2] < self.dims[2]
    }

    pub fn contains_signed(&self, index: [i64; 3]) -> bool {
        (0..3).all(|a| index[a] >= 0 && (index[a] as u64) < self.dims[a] as u64)
    }

    /// Linear offset of an in-bounds voxel.
    #[inline]
    pub fn offset(&self, index: Index3) -> usize {
        debug_assert!(self.contains(index));
        index[0] + self.dims[0] * (index[1] + self.dims[1] * index[2])
    }

    pub fn checked_offset(&self, index: Index3) -> Result<usize, VolumeError> {
        if self.contains(index) {
            Ok(self.offset(index))
        } else {
            Err(VolumeError::OutOfBounds {
                index: index.map(|v| v as i64),
                dims: self.dims,
            })
        }
    }

    /// Inverse of [`Grid::offset`].
    #[inline]
    pub fn index_of(&self, offset: usize) -> Index3 {
        let [nx, ny, _] = self.dims;
        [offset % nx, (offset / nx) % ny, offset / (nx * ny)]
    }

    pub fn get(&self, index: Index3) -> Option<&T> {
        self.contains(index).then(|| &self.data[self.offset(index)])
    }

    pub fn set(&mut self, index: Index3, value: T) -> Result<(), VolumeError> {
        let off = self.checked_offset(index)?;
        self.data[off] = value;
        Ok(())
    }

    pub fn voxel_to_physical(&self, index: Index3) -> Result<Point3, VolumeError> {
        self.checked_offset(index)?;
        Ok(voxel_to_physical(index, self.spacing))
    }

    /// Nearest voxel to a physical point (may be out of bounds).
    pub fn physical_to_voxel(&self, p: Point3) -> [i64; 3] {
        physical_to_voxel(p, self.spacing)
    }

    pub fn same_geometry<U>(&self, other: &Grid<U>) -> Result<(), VolumeError> {
        if self.dims == other.dims && self.spacing == other.spacing {
            Ok(())
        } else {
            Err(VolumeError::GeometryMismatch(
                self.dims,
                self.spacing,
                other.dims,
                other.spacing,
            ))
        }
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Grid<U> {
        Grid {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> std::ops::Index<Index3> for Grid<T> {
    type Output = T;
    fn index(&self, index: Index3) -> &T {
        &self.data[self.offset(index)]
    }
}

/// Physical position of a voxel center, µm.
pub fn voxel_to_physical(index: Index3, spacing: [f64; 3]) -> Point3 {
    [
        index[0] as f64 * spacing[0],
        index[1] as f64 * spacing[1],
        index[2] as f64 * spacing[2],
    ]
}

/// Nearest voxel index (half away from zero) to a physical point.
pub fn physical_to_voxel(p: Point3, spacing: [f64; 3]) -> [i64; 3] {
    [
        (p[0] / spacing[0]).round() as i64,
        (p[1] / spacing[1]).round() as i64,
        (p[2] / spacing[2]).round() as i64,
    ]
}

impl ProbabilityMap {
    pub fn check_probabilities(&self) -> Result<(), VolumeError> {
        match self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            Some(offset) => Err(VolumeError::ProbabilityOutOfRange {
                offset,
                value: self.data[offset],
            }),
            None => Ok(()),
        }
    }
}

/// Mask that is true exactly where `map >= t`.
pub fn threshold_probability(map: &ProbabilityMap, t: f64) -> Result<BinaryMask, VolumeError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(VolumeError::InvalidThreshold(t));
    }
    Ok(map.map(|&v| f64::from(v) >= t))
}

// ---------------------------------------------------------------------------
// Projections

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    #[default]
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes `(u, v)` of a projection along `self`.
    pub fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        })
    }
}

impl FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(format!("unknown axis {other:?}")),
        }
    }
}

/// Row-major 2D image, `data[u + width * v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2D<T> {
    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[u + self.width * v]
    }
}

/// Fractional pixel coordinates of a physical point projected along `axis`.
pub fn project_point(p: Point3, spacing: [f64; 3], axis: Axis) -> (f64, f64) {
    let (u, v) = axis.plane();
    (p[u] / spacing[u], p[v] / spacing[v])
}

/// Maximum intensity projection along `axis`.
pub fn mip<T: Copy + PartialOrd>(grid: &Grid<T>, axis: Axis) -> Image2D<T> {
    let dims = grid.dims();
    let (u, v) = axis.plane();
    let a = axis.index();
    let (width, height) = (dims[u], dims[v]);
    let mut out: Vec<Option<T>> = vec![None; width * height];
    for (off, &value) in grid.data().iter().enumerate() {
        let idx = grid.index_of(off);
        let slot = &mut out[idx[u] + width * idx[v]];
        match slot {
            Some(cur) if !(value > *cur) => {}
            _ => *slot = Some(value),
        }
    }
    debug_assert!(dims[a] >= 1);
    Image2D {
        width,
        height,
        data: out
            .into_iter()
            .map(|v| v.expect("every column nonempty"))
            .collect(),
    }
}

// ---------------------------------------------------------------------------
// Container I/O

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
}

/// `(header, payload)` paths for a container given either file or the stem.
pub fn container_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut header = stem.clone().into_os_string();
    header.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (header.into(), raw.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Read a grid written by [`save_grid`].
pub fn load_grid<T: Sample>(path: &Path) -> Result<Grid<T>, VolumeError> {
    let (header_path, raw_path) = container_paths(path);
    let text = fs::read_to_string(&header_path).map_err(io_err(&header_path))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| VolumeError::Header {
        path: header_path.clone(),
        message: e.to_string(),
    })?;
    if header.dtype != T::DTYPE {
        return Err(VolumeError::DtypeMismatch {
            expected: T::DTYPE,
            found: header.dtype,
        });
    }
    check_geometry(header.dims, header.spacing)?;
    let bytes = fs::read(&raw_path).map_err(io_err(&raw_path))?;
    let expected = header.dims.iter().product::<usize>();
    if bytes.len() % T::BYTES != 0 || bytes.len() / T::BYTES != expected {
        return Err(VolumeError::SizeMismatch {
            expected,
            found: bytes.len() / T::BYTES,
        });
    }
    let data = bytes.chunks_exact(T::BYTES).map(T::from_le).collect();
    Grid::new(header.dims, header.spacing, data)
}

/// Write `<stem>.json` and `<stem>.raw`.
pub fn save_grid<T: Sample>(grid: &Grid<T>, path: &Path) -> Result<(), VolumeError> {
    let (header_path, raw_path) = container_paths(path);
    let header = Header {
        dims: grid.dims,
        spacing: grid.spacing,
        dtype: T::DTYPE.to_string(),
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    fs::write(&header_path, text).map_err(io_err(&header_path))?;
    let mut bytes = Vec::with_capacity(grid.len() * T::BYTES);
    for &v in &grid.data {
        v.extend_le(&mut bytes);
    }
    fs::write(&raw_path, bytes).map_err(io_err(&raw_path))
}

pub fn load_volume(path: &Path) -> Result<Volume, VolumeError> {
    load_grid(path)
}

pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap, VolumeError> {
    let map: ProbabilityMap = load_grid(path)?;
    map.check_probabilities()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
        let n = dims.iter().product();
        Grid::new(
            dims,
            [0.3, 0.3, 1.0],
            (0..n).map(|_| rng.random()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn smallest_container_loads() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("tiny");
        fs::write(
            dir.path().join("tiny.json"),
            r#"{"dims":[2,2,1],"spacing":[0.3,0.3,1.0],"dtype":"u16"}"#,
        )
        .unwrap();
        let payload: Vec<u8> = [1u16, 2, 3, 4]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        fs::write(dir.path().join("tiny.raw"), payload).unwrap();
        let vol = load_volume(&stem).unwrap();
        assert_eq!(vol.len(), 4);
        assert_eq!(vol[[1, 1, 0]], 4);
        assert_eq!(vol.spacing(), [0.3, 0.3, 1.0]);
    }

    #[test]
    fn short_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2,1],"spacing":[0.3,0.3,1.0],"dtype":"u16"}"#,
        )
        .unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 6]).unwrap();
        let err = load_volume(&dir.path().join("v.json")).unwrap_err();
        assert!(matches!(
            err,
            VolumeError::SizeMismatch {
                expected: 4,
                found: 3
            }
        ));
    }

    #[test]
    fn bad_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("v.raw"), [0u8; 8]).unwrap();
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2,1],"spacing":[0.3,0.0,1.0],"dtype":"u16"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("v")),
            Err(VolumeError::InvalidSpacing(_))
        ));
        fs::write(dir.path().join("v.json"), "{not json").unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("v")),
            Err(VolumeError::Header { .. })
        ));
        fs::write(
            dir.path().join("v.json"),
            r#"{"dims":[2,2,1],"spacing":[0.3,0.3,1.0],"dtype":"f32"}"#,
        )
        .unwrap();
        assert!(matches!(
            load_volume(&dir.path().join("v")),
            Err(VolumeError::DtypeMismatch { .. })
        ));
        assert!(matches!(
            load_volume(&dir.path().join("missing")),
            Err(VolumeError::Io { .. })
        ));
    }

    #[test]
    fn probability_maps_are_range_checked() {
        let dir = tempfile::tempdir().unwrap();
        let map = Grid::new([2, 1, 1], [1.0; 3], vec![0.5f32, 1.5]).unwrap();
        save_grid(&map, &dir.path().join("p")).unwrap();
        assert!(matches!(
            load_probability_map(&dir.path().join("p")),
            Err(VolumeError::ProbabilityOutOfRange { offset: 1, .. })
        ));
    }

    #[test]
    fn physical_coordinates() {
        assert_eq!(
            voxel_to_physical([0, 0, 0], [0.7, 0.2, 3.0]),
            [0.0, 0.0, 0.0]
        );
        assert_eq!(
            voxel_to_physical([1, 1, 1], DEFAULT_SPACING),
            [0.3, 0.3, 1.0]
        );
        assert_eq!(
            voxel_to_physical([10, 0, 3], [0.5, 0.5, 2.0]),
            [5.0, 0.0, 6.0]
        );
        let g = Grid::filled([2, 2, 2], [1.0; 3], 0u16).unwrap();
        assert!(matches!(
            g.voxel_to_physical([2, 0, 0]),
            Err(VolumeError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn threshold_examples() {
        let map = Grid::new([2, 1, 1], [1.0; 3], vec![0.95f32, 0.5]).unwrap();
        assert_eq!(
            threshold_probability(&map, 0.9).unwrap().data(),
            &[true, false]
        );
        assert_eq!(
            threshold_probability(&map, 0.0).unwrap().data(),
            &[true, true]
        );
        assert!(matches!(
            threshold_probability(&map, 1.2),
            Err(VolumeError::InvalidThreshold(_))
        ));
        assert!(threshold_probability(&map, -0.1).is_err());
    }

    #[test]
    fn threshold_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f32> = (0..500).map(|_| rng.random()).collect();
        let map = Grid::new([10, 10, 5], [1.0; 3], data.clone()).unwrap();
        let mask = threshold_probability(&map, 0.5).unwrap();
        for (m, p) in mask.data().iter().zip(&data) {
            assert_eq!(*m, *p >= 0.5);
        }
    }

    #[test]
    fn mip_examples() {
        let c = Grid::filled([3, 4, 5], [1.0; 3], 17u16).unwrap();
        for axis in [Axis::X, Axis::Y, Axis::Z] {
            let img = mip(&c, axis);
            assert!(img.data.iter().all(|&v| v == 17));
        }
        let z = mip(&c, Axis::Z);
        assert_eq!((z.width, z.height), (3, 4));
        let x = mip(&c, Axis::X);
        assert_eq!((x.width, x.height), (4, 5));

        let mut g = Grid::filled([5, 6, 7], [1.0; 3], 0u16).unwrap();
        g.set([3, 2, 4], 900).unwrap();
        let img = mip(&g, Axis::Y);
        for v in 0..img.height {
            for u in 0..img.width {
                let expect = if (u, v) == (3, 4) { 900 } else { 0 };
                assert_eq!(img.get(u, v), expect);
            }
        }
    }

    #[test]
    fn mip_z_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vol = random_volume(&mut rng, [7, 5, 9]);
        let img = mip(&vol, Axis::Z);
        for j in 0..5 {
            for i in 0..7 {
                let m = (0..9).map(|k| vol[[i, j, k]]).max().unwrap();
                assert_eq!(img.get(i, j), m);
            }
        }
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("Z".parse::<Axis>().unwrap(), Axis::Z);
        assert!("w".parse::<Axis>().is_err());
    }

    proptest! {
        #[test]
        fn linear_index_round_trip(nx in 1usize..9, ny in 1usize..9, nz in 1usize..9, seed: u64) {
            let g = Grid::filled([nx, ny, nz], [1.0; 3], 0u8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = [rng.random_range(0..nx), rng.random_range(0..ny), rng.random_range(0..nz)];
            prop_assert_eq!(g.index_of(g.offset(idx)), idx);
        }

        #[test]
        fn save_load_is_bit_identical(nx in 1usize..6, ny in 1usize..6, nz in 1usize..6, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vol = random_volume(&mut rng, [nx, ny, nz]);
            let dir = tempfile::tempdir().unwrap();
            save_grid(&vol, &dir.path().join("v")).unwrap();
            prop_assert_eq!(load_volume(&dir.path().join("v.json")).unwrap(), vol);
        }

        #[test]
        fn threshold_is_monotone(seed: u64, t1 in 0.0f64..=1.0, t2 in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let map = Grid::new([4, 4, 4], [1.0; 3], (0..64).map(|_| rng.random::<f32>()).collect()).unwrap();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let a = threshold_probability(&map, lo).unwrap();
            let b = threshold_probability(&map, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(!*y || *x);
            }
        }

        #[test]
        fn mip_commutes_with_shift(seed: u64, c in 0u16..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vol = Grid::new([4, 3, 5], [1.0; 3], (0..60).map(|_| rng.random_range(0..60000u16)).collect()).unwrap();
            let shifted = vol.map(|&v| v + c);
            for axis in [Axis::X, Axis::Y, Axis::Z] {
                let lhs = mip(&shifted, axis);
                let rhs = mip(&vol, axis);
                prop_assert_eq!(lhs.data, rhs.data.iter().map(|&v| v + c).collect::<Vec<_>>());
            }
        }
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SdfSample, SignedDistance};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io;

const MAGIC: &[u8; 4] = b"SDFG";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 12 + 24 + 24 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutsidePolicy {
    /// Boundary value at the nearest box point plus the Euclidean distance
    /// to the box.
    #[default]
    Clamp,
    /// Continue the boundary cell's trilinear polynomial.
    LinearExtrapolate,
}

impl OutsidePolicy {
    fn code(self) -> u8 {
        match self {
            OutsidePolicy::Clamp => 0,
            OutsidePolicy::LinearExtrapolate => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OutsidePolicy::Clamp),
            1 => Some(OutsidePolicy::LinearExtrapolate),
            _ => None,
        }
    }
}

/// The eight lattice nodes a trilinear query touches, with interpolation
/// weights and their spatial derivatives.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
    pub weight_grad: [Vec3; 8],
}

/// Regular lattice shared by scalar and color grids.
#[derive(Clone, Debug, PartialEq)]
struct Lattice {
    origin: Vec3,
    spacing: Vec3,
    dims: [usize; 3],
}

struct Located {
    cell: [usize; 3],
    local: Vec3,
}

impl Lattice {
    fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidInput(format!("grid dims must be >= 2 per axis, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidInput(format!("grid spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid origin must be finite".into()));
        }
        Ok(Lattice { origin, spacing, dims })
    }

    fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                (self.dims[0] - 1) as f64 * self.spacing.x,
                (self.dims[1] - 1) as f64 * self.spacing.y,
                (self.dims[2] - 1) as f64 * self.spacing.z,
            )
    }

    fn linear(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin + Vec3::new(i as f64 * self.spacing.x, j as f64 * self.spacing.y, k as f64 * self.spacing.z)
    }

    /// Cell and local coordinates; local coordinates leave `[0, 1]` only for
    /// points outside the box.
    fn locate(&self, x: &Vec3) -> Located {
        let mut cell = [0usize; 3];
        let mut local = Vec3::zeros();
        for a in 0..3 {
            let g = (x[a] - self.origin[a]) / self.spacing[a];
            let c = (g.floor().max(0.0) as usize).min(self.dims[a] - 2);
            cell[a] = c;
            local[a] = g - c as f64;
        }
        Located { cell, local }
    }

    fn corners(&self, x: &Vec3) -> Corners {
        let Located { cell, local } = self.locate(x);
        let mut out = Corners {
            index: [0; 8],
            weight: [0.0; 8],
            weight_grad: [Vec3::zeros(); 8],
        };
        for n in 0..8 {
            let (bx, by, bz) = (n & 1, (n >> 1) & 1, (n >> 2) & 1);
            let wx = if bx == 1 { local.x } else { 1.0 - local.x };
            let wy = if by == 1 { local.y } else { 1.0 - local.y };
            let wz = if bz == 1 { local.z } else { 1.0 - local.z };
            let sx = if bx == 1 { 1.0 } else { -1.0 } / self.spacing.x;
            let sy = if by == 1 { 1.0 } else { -1.0 } / self.spacing.y;
            let sz = if bz == 1 { 1.0 } else { -1.0 } / self.spacing.z;
            out.index[n] = self.linear(cell[0] + bx, cell[1] + by, cell[2] + bz);
            out.weight[n] = wx * wy * wz;
            out.weight_grad[n] = Vec3::new(sx * wy * wz, wx * sy * wz, wx * wy * sz);
        }
        out
    }

    fn clamp(&self, x: &Vec3) -> Vec3 {
        x.sup(&self.origin).inf(&self.max_corner())
    }

    fn contains(&self, x: &Vec3) -> bool {
        let hi = self.max_corner();
        (0..3).all(|a| x[a] >= self.origin[a] && x[a] <= hi[a])
    }
}

/// Axis-aligned voxel signed distance grid, x-fastest storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SdfGrid {
    lattice: Lattice,
    values: Vec<f32>,
    outside: OutsidePolicy,
}

impl SdfGrid {
    pub fn new(origin: Vec3, spacing: Vec3, dims: [usize; 3], values: Vec<f32>, outside: OutsidePolicy) -> Result<Self> {
        let lattice = Lattice::new(origin, spacing, dims)?;
        if values.len() != lattice.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {:?}",
                values.len(),
                dims
            )));
        }
        Ok(SdfGrid { lattice, values, outside })
    }

    pub fn filled(origin: Vec3, spacing: Vec3, dims: [usize; 3], value: f32) -> Result<Self> {
        let lattice = Lattice::new(origin, spacing, dims)?;
        let n = lattice.len();
        Ok(SdfGrid { lattice, values: vec![value; n], outside: OutsidePolicy::Clamp })
    }

    pub fn origin(&self) -> Vec3 {
        self.lattice.origin
    }

    pub fn spacing(&self) -> Vec3 {
        self.lattice.spacing
    }

    /// Smallest of the three spacings.
    pub fn min_spacing(&self) -> f64 {
        self.lattice.spacing.min()
    }

    pub fn dims(&self) -> [usize; 3] {
        self.lattice.dims
    }

    pub fn outside_policy(&self) -> OutsidePolicy {
        self.outside
    }

    pub fn set_outside_policy(&mut self, policy: OutsidePolicy) {
        self.outside = policy;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn bounds(&self) -> (Vec3, Vec3) {
        (self.lattice.origin, self.lattice.max_corner())
    }

    pub fn contains(&self, x: &Vec3) -> bool {
        self.lattice.contains(x)
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.lattice.node(i, j, k)
    }

    pub fn value_at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.lattice.linear(i, j, k)]
    }

    /// True when the stored values change sign.
    pub fn has_zero_crossing(&self) -> bool {
        let (mut neg, mut pos) = (false, false);
        for &v in &self.values {
            neg |= v <= 0.0;
            pos |= v >= 0.0;
        }
        neg && pos
    }

    /// Lattice nodes and weights whose values determine `query(x).value`.
    /// Under the clamp policy these are the nodes of the clamped point.
    pub fn corners(&self, x: &Vec3) -> Corners {
        match self.outside {
            OutsidePolicy::Clamp => self.lattice.corners(&self.lattice.clamp(x)),
            OutsidePolicy::LinearExtrapolate => self.lattice.corners(x),
        }
    }

    fn interpolate(&self, x: &Vec3) -> SdfSample {
        let c = self.lattice.corners(x);
        let mut value = 0.0;
        let mut grad = Vec3::zeros();
        for n in 0..8 {
            let v = self.values[c.index[n]] as f64;
            value += c.weight[n] * v;
            grad += c.weight_grad[n] * v;
        }
        SdfSample::new(value, grad)
    }
}

impl SignedDistance for SdfGrid {
    fn query(&self, x: &Vec3) -> SdfSample {
        if self.lattice.contains(x) || self.outside == OutsidePolicy::LinearExtrapolate {
            return self.interpolate(x);
        }
        let c = self.lattice.clamp(x);
        let inner = self.interpolate(&c);
        let d = x - c;
        let dist = d.norm();
        let mut grad = inner.gradient;
        for a in 0..3 {
            if d[a] != 0.0 {
                grad[a] = d[a] / dist;
            }
        }
        SdfSample::new(inner.value + dist, grad)
    }
}

/// Samples an analytic field on the lattice `origin + (i, j, k)·spacing`.
pub fn bake<F: SignedDistance + Sync + ?Sized>(field: &F, origin: Vec3, spacing: Vec3, dims: [usize; 3]) -> Result<SdfGrid> {
    use rayon::prelude::*;
    let lattice = Lattice::new(origin, spacing, dims)?;
    let plane = dims[0] * dims[1];
    let mut values = vec![0f32; lattice.len()];
    values.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                slab[i + dims[0] * j] = field.value(&lattice.node(i, j, k)) as f32;
            }
        }
    });
    Ok(SdfGrid { lattice, values, outside: OutsidePolicy::Clamp })
}

impl SdfGrid {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in self.lattice.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.lattice.origin.iter().chain(self.lattice.spacing.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.outside.code());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one grid record, returning it and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(SdfGrid, usize), String> {
        if bytes.len() < HEADER_LEN {
            return Err("truncated SDFG header".into());
        }
        if &bytes[0..4] != MAGIC {
            return Err("bad magic, expected SDFG".into());
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(format!("unsupported SDFG version {version}"));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let origin = Vec3::new(f64_at(20), f64_at(28), f64_at(36));
        let spacing = Vec3::new(f64_at(44), f64_at(52), f64_at(60));
        let outside = OutsidePolicy::from_code(bytes[68]).ok_or("unknown outside policy")?;
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or("dims overflow")?;
        let end = HEADER_LEN + 4 * n;
        if bytes.len() < end {
            return Err(format!("expected {n} values, file truncated"));
        }
        let values = bytes[HEADER_LEN..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let grid = SdfGrid::new(origin, spacing, dims, values, outside).map_err(|e| e.to_string())?;
        Ok((grid, end))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<SdfGrid> {
        let bytes = io::read_bytes(path)?;
        let (grid, used) = SdfGrid::from_bytes(&bytes).map_err(|e| Error::parse(path, e))?;
        if used != bytes.len() {
            return Err(Error::parse(path, "trailing bytes after grid values"));
        }
        Ok(grid)
    }

    /// Reads a file holding several concatenated grid records.
    pub fn load_many(path: &Path) -> Result<Vec<SdfGrid>> {
        let bytes = io::read_bytes(path)?;
        let mut out = Vec::new();
        let mut offset = 0;
        while offset < bytes.len() {
            let (grid, used) = SdfGrid::from_bytes(&bytes[offset..]).map_err(|e| Error::parse(path, e))?;
            out.push(grid);
            offset += used;
        }
        Ok(out)
    }
}

/// Trilinear RGB grid used for per-component albedo.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorGrid {
    lattice: Lattice,
    values: Vec<[f32; 3]>,
}

impl ColorGrid {
    pub fn uniform(origin: Vec3, spacing: Vec3, dims: [usize; 3], color: [f32; 3]) -> Result<Self> {
        let lattice = Lattice::new(origin, spacing, dims)?;
        let n = lattice.len();
        Ok(ColorGrid { lattice, values: vec![color; n] })
    }

    /// Same lattice as an SDF grid.
    pub fn matching(grid: &SdfGrid, color: [f32; 3]) -> Self {
        ColorGrid { lattice: grid.lattice.clone(), values: vec![color; grid.values.len()] }
    }

    pub fn values(&self) -> &[[f32; 3]] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.values
    }

    /// Corners of the clamped point.
    pub fn corners(&self, x: &Vec3) -> Corners {
        self.lattice.corners(&self.lattice.clamp(x))
    }

    pub fn sample(&self, x: &Vec3) -> [f64; 3] {
        let c = self.corners(x);
        let mut out = [0.0; 3];
        for n in 0..8 {
            let v = self.values[c.index[n]];
            for ch in 0..3 {
                out[ch] += c.weight[n] * v[ch] as f64;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sdf::AnalyticSdf;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere_grid(n: usize, r: f64) -> (SdfGrid, AnalyticSdf) {
        let s = AnalyticSdf::sphere(Vec3::zeros(), r);
        let h = 1.2 * 2.0 / (n - 1) as f64;
        let g = bake(&s, Vec3::repeat(-1.2), Vec3::repeat(h), [n, n, n]).unwrap();
        (g, s)
    }

    #[test]
    fn lattice_points_match_analytic() {
        let (g, s) = sphere_grid(33, 0.5);
        for (i, j, k) in [(0, 0, 0), (16, 16, 16), (3, 20, 31), (32, 32, 32)] {
            let x = g.node(i, j, k);
            let expect = s.value(&x) as f32 as f64;
            assert!((g.query(&x).value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_field_is_reproduced() {
        struct Linear;
        impl SignedDistance for Linear {
            fn query(&self, x: &Vec3) -> SdfSample {
                SdfSample::new(x.x, Vec3::x())
            }
        }
        let g = bake(&Linear, Vec3::new(-1.0, -1.0, -1.0), Vec3::new(0.25, 0.5, 0.125), [9, 5, 17]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let q = g.query(&x);
            assert!((q.value - x.x).abs() < 1e-6);
            assert!((q.gradient - Vec3::x()).norm() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (g, _) = sphere_grid(33, 0.5);
        let h_cell = g.spacing().x;
        let h = 1e-4 * h_cell;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        while count < 1000 {
            let x = Vec3::new(rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1), rng.random_range(-1.1..1.1));
            // stay at least h away from cell faces
            let local = (x - g.origin()) / h_cell;
            if local.iter().any(|l| (l - l.round()).abs() < 2e-4) {
                continue;
            }
            count += 1;
            let q = g.query(&x);
            let mut fd = Vec3::zeros();
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                fd[a] = (g.query(&(x + e)).value - g.query(&(x - e)).value) / (2.0 * h);
            }
            let rel = (q.gradient - fd).norm() / q.gradient.norm().max(1e-12);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn cell_center_error_is_bounded() {
        let (g, s) = sphere_grid(33, 0.5);
        let h = g.spacing().x;
        for i in 0..32 {
            for j in (0..32).step_by(3) {
                for k in (0..32).step_by(5) {
                    let x = g.node(i, j, k) + Vec3::repeat(0.5 * h);
                    assert!((g.value(&x) - s.value(&x)).abs() < 0.5 * h);
                }
            }
        }
    }

    #[test]
    fn grid_gradient_norm_is_near_one() {
        // spacing <= radius / 8
        let s = AnalyticSdf::sphere(Vec3::zeros(), 0.5);
        let h = 0.5 / 8.0;
        let n = (2.4 / h) as usize + 1;
        let g = bake(&s, Vec3::repeat(-1.2), Vec3::repeat(h), [n, n, n]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let x = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            if x.norm() < 0.2 {
                continue;
            }
            let n = g.query(&x).gradient.norm();
            assert!((0.5..=1.5).contains(&n), "{n} at {x:?}");
        }
    }

    #[test]
    fn clamp_policy_adds_box_distance() {
        let (g, _) = sphere_grid(17, 0.5);
        let (_, hi) = g.bounds();
        let edge = Vec3::new(hi.x, 0.0, 0.0);
        let far = edge + Vec3::new(2.0, 0.0, 0.0);
        let q = g.query(&far);
        assert!((q.value - (g.value(&edge) + 2.0)).abs() < 1e-9);
        assert_eq!(q.gradient.x, 1.0);
        // monotone along the far field
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let v = g.value(&(edge + Vec3::x() * (k as f64 * 0.3)));
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn extrapolation_continues_boundary_cell() {
        struct Linear;
        impl SignedDistance for Linear {
            fn query(&self, x: &Vec3) -> SdfSample {
                SdfSample::new(2.0 * x.y, Vec3::y() * 2.0)
            }
        }
        let mut g = bake(&Linear, Vec3::zeros(), Vec3::repeat(0.5), [3, 3, 3]).unwrap();
        g.set_outside_policy(OutsidePolicy::LinearExtrapolate);
        assert!((g.value(&Vec3::new(0.5, 3.0, 0.5)) - 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(SdfGrid::filled(Vec3::zeros(), Vec3::repeat(0.1), [1, 4, 4], 0.0).is_err());
        assert!(SdfGrid::filled(Vec3::zeros(), Vec3::new(0.1, 0.0, 0.1), [4, 4, 4], 0.0).is_err());
        assert!(SdfGrid::new(Vec3::zeros(), Vec3::repeat(0.1), [2, 2, 2], vec![0.0; 7], OutsidePolicy::Clamp).is_err());
        let s = AnalyticSdf::sphere(Vec3::zeros(), 0.1);
        assert!(bake(&s, Vec3::zeros(), Vec3::repeat(0.1), [1, 2, 2]).is_err());
    }

    #[test]
    fn file_layout_is_bit_exact() {
        let mut g = SdfGrid::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(0.5, 0.25, 0.125), [2, 2, 3], (0..12).map(|v| v as f32).collect(), OutsidePolicy::Clamp).unwrap();
        g.set_outside_policy(OutsidePolicy::LinearExtrapolate);
        let b = g.to_bytes();
        assert_eq!(&b[0..4], b"SDFG");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(b[20..28].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(b[60..68].try_into().unwrap()), 0.125);
        assert_eq!(b[68], 1);
        assert_eq!(f32::from_le_bytes(b[69..73].try_into().unwrap()), 0.0);
        assert_eq!(f32::from_le_bytes(b[b.len() - 4..].try_into().unwrap()), 11.0);
        assert_eq!(b.len(), 69 + 48);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.sdfg");
        g.save(&p).unwrap();
        assert_eq!(SdfGrid::load(&p).unwrap(), g);
    }

    #[test]
    fn query_is_pure() {
        let (g, _) = sphere_grid(9, 0.4);
        let x = Vec3::new(0.123, -0.456, 0.789);
        assert_eq!(g.query(&x), g.query(&x));
    }
}

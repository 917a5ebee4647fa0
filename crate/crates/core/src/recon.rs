//! Voxel model, matched ray-driven projector pair and CGLS reconstruction.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_rays, CArmPose, RayBundle, Vec3};
use crate::phantom::Phantom;
use crate::projector::{log_normalize_value, Projection, Raster};
use crate::render;

/// Axis-aligned voxel lattice; `origin_mm` is the outer corner of voxel `(0, 0, 0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeGeometry {
    pub origin_mm: Vec3,
    pub voxel_mm: f64,
    pub dims: [usize; 3],
}

impl Default for VolumeGeometry {
    /// 64^3 voxels of 3 mm centered on the isocenter.
    fn default() -> Self {
        VolumeGeometry::centered([64, 64, 64], 3.0)
    }
}

impl VolumeGeometry {
    pub fn centered(dims: [usize; 3], voxel_mm: f64) -> Self {
        let half = Vec3::new(dims[0] as f64, dims[1] as f64, dims[2] as f64) * (voxel_mm / 2.0);
        VolumeGeometry { origin_mm: -half, voxel_mm, dims }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_mm > 0.0) || !self.voxel_mm.is_finite() {
            return Err(Error::InvalidArgument(format!("voxel size {} must be positive", self.voxel_mm)));
        }
        if self.dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("volume dims {:?} must be at least 1", self.dims)));
        }
        if !self.origin_mm.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("volume origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.origin_mm + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.voxel_mm
    }

    fn upper(&self) -> Vec3 {
        self.origin_mm + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64) * self.voxel_mm
    }

    /// Parametric entry and exit of the ray `origin + t * dir` (t >= 0) through the box.
    fn clip(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let upper = self.upper();
        let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
        for a in 0..3 {
            if dir[a] == 0.0 {
                if origin[a] < self.origin_mm[a] || origin[a] > upper[a] {
                    return None;
                }
                continue;
            }
            let ta = (self.origin_mm[a] - origin[a]) / dir[a];
            let tb = (upper[a] - origin[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t1 > t0).then_some((t0, t1))
    }

    /// Calls `visit(voxel_index, length)` for each voxel the ray crosses,
    /// with exact intersection lengths, in order along the ray.
    pub fn trace(&self, origin: &Vec3, dir: &Vec3, mut visit: impl FnMut(usize, f64)) {
        let Some((t_in, t_out)) = self.clip(origin, dir) else { return };
        let v = self.voxel_mm;
        let mid = origin + dir * (0.5 * (t_in + t_out.min(t_in + v * 1e-3)));
        let mut cell = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let n = self.dims[a] as i64;
            cell[a] = (((mid[a] - self.origin_mm[a]) / v).floor() as i64).clamp(0, n - 1);
            if dir[a] > 0.0 {
                step[a] = 1;
                t_next[a] = (self.origin_mm[a] + (cell[a] + 1) as f64 * v - origin[a]) / dir[a];
                t_delta[a] = v / dir[a];
            } else if dir[a] < 0.0 {
                step[a] = -1;
                t_next[a] = (self.origin_mm[a] + cell[a] as f64 * v - origin[a]) / dir[a];
                t_delta[a] = -v / dir[a];
            }
        }
        let mut t = t_in;
        loop {
            let a = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            let t_end = t_next[a].min(t_out);
            if t_end > t {
                let idx = self.index(cell[0] as usize, cell[1] as usize, cell[2] as usize);
                visit(idx, t_end - t);
                t = t_end;
            }
            if t_next[a] >= t_out {
                break;
            }
            cell[a] += step[a];
            if cell[a] < 0 || cell[a] >= self.dims[a] as i64 {
                break;
            }
            t_next[a] += t_delta[a];
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconVolume {
    pub geom: VolumeGeometry,
    pub values: Vec<f64>,
}

impl ReconVolume {
    pub fn zeros(geom: VolumeGeometry) -> Self {
        ReconVolume { values: vec![0.0; geom.len()], geom }
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.geom.index(i, j, k)]
    }

    /// Axial slice `k` as a row-major `ny x nx` raster.
    pub fn axial_slice(&self, k: usize) -> Result<Raster<f64>> {
        let [nx, ny, nz] = self.geom.dims;
        if k >= nz {
            return Err(Error::InvalidArgument(format!("slice {k} outside 0..{nz}")));
        }
        let start = self.geom.index(0, 0, k);
        Raster::from_vec(ny, nx, self.values[start..start + nx * ny].to_vec())
    }

    pub fn write_slice_pgm(&self, path: &Path, k: usize, window: Option<(f64, f64)>) -> Result<()> {
        let slice = self.axial_slice(k)?;
        render::write_pgm16(path, slice.cols, slice.rows, &render::scale_to_u16(&slice.data, window))
    }

    /// Layout: `TRAJVOL\0`, version u32, origin 3 x f64, voxel f64, dims
    /// 3 x u32, then the values as f32, x fastest. Little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(64 + 4 * self.values.len());
        bytes.extend_from_slice(VOLUME_MAGIC);
        bytes.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
        for v in self.geom.origin_mm.iter().chain(std::iter::once(&self.geom.voxel_mm)) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for d in self.geom.dims {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.values {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        const HEADER: usize = 8 + 4 + 32 + 12;
        if bytes.len() < HEADER || &bytes[..8] != VOLUME_MAGIC {
            return Err(Error::format(path, "not a volume file"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(8) != VOLUME_VERSION {
            return Err(Error::format(path, format!("unsupported volume version {}", u32_at(8))));
        }
        let geom = VolumeGeometry {
            origin_mm: Vec3::new(f64_at(12), f64_at(20), f64_at(28)),
            voxel_mm: f64_at(36),
            dims: [u32_at(44) as usize, u32_at(48) as usize, u32_at(52) as usize],
        };
        geom.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let body = &bytes[HEADER..];
        if body.len() != 4 * geom.len() {
            return Err(Error::format(path, "volume size does not match its header"));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        Ok(ReconVolume { geom, values })
    }
}

const VOLUME_MAGIC: &[u8; 8] = b"TRAJVOL\0";
const VOLUME_VERSION: u32 = 1;

/// Mean attenuation over `ss^3` sub-samples of each voxel.
pub fn ground_truth_volume(phantom: &Phantom, geom: VolumeGeometry, ss: usize) -> Result<ReconVolume> {
    geom.validate()?;
    if ss == 0 {
        return Err(Error::InvalidArgument("supersampling factor must be at least 1".into()));
    }
    let [nx, ny, _] = geom.dims;
    let sub = geom.voxel_mm / ss as f64;
    let norm = (ss * ss * ss) as f64;
    let values = (0..geom.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            let corner = geom.origin_mm + Vec3::new(i as f64, j as f64, k as f64) * geom.voxel_mm;
            let mut acc = 0.0;
            for a in 0..ss {
                for b in 0..ss {
                    for c in 0..ss {
                        let p = corner + Vec3::new(a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5) * sub;
                        acc += phantom.mu_at(&p);
                    }
                }
            }
            acc / norm
        })
        .collect();
    Ok(ReconVolume { geom, values })
}

/// The linear map from voxel values to the line integrals of a set of views.
#[derive(Clone, Debug)]
pub struct SystemOperator {
    pub geom: VolumeGeometry,
    pub poses: Vec<CArmPose>,
    rays: Vec<RayBundle>,
}

impl SystemOperator {
    pub fn new(geom: VolumeGeometry, poses: Vec<CArmPose>) -> Result<Self> {
        geom.validate()?;
        if poses.is_empty() {
            return Err(Error::InvalidArgument("system operator needs at least one view".into()));
        }
        let rays = poses.iter().map(pose_to_rays).collect::<Result<Vec<_>>>()?;
        Ok(SystemOperator { geom, poses, rays })
    }

    pub fn n_views(&self) -> usize {
        self.poses.len()
    }

    fn check_volume(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.geom.len() {
            return Err(Error::ShapeMismatch(format!("{} voxels, geometry has {}", x.len(), self.geom.len())));
        }
        Ok(())
    }

    fn check_stack(&self, y: &[Raster<f64>]) -> Result<()> {
        if y.len() != self.n_views() {
            return Err(Error::ShapeMismatch(format!("{} views, operator has {}", y.len(), self.n_views())));
        }
        for (r, b) in y.iter().zip(&self.rays) {
            if r.rows != b.rows || r.cols != b.cols {
                return Err(Error::ShapeMismatch(format!(
                    "{}x{} raster for a {}x{} detector",
                    r.rows, r.cols, b.rows, b.cols
                )));
            }
        }
        Ok(())
    }

    fn forward_view(&self, rays: &RayBundle, x: &[f64]) -> Raster<f64> {
        let mut data = vec![0.0; rays.rows * rays.cols];
        data.par_chunks_mut(rays.cols).enumerate().for_each(|(row, out)| {
            for (col, v) in out.iter_mut().enumerate() {
                let (o, d) = rays.pixel_ray(row, col);
                let mut acc = 0.0;
                self.geom.trace(&o, &d, |idx, len| acc += x[idx] * len);
                *v = acc;
            }
        });
        Raster { rows: rays.rows, cols: rays.cols, data }
    }

    pub fn forward_project_volume(&self, x: &[f64]) -> Result<Vec<Raster<f64>>> {
        self.check_volume(x)?;
        Ok(self.rays.iter().map(|r| self.forward_view(r, x)).collect())
    }

    /// Transpose of [`Self::forward_project_volume`]. Each view is
    /// accumulated into its own partial volume and the partials are summed
    /// in view order, so the result does not depend on scheduling.
    pub fn backproject(&self, y: &[Raster<f64>]) -> Result<Vec<f64>> {
        self.check_stack(y)?;
        let partials: Vec<Vec<f64>> = self
            .rays
            .par_iter()
            .zip(y)
            .map(|(rays, raster)| {
                let mut vol = vec![0.0; self.geom.len()];
                for row in 0..rays.rows {
                    for col in 0..rays.cols {
                        let w = raster.data[row * rays.cols + col];
                        if w == 0.0 {
                            continue;
                        }
                        let (o, d) = rays.pixel_ray(row, col);
                        self.geom.trace(&o, &d, |idx, len| vol[idx] += w * len);
                    }
                }
                vol
            })
            .collect();
        let mut out = vec![0.0; self.geom.len()];
        for p in partials {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CglsResult {
    pub volume: ReconVolume,
    /// `||b - A x||` before the first and after every iteration.
    pub residual_norms: Vec<f64>,
    /// `||A^T (b - A x)||` at the same points.
    pub normal_residual_norms: Vec<f64>,
    pub iterations: usize,
    /// Set when a zero search direction ended the run early.
    pub breakdown: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn stack_dot(a: &[Raster<f64>], b: &[Raster<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| dot(&x.data, &y.data)).sum()
}

/// Conjugate-gradient least squares from a zero volume.
pub fn cgls(op: &SystemOperator, b: &[Raster<f64>], n_iters: usize) -> Result<CglsResult> {
    if n_iters == 0 {
        return Err(Error::InvalidArgument("CGLS needs at least one iteration".into()));
    }
    op.check_stack(b)?;
    let mut x = vec![0.0; op.geom.len()];
    let mut r: Vec<Raster<f64>> = b.to_vec();
    let mut s = op.backproject(&r)?;
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let mut residual_norms = vec![stack_dot(&r, &r).sqrt()];
    let mut normal_residual_norms = vec![gamma.sqrt()];
    let mut iterations = 0;
    let mut breakdown = false;
    for _ in 0..n_iters {
        if gamma == 0.0 {
            breakdown = true;
            break;
        }
        let q = op.forward_project_volume(&p)?;
        let qq = stack_dot(&q, &q);
        if qq == 0.0 {
            breakdown = true;
            break;
        }
        let alpha = gamma / qq;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        for (ri, qi) in r.iter_mut().zip(&q) {
            ri.data.iter_mut().zip(&qi.data).for_each(|(a, b)| *a -= alpha * b);
        }
        s = op.backproject(&r)?;
        let gamma_new = dot(&s, &s);
        let beta = gamma_new / gamma;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
        gamma = gamma_new;
        iterations += 1;
        residual_norms.push(stack_dot(&r, &r).sqrt());
        normal_residual_norms.push(gamma.sqrt());
    }
    Ok(CglsResult {
        volume: ReconVolume { geom: op.geom, values: x },
        residual_norms,
        normal_residual_norms,
        iterations,
        breakdown,
    })
}

/// Reconstruction input for one acquired view: log-normalized noisy counts
/// when present, otherwise the noise-free line integrals.
pub fn sinogram_view(projection: &Projection) -> Result<Raster<f64>> {
    match (&projection.noisy_counts, projection.fluence_i0) {
        (Some(counts), Some(i0)) => Ok(counts.map(|&c| log_normalize_value(c as f64, i0))),
        (Some(_), None) => Err(Error::InvalidArgument("noisy projection without a fluence".into())),
        (None, _) => Ok(projection.line_integrals.clone()),
    }
}

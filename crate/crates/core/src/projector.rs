//! Digitally reconstructed radiographs, photon statistics and projection stacks.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{pose_to_rays, CArmPose};
use crate::phantom::{line_integral, Phantom};

/// Photon floor applied before taking logarithms of measured counts.
pub const COUNT_FLOOR: f64 = 0.5;

/// Row-major 2D raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Raster { rows, cols, data: vec![value; rows * cols] }
    }
}

impl<T> Raster<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} raster",
                data.len()
            )));
        }
        Ok(Raster { rows, cols, data })
    }

    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.cols + col]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Raster<U> {
        Raster { rows: self.rows, cols: self.cols, data: self.data.iter().map(f).collect() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub pose: CArmPose,
    pub line_integrals: Raster<f64>,
    pub fluence_i0: Option<f64>,
    pub noisy_counts: Option<Raster<u32>>,
}

impl Projection {
    pub fn with_fluence(mut self, i0: f64) -> Self {
        self.fluence_i0 = Some(i0);
        self
    }

    /// Noise-free expected counts at the attached fluence.
    pub fn expected_counts(&self) -> Result<Raster<f64>> {
        let i0 = self.require_fluence()?;
        Ok(self.line_integrals.map(|&p| expected_counts(p, i0)))
    }

    fn require_fluence(&self) -> Result<f64> {
        match self.fluence_i0 {
            Some(i0) if i0 > 0.0 => Ok(i0),
            _ => Err(Error::InvalidArgument("projection has no positive fluence".into())),
        }
    }
}

/// Noise-free projection: every pixel holds the line integral from the source
/// to its center.
pub fn project(phantom: &Phantom, pose: &CArmPose) -> Result<Projection> {
    let rays = pose_to_rays(pose)?;
    let mut data = vec![0.0; pose.n_pixels()];
    data.par_chunks_mut(rays.cols).enumerate().for_each(|(row, out)| {
        for (col, value) in out.iter_mut().enumerate() {
            let (origin, dir) = rays.pixel_ray(row, col);
            *value = line_integral(phantom, &origin, &dir);
        }
    });
    Ok(Projection {
        pose: *pose,
        line_integrals: Raster { rows: rays.rows, cols: rays.cols, data },
        fluence_i0: None,
        noisy_counts: None,
    })
}

/// Beer-Lambert mean count.
pub fn expected_counts(p: f64, i0: f64) -> f64 {
    i0 * (-p).exp()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// ChaCha key for one view; each pixel then uses its index as the stream id.
fn view_key(stream_seed: u64, pose: &CArmPose) -> [u8; 32] {
    let mut words = [0u64; 4];
    let mut h = splitmix64(stream_seed);
    for (i, w) in words.iter_mut().enumerate() {
        h = splitmix64(h ^ pose.phi_deg.to_bits().rotate_left(i as u32 * 7) ^ pose.theta_deg.to_bits());
        *w = h;
    }
    let mut key = [0u8; 32];
    for (chunk, w) in key.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    key
}

/// Draws one Poisson count per pixel from a generator addressed by
/// `(stream_seed, pose, pixel index)`, so the result does not depend on the
/// evaluation order or worker count.
pub fn sample_counts(mean: &Raster<f64>, pose: &CArmPose, stream_seed: u64) -> Raster<u32> {
    let key = view_key(stream_seed, pose);
    let data = mean
        .data
        .par_iter()
        .enumerate()
        .map(|(idx, &lambda)| {
            if !(lambda > 0.0) {
                return 0;
            }
            let mut rng = ChaCha8Rng::from_seed(key);
            rng.set_stream(idx as u64);
            let draw: f64 = Poisson::new(lambda).map_or(0.0, |d| d.sample(&mut rng));
            draw.min(u32::MAX as f64) as u32
        })
        .collect();
    Raster { rows: mean.rows, cols: mean.cols, data }
}

pub fn add_poisson_noise(projection: &Projection, stream_seed: u64) -> Result<Projection> {
    let mean = projection.expected_counts()?;
    let counts = sample_counts(&mean, &projection.pose, stream_seed);
    Ok(Projection { noisy_counts: Some(counts), ..projection.clone() })
}

/// Estimated line integral from a measured count.
pub fn log_normalize_value(count: f64, i0: f64) -> f64 {
    -(count.max(COUNT_FLOOR) / i0).ln()
}

pub fn log_normalize(counts: &[f64], i0: f64) -> Result<Vec<f64>> {
    if !(i0 > 0.0) {
        return Err(Error::InvalidArgument(format!("fluence {i0} must be positive")));
    }
    Ok(counts.iter().map(|&c| log_normalize_value(c, i0)).collect())
}

const STACK_MAGIC: &[u8; 8] = b"TRAJSTK\0";
const STACK_VERSION: u32 = 1;

/// Sample type of a projection stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StackKind {
    /// Line integrals as 32-bit floats.
    LineIntegrals = 0,
    /// Photon counts as 32-bit unsigned integers.
    Counts = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StackData {
    LineIntegrals(Raster<f32>),
    Counts(Raster<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackView {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub data: StackData,
}

/// Sequential writer for a projection stack file.
///
/// Layout: 16-byte header (`TRAJSTK\0`, version u32, kind u32), then one
/// record per view: phi f64, theta f64, rows u32, cols u32, raster. All
/// values little-endian.
pub struct StackWriter {
    out: BufWriter<File>,
    kind: StackKind,
    path: PathBuf,
}

impl StackWriter {
    pub fn create(path: &Path, kind: StackKind) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = StackWriter { out: BufWriter::new(file), kind, path: path.to_owned() };
        let mut header = Vec::with_capacity(16);
        header.extend_from_slice(STACK_MAGIC);
        header.extend_from_slice(&STACK_VERSION.to_le_bytes());
        header.extend_from_slice(&(kind as u32).to_le_bytes());
        w.write_bytes(&header)?;
        Ok(w)
    }

    fn write_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.out.write_all(bytes).map_err(|e| Error::io(&self.path, e))
    }

    fn write_record_header(&mut self, phi: f64, theta: f64, rows: usize, cols: usize) -> Result<()> {
        let mut h = Vec::with_capacity(24);
        h.extend_from_slice(&phi.to_le_bytes());
        h.extend_from_slice(&theta.to_le_bytes());
        h.extend_from_slice(&(rows as u32).to_le_bytes());
        h.extend_from_slice(&(cols as u32).to_le_bytes());
        self.write_bytes(&h)
    }

    pub fn write_line_integrals(&mut self, pose: &CArmPose, raster: &Raster<f64>) -> Result<()> {
        if self.kind != StackKind::LineIntegrals {
            return Err(Error::InvalidArgument("count stack cannot store line integrals".into()));
        }
        self.write_record_header(pose.phi_deg, pose.theta_deg, raster.rows, raster.cols)?;
        let bytes: Vec<u8> = raster.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        self.write_bytes(&bytes)
    }

    pub fn write_counts(&mut self, pose: &CArmPose, raster: &Raster<u32>) -> Result<()> {
        if self.kind != StackKind::Counts {
            return Err(Error::InvalidArgument("line-integral stack cannot store counts".into()));
        }
        self.write_record_header(pose.phi_deg, pose.theta_deg, raster.rows, raster.cols)?;
        let bytes: Vec<u8> = raster.data.iter().flat_map(|&v| v.to_le_bytes()).collect();
        self.write_bytes(&bytes)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Streaming reader over a projection stack file.
pub struct StackReader {
    input: BufReader<File>,
    pub kind: StackKind,
    path: PathBuf,
}

impl StackReader {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut input = BufReader::new(file);
        let mut header = [0u8; 16];
        input.read_exact(&mut header).map_err(|e| Error::io(path, e))?;
        if &header[..8] != STACK_MAGIC {
            return Err(Error::format(path, "not a projection stack"));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != STACK_VERSION {
            return Err(Error::format(path, format!("unsupported stack version {version}")));
        }
        let kind = match u32::from_le_bytes(header[12..16].try_into().unwrap()) {
            0 => StackKind::LineIntegrals,
            1 => StackKind::Counts,
            k => return Err(Error::format(path, format!("unknown stack kind {k}"))),
        };
        Ok(StackReader { input, kind, path: path.to_owned() })
    }

    /// Next view, or `None` at end of file.
    pub fn next_view(&mut self) -> Result<Option<StackView>> {
        let mut h = [0u8; 24];
        match self.input.read_exact(&mut h[..1]) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
            Err(e) => return Err(Error::io(&self.path, e)),
        }
        self.input.read_exact(&mut h[1..]).map_err(|e| Error::io(&self.path, e))?;
        let phi_deg = f64::from_le_bytes(h[0..8].try_into().unwrap());
        let theta_deg = f64::from_le_bytes(h[8..16].try_into().unwrap());
        let rows = u32::from_le_bytes(h[16..20].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(h[20..24].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; rows * cols * 4];
        self.input.read_exact(&mut bytes).map_err(|e| Error::io(&self.path, e))?;
        let words = bytes.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
        let data = match self.kind {
            StackKind::LineIntegrals => {
                StackData::LineIntegrals(Raster { rows, cols, data: words.map(f32::from_le_bytes).collect() })
            }
            StackKind::Counts => StackData::Counts(Raster { rows, cols, data: words.map(u32::from_le_bytes).collect() }),
        };
        Ok(Some(StackView { phi_deg, theta_deg, data }))
    }
}

pub fn read_stack(path: &Path) -> Result<Vec<StackView>> {
    let mut reader = StackReader::open(path)?;
    let mut views = Vec::new();
    while let Some(v) = reader.next_view()? {
        views.push(v);
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::phantom::Primitive;

    fn small_pose() -> CArmPose {
        CArmPose { det_rows: 33, det_cols: 33, pitch_mm: 2.0, ..CArmPose::default() }
    }

    #[test]
    fn empty_phantom_projects_to_zero() {
        let proj = project(&Phantom::default(), &small_pose()).unwrap();
        assert!(proj.line_integrals.data.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn central_pixel_sees_sphere_diameter() {
        let ph = Phantom::new(vec![Primitive::sphere(Vec3::zeros(), 10.0, 0.02)], vec![], 0).unwrap();
        for &(phi, theta) in &[(0.0, 90.0), (73.0, 60.0), (200.0, 120.0)] {
            let proj = project(&ph, &small_pose().with_angles(phi, theta)).unwrap();
            assert!((proj.line_integrals.get(16, 16) - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn projection_matches_pixelwise_oracle() {
        let (ph, _) = crate::phantom::build_chest_phantom(5);
        let pose = small_pose().with_angles(35.0, 80.0);
        let proj = project(&ph, &pose).unwrap();
        let rays = pose_to_rays(&pose).unwrap();
        for row in 0..pose.det_rows {
            for col in 0..pose.det_cols {
                let (o, d) = rays.pixel_ray(row, col);
                assert_eq!(*proj.line_integrals.get(row, col), line_integral(&ph, &o, &d));
            }
        }
    }

    #[test]
    fn beer_lambert_values() {
        assert_eq!(expected_counts(0.0, 20000.0), 20000.0);
        assert!((expected_counts(2f64.ln(), 500.0) - 250.0).abs() < 1e-9);
        assert!((expected_counts(10.0, 500.0) - 500.0 * (-10f64).exp()).abs() < 1e-15);
        assert!((expected_counts(10.0, 500.0) - 0.0227).abs() < 1e-4);
    }

    #[test]
    fn log_normalize_values() {
        assert_eq!(log_normalize(&[500.0], 500.0).unwrap(), vec![0.0]);
        assert!((log_normalize(&[0.0], 500.0).unwrap()[0] - 1000f64.ln()).abs() < 1e-12);
        assert!((log_normalize(&[250.0], 500.0).unwrap()[0] - 2f64.ln()).abs() < 1e-12);
        assert!((1000f64.ln() - 6.9078).abs() < 1e-4);
        assert!(log_normalize(&[1.0], 0.0).is_err());
    }

    #[test]
    fn noise_requires_fluence() {
        let proj = project(&Phantom::default(), &small_pose()).unwrap();
        assert!(add_poisson_noise(&proj, 1).is_err());
    }

    #[test]
    fn zero_mean_gives_zero_counts() {
        let pose = small_pose();
        let mean = Raster::filled(pose.det_rows, pose.det_cols, 0.0);
        assert!(sample_counts(&mean, &pose, 3).data.iter().all(|&c| c == 0));
    }

    #[test]
    fn noise_is_deterministic() {
        let (ph, _) = crate::phantom::build_chest_phantom(2);
        let proj = project(&ph, &small_pose()).unwrap().with_fluence(500.0);
        let a = add_poisson_noise(&proj, 9).unwrap();
        let b = add_poisson_noise(&proj, 9).unwrap();
        assert_eq!(a.noisy_counts, b.noisy_counts);
        let c = add_poisson_noise(&proj, 10).unwrap();
        assert_ne!(a.noisy_counts, c.noisy_counts);
    }

    #[test]
    fn flat_field_mean_within_three_sigma() {
        let pose = CArmPose { det_rows: 64, det_cols: 64, ..CArmPose::default() };
        let mean = Raster::filled(64, 64, 20000.0);
        let counts = sample_counts(&mean, &pose, 42);
        let m = counts.data.iter().map(|&c| c as f64).sum::<f64>() / 4096.0;
        let bound = 3.0 * (20000.0f64 / 4096.0).sqrt();
        assert!((m - 20000.0).abs() < bound, "mean {m}");
    }

    #[test]
    fn stack_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.stk");
        let pose = small_pose().with_angles(10.0, 85.0);
        let li = Raster::from_vec(2, 3, vec![0.0, 1.5, 2.25, 3.0, 0.125, 7.0]).unwrap();
        let mut w = StackWriter::create(&path, StackKind::LineIntegrals).unwrap();
        w.write_line_integrals(&pose, &li).unwrap();
        w.write_line_integrals(&pose.with_angles(15.0, 90.0), &li).unwrap();
        w.finish().unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"TRAJSTK\0");
        assert_eq!(bytes.len(), 16 + 2 * (24 + 6 * 4));
        let views = read_stack(&path).unwrap();
        assert_eq!(views.len(), 2);
        assert_eq!((views[1].phi_deg, views[1].theta_deg), (15.0, 90.0));
        assert_eq!(views[0].data, StackData::LineIntegrals(li.map(|&v| v as f32)));

        let cpath = dir.path().join("c.stk");
        let counts = Raster::from_vec(1, 2, vec![7u32, 4_000_000_000]).unwrap();
        let mut w = StackWriter::create(&cpath, StackKind::Counts).unwrap();
        assert!(w.write_line_integrals(&pose, &li).is_err());
        w.write_counts(&pose, &counts).unwrap();
        w.finish().unwrap();
        assert_eq!(read_stack(&cpath).unwrap()[0].data, StackData::Counts(counts));
    }
}

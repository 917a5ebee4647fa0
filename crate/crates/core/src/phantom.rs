//! Analytic attenuating scenes with closed-form line integrals.
//!
//! A phantom is a list of geometric primitives, each with a constant linear
//! attenuation coefficient. Where primitives overlap their coefficients add,
//! which keeps every line integral linear in the coefficients.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MU_SOFT_TISSUE: f64 = 0.02;
pub const MU_BEAM: f64 = 0.04;
pub const MU_METAL: f64 = 0.3;

const PARALLEL_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Axis-aligned box given by its half-widths.
    Box { half: Vec3 },
    /// Capped cylinder; `axis` is a unit vector.
    Cylinder { axis: Vec3, radius: f64, half_length: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub center_mm: Vec3,
    pub mu_per_mm: f64,
}

impl Primitive {
    pub fn sphere(center: Vec3, radius: f64, mu: f64) -> Self {
        Primitive { shape: Shape::Sphere { radius }, center_mm: center, mu_per_mm: mu }
    }

    pub fn cuboid(center: Vec3, half: Vec3, mu: f64) -> Self {
        Primitive { shape: Shape::Box { half }, center_mm: center, mu_per_mm: mu }
    }

    /// The axis is normalized here.
    pub fn cylinder(center: Vec3, axis: Vec3, radius: f64, half_length: f64, mu: f64) -> Self {
        Primitive {
            shape: Shape::Cylinder { axis: axis.normalize(), radius, half_length },
            center_mm: center,
            mu_per_mm: mu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("primitive: {msg}")));
        if !(self.mu_per_mm >= 0.0) {
            return bad("attenuation must be non-negative");
        }
        let ok = match &self.shape {
            Shape::Sphere { radius } => *radius > 0.0,
            Shape::Box { half } => half.iter().all(|h| *h > 0.0),
            Shape::Cylinder { axis, radius, half_length } => {
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return bad("cylinder axis must be unit length");
                }
                *radius > 0.0 && *half_length > 0.0
            }
        };
        if !ok {
            return bad("geometric parameters must be positive");
        }
        Ok(())
    }

    /// Parametric interval `[t0, t1]`, clipped to `t >= 0`, where the ray is inside.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, f64)> {
        let rel = origin - self.center_mm;
        let (t0, t1) = match &self.shape {
            Shape::Sphere { radius } => {
                let b = dir.dot(&rel);
                let disc = b * b - (rel.norm_squared() - radius * radius);
                if disc <= 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                (-b - s, -b + s)
            }
            Shape::Box { half } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for k in 0..3 {
                    if dir[k].abs() < PARALLEL_EPS {
                        if rel[k].abs() > half[k] {
                            return None;
                        }
                    } else {
                        let a = (-half[k] - rel[k]) / dir[k];
                        let b = (half[k] - rel[k]) / dir[k];
                        lo = lo.max(a.min(b));
                        hi = hi.min(a.max(b));
                    }
                }
                (lo, hi)
            }
            Shape::Cylinder { axis, radius, half_length } => {
                let oa = rel.dot(axis);
                let da = dir.dot(axis);
                let op = rel - axis * oa;
                let dp = dir - axis * da;
                let a = dp.norm_squared();
                let (mut lo, mut hi) = if a < PARALLEL_EPS {
                    if op.norm_squared() >= radius * radius {
                        return None;
                    }
                    (f64::NEG_INFINITY, f64::INFINITY)
                } else {
                    let b = op.dot(&dp);
                    let disc = b * b - a * (op.norm_squared() - radius * radius);
                    if disc <= 0.0 {
                        return None;
                    }
                    let s = disc.sqrt();
                    ((-b - s) / a, (-b + s) / a)
                };
                if da.abs() < PARALLEL_EPS {
                    if oa.abs() > *half_length {
                        return None;
                    }
                } else {
                    let c0 = (-half_length - oa) / da;
                    let c1 = (half_length - oa) / da;
                    lo = lo.max(c0.min(c1));
                    hi = hi.min(c0.max(c1));
                }
                (lo, hi)
            }
        };
        let t0 = t0.max(0.0);
        (t1 > t0).then_some((t0, t1))
    }

    /// Length of the ray inside this primitive, mm.
    pub fn chord(&self, origin: &Vec3, dir: &Vec3) -> f64 {
        self.intersect(origin, dir).map_or(0.0, |(t0, t1)| t1 - t0)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let rel = p - self.center_mm;
        match &self.shape {
            Shape::Sphere { radius } => rel.norm_squared() <= radius * radius,
            Shape::Box { half } => (0..3).all(|k| rel[k].abs() <= half[k]),
            Shape::Cylinder { axis, radius, half_length } => {
                let along = rel.dot(axis);
                along.abs() <= *half_length && (rel - axis * along).norm_squared() <= radius * radius
            }
        }
    }

    /// Distance from `p` to the primitive's core set: center point, axis segment or box.
    pub fn core_distance(&self, p: &Vec3) -> f64 {
        let rel = p - self.center_mm;
        match &self.shape {
            Shape::Sphere { .. } => rel.norm(),
            Shape::Box { half } => {
                let outside = Vec3::from_fn(|k, _| (rel[k].abs() - half[k]).max(0.0));
                outside.norm()
            }
            Shape::Cylinder { axis, half_length, .. } => {
                let along = rel.dot(axis).clamp(-half_length, *half_length);
                (rel - axis * along).norm()
            }
        }
    }

    /// Radius of the primitive around its core set (zero for boxes).
    pub fn core_radius(&self) -> f64 {
        match &self.shape {
            Shape::Sphere { radius } | Shape::Cylinder { radius, .. } => *radius,
            Shape::Box { .. } => 0.0,
        }
    }

    pub fn translated(&self, offset: &Vec3) -> Primitive {
        Primitive { center_mm: self.center_mm + offset, ..self.clone() }
    }

    pub fn scaled_mu(&self, factor: f64) -> Primitive {
        Primitive { mu_per_mm: self.mu_per_mm * factor, ..self.clone() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Phantom {
    pub primitives: Vec<Primitive>,
    pub metal_indices: Vec<usize>,
    pub rng_seed: u64,
}

impl Phantom {
    pub fn new(primitives: Vec<Primitive>, metal_indices: Vec<usize>, rng_seed: u64) -> Result<Self> {
        let p = Phantom { primitives, metal_indices, rng_seed };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() {
            return Err(Error::InvalidArgument("phantom has no primitives".into()));
        }
        for prim in &self.primitives {
            prim.validate()?;
        }
        if let Some(&i) = self.metal_indices.iter().find(|&&i| i >= self.primitives.len()) {
            return Err(Error::InvalidArgument(format!("metal index {i} out of range")));
        }
        Ok(())
    }

    pub fn is_metal(&self, index: usize) -> bool {
        self.metal_indices.contains(&index)
    }

    pub fn metal(&self) -> impl Iterator<Item = &Primitive> {
        self.metal_indices.iter().map(|&i| &self.primitives[i])
    }

    /// Total attenuation at a point.
    pub fn mu_at(&self, p: &Vec3) -> f64 {
        self.primitives.iter().filter(|q| q.contains(p)).map(|q| q.mu_per_mm).sum()
    }

    pub fn translated(&self, offset: &Vec3) -> Phantom {
        Phantom {
            primitives: self.primitives.iter().map(|p| p.translated(offset)).collect(),
            ..self.clone()
        }
    }

    /// Same scene without its metal primitives.
    pub fn without_metal(&self) -> Phantom {
        let primitives = self
            .primitives
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.is_metal(*i))
            .map(|(_, p)| p.clone())
            .collect();
        Phantom { primitives, metal_indices: Vec::new(), rng_seed: self.rng_seed }
    }

    /// Serialize as a scene file; see [`read_scene`].
    pub fn to_scene_string(&self, task: Option<&TaskRegion>) -> String {
        let mut out = format!("# seed {}\n", self.rng_seed);
        for (i, p) in self.primitives.iter().enumerate() {
            let c = p.center_mm;
            let (kind, params) = match &p.shape {
                Shape::Sphere { radius } => ("sphere", [*radius, 0.0, 0.0, 0.0]),
                Shape::Box { half } => ("box", [half.x, half.y, half.z, 0.0]),
                Shape::Cylinder { axis, radius, half_length } => {
                    let polar = axis.z.clamp(-1.0, 1.0).acos().to_degrees();
                    let azimuth = axis.y.atan2(axis.x).to_degrees();
                    ("cylinder", [polar, azimuth, *radius, *half_length])
                }
            };
            let _ = writeln!(
                out,
                "{kind} {} {} {} {} {} {} {} {} {}",
                c.x,
                c.y,
                c.z,
                params[0],
                params[1],
                params[2],
                params[3],
                p.mu_per_mm,
                u8::from(self.is_metal(i))
            );
        }
        if let Some(t) = task {
            let c = t.center_mm;
            let _ = writeln!(out, "task {} {} {} {}", c.x, c.y, c.z, t.radius_mm);
        }
        out
    }
}

/// Sum over primitives of attenuation times chord length.
pub fn line_integral(phantom: &Phantom, origin: &Vec3, dir: &Vec3) -> f64 {
    phantom.primitives.iter().map(|p| p.mu_per_mm * p.chord(origin, dir)).sum()
}

/// Line integral from `origin` through `target` and beyond.
pub fn line_integral_through(phantom: &Phantom, origin: &Vec3, target: &Vec3) -> f64 {
    let dir = (target - origin).normalize();
    line_integral(phantom, origin, &dir)
}

/// Frequency weighting attached to a task region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TaskProfile {
    /// Gaussian blob whose spatial scale is the region radius.
    #[default]
    GaussianBlob,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskRegion {
    pub center_mm: Vec3,
    pub radius_mm: f64,
    pub profile: TaskProfile,
}

impl TaskRegion {
    pub fn new(center_mm: Vec3, radius_mm: f64) -> Result<Self> {
        if !(radius_mm > 0.0) {
            return Err(Error::InvalidArgument(format!("task radius {radius_mm} must be positive")));
        }
        Ok(TaskRegion { center_mm, radius_mm, profile: TaskProfile::GaussianBlob })
    }

    pub fn translated(&self, offset: &Vec3) -> TaskRegion {
        TaskRegion { center_mm: self.center_mm + offset, ..self.clone() }
    }
}

/// Uniform sampling bounds for the randomized chest phantom, mm and degrees.
///
/// Layout: two soft-tissue cylinders along z on either side of a box beam,
/// and two metal screws in the beam pointing roughly along +y, converging
/// toward the midline. The screw at +x sits `z_step` above the one at -x.
#[derive(Clone, Debug, PartialEq)]
pub struct ChestBounds {
    pub gel_radius: (f64, f64),
    pub gel_half_length: (f64, f64),
    pub gel_offset_x: (f64, f64),
    pub gel_offset_y: (f64, f64),
    pub beam_offset_y: (f64, f64),
    pub beam_half_x: (f64, f64),
    pub beam_half_y: (f64, f64),
    pub beam_half_z: (f64, f64),
    pub screw_radius: (f64, f64),
    pub screw_half_length: (f64, f64),
    pub screw_offset_x: (f64, f64),
    pub screw_offset_y: (f64, f64),
    pub screw_convergence_deg: (f64, f64),
    pub screw_z_center: (f64, f64),
    pub screw_z_step: (f64, f64),
    pub task_radius: f64,
}

impl Default for ChestBounds {
    fn default() -> Self {
        ChestBounds {
            gel_radius: (22.0, 27.0),
            gel_half_length: (40.0, 50.0),
            gel_offset_x: (32.0, 38.0),
            gel_offset_y: (-4.0, 4.0),
            beam_offset_y: (-3.0, 3.0),
            beam_half_x: (12.0, 15.0),
            beam_half_y: (9.0, 12.0),
            beam_half_z: (45.0, 55.0),
            screw_radius: (2.0, 3.0),
            screw_half_length: (10.0, 14.0),
            screw_offset_x: (10.0, 14.0),
            screw_offset_y: (-2.0, 2.0),
            screw_convergence_deg: (5.0, 20.0),
            screw_z_center: (-3.0, 3.0),
            screw_z_step: (0.5, 1.5),
            task_radius: 4.0,
        }
    }
}

pub fn build_chest_phantom(seed: u64) -> (Phantom, TaskRegion) {
    build_chest_phantom_with(seed, &ChestBounds::default())
}

pub fn build_chest_phantom_with(seed: u64, b: &ChestBounds) -> (Phantom, TaskRegion) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };

    let mut primitives = Vec::with_capacity(5);
    for side in [1.0, -1.0] {
        let center = Vec3::new(side * draw(b.gel_offset_x), draw(b.gel_offset_y), 0.0);
        let radius = draw(b.gel_radius);
        let half_length = draw(b.gel_half_length);
        primitives.push(Primitive::cylinder(center, Vec3::z(), radius, half_length, MU_SOFT_TISSUE));
    }

    let beam_y = draw(b.beam_offset_y);
    let beam_half = Vec3::new(draw(b.beam_half_x), draw(b.beam_half_y), draw(b.beam_half_z));
    primitives.push(Primitive::cuboid(Vec3::new(0.0, beam_y, 0.0), beam_half, MU_BEAM));

    let z_center = draw(b.screw_z_center);
    let z_step = draw(b.screw_z_step);
    let mut screw_centers = Vec::with_capacity(2);
    for side in [1.0, -1.0] {
        let alpha = draw(b.screw_convergence_deg).to_radians();
        let center = Vec3::new(
            side * draw(b.screw_offset_x),
            beam_y + draw(b.screw_offset_y),
            z_center + side * z_step,
        );
        let axis = Vec3::new(-side * alpha.sin(), alpha.cos(), 0.0);
        let radius = draw(b.screw_radius);
        let half_length = draw(b.screw_half_length);
        primitives.push(Primitive::cylinder(center, axis, radius, half_length, MU_METAL));
        screw_centers.push(center);
    }

    let task_center = (screw_centers[0] + screw_centers[1]) / 2.0;
    let phantom = Phantom { primitives, metal_indices: vec![3, 4], rng_seed: seed };
    let task = TaskRegion { center_mm: task_center, radius_mm: b.task_radius, profile: TaskProfile::GaussianBlob };
    (phantom, task)
}

fn parse_fields(path: &Path, lineno: usize, fields: &[&str], n: usize) -> Result<Vec<f64>> {
    if fields.len() != n {
        return Err(Error::format(path, format!("line {lineno}: expected {n} fields, found {}", fields.len())));
    }
    fields[1..]
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .map_err(|e| Error::format(path, format!("line {lineno}: `{f}`: {e}")))
        })
        .collect()
}

/// Parse a scene file: one primitive per line as
/// `kind cx cy cz p1 p2 p3 p4 mu metal_flag`, plus an optional
/// `task cx cy cz radius` line and `# seed N` header.
///
/// Sphere parameters are `radius 0 0 0`, box parameters the three half-widths
/// and `0`, cylinder parameters `axis_polar_deg axis_azimuth_deg radius half_length`.
pub fn parse_scene(text: &str, path: &Path) -> Result<(Phantom, Option<TaskRegion>)> {
    let mut phantom = Phantom::default();
    let mut task = None;
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
        if let Some(rest) = line.strip_prefix('#') {
            let mut words = rest.split_whitespace();
            if words.next() == Some("seed") {
                if let Some(seed) = words.next().and_then(|s| s.parse().ok()) {
                    phantom.rng_seed = seed;
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "task" {
            let v = parse_fields(path, lineno, &fields, 5)?;
            task = Some(TaskRegion::new(Vec3::new(v[0], v[1], v[2]), v[3])?);
            continue;
        }
        let v = parse_fields(path, lineno, &fields, 10)?;
        let center = Vec3::new(v[0], v[1], v[2]);
        let shape = match fields[0] {
            "sphere" => Shape::Sphere { radius: v[3] },
            "box" => Shape::Box { half: Vec3::new(v[3], v[4], v[5]) },
            "cylinder" => {
                let (sp, cp) = v[3].to_radians().sin_cos();
                let (sa, ca) = v[4].to_radians().sin_cos();
                Shape::Cylinder { axis: Vec3::new(sp * ca, sp * sa, cp), radius: v[5], half_length: v[6] }
            }
            other => return Err(Error::format(path, format!("line {lineno}: unknown primitive `{other}`"))),
        };
        if v[8] != 0.0 {
            phantom.metal_indices.push(phantom.primitives.len());
        }
        phantom.primitives.push(Primitive { shape, center_mm: center, mu_per_mm: v[7] });
    }
    phantom.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((phantom, task))
}

pub fn read_scene(path: &Path) -> Result<(Phantom, Option<TaskRegion>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text, path)
}

pub fn write_scene(path: &Path, phantom: &Phantom, task: Option<&TaskRegion>) -> Result<()> {
    std::fs::write(path, phantom.to_scene_string(task)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Chord length found by marching the inside test and bisecting each
    /// boundary crossing; independent of the closed-form intersections.
    fn marched_chord(prim: &Primitive, origin: &Vec3, dir: &Vec3, t_max: f64) -> f64 {
        let inside = |t: f64| prim.contains(&(origin + dir * t));
        let refine = |mut a: f64, mut b: f64| {
            let ia = inside(a);
            for _ in 0..80 {
                let m = 0.5 * (a + b);
                if inside(m) == ia {
                    a = m;
                } else {
                    b = m;
                }
            }
            0.5 * (a + b)
        };
        let step = 0.01;
        let mut total = 0.0;
        let mut entry = if inside(0.0) { Some(0.0) } else { None };
        let mut t = 0.0;
        while t < t_max {
            let next = t + step;
            if inside(t) != inside(next) {
                let x = refine(t, next);
                match entry.take() {
                    Some(t0) => total += x - t0,
                    None => entry = Some(x),
                }
            }
            t = next;
        }
        total
    }

    #[test]
    fn diameter_chord_of_sphere() {
        let ph = Phantom::new(vec![Primitive::sphere(Vec3::zeros(), 10.0, 0.02)], vec![], 0).unwrap();
        let p = line_integral(&ph, &Vec3::new(-100.0, 0.0, 0.0), &Vec3::x());
        assert!((p - 0.4).abs() < 1e-12);
    }

    #[test]
    fn missing_ray_is_zero() {
        let ph = Phantom::new(vec![Primitive::sphere(Vec3::zeros(), 10.0, 0.02)], vec![], 0).unwrap();
        assert_eq!(line_integral(&ph, &Vec3::new(-100.0, 20.0, 0.0), &Vec3::x()), 0.0);
        // tangent
        assert_eq!(line_integral(&ph, &Vec3::new(-100.0, 10.0, 0.0), &Vec3::x()), 0.0);
        // pointing away
        assert_eq!(line_integral(&ph, &Vec3::new(-100.0, 0.0, 0.0), &-Vec3::x()), 0.0);
    }

    #[test]
    fn box_chord() {
        let b = Primitive::cuboid(Vec3::new(1.0, 2.0, 3.0), Vec3::new(5.0, 6.0, 7.0), 1.0);
        assert!((b.chord(&Vec3::new(1.0, -50.0, 3.0), &Vec3::y()) - 12.0).abs() < 1e-12);
        let dir = Vec3::new(1.0, 1.0, 0.0).normalize();
        let origin = Vec3::new(1.0, 2.0, 3.0) - dir * 40.0;
        let expected = marched_chord(&b, &origin, &dir, 100.0);
        assert!((b.chord(&origin, &dir) - expected).abs() < 1e-6);
    }

    #[test]
    fn oblique_cylinder_matches_marching_oracle() {
        let cyl = Primitive::cylinder(
            Vec3::new(3.0, -2.0, 1.0),
            Vec3::new(0.3, 1.0, 0.2),
            2.5,
            12.0,
            0.3,
        );
        let ph = Phantom::new(vec![cyl.clone()], vec![0], 0).unwrap();
        let cases = [
            (Vec3::new(-60.0, 0.0, 0.0), Vec3::new(1.0, -0.03, 0.02)),
            (Vec3::new(-40.0, -40.0, 5.0), Vec3::new(1.0, 0.9, -0.1)),
            // nearly along the axis, exits through both caps
            (Vec3::new(3.0, -2.0, 1.0) - Vec3::new(0.3, 1.0, 0.2).normalize() * 50.0, Vec3::new(0.3, 1.0, 0.21)),
            (Vec3::new(0.0, -50.0, 30.0), Vec3::new(0.05, 1.0, -0.6)),
        ];
        let mut hits = 0;
        for (origin, dir) in cases {
            let dir = dir.normalize();
            let expected = 0.3 * marched_chord(&cyl, &origin, &dir, 150.0);
            let p = line_integral(&ph, &origin, &dir);
            assert!((p - expected).abs() < 1e-6, "{p} vs {expected}");
            if p > 0.0 {
                hits += 1;
            }
        }
        assert!(hits >= 3);
    }

    #[test]
    fn chest_phantom_is_deterministic() {
        let (a, ta) = build_chest_phantom(7);
        let (b, tb) = build_chest_phantom(7);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = build_chest_phantom(8);
        assert_ne!(a, c);
    }

    #[test]
    fn chest_phantoms_have_two_screws() {
        for seed in 0..100 {
            let (ph, task) = build_chest_phantom(seed);
            ph.validate().unwrap();
            assert_eq!(ph.metal_indices.len(), 2);
            for s in ph.metal() {
                assert_eq!(s.mu_per_mm, MU_METAL);
                let r = s.core_radius();
                assert!((2.0..=3.0).contains(&r));
            }
            assert!(task.center_mm.norm() < 20.0);
        }
    }

    #[test]
    fn lateral_ray_through_roi_crosses_both_screws() {
        for seed in 0..20 {
            let (ph, task) = build_chest_phantom(seed);
            let origin = task.center_mm + Vec3::new(600.0, 0.0, 0.0);
            let dir = -Vec3::x();
            for s in ph.metal() {
                assert!(s.chord(&origin, &dir) > 0.0, "seed {seed}");
            }
        }
    }

    #[test]
    fn scene_round_trip() {
        let (ph, task) = build_chest_phantom(3);
        let text = ph.to_scene_string(Some(&task));
        let (back, back_task) = parse_scene(&text, Path::new("mem")).unwrap();
        assert_eq!(back.metal_indices, ph.metal_indices);
        assert_eq!(back.rng_seed, 3);
        assert_eq!(back_task.unwrap(), task);
        for (a, b) in ph.primitives.iter().zip(&back.primitives) {
            assert_eq!(a.center_mm, b.center_mm);
            assert_eq!(a.mu_per_mm, b.mu_per_mm);
            match (&a.shape, &b.shape) {
                (Shape::Cylinder { axis: x, .. }, Shape::Cylinder { axis: y, .. }) => {
                    assert!((x - y).norm() < 1e-12)
                }
                (x, y) => assert_eq!(x, y),
            }
        }
    }

    #[test]
    fn scene_errors() {
        let p = Path::new("mem");
        assert!(parse_scene("sphere 0 0 0 1 0 0 0 0.1", p).is_err());
        assert!(parse_scene("cone 0 0 0 1 0 0 0 0.1 0", p).is_err());
        assert!(parse_scene("sphere 0 0 0 -1 0 0 0 0.1 0", p).is_err());
        assert!(parse_scene("# empty\n", p).is_err());
    }
}

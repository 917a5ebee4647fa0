//! Diminished C-arm coordinate system.
//!
//! World frame is right-handed with z up. The gantry rotates the source about
//! +z by the in-plane angle `phi`; `theta` is the polar angle of the source
//! measured from +z, so the conventional planar short-scan runs at
//! `theta = 90`. At `(phi, theta) = (0, 90)` the source sits at `(+sid, 0, 0)`
//! and the detector center at `(-(sdd - sid), 0, 0)`.

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Angular spacing between neighbouring views, in both `phi` and `theta`.
pub const VIEW_STEP_DEG: f64 = 5.0;

/// Number of out-of-plane candidates scored for every next view.
pub const N_CANDIDATES: usize = 11;

/// Absolute out-of-plane candidate angles, ascending (90 +/- 25 degrees).
pub const CANDIDATE_THETAS: [f64; N_CANDIDATES] =
    [65.0, 70.0, 75.0, 80.0, 85.0, 90.0, 95.0, 100.0, 105.0, 110.0, 115.0];

pub const THETA_MIN_DEG: f64 = 45.0;
pub const THETA_MAX_DEG: f64 = 135.0;

const ANGLE_TOL: f64 = 1e-9;

/// One source/detector placement of an isocentric C-arm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CArmPose {
    pub phi_deg: f64,
    pub theta_deg: f64,
    pub sid_mm: f64,
    pub sdd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub pitch_mm: f64,
}

impl Default for CArmPose {
    /// Desk-scale defaults: 128 x 128 detector at 2 mm pitch.
    fn default() -> Self {
        CArmPose {
            phi_deg: 0.0,
            theta_deg: 90.0,
            sid_mm: 600.0,
            sdd_mm: 1000.0,
            det_rows: 128,
            det_cols: 128,
            pitch_mm: 2.0,
        }
    }
}

impl CArmPose {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidPose(msg));
        if !(self.sid_mm > 0.0 && self.sdd_mm > self.sid_mm) {
            return bad(format!("need sdd > sid > 0, got sid = {}, sdd = {}", self.sid_mm, self.sdd_mm));
        }
        if !(0.0..360.0).contains(&self.phi_deg) {
            return bad(format!("phi = {} outside [0, 360)", self.phi_deg));
        }
        if !(THETA_MIN_DEG..=THETA_MAX_DEG).contains(&self.theta_deg) {
            return bad(format!("theta = {} outside [45, 135]", self.theta_deg));
        }
        if self.det_rows == 0 || self.det_cols == 0 {
            return bad("detector must have at least one row and column".into());
        }
        if !(self.pitch_mm > 0.0) {
            return bad(format!("pitch = {} must be positive", self.pitch_mm));
        }
        Ok(())
    }

    /// Same geometry at different angles.
    pub fn with_angles(&self, phi_deg: f64, theta_deg: f64) -> CArmPose {
        CArmPose { phi_deg, theta_deg, ..*self }
    }

    pub fn n_pixels(&self) -> usize {
        self.det_rows * self.det_cols
    }

    /// Unit vector from the isocenter towards the source.
    pub fn source_direction(&self) -> Vec3 {
        let (sp, cp) = self.phi_deg.to_radians().sin_cos();
        let (st, ct) = self.theta_deg.to_radians().sin_cos();
        Vec3::new(st * cp, st * sp, ct)
    }

    pub fn source_position(&self) -> Vec3 {
        self.source_direction() * self.sid_mm
    }
}

/// Source position plus the detector pixel lattice for one pose.
///
/// `det_origin_mm` is the center of pixel `(0, 0)`; pixel `(row, col)` sits at
/// `det_origin + col * det_u + row * det_v`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayBundle {
    pub source_mm: Vec3,
    pub det_origin_mm: Vec3,
    pub det_u_mm: Vec3,
    pub det_v_mm: Vec3,
    pub rows: usize,
    pub cols: usize,
}

impl RayBundle {
    pub fn pixel_center(&self, row: usize, col: usize) -> Vec3 {
        self.det_origin_mm + self.det_u_mm * col as f64 + self.det_v_mm * row as f64
    }

    /// Origin and unit direction of the ray from the source through a pixel center.
    pub fn pixel_ray(&self, row: usize, col: usize) -> (Vec3, Vec3) {
        let dir = (self.pixel_center(row, col) - self.source_mm).normalize();
        (self.source_mm, dir)
    }
}

pub fn pose_to_rays(pose: &CArmPose) -> Result<RayBundle> {
    pose.validate()?;
    Ok(rays_unchecked(pose))
}

fn rays_unchecked(pose: &CArmPose) -> RayBundle {
    let n = pose.source_direction();
    let (sp, cp) = pose.phi_deg.to_radians().sin_cos();
    let e_phi = Vec3::new(-sp, cp, 0.0);
    let e_up = n.cross(&e_phi);
    let det_u = e_phi * pose.pitch_mm;
    let det_v = e_up * pose.pitch_mm;
    let center = -n * (pose.sdd_mm - pose.sid_mm);
    let half_cols = (pose.det_cols as f64 - 1.0) / 2.0;
    let half_rows = (pose.det_rows as f64 - 1.0) / 2.0;
    RayBundle {
        source_mm: n * pose.sid_mm,
        det_origin_mm: center - det_u * half_cols - det_v * half_rows,
        det_u_mm: det_u,
        det_v_mm: det_v,
        rows: pose.det_rows,
        cols: pose.det_cols,
    }
}

/// Closed interval of angles in degrees; used half-open for `phi`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
}

impl AngleRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        AngleRange { lo, hi }
    }

    fn steps(&self, step: f64, what: &str) -> Result<usize> {
        if !(step > 0.0) || self.hi < self.lo {
            return Err(Error::InvalidGrid(format!(
                "{what} range [{}, {}] with step {step}",
                self.lo, self.hi
            )));
        }
        let n = ((self.hi - self.lo) / step).round();
        if ((self.hi - self.lo) - n * step).abs() > ANGLE_TOL {
            return Err(Error::InvalidGrid(format!(
                "step {step} does not divide {what} range [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(n as usize)
    }

    /// Values `lo, lo + step, ...` below `hi`.
    pub fn half_open(&self, step: f64, what: &str) -> Result<Vec<f64>> {
        let n = self.steps(step, what)?;
        Ok((0..n).map(|k| self.lo + k as f64 * step).collect())
    }

    /// Values `lo, lo + step, ..., hi`.
    pub fn closed(&self, step: f64, what: &str) -> Result<Vec<f64>> {
        let n = self.steps(step, what)?;
        Ok((0..=n).map(|k| self.lo + k as f64 * step).collect())
    }
}

/// Poses on the truncated sphere, `phi` outer loop (half-open), `theta` inner (closed).
pub fn grid_poses(
    phi_range: AngleRange,
    theta_range: AngleRange,
    step_deg: f64,
    template: &CArmPose,
) -> Result<Vec<CArmPose>> {
    let phis = phi_range.half_open(step_deg, "phi")?;
    let thetas = theta_range.closed(step_deg, "theta")?;
    let mut out = Vec::with_capacity(phis.len() * thetas.len());
    for &phi in &phis {
        for &theta in &thetas {
            let pose = template.with_angles(phi, theta);
            pose.validate()?;
            out.push(pose);
        }
    }
    Ok(out)
}

/// The eleven poses one step ahead in `phi`, ascending in `theta`.
pub fn candidate_poses(current_phi: f64, template: &CArmPose) -> Result<Vec<CArmPose>> {
    let next_phi = current_phi + VIEW_STEP_DEG;
    if !(current_phi >= 0.0 && next_phi < 360.0) {
        return Err(Error::InvalidPose(format!("no next view after phi = {current_phi}")));
    }
    CANDIDATE_THETAS
        .iter()
        .map(|&theta| {
            let pose = template.with_angles(next_phi, theta);
            pose.validate().map(|_| pose)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(phi: f64, theta: f64) -> CArmPose {
        CArmPose::default().with_angles(phi, theta)
    }

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).amax() <= tol
    }

    #[test]
    fn convention_anchor() {
        let rays = pose_to_rays(&pose(0.0, 90.0)).unwrap();
        assert!(close(rays.source_mm, Vec3::new(600.0, 0.0, 0.0), 1e-9));
        let center = rays.pixel_center(0, 0) + (rays.det_u_mm * 127.0 + rays.det_v_mm * 127.0) / 2.0;
        assert!(close(center, Vec3::new(-400.0, 0.0, 0.0), 1e-9));
    }

    #[test]
    fn half_rotation() {
        let rays = pose_to_rays(&pose(180.0, 90.0)).unwrap();
        assert!(close(rays.source_mm, Vec3::new(-600.0, 0.0, 0.0), 1e-9));
    }

    #[test]
    fn tilted_source_matches_rotation_oracle() {
        // Independent route: rotate (0, 0, sid) about +y by theta, then about +z by phi.
        let rot = |phi: f64, theta: f64| {
            let ry = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), theta.to_radians());
            let rz = nalgebra::Rotation3::from_axis_angle(&Vec3::z_axis(), phi.to_radians());
            rz * ry * Vec3::new(0.0, 0.0, 600.0)
        };
        let rays = pose_to_rays(&pose(0.0, 65.0)).unwrap();
        assert!(close(rays.source_mm, rot(0.0, 65.0), 1e-9));
        assert!((rays.source_mm.x - 543.78).abs() < 0.01);
        assert!((rays.source_mm.z - 253.57).abs() < 0.01);
        for &(phi, theta) in &[(35.0, 50.0), (210.0, 120.0), (355.0, 90.0)] {
            let rays = pose_to_rays(&pose(phi, theta)).unwrap();
            assert!(close(rays.source_mm, rot(phi, theta), 1e-9));
        }
    }

    #[test]
    fn detector_basis_invariants() {
        for &(phi, theta) in &[(0.0, 90.0), (123.0, 47.0), (271.5, 133.0)] {
            let p = pose(phi, theta);
            let rays = pose_to_rays(&p).unwrap();
            assert!(rays.det_u_mm.dot(&rays.det_v_mm).abs() < 1e-9);
            assert!((rays.det_u_mm.norm() - p.pitch_mm).abs() < 1e-9);
            assert!((rays.det_v_mm.norm() - p.pitch_mm).abs() < 1e-9);
            let normal = rays.det_u_mm.cross(&rays.det_v_mm).normalize();
            let dist = (rays.source_mm - rays.det_origin_mm).dot(&normal).abs();
            assert!((dist - p.sdd_mm).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_invalid_pose() {
        assert!(pose_to_rays(&pose(360.0, 90.0)).is_err());
        assert!(pose_to_rays(&pose(0.0, 40.0)).is_err());
        let mut p = pose(0.0, 90.0);
        p.sdd_mm = 500.0;
        assert!(pose_to_rays(&p).is_err());
        p = pose(0.0, 90.0);
        p.det_rows = 0;
        assert!(pose_to_rays(&p).is_err());
    }

    #[test]
    fn grid_counts() {
        let t = CArmPose::default();
        let full = grid_poses(AngleRange::new(0.0, 360.0), AngleRange::new(45.0, 135.0), 5.0, &t).unwrap();
        assert_eq!(full.len(), 1368);
        assert_eq!((full[0].phi_deg, full[0].theta_deg), (0.0, 45.0));
        assert_eq!((full[1].phi_deg, full[1].theta_deg), (0.0, 50.0));
        assert_eq!((full[19].phi_deg, full[19].theta_deg), (5.0, 45.0));
        let one = grid_poses(AngleRange::new(0.0, 5.0), AngleRange::new(90.0, 90.0), 5.0, &t).unwrap();
        assert_eq!(one.len(), 1);
        let six = grid_poses(AngleRange::new(0.0, 10.0), AngleRange::new(85.0, 95.0), 5.0, &t).unwrap();
        let angles: Vec<_> = six.iter().map(|p| (p.phi_deg, p.theta_deg)).collect();
        assert_eq!(
            angles,
            vec![(0.0, 85.0), (0.0, 90.0), (0.0, 95.0), (5.0, 85.0), (5.0, 90.0), (5.0, 95.0)]
        );
    }

    #[test]
    fn grid_rejects_non_dividing_step() {
        let t = CArmPose::default();
        assert!(grid_poses(AngleRange::new(0.0, 12.0), AngleRange::new(90.0, 90.0), 5.0, &t).is_err());
        assert!(grid_poses(AngleRange::new(0.0, 10.0), AngleRange::new(85.0, 92.0), 5.0, &t).is_err());
    }

    proptest::proptest! {
        #[test]
        fn periodic_in_phi(phi in 0.0f64..360.0, theta in 45.0f64..=135.0) {
            let a = rays_unchecked(&pose(phi, theta));
            let b = rays_unchecked(&pose(phi + 360.0, theta));
            proptest::prop_assert!(close(a.source_mm, b.source_mm, 1e-9));
            proptest::prop_assert!(close(a.det_origin_mm, b.det_origin_mm, 1e-9));
            proptest::prop_assert!(close(a.det_u_mm, b.det_u_mm, 1e-9));
            proptest::prop_assert!(close(a.det_v_mm, b.det_v_mm, 1e-9));
        }

        #[test]
        fn mirror_symmetric_about_central_plane(phi in 0.0f64..360.0, theta in 45.0f64..=135.0) {
            let up = pose(phi, theta).source_position().z;
            let down = pose(phi, 180.0 - theta).source_position().z;
            proptest::prop_assert!((up + down).abs() < 1e-9);
        }

        #[test]
        fn grid_count_formula(phi_steps in 1usize..72, lo in 9usize..18, span in 0usize..9) {
            let phi_hi = phi_steps as f64 * 5.0;
            let theta_lo = lo as f64 * 5.0;
            let theta_hi = theta_lo + span as f64 * 5.0;
            let poses = grid_poses(
                AngleRange::new(0.0, phi_hi),
                AngleRange::new(theta_lo, theta_hi.min(135.0)),
                5.0,
                &CArmPose::default(),
            ).unwrap();
            let theta_count = ((theta_hi.min(135.0) - theta_lo) / 5.0) as usize + 1;
            proptest::prop_assert_eq!(poses.len(), phi_steps * theta_count);
        }
    }

    #[test]
    fn candidates() {
        let c = candidate_poses(0.0, &CArmPose::default()).unwrap();
        assert_eq!(c.len(), N_CANDIDATES);
        assert!(c.iter().all(|p| p.phi_deg == 5.0));
        assert_eq!(c[0].theta_deg, 65.0);
        assert_eq!(c[5].theta_deg, 90.0);
        assert_eq!(c[10].theta_deg, 115.0);
        assert!(candidate_poses(355.0, &CArmPose::default()).is_err());
    }
}

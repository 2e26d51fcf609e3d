//! Synthetic capture scenarios: a planar drawing photographed by a pinhole
//! camera from a random tilted pose, with oracle keypoints.

use nalgebra::{Rotation3, Unit, Vector3};
use rand::Rng;
use vecmorph::geom::{self, Mat3};
use vecmorph::rectify::{self, CameraIntrinsics, Heatmap};
use vecmorph::softraster::{hard_rasterize, view_transform, Image, RasterError};
use vecmorph::vecdraw::Drawing;

#[derive(Debug, Clone, Copy)]
pub struct CaptureSetup {
    /// Square photo side in pixels.
    pub photo_size: usize,
    pub intrinsics: CameraIntrinsics,
    /// Photo pixels per drawing unit for a frontal view.
    pub pixels_per_unit: f64,
    pub max_tilt_deg: f64,
    pub max_roll_deg: f64,
    /// Hard-raster pixels per drawing unit before resampling into the photo.
    pub render_density: usize,
}

impl CaptureSetup {
    /// `size`-pixel photo with the principal point at its centre.
    pub fn centred(size: usize, focal: f64, pixels_per_unit: f64, max_tilt_deg: f64) -> Self {
        let c = size as f64 / 2.0;
        Self {
            photo_size: size,
            intrinsics: CameraIntrinsics {
                fx: focal,
                fy: focal,
                cx: c,
                cy: c,
            },
            pixels_per_unit,
            max_tilt_deg,
            max_roll_deg: 10.0,
            render_density: 4,
        }
    }
}

/// Camera pose for the drawing plane with origin at the canvas centre.
#[derive(Debug, Clone)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vector3<f64>,
    pub tilt_deg: f64,
}

pub struct Capture {
    pub photo: Image,
    /// Drawing keypoints projected into the photo.
    pub keypoints: Vec<[f64; 2]>,
    pub drawing_to_photo: Mat3,
    pub pose: Pose,
}

/// Tilt uniform in `[0, max_tilt]` about a random in-plane axis, roll
/// uniform in `±max_roll`, distance giving the requested frontal scale,
/// and a small lateral offset.
pub fn random_pose(setup: &CaptureSetup, rng: &mut impl Rng) -> Pose {
    let tilt = rng.gen_range(0.0..=setup.max_tilt_deg).to_radians();
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    let roll = rng
        .gen_range(-setup.max_roll_deg..=setup.max_roll_deg)
        .to_radians();
    let axis = Unit::new_normalize(Vector3::new(phi.cos(), phi.sin(), 0.0));
    let r = Rotation3::from_axis_angle(&axis, tilt)
        * Rotation3::from_axis_angle(&Vector3::z_axis(), roll);
    let z = setup.intrinsics.fx / setup.pixels_per_unit;
    let t = Vector3::new(
        rng.gen_range(-0.05..0.05) * z,
        rng.gen_range(-0.05..0.05) * z,
        z,
    );
    Pose {
        rotation: *r.matrix(),
        translation: t,
        tilt_deg: tilt.to_degrees(),
    }
}

/// Drawing → photo homography `K·[r1 r2 t]` composed with the shift of
/// the canvas centre to the origin.
pub fn drawing_to_photo(d: &Drawing, k: &CameraIntrinsics, pose: &Pose) -> Mat3 {
    let c = &d.canvas;
    let (cx, cy) = (c.min_x + c.width / 2.0, c.min_y + c.height / 2.0);
    let r = &pose.rotation;
    let t = &pose.translation;
    let rt = Mat3::new(
        r[(0, 0)],
        r[(0, 1)],
        t.x,
        r[(1, 0)],
        r[(1, 1)],
        t.y,
        r[(2, 0)],
        r[(2, 1)],
        t.z,
    );
    let shift = Mat3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
    k.matrix() * rt * shift
}

/// Renders `d` perturbed by `delta` as seen from `pose`: a dense hard
/// raster resampled through the homography with 2×2 supersampling.
pub fn render_capture(
    d: &Drawing,
    delta: &[f64],
    setup: &CaptureSetup,
    pose: Pose,
) -> Result<Capture, RasterError> {
    let c = &d.canvas;
    let density = setup.render_density as f64;
    let (w, h) = (
        (c.width * density).round() as usize,
        (c.height * density).round() as usize,
    );
    let dense = hard_rasterize(d, delta, w, h)?;
    let to_dense = geom::from_affine(&view_transform(c, w, h));
    let h_dp = drawing_to_photo(d, &setup.intrinsics, &pose);
    let photo_to_dense = to_dense * h_dp.try_inverse().expect("camera sees the plane");
    let photo = rectify::warp_image(
        &dense,
        &photo_to_dense,
        setup.photo_size,
        setup.photo_size,
        2,
    );
    let keypoints = d
        .keypoints
        .iter()
        .map(|p| geom::project(&h_dp, [p.x, p.y]).expect("keypoint in front of the camera"))
        .collect();
    Ok(Capture {
        photo,
        keypoints,
        drawing_to_photo: h_dp,
        pose,
    })
}

/// One Gaussian blob per keypoint over the photo grid.
pub fn keypoint_heatmaps(points: &[[f64; 2]], size: usize, sigma: f64) -> Vec<Heatmap> {
    points
        .iter()
        .map(|&p| Heatmap::gaussian_blob(size, size, p, sigma).expect("blob has a positive peak"))
        .collect()
}

//! Anti-aliased software rasteriser for the cart-pole scene.
//!
//! The visible window is 2.4 m tall, centred on the track line, with square
//! pixels. Layers, back to front: sky, ground band, ground marks every 0.5 m,
//! rail-end posts, track line, cart, pole. Everything behind the cart except
//! the marks and the posts is invariant under horizontal translation, so a
//! tracking camera only sees the ground band change as the cart moves.

use serde::{Deserialize, Serialize};

use super::{EnvError, EnvState, PhysicsConfig};
use crate::numeric::{Scalar, Tensor};

pub const VIEW_HEIGHT_M: f64 = 2.4;
pub const MARK_SPACING_M: f64 = 0.5;
const MARK_WIDTH_M: f64 = 0.08;
/// Vertical extent of the ground band holding marks and posts.
pub const GROUND_BAND_M: (f64, f64) = (-0.45, -0.2);
const POST_WIDTH_M: f64 = 0.12;
const TRACK_THICKNESS_M: f64 = 0.04;
const CART_SIZE_M: (f64, f64) = (0.5, 0.25);
const POLE_WIDTH_M: f64 = 0.07;

const SKY: [f64; 3] = [0.92, 0.92, 0.96];
const GROUND: [f64; 3] = [0.72, 0.74, 0.66];
const MARK: [f64; 3] = [0.35, 0.35, 0.32];
const POST: [f64; 3] = [0.1, 0.1, 0.1];
const TRACK: [f64; 3] = [0.25, 0.25, 0.25];
const CART: [f64; 3] = [0.18, 0.38, 0.82];
const POLE: [f64; 3] = [0.86, 0.32, 0.12];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMode {
    Fixed,
    /// Horizontally centred on the cart (plus the offset).
    Tracking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub mode: CameraMode,
    pub view_id: u32,
    /// Metres; shifts the camera centre along the track.
    pub horizontal_offset: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraSpec {
    pub fn fixed(view_id: u32, width: usize, height: usize) -> Self {
        Self {
            mode: CameraMode::Fixed,
            view_id,
            horizontal_offset: 0.0,
            width,
            height,
        }
    }

    pub fn tracking(view_id: u32, width: usize, height: usize) -> Self {
        Self {
            mode: CameraMode::Tracking,
            ..Self::fixed(view_id, width, height)
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.width < 16 || self.height < 16 {
            return Err(EnvError::Config(format!(
                "camera {} resolution {}x{} below 16x16",
                self.view_id, self.width, self.height
            )));
        }
        if !self.horizontal_offset.is_finite() {
            return Err(EnvError::Config("camera offset must be finite".into()));
        }
        Ok(())
    }
}

/// One rendered image, channel-planar `[3, H, W]`, quantised to 8 bits.
/// Channel values are `pixels / 255`, i.e. within `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub view_id: u32,
    pub t: u64,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Frame {
    pub fn value(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.height + y) * self.width + x] as f64 / 255.0
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let scale = T::lit(1.0 / 255.0);
        let data = self.pixels.iter().map(|&p| T::from_u8(p).unwrap() * scale).collect();
        Tensor::new(vec![3, self.height, self.width], data).expect("frame buffer matches shape")
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn blend(px: &mut [f64; 3], color: [f64; 3], coverage: f64) {
    if coverage <= 0.0 {
        return;
    }
    let c = coverage.min(1.0);
    for i in 0..3 {
        px[i] = px[i] * (1.0 - c) + color[i] * c;
    }
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let u = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + u * dx - px, ay + u * dy - py);
    (cx * cx + cy * cy).sqrt()
}

/// Deterministic rendering of `state` seen from `cam`. Rail-end posts are drawn
/// at `±(track_half_length + cart half width)`.
pub fn render(state: &EnvState, cam: &CameraSpec, physics: &PhysicsConfig) -> Frame {
    let (w, h) = (cam.width, cam.height);
    let scale = h as f64 / VIEW_HEIGHT_M;
    let pixel = 1.0 / scale;
    let center_x = match cam.mode {
        CameraMode::Fixed => cam.horizontal_offset,
        CameraMode::Tracking => state.x + cam.horizontal_offset,
    };
    let post_x = physics.track_half_length + 0.5 * CART_SIZE_M.0;
    let (band_lo, band_hi) = GROUND_BAND_M;
    let pole_len = 2.0 * physics.half_length;
    let tip = (state.x + pole_len * state.theta.sin(), pole_len * state.theta.cos());

    let mut pixels = vec![0u8; 3 * h * w];
    for py in 0..h {
        let wy = (0.5 * h as f64 - (py as f64 + 0.5)) / scale;
        let (y0, y1) = (wy - 0.5 * pixel, wy + 0.5 * pixel);
        let band_cov = interval_overlap(y0, y1, band_lo, band_hi) / pixel;
        let track_cov = interval_overlap(y0, y1, -0.5 * TRACK_THICKNESS_M, 0.5 * TRACK_THICKNESS_M) / pixel;
        let cart_cov_y = interval_overlap(y0, y1, -0.5 * CART_SIZE_M.1, 0.5 * CART_SIZE_M.1) / pixel;
        for pxi in 0..w {
            // World x of the pixel centre relative to the camera centre; computed so
            // that mirrored columns get exactly negated offsets.
            let rel = (pxi as f64 + 0.5 - 0.5 * w as f64) / scale;
            let wx = center_x + rel;
            let (x0, x1) = (wx - 0.5 * pixel, wx + 0.5 * pixel);

            let mut c = SKY;
            blend(&mut c, GROUND, band_cov);
            if band_cov > 0.0 {
                let k0 = ((x0 - MARK_WIDTH_M) / MARK_SPACING_M).floor() as i64;
                let k1 = ((x1 + MARK_WIDTH_M) / MARK_SPACING_M).ceil() as i64;
                let mut mark = 0.0;
                for k in k0..=k1 {
                    let m = k as f64 * MARK_SPACING_M;
                    mark += interval_overlap(x0, x1, m - 0.5 * MARK_WIDTH_M, m + 0.5 * MARK_WIDTH_M);
                }
                blend(&mut c, MARK, band_cov * mark / pixel);
                let mut post = 0.0;
                for p in [-post_x, post_x] {
                    post += interval_overlap(x0, x1, p - 0.5 * POST_WIDTH_M, p + 0.5 * POST_WIDTH_M);
                }
                blend(&mut c, POST, band_cov * post / pixel);
            }
            blend(&mut c, TRACK, track_cov);
            if cart_cov_y > 0.0 {
                let cx = interval_overlap(x0, x1, state.x - 0.5 * CART_SIZE_M.0, state.x + 0.5 * CART_SIZE_M.0);
                blend(&mut c, CART, cart_cov_y * cx / pixel);
            }
            let d = segment_distance(wx, wy, state.x, 0.0, tip.0, tip.1);
            let pole_cov = (0.5 + (0.5 * POLE_WIDTH_M - d) * scale).clamp(0.0, 1.0);
            blend(&mut c, POLE, pole_cov);

            for (ch, v) in c.iter().enumerate() {
                pixels[(ch * h + py) * w + pxi] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Frame {
        view_id: cam.view_id,
        t: state.t,
        width: w,
        height: h,
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows_outside_band(f: &Frame) -> Vec<usize> {
        let scale = f.height as f64 / VIEW_HEIGHT_M;
        (0..f.height)
            .filter(|&py| {
                let wy = (0.5 * f.height as f64 - (py as f64 + 0.5)) / scale;
                let half = 0.5 / scale;
                wy - half >= GROUND_BAND_M.1 || wy + half <= GROUND_BAND_M.0
            })
            .collect()
    }

    #[test]
    fn centred_cart_is_mirror_symmetric() {
        let cfg = PhysicsConfig::default();
        for (w, h) in [(64, 32), (96, 48)] {
            let f = render(&EnvState::new(0.0, 0.0, 0.0, 0.0), &CameraSpec::fixed(0, w, h), &cfg);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w / 2 {
                        let a = f.pixels[(c * h + y) * w + x];
                        let b = f.pixels[(c * h + y) * w + (w - 1 - x)];
                        assert_eq!(a, b, "c={c} y={y} x={x}");
                    }
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_and_in_range() {
        let cfg = PhysicsConfig::default();
        let s = EnvState::new(0.3, 1.0, 0.7, -2.0);
        let cam = CameraSpec::tracking(1, 64, 32);
        let a = render(&s, &cam, &cfg);
        assert_eq!(a, render(&s, &cam, &cfg));
        let t = a.to_tensor::<f64>();
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(t.shape(), &[3, 32, 64]);
    }

    #[test]
    fn tracking_camera_only_sees_the_ground_band_move() {
        let cfg = PhysicsConfig::default();
        let cam = CameraSpec::tracking(1, 64, 32);
        let a = render(&EnvState::new(0.0, 0.0, 0.3, 0.0), &cam, &cfg);
        for shift in [1.0, 0.25] {
            let b = render(&EnvState::new(shift, 0.0, 0.3, 0.0), &cam, &cfg);
            assert_ne!(a, b);
            let keep = rows_outside_band(&a);
            assert!(keep.len() > 20);
            for c in 0..3 {
                for &y in &keep {
                    let r = (c * 32 + y) * 64;
                    assert_eq!(a.pixels[r..r + 64], b.pixels[r..r + 64], "row {y}");
                }
            }
        }
    }

    #[test]
    fn fixed_camera_sees_the_cart_move() {
        let cfg = PhysicsConfig::default();
        let cam = CameraSpec::fixed(0, 64, 32);
        let a = render(&EnvState::new(0.0, 0.0, 0.0, 0.0), &cam, &cfg);
        let b = render(&EnvState::new(0.02, 0.0, 0.0, 0.0), &cam, &cfg);
        assert_ne!(a, b, "sub-pixel motion must change the image");
    }

    #[test]
    fn small_cameras_are_rejected() {
        assert!(CameraSpec::fixed(0, 15, 32).validate().is_err());
        assert!(CameraSpec::fixed(0, 16, 16).validate().is_ok());
    }
}

//! Procedural walker: subjects with attribute-correlated body signatures,
//! rendered as capsule silhouettes alongside matching SMPL-style vectors.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::formats::{SilhouetteSequence, SmplSequence, POSE_DIM, SHAPE_DIM, SMPL_DIM};
use super::labels::{bmi_from_imperial, Sex, SubjectMeta, AGE_RANGE, BMI_RANGE, HEIGHT_RANGE_IN, WEIGHT_RANGE_LB};

pub const FRAME_HEIGHT: usize = 64;
pub const FRAME_WIDTH: usize = 44;

// SMPL joint order (pelvis excluded).
const L_HIP: usize = 0;
const R_HIP: usize = 1;
const SPINE1: usize = 2;
const L_KNEE: usize = 3;
const R_KNEE: usize = 4;
const L_SHOULDER: usize = 15;
const R_SHOULDER: usize = 16;
const L_ELBOW: usize = 17;
const R_ELBOW: usize = 18;

/// Hidden per-subject parameters that drive rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct GaitSignature {
    /// Gait cycles per frame.
    pub stride_freq: f64,
    pub height_px: f64,
    pub leg_frac: f64,
    pub arm_frac: f64,
    pub torso_width: f64,
    pub shoulder_hip_ratio: f64,
    /// Forward trunk tilt in radians.
    pub lean: f64,
    pub hip_amp: f64,
    pub arm_amp: f64,
    pub head_radius: f64,
    pub betas: [f64; SHAPE_DIM],
}

impl GaitSignature {
    /// Flat vector of the identity-bearing parameters.
    pub fn latent(&self) -> Vec<f64> {
        let mut v = vec![
            self.stride_freq * 100.0,
            self.height_px / 10.0,
            self.leg_frac * 10.0,
            self.arm_frac * 10.0,
            self.torso_width / 2.0,
            self.shoulder_hip_ratio * 5.0,
            self.lean * 20.0,
            self.hip_amp * 5.0,
            self.arm_amp * 5.0,
            self.head_radius,
        ];
        v.extend_from_slice(&self.betas);
        v
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Rng for sequence `seq` of subject `index`; subject draws use slot 0.
pub fn sequence_rng(seed: u64, index: usize, seq: usize) -> ChaCha8Rng {
    stream_rng(seed, ((index as u64) << 32) | (seq as u64 + 1))
}

fn in_range(v: f64, r: (f64, f64)) -> bool {
    v >= r.0 && v <= r.1
}

/// Deterministic in `(seed, index)`.
pub fn generate_subject(seed: u64, index: usize) -> (SubjectMeta, GaitSignature) {
    let mut rng = stream_rng(seed, (index as u64) << 32);
    let std = Normal::new(0.0, 1.0).unwrap();
    let age = rng.random_range(AGE_RANGE.0..=AGE_RANGE.1);
    let sex = if rng.random_bool(0.5) { Sex::Male } else { Sex::Female };
    let mean_h = if sex == Sex::Male { 69.5 } else { 64.0 };
    let (height_in, weight_lb, bmi) = loop {
        let h: f64 = mean_h + 3.2 * std.sample(&mut rng);
        let b: f64 = (27.0f64.ln() + 0.22 * std.sample(&mut rng)).exp();
        if !in_range(h, HEIGHT_RANGE_IN) || !in_range(b, BMI_RANGE) {
            continue;
        }
        let w = b * h * h / 703.0;
        if !in_range(w, WEIGHT_RANGE_LB) {
            continue;
        }
        let bmi = bmi_from_imperial(w, h);
        if in_range(bmi, BMI_RANGE) {
            break (h, w, bmi);
        }
    };
    let meta = SubjectMeta {
        subject_id: format!("S{index:04}"),
        age,
        sex,
        height_in,
        weight_lb,
        bmi,
    };

    let mut jitter = |scale: f64| scale * std.sample(&mut rng);
    let male = sex == Sex::Male;
    let mut betas = [0.0; SHAPE_DIM];
    betas[0] = (height_in - 66.0) / 6.0;
    betas[1] = (bmi - 27.0) / 8.0;
    betas[2] = if male { 1.5 } else { -1.5 };
    for b in betas.iter_mut().skip(3) {
        *b = jitter(1.0);
    }
    let sig = GaitSignature {
        stride_freq: (0.09 - 0.0004 * (age - AGE_RANGE.0) + jitter(0.003)).max(0.04),
        height_px: 44.0 + (height_in - HEIGHT_RANGE_IN.0) / (HEIGHT_RANGE_IN.1 - HEIGHT_RANGE_IN.0) * 16.0,
        leg_frac: 0.5 + jitter(0.02),
        arm_frac: 0.36 + jitter(0.02),
        torso_width: (5.0 + 0.22 * (bmi - BMI_RANGE.0) + jitter(0.4)).clamp(4.0, 16.0),
        shoulder_hip_ratio: if male { 1.35 } else { 0.95 } + jitter(0.04),
        lean: (0.04 + 0.001 * (age - AGE_RANGE.0) + jitter(0.015)).clamp(0.01, 0.2),
        hip_amp: (0.42 + jitter(0.05)).clamp(0.25, 0.6),
        arm_amp: (0.45 + jitter(0.08)).clamp(0.2, 0.7),
        head_radius: (4.0 + jitter(0.3)).clamp(3.0, 5.0),
        betas,
    };
    (meta, sig)
}

/// Per-sequence rendering controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    pub frames: usize,
    /// Walking direction relative to the camera in radians; 0 is a side view.
    pub view_angle: f64,
    /// Probability of flipping each mask pixel.
    pub noise: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            frames: 30,
            view_angle: 0.0,
            noise: 0.0,
        }
    }
}

struct Capsule {
    a: (f64, f64),
    b: (f64, f64),
    ra: f64,
    rb: f64,
}

impl Capsule {
    fn contains(&self, p: (f64, f64)) -> bool {
        let d = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = d.0 * d.0 + d.1 * d.1;
        let u = if len2 > 0.0 {
            (((p.0 - self.a.0) * d.0 + (p.1 - self.a.1) * d.1) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let q = (self.a.0 + u * d.0 - p.0, self.a.1 + u * d.1 - p.1);
        let r = self.ra + (self.rb - self.ra) * u;
        q.0 * q.0 + q.1 * q.1 <= r * r
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let r = self.ra.max(self.rb);
        (
            self.a.0.min(self.b.0) - r,
            self.a.0.max(self.b.0) + r,
            self.a.1.min(self.b.1) - r,
            self.a.1.max(self.b.1) + r,
        )
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        PI
    } else {
        w
    }
}

/// Renders `opts.frames` aligned silhouette and SMPL frames.
pub fn render_sequence(
    sig: &GaitSignature,
    opts: &RenderOptions,
    rng: &mut impl Rng,
) -> (SilhouetteSequence, SmplSequence) {
    let t_len = opts.frames.max(1);
    let phase0 = rng.random_range(0.0..2.0 * PI);
    let beta_noise = Normal::new(0.0, 0.05).unwrap();
    let betas: Vec<f64> = sig.betas.iter().map(|b| b + beta_noise.sample(rng)).collect();
    let (cy, sy) = (opts.view_angle.cos(), opts.view_angle.sin());

    let h = sig.height_px;
    let leg = sig.leg_frac * h;
    let thigh = 0.52 * leg;
    let shin = leg - thigh;
    let head_d = 2.0 * sig.head_radius;
    let torso = (h - leg - head_d - 1.0).max(4.0);
    let arm = sig.arm_frac * h;
    let upper_arm = 0.5 * arm;
    let fore_arm = arm - upper_arm;
    let limb_r = 1.2 + 0.08 * sig.torso_width;
    let arm_r = 0.9 + 0.05 * sig.torso_width;
    let hip_w = sig.torso_width;
    let sh_w = sig.torso_width * sig.shoulder_hip_ratio;
    // Projected half-width of a body slab of lateral width `w`.
    let half = |w: f64| 0.5 * ((0.6 * w * cy).powi(2) + (w * sy).powi(2)).sqrt();
    let cx = FRAME_WIDTH as f64 / 2.0;
    let project = |fwd: f64, lat: f64| cx + fwd * cy + lat * sy;

    let mut pixels = Vec::with_capacity(t_len * FRAME_HEIGHT * FRAME_WIDTH);
    let mut smpl = Vec::with_capacity(t_len * SMPL_DIM);
    for t in 0..t_len {
        let phi = 2.0 * PI * sig.stride_freq * t as f64 + phase0;
        let hip = [sig.hip_amp * phi.sin(), sig.hip_amp * (phi + PI).sin()];
        let knee = [
            0.15 + 0.55 * (phi - 0.6).sin().max(0.0),
            0.15 + 0.55 * (phi + PI - 0.6).sin().max(0.0),
        ];
        let shoulder = [-sig.arm_amp * phi.sin(), -sig.arm_amp * (phi + PI).sin()];
        let elbow = 0.3;
        let pelvis_row = FRAME_HEIGHT as f64 - 2.0 - leg * 0.97 + 0.8 * (2.0 * phi).cos();

        let mut parts = Vec::with_capacity(10);
        let to_img = |fwd: f64, lat: f64, up: f64| (project(fwd, lat), pelvis_row - up);
        let side = [-0.25 * hip_w, 0.25 * hip_w];
        for i in 0..2 {
            let kf = thigh * hip[i].sin();
            let ku = -thigh * hip[i].cos();
            let sa = hip[i] - knee[i];
            let (ff, fu) = (kf + shin * sa.sin(), ku - shin * sa.cos());
            parts.push(Capsule { a: to_img(0.0, side[i], 0.0), b: to_img(kf, side[i], ku), ra: limb_r, rb: limb_r });
            parts.push(Capsule { a: to_img(kf, side[i], ku), b: to_img(ff, side[i], fu), ra: limb_r, rb: 0.85 * limb_r });
        }
        let (nf, nu) = (torso * sig.lean.sin(), torso * sig.lean.cos());
        parts.push(Capsule { a: to_img(0.0, 0.0, 0.0), b: to_img(nf, 0.0, nu), ra: half(hip_w), rb: half(sh_w) });
        let (hf, hu) = (nf + (sig.head_radius + 1.0) * sig.lean.sin(), nu + sig.head_radius + 1.0);
        let head = to_img(hf, 0.0, hu);
        parts.push(Capsule { a: head, b: head, ra: sig.head_radius, rb: sig.head_radius });
        let sh_side = [-0.45 * sh_w, 0.45 * sh_w];
        for i in 0..2 {
            let (sf, su) = (nf * 0.95, nu * 0.95);
            let a = shoulder[i];
            let (ef, eu) = (sf + upper_arm * a.sin(), su - upper_arm * a.cos());
            let fa = a + elbow;
            let (wf, wu) = (ef + fore_arm * fa.sin(), eu - fore_arm * fa.cos());
            parts.push(Capsule { a: to_img(sf, sh_side[i], su), b: to_img(ef, sh_side[i], eu), ra: arm_r, rb: arm_r });
            parts.push(Capsule { a: to_img(ef, sh_side[i], eu), b: to_img(wf, sh_side[i], wu), ra: arm_r, rb: 0.8 * arm_r });
        }

        let start = pixels.len();
        pixels.resize(start + FRAME_HEIGHT * FRAME_WIDTH, 0u8);
        let frame = &mut pixels[start..];
        for c in &parts {
            let (x0, x1, y0, y1) = c.bounds();
            let r0 = y0.floor().max(0.0) as usize;
            let r1 = (y1.ceil().max(0.0) as usize).min(FRAME_HEIGHT - 1);
            let c0 = x0.floor().max(0.0) as usize;
            let c1 = (x1.ceil().max(0.0) as usize).min(FRAME_WIDTH - 1);
            for r in r0..=r1 {
                for col in c0..=c1 {
                    if c.contains((col as f64 + 0.5, r as f64 + 0.5)) {
                        frame[r * FRAME_WIDTH + col] = 1;
                    }
                }
            }
        }
        if opts.noise > 0.0 {
            let clean = frame.to_vec();
            for p in frame.iter_mut() {
                if rng.random_bool(opts.noise) {
                    *p ^= 1;
                }
            }
            if frame.iter().all(|&p| p == 0) {
                frame.copy_from_slice(&clean);
            }
        }

        let mut v = [0.0f64; SMPL_DIM];
        v[L_HIP * 3] = hip[0];
        v[R_HIP * 3] = hip[1];
        v[L_KNEE * 3] = knee[0];
        v[R_KNEE * 3] = knee[1];
        v[SPINE1 * 3] = sig.lean;
        v[L_SHOULDER * 3] = shoulder[0];
        v[R_SHOULDER * 3] = shoulder[1];
        v[L_ELBOW * 3] = elbow;
        v[R_ELBOW * 3] = elbow;
        v[POSE_DIM..POSE_DIM + SHAPE_DIM].copy_from_slice(&betas);
        v[POSE_DIM + SHAPE_DIM] = sig.lean * cy;
        v[POSE_DIM + SHAPE_DIM + 1] = wrap_angle(opts.view_angle);
        v[POSE_DIM + SHAPE_DIM + 2] = sig.lean * sy;
        smpl.extend(v.iter().map(|&x| x as f32));
    }
    let sil = SilhouetteSequence::new(t_len, FRAME_HEIGHT, FRAME_WIDTH, pixels).expect("rendered geometry");
    let smpl = SmplSequence::new(t_len, smpl).expect("rendered geometry");
    (sil, smpl)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subjects_are_deterministic_and_distinct() {
        let a = generate_subject(3, 5);
        assert_eq!(a, generate_subject(3, 5));
        assert_ne!(a.0, generate_subject(3, 6).0);
        assert_ne!(a.0, generate_subject(4, 5).0);
    }

    #[test]
    fn rendering_is_pure_in_the_rng() {
        let (_, sig) = generate_subject(1, 0);
        let opts = RenderOptions { noise: 0.05, ..Default::default() };
        let a = render_sequence(&sig, &opts, &mut sequence_rng(1, 0, 0));
        let b = render_sequence(&sig, &opts, &mut sequence_rng(1, 0, 0));
        assert_eq!(a, b);
        let c = render_sequence(&sig, &opts, &mut sequence_rng(1, 0, 1));
        assert_ne!(a.0, c.0);
    }
}

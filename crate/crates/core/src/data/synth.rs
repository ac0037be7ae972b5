//! Synthetic paired visible/infrared pedestrians.
//!
//! Each identity is a 16-dim latent in `[0, 1]`:
//!
//! | dims    | meaning                                   |
//! |---------|-------------------------------------------|
//! | 0..9    | RGB colors of three horizontal body bands |
//! | 9..12   | relative band heights                     |
//! | 12..14  | body ellipse width / height               |
//! | 14      | vertical body offset                      |
//! | 15      | head size                                 |
//!
//! The infrared render keeps the silhouette and band layout but collapses
//! color to luminance, then blends towards a thermal-style inverted contrast
//! by `modality_gap`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, GenParams, Modality, SampleRecord};
use crate::error::Result;

pub const LATENT_DIM: usize = 16;

const FLOOR: f32 = 0.04;
const BACKGROUND: f32 = 0.15;
const HEAD_RGB: [f32; 3] = [0.8, 0.65, 0.5];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityLatent(pub [f32; LATENT_DIM]);

impl IdentityLatent {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut l = [0.0; LATENT_DIM];
        l.iter_mut().for_each(|v| *v = rng.gen::<f32>());
        IdentityLatent(l)
    }
}

/// Per-sample placement and exposure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub dx: f32,
    pub dy: f32,
    pub scale: f32,
    pub brightness: f32,
}

impl Default for Pose {
    fn default() -> Self {
        Pose {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            brightness: 1.0,
        }
    }
}

enum Region {
    Background,
    Head,
    Band(usize),
}

fn region_at(l: &[f32; LATENT_DIM], pose: &Pose, h: usize, w: usize, y: usize, x: usize) -> Region {
    let (hf, wf) = (h as f32, w as f32);
    let cx = wf / 2.0 + pose.dx;
    let ay = hf * (0.28 + 0.1 * l[13]) * pose.scale;
    let ax = wf * (0.2 + 0.16 * l[12]) * pose.scale;
    let cy = hf * (0.56 + 0.08 * (l[14] - 0.5)) + pose.dy;
    let head_r = ay * 0.28 * (0.7 + 0.6 * l[15]);
    let head_cy = cy - ay - head_r * 0.8;
    let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);

    let ex = (px - cx) / ax;
    let ey = (py - cy) / ay;
    if ex * ex + ey * ey <= 1.0 {
        let t = (py - (cy - ay)) / (2.0 * ay);
        let widths = [l[9] + 0.3, l[10] + 0.3, l[11] + 0.3];
        let total: f32 = widths.iter().sum();
        let b1 = widths[0] / total;
        let b2 = b1 + widths[1] / total;
        let band = if t < b1 {
            0
        } else if t < b2 {
            1
        } else {
            2
        };
        return Region::Band(band);
    }
    let hx = px - cx;
    let hy = py - head_cy;
    if hx * hx + hy * hy <= head_r * head_r {
        return Region::Head;
    }
    Region::Background
}

fn visible_rgb(l: &[f32; LATENT_DIM], region: &Region) -> [f32; 3] {
    match region {
        Region::Background => [BACKGROUND; 3],
        Region::Head => HEAD_RGB,
        Region::Band(k) => [
            0.2 + 0.8 * l[3 * k],
            0.2 + 0.8 * l[3 * k + 1],
            0.2 + 0.8 * l[3 * k + 2],
        ],
    }
}

/// Noise-free visible render, interleaved `H x W x 3`, values in `[0.04, 1]`.
pub fn render_visible(latent: &IdentityLatent, pose: &Pose, h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let rgb = visible_rgb(&latent.0, &region_at(&latent.0, pose, h, w, y, x));
            out.extend(rgb.iter().map(|v| (v * pose.brightness).clamp(FLOOR, 1.0)));
        }
    }
    out
}

/// Noise-free infrared render, `H x W` values in `[0.04, 1]`. At
/// `modality_gap = 0` this is exactly the channel mean of
/// [`render_visible`] under the same pose.
pub fn render_infrared(latent: &IdentityLatent, pose: &Pose, h: usize, w: usize, modality_gap: f32) -> Vec<f32> {
    let visible = render_visible(latent, pose, h, w);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let p = &visible[(y * w + x) * 3..(y * w + x) * 3 + 3];
            let gray = (p[0] + p[1] + p[2]) / 3.0;
            if modality_gap == 0.0 {
                out.push(gray);
                continue;
            }
            let thermal = match region_at(&latent.0, pose, h, w, y, x) {
                Region::Background => 0.1,
                _ => 1.15 - gray,
            };
            out.push(((1.0 - modality_gap) * gray + modality_gap * thermal).clamp(FLOOR, 1.0));
        }
    }
    out
}

fn camera_pose(rng: &mut ChaCha8Rng, cam_local: u32, cams: u32) -> Pose {
    let spread = if cams > 1 {
        cam_local as f32 / (cams - 1) as f32 - 0.5
    } else {
        0.0
    };
    Pose {
        dx: rng.gen_range(-2.5..2.5) + 3.0 * spread,
        dy: rng.gen_range(-3.0..3.0),
        scale: rng.gen_range(0.93..1.07),
        brightness: (1.0 + 0.25 * spread) * rng.gen_range(0.95..1.05),
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Deterministically generate a dataset. Records are identity-major; within
/// an identity all visible samples precede the infrared ones. Visible
/// cameras are `0..cams`, infrared cameras `cams..2*cams`.
pub fn generate_dataset(params: &GenParams) -> Result<Dataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (h, w) = (params.image_h as usize, params.image_w as usize);
    let cams = params.cams_per_modality;
    let noise = Normal::new(0.0f32, params.noise_std as f32).expect("validated noise_std");
    let mut records = Vec::with_capacity(params.num_records());
    for identity in 0..params.num_identities {
        let latent = IdentityLatent::sample(&mut rng);
        for modality in [Modality::Visible, Modality::Infrared] {
            for s in 0..params.samples_per_id_per_modality {
                let cam_local = s % cams;
                let pose = camera_pose(&mut rng, cam_local, cams);
                let clean = match modality {
                    Modality::Visible => render_visible(&latent, &pose, h, w),
                    Modality::Infrared => render_infrared(&latent, &pose, h, w, params.modality_gap as f32),
                };
                let pixels = clean
                    .iter()
                    .map(|&v| {
                        let n = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        quantize((v + n).clamp(FLOOR, 1.0))
                    })
                    .collect();
                records.push(SampleRecord {
                    identity,
                    modality,
                    camera: match modality {
                        Modality::Visible => cam_local,
                        Modality::Infrared => cams + cam_local,
                    },
                    height: params.image_h,
                    width: params.image_w,
                    pixels,
                });
            }
        }
    }
    Ok(Dataset {
        params: params.clone(),
        records,
    })
}

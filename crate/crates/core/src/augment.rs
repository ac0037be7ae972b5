//! Four-stream expansion and training-time augmentation.
//!
//! A visible image yields a global stream (the image itself) and a channel
//! stream (channel exchange). An infrared image yields a global stream (the
//! single channel replicated) and a channel stream (random per-channel affine
//! maps). Geometric augmentation draws are shared within each g/c pair.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Image, Modality, SampleRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ChannelExchange {
    /// Copy one randomly chosen channel into all three.
    #[default]
    Replicate,
    /// Randomly permute the three channels.
    Permute,
}

impl std::str::FromStr for ChannelExchange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replicate" => Ok(ChannelExchange::Replicate),
            "permute" => Ok(ChannelExchange::Permute),
            _ => Err(Error::Config(format!("unknown channel exchange mode `{s}` (replicate|permute)"))),
        }
    }
}

impl std::fmt::Display for ChannelExchange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelExchange::Replicate => "replicate",
            ChannelExchange::Permute => "permute",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub target_h: usize,
    pub target_w: usize,
    pub flip_p: f64,
    pub erase_p: f64,
    /// Relative erased area range `(lo, hi)` with `0 < lo <= hi <= 1`.
    pub erase_area: (f64, f64),
    pub channel_exchange: ChannelExchange,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_h: 96,
            target_w: 48,
            flip_p: 0.5,
            erase_p: 0.5,
            erase_area: (0.02, 0.2),
            channel_exchange: ChannelExchange::Replicate,
        }
    }
}

impl AugmentConfig {
    /// No flips and no erasing.
    pub fn deterministic(target_h: usize, target_w: usize) -> Self {
        AugmentConfig {
            target_h,
            target_w,
            flip_p: 0.0,
            erase_p: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_h == 0 || self.target_w == 0 {
            return Err(Error::Config("augment target size must be positive".into()));
        }
        check_p("flip_p", self.flip_p)?;
        check_p("erase_p", self.erase_p)?;
        check_area(self.erase_area)
    }
}

fn check_p(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("{name} must lie in [0, 1], got {p}")));
    }
    Ok(())
}

fn check_area((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Param(format!("erase area range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
    }
    Ok(())
}

fn expect_channels(img: &Image, c: usize, op: &str) -> Result<()> {
    if img.c != c {
        return Err(Error::Shape(format!("{op} expects a {c}-channel image, got {} channels", img.c)));
    }
    Ok(())
}

/// Output channel `k` is input channel `sources[k]`.
pub fn remap_channels(img: &Image, sources: [usize; 3]) -> Result<Image> {
    expect_channels(img, 3, "remap_channels")?;
    let mut out = Image::zeros(3, img.h, img.w);
    for (k, &s) in sources.iter().enumerate() {
        if s >= 3 {
            return Err(Error::Index(format!("channel source {s} out of range")));
        }
        out.channel_mut(k).copy_from_slice(img.channel(s));
    }
    Ok(out)
}

/// Channel exchange: in `Replicate` mode one source channel is drawn
/// uniformly and copied into all three outputs.
pub fn channel_exchange_rgb(img: &Image, mode: ChannelExchange, rng: &mut impl Rng) -> Result<Image> {
    expect_channels(img, 3, "channel_exchange_rgb")?;
    let sources = match mode {
        ChannelExchange::Replicate => [rng.gen_range(0..3); 3],
        ChannelExchange::Permute => {
            let mut p = [0, 1, 2];
            p.shuffle(rng);
            p
        }
    };
    remap_channels(img, sources)
}

/// Per-channel affine expansion of a single-channel image:
/// `out_k = clamp(gains[k] * img + offsets[k], 0, 1)`.
pub fn ir_expand_with(img: &Image, gains: [f32; 3], offsets: [f32; 3]) -> Result<Image> {
    expect_channels(img, 1, "ir_channel_expand")?;
    let mut out = Image::zeros(3, img.h, img.w);
    for k in 0..3 {
        let src = img.channel(0);
        for (o, &v) in out.channel_mut(k).iter_mut().zip(src) {
            *o = (gains[k] * v + offsets[k]).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Infrared expansion with gains drawn from `U(0.8, 1.2)` and offsets from
/// `U(-0.05, 0.05)`.
pub fn ir_channel_expand(img: &Image, rng: &mut impl Rng) -> Result<Image> {
    let gains = [(); 3].map(|_| rng.gen_range(0.8f32..1.2));
    let offsets = [(); 3].map(|_| rng.gen_range(-0.05f32..0.05));
    ir_expand_with(img, gains, offsets)
}

/// Single channel replicated three times.
pub fn ir_replicate(img: &Image) -> Result<Image> {
    ir_expand_with(img, [1.0; 3], [0.0; 3])
}

/// Three copies of the channel mean of an RGB image.
pub fn channel_mean(img: &Image) -> Result<Image> {
    expect_channels(img, 3, "channel_mean")?;
    let mut out = Image::zeros(3, img.h, img.w);
    let n = img.h * img.w;
    for i in 0..n {
        let m = (img.data[i] + img.data[n + i] + img.data[2 * n + i]) / 3.0;
        for k in 0..3 {
            out.data[k * n + i] = m;
        }
    }
    Ok(out)
}

fn bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0; oh * ow];
    let sy = h as f32 / oh as f32;
    let sx = w as f32 / ow as f32;
    for y in 0..oh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f32;
        for x in 0..ow {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f32;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[y * ow + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Aspect-preserving bilinear resize to fit inside `target_h x target_w`,
/// centered, with zero margins.
pub fn resize_zero_pad(img: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h == 0 || target_w == 0 || img.h == 0 || img.w == 0 {
        return Err(Error::Shape(format!(
            "resize_zero_pad needs positive sizes, got {}x{} -> {target_h}x{target_w}",
            img.h, img.w
        )));
    }
    let scale = (target_h as f64 / img.h as f64).min(target_w as f64 / img.w as f64);
    let nh = ((img.h as f64 * scale).round() as usize).clamp(1, target_h);
    let nw = ((img.w as f64 * scale).round() as usize).clamp(1, target_w);
    let top = (target_h - nh) / 2;
    let left = (target_w - nw) / 2;
    let mut out = Image::zeros(img.c, target_h, target_w);
    for ch in 0..img.c {
        let resized = if nh == img.h && nw == img.w {
            img.channel(ch).to_vec()
        } else {
            bilinear(img.channel(ch), img.h, img.w, nh, nw)
        };
        let dst = out.channel_mut(ch);
        for y in 0..nh {
            dst[(top + y) * target_w + left..(top + y) * target_w + left + nw]
                .copy_from_slice(&resized[y * nw..(y + 1) * nw]);
        }
    }
    Ok(out)
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    for ch in 0..img.c {
        for row in out.channel_mut(ch).chunks_mut(img.w) {
            row.reverse();
        }
    }
    out
}

pub fn random_hflip(img: &Image, p: f64, rng: &mut impl Rng) -> Result<Image> {
    check_p("flip p", p)?;
    Ok(if p > 0.0 && rng.gen_bool(p) { hflip(img) } else { img.clone() })
}

/// An erased region: `full_rows` complete rows of `width` pixels starting at
/// `(y0, x0)`, then `remainder` pixels of one partial row. Noise values are
/// stored per channel in row-major region order.
#[derive(Clone, Debug, PartialEq)]
pub struct EraseRegion {
    pub y0: usize,
    pub x0: usize,
    pub width: usize,
    pub full_rows: usize,
    pub remainder: usize,
    pub noise: Vec<[f32; 3]>,
}

impl EraseRegion {
    /// Draw a region of `round(area * h * w)` pixels (at least one) with a
    /// log-uniform aspect ratio in `[0.3, 3.33]`. The width is
    /// `round(sqrt(n / aspect))`, widened if needed so the region fits.
    pub fn draw(h: usize, w: usize, area: f64, rng: &mut impl Rng) -> Self {
        let total = h * w;
        let n = ((area * total as f64).round() as usize).clamp(1, total);
        let aspect = rng.gen_range(0.3f64.ln()..3.33f64.ln()).exp();
        let width = ((n as f64 / aspect).sqrt().round() as usize)
            .clamp(1, w)
            .max(n.div_ceil(h));
        let full_rows = n / width;
        let remainder = n % width;
        let rows = full_rows + usize::from(remainder > 0);
        let y0 = rng.gen_range(0..=h - rows);
        let x0 = rng.gen_range(0..=w - width);
        let noise = (0..n).map(|_| [(); 3].map(|_| 1.0 - rng.gen::<f32>())).collect();
        EraseRegion {
            y0,
            x0,
            width,
            full_rows,
            remainder,
            noise,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.full_rows * self.width + self.remainder
    }

    pub fn apply(&self, img: &mut Image) {
        let (h, w) = (img.h, img.w);
        for i in 0..self.num_pixels() {
            let y = self.y0 + i / self.width;
            let x = self.x0 + i % self.width;
            for ch in 0..img.c {
                img.data[(ch * h + y) * w + x] = self.noise[i][ch % 3];
            }
        }
    }
}

pub fn random_erase(img: &Image, p: f64, area_range: (f64, f64), rng: &mut impl Rng) -> Result<Image> {
    check_p("erase p", p)?;
    check_area(area_range)?;
    let mut out = img.clone();
    if p > 0.0 && rng.gen_bool(p) {
        let area = rng.gen_range(area_range.0..=area_range.1);
        EraseRegion::draw(img.h, img.w, area, rng).apply(&mut out);
    }
    Ok(out)
}

/// Resize, flip and erase both members of a g/c pair with a single draw.
fn geometric_pair(g: &Image, c: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Image, Image)> {
    let mut g = resize_zero_pad(g, cfg.target_h, cfg.target_w)?;
    let mut c = resize_zero_pad(c, cfg.target_h, cfg.target_w)?;
    if cfg.flip_p > 0.0 && rng.gen_bool(cfg.flip_p) {
        g = hflip(&g);
        c = hflip(&c);
    }
    if cfg.erase_p > 0.0 && rng.gen_bool(cfg.erase_p) {
        let area = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
        let region = EraseRegion::draw(g.h, g.w, area, rng);
        region.apply(&mut g);
        region.apply(&mut c);
    }
    Ok((g, c))
}

/// Stack equally sized images into a `[N, C, H, W]` tensor.
pub fn stack_images(images: &[Image]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Usage("cannot stack an empty image list".into()))?;
    let mut data = Vec::with_capacity(images.len() * first.data.len());
    for img in images {
        if (img.c, img.h, img.w) != (first.c, first.h, first.w) {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match {}x{}x{}",
                img.c, img.h, img.w, first.c, first.h, first.w
            )));
        }
        data.extend_from_slice(&img.data);
    }
    Tensor::new(vec![images.len(), first.c, first.h, first.w], data)
}

/// The four training streams for `B` visible and `B` infrared samples.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub x_vg: Tensor<f32>,
    pub x_vc: Tensor<f32>,
    pub x_tg: Tensor<f32>,
    pub x_tc: Tensor<f32>,
    /// Visible identities followed by infrared identities.
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
}

impl StreamBatch {
    pub fn batch_size(&self) -> usize {
        self.x_vg.shape()[0]
    }

    pub fn v_ids(&self) -> &[u32] {
        &self.ids[..self.batch_size()]
    }

    pub fn t_ids(&self) -> &[u32] {
        &self.ids[self.batch_size()..]
    }
}

/// Expand and augment paired sample lists into a [`StreamBatch`].
pub fn make_stream_batch(
    v: &[&SampleRecord],
    t: &[&SampleRecord],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<StreamBatch> {
    if v.len() != t.len() || v.is_empty() {
        return Err(Error::Usage(format!(
            "make_stream_batch needs equal non-zero visible and infrared counts, got {} and {}",
            v.len(),
            t.len()
        )));
    }
    cfg.validate()?;
    let b = v.len();
    let (mut vg, mut vc, mut tg, mut tc) = (
        Vec::with_capacity(b),
        Vec::with_capacity(b),
        Vec::with_capacity(b),
        Vec::with_capacity(b),
    );
    for r in v {
        if r.modality != Modality::Visible {
            return Err(Error::Usage("visible list contains an infrared record".into()));
        }
        let img = r.to_image();
        let exchanged = channel_exchange_rgb(&img, cfg.channel_exchange, rng)?;
        let (g, c) = geometric_pair(&img, &exchanged, cfg, rng)?;
        vg.push(g);
        vc.push(c);
    }
    for r in t {
        if r.modality != Modality::Infrared {
            return Err(Error::Usage("infrared list contains a visible record".into()));
        }
        let img = r.to_image();
        let (g, c) = geometric_pair(&ir_replicate(&img)?, &ir_channel_expand(&img, rng)?, cfg, rng)?;
        tg.push(g);
        tc.push(c);
    }
    Ok(StreamBatch {
        x_vg: stack_images(&vg)?,
        x_vc: stack_images(&vc)?,
        x_tg: stack_images(&tg)?,
        x_tc: stack_images(&tc)?,
        ids: v.iter().chain(t).map(|r| r.identity).collect(),
        cams: v.iter().chain(t).map(|r| r.camera).collect(),
    })
}

/// Deterministic evaluation views `(g, c)` of a stored sample, resized to
/// the target: the channel mean stands in for channel exchange and infrared
/// expansion uses the identity map.
pub fn eval_views(record: &SampleRecord, target_h: usize, target_w: usize) -> Result<(Image, Image)> {
    let img = record.to_image();
    let (g, c) = match record.modality {
        Modality::Visible => {
            let c = channel_mean(&img)?;
            (img, c)
        }
        Modality::Infrared => {
            let g = ir_replicate(&img)?;
            (g.clone(), g)
        }
    };
    Ok((resize_zero_pad(&g, target_h, target_w)?, resize_zero_pad(&c, target_h, target_w)?))
}

//! Candidate and working-mask overlays: alpha-composited fills, dilated
//! boundary outlines, and burned-in captions so a chat model can bind
//! candidate ids to regions within a single image stream.
//!
//! Rendering is deterministic: the same image, mask, and style always
//! produce byte-identical output, and no pixel outside
//! `mask ∪ outline ∪ caption box` is ever touched.

mod font;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::CandidateMask;
use crate::mask::RasterMask;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OverlayError {
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
}

/// Eight-color qualitative palette cycled by candidate id.
pub const PALETTE: [[u8; 3]; 8] = [
    [228, 26, 28],   // red
    [55, 126, 184],  // blue
    [77, 175, 74],   // green
    [152, 78, 163],  // purple
    [255, 127, 0],   // orange
    [255, 255, 51],  // yellow
    [166, 86, 40],   // brown
    [247, 129, 191], // pink
];

/// Fill color for the working-mask overlay.
pub const WORKING_COLOR: [u8; 3] = [50, 205, 50];

/// Style for one overlay render.
#[derive(Debug, Clone)]
pub struct OverlayStyle {
    pub fill_color: [u8; 3],
    /// In `[0, 1]`; 0 leaves the fill invisible, 1 paints it opaque.
    pub fill_alpha: f32,
    pub outline_color: [u8; 3],
    /// Outline thickness in pixels, at least 1.
    pub outline_width: u32,
    pub caption: String,
}

impl OverlayStyle {
    pub fn new(fill_color: [u8; 3], caption: impl Into<String>) -> Self {
        Self {
            fill_color,
            fill_alpha: 0.45,
            outline_color: fill_color,
            outline_width: 1,
            caption: caption.into(),
        }
    }
}

/// How candidate overlays are packaged for the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlayLayout {
    /// One captioned image per candidate (clearest id binding).
    #[default]
    PerCandidate,
    /// All views tiled into a single grid image.
    Grid,
}

/// Overlay rendering knobs carried in the engine config.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayConfig {
    pub fill_alpha: f32,
    pub outline_width: u32,
    pub layout: OverlayLayout,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            fill_alpha: 0.45,
            outline_width: 1,
            layout: OverlayLayout::PerCandidate,
        }
    }
}

fn check_dims(image: &RgbImage, mask: &RasterMask) -> Result<(), OverlayError> {
    if mask.width() != image.width() || mask.height() != image.height() {
        return Err(OverlayError::DimensionMismatch {
            mask_w: mask.width(),
            mask_h: mask.height(),
            image_w: image.width(),
            image_h: image.height(),
        });
    }
    Ok(())
}

/// Grow the mask by one pixel in the 8-neighborhood.
fn dilate_once(mask: &RasterMask) -> RasterMask {
    let (w, h) = mask.dimensions();
    RasterMask::from_fn(w, h, |r, c| {
        if mask.get(r, c) {
            return true;
        }
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                let nr = r as i64 + dr;
                let nc = c as i64 + dc;
                if nr >= 0 && nc >= 0 && (nr as u32) < h && (nc as u32) < w && mask.get(nr as u32, nc as u32) {
                    return true;
                }
            }
        }
        false
    })
    .expect("dimensions already validated")
}

fn blend(src: u8, fill: u8, alpha: f32) -> u8 {
    ((1.0 - alpha) * src as f32 + alpha * fill as f32).round() as u8
}

const CAPTION_SCALE: u32 = 2;
const CAPTION_PAD: u32 = 2 * CAPTION_SCALE;

/// Pixel size of the caption box burned into the top-left corner; (0, 0)
/// when the caption is empty.
pub fn caption_box_size(caption: &str) -> (u32, u32) {
    let chars = caption.chars().count() as u32;
    if chars == 0 {
        return (0, 0);
    }
    let text_w = chars * (font::GLYPH_WIDTH + 1) * CAPTION_SCALE - CAPTION_SCALE;
    let text_h = font::GLYPH_HEIGHT * CAPTION_SCALE;
    (text_w + 2 * CAPTION_PAD, text_h + 2 * CAPTION_PAD)
}

fn draw_caption(out: &mut RgbImage, caption: &str) {
    let (box_w, box_h) = caption_box_size(caption);
    if box_w == 0 {
        return;
    }
    let box_w = box_w.min(out.width());
    let box_h = box_h.min(out.height());
    for y in 0..box_h {
        for x in 0..box_w {
            out.put_pixel(x, y, Rgb([0, 0, 0]));
        }
    }
    for (i, ch) in caption.chars().enumerate() {
        let rows = font::glyph(ch);
        let origin_x = CAPTION_PAD + i as u32 * (font::GLYPH_WIDTH + 1) * CAPTION_SCALE;
        for (gy, row) in rows.iter().enumerate() {
            for gx in 0..font::GLYPH_WIDTH {
                if row >> (font::GLYPH_WIDTH - 1 - gx) & 1 == 1 {
                    for sy in 0..CAPTION_SCALE {
                        for sx in 0..CAPTION_SCALE {
                            let px = origin_x + gx * CAPTION_SCALE + sx;
                            let py = CAPTION_PAD + gy as u32 * CAPTION_SCALE + sy;
                            if px < out.width() && py < out.height() {
                                out.put_pixel(px, py, Rgb([255, 255, 255]));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Composite one mask over the image: alpha-blended fill, a dilated
/// boundary outline, and the caption in the top-left corner.
pub fn render_overlay(
    image: &RgbImage,
    mask: &RasterMask,
    style: &OverlayStyle,
) -> Result<RgbImage, OverlayError> {
    check_dims(image, mask)?;
    let mut out = image.clone();
    let alpha = style.fill_alpha.clamp(0.0, 1.0);
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            if mask.get(r, c) {
                let px = out.get_pixel_mut(c, r);
                px.0 = [
                    blend(px.0[0], style.fill_color[0], alpha),
                    blend(px.0[1], style.fill_color[1], alpha),
                    blend(px.0[2], style.fill_color[2], alpha),
                ];
            }
        }
    }
    // outline ring: the mask dilated `outline_width` times, minus the mask
    let mut dilated = mask.clone();
    for _ in 0..style.outline_width.max(1) {
        dilated = dilate_once(&dilated);
    }
    let ring = dilated.subtract(mask).expect("same dimensions");
    for r in 0..ring.height() {
        for c in 0..ring.width() {
            if ring.get(r, c) {
                out.put_pixel(c, r, Rgb(style.outline_color));
            }
        }
    }
    draw_caption(&mut out, &style.caption);
    Ok(out)
}

/// Render the inspection views for one round: the working mask first, then
/// every candidate in id order, each with a distinct palette color and its
/// id burned into the caption.
pub fn examine_each_mask(
    image: &RgbImage,
    candidates: &[CandidateMask],
    working: &RasterMask,
    config: &OverlayConfig,
) -> Result<Vec<(String, RgbImage)>, OverlayError> {
    let mut style = OverlayStyle::new(WORKING_COLOR, "working");
    style.fill_alpha = config.fill_alpha;
    style.outline_width = config.outline_width;
    let mut views = vec![("working".to_string(), render_overlay(image, working, &style)?)];
    for cand in candidates {
        let caption = format!("cand {}", cand.candidate_id);
        let color = PALETTE[(cand.candidate_id as usize + PALETTE.len() - 1) % PALETTE.len()];
        let mut style = OverlayStyle::new(color, caption.clone());
        style.fill_alpha = config.fill_alpha;
        style.outline_width = config.outline_width;
        views.push((caption, render_overlay(image, &cand.mask, &style)?));
    }
    Ok(views)
}

/// Tile views row-major into one image (black background behind any
/// ragged last row).
pub fn compose_grid(views: &[(String, RgbImage)]) -> RgbImage {
    if views.is_empty() {
        return RgbImage::new(1, 1);
    }
    let tile_w = views[0].1.width();
    let tile_h = views[0].1.height();
    let cols = (views.len() as f64).sqrt().ceil() as u32;
    let rows = (views.len() as u32).div_ceil(cols);
    let mut canvas = RgbImage::new(cols * tile_w, rows * tile_h);
    for (i, (_, view)) in views.iter().enumerate() {
        let ox = (i as u32 % cols) * tile_w;
        let oy = (i as u32 / cols) * tile_h;
        for y in 0..view.height().min(tile_h) {
            for x in 0..view.width().min(tile_w) {
                canvas.put_pixel(ox + x, oy + y, *view.get_pixel(x, y));
            }
        }
    }
    canvas
}

/// Shrink so the longest side is at most `max_side`, preserving aspect
/// ratio. Images already within the limit are returned unchanged.
pub fn downscale_to_max_side(image: &RgbImage, max_side: u32) -> RgbImage {
    let longest = image.width().max(image.height());
    if longest <= max_side || max_side == 0 {
        return image.clone();
    }
    let scale = max_side as f64 / longest as f64;
    let nw = ((image.width() as f64 * scale).round() as u32).max(1);
    let nh = ((image.height() as f64 * scale).round() as u32).max(1);
    image::imageops::resize(image, nw, nh, image::imageops::FilterType::Triangle)
}

/// PNG-encode for transport or trace artifacts.
pub fn encode_png(image: &RgbImage) -> Vec<u8> {
    let mut bytes = Vec::new();
    image::DynamicImage::ImageRgb8(image.clone())
        .write_to(
            &mut std::io::Cursor::new(&mut bytes),
            image::ImageFormat::Png,
        )
        .expect("in-memory PNG encoding cannot fail");
    bytes
}

//! Display images. Files found in the image directory are passed through;
//! synthetic scenes, which have no photograph, get a flat rendering of their
//! ground truth as an uncompressed BMP.

use std::path::Path;

use coanno_core::proposal::GtScene;
use coanno_core::render::render_gt;

const EXTENSIONS: [(&str, &str); 4] =
    [("png", "image/png"), ("jpg", "image/jpeg"), ("jpeg", "image/jpeg"), ("bmp", "image/bmp")];

/// Reads `<dir>/<image_id>.<ext>` for the first known extension present.
pub fn find_image(dir: &Path, image_id: &str) -> std::io::Result<Option<(Vec<u8>, &'static str)>> {
    for (ext, mime) in EXTENSIONS {
        let path = dir.join(format!("{image_id}.{ext}"));
        match std::fs::read(&path) {
            Ok(bytes) => return Ok(Some((bytes, mime))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

/// A fixed pseudo-random colour per class, shaded slightly per segment so
/// touching instances of one class stay distinguishable.
fn colour(class: u32, segment: u32) -> [u8; 3] {
    let h = (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let shade = (segment % 5) as u8 * 12;
    [(h >> 16) as u8 | 0x40, (h >> 32) as u8 | 0x40, (h >> 48) as u8 | 0x40].map(|c| c.saturating_sub(shade))
}

/// 24-bit BMP of the ground-truth classes; void pixels are black.
pub fn render_bmp(gt: &GtScene) -> Vec<u8> {
    let map = render_gt(gt);
    let (w, h) = (map.width as usize, map.height as usize);
    let stride = (3 * w).div_ceil(4) * 4;
    let pixel_bytes = stride * h;
    let file_size = 54 + pixel_bytes;
    let mut out = Vec::with_capacity(file_size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(file_size as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&54u32.to_le_bytes());
    out.extend_from_slice(&40u32.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    // negative height stores rows top to bottom
    out.extend_from_slice(&(-(h as i32)).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(pixel_bytes as u32).to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&2835u32.to_le_bytes());
    out.extend_from_slice(&[0u8; 8]);
    for y in 0..h {
        let row_start = out.len();
        for x in 0..w {
            let idx = y * w + x;
            let [r, g, b] = match map.class_ids[idx] {
                Some(c) => colour(c.0, map.segment_ids[idx].0),
                None => [0, 0, 0],
            };
            out.extend_from_slice(&[b, g, r]);
        }
        out.resize(row_start + stride, 0);
    }
    out
}

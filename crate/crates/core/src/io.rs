//! Image and voxel file I/O plus canvas helpers for result sheets.
//!
//! Images are 8-bit RGB PNGs mapped linearly to the tanh range `[-1, 1]`;
//! the mapping back to bytes is its exact inverse on the byte lattice.
//! Volumes use a small binary container: magic `VX`, a version word, three
//! little-endian u32 dims, then row-major `{0, 1}` bytes.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::CoreError;
use crate::tensor::Tensor;

const VOXEL_MAGIC: [u8; 2] = *b"VX";
const VOXEL_VERSION: u16 = 1;

/// Byte value → tanh range: `p/127.5 − 1`.
#[must_use]
pub fn byte_to_signed(p: u8) -> f64 {
    f64::from(p) / 127.5 - 1.0
}

/// Tanh range → byte value: `round((v+1)·127.5)`, clamped to `[0, 255]`.
#[must_use]
pub fn signed_to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Reads an RGB PNG into a `[3, H, W]` tensor with values in `[-1, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor, CoreError> {
    let img = image::open(path)
        .map_err(|e| CoreError::data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = byte_to_signed(px.0[c]);
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Writes a `[3, H, W]` (or `[1, H, W]`, replicated to gray) tensor in
/// `[-1, 1]` as an 8-bit RGB PNG.
pub fn write_image(t: &Tensor, path: &Path) -> Result<(), CoreError> {
    let shape = t.shape();
    assert_eq!(shape.len(), 3, "image tensor must be [C, H, W]");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(c == 1 || c == 3, "image tensor must have 1 or 3 channels");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|ch| {
                let src = if c == 3 { ch } else { 0 };
                signed_to_byte(t.at(&[src, y, x]))
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| CoreError::data(format!("{}: {e}", path.display())))
}

/// Writes a binary `[D, H, W]` volume with values in `{0, 1}`.
pub fn write_voxels(t: &Tensor, path: &Path) -> Result<(), CoreError> {
    let shape = t.shape();
    if shape.len() != 3 {
        return Err(CoreError::data("voxel tensor must be [D, H, W]"));
    }
    let mut bytes = Vec::with_capacity(16 + t.numel());
    bytes.extend_from_slice(&VOXEL_MAGIC);
    bytes.extend_from_slice(&VOXEL_VERSION.to_le_bytes());
    for &d in shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        if v == 0.0 {
            bytes.push(0);
        } else if v == 1.0 {
            bytes.push(1);
        } else {
            return Err(CoreError::data(format!("non-binary voxel value {v}")));
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a binary volume written by [`write_voxels`].
pub fn read_voxels(path: &Path) -> Result<Tensor, CoreError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || bytes[..2] != VOXEL_MAGIC {
        return Err(CoreError::data("not a voxel container"));
    }
    let version = u16::from_le_bytes([bytes[2], bytes[3]]);
    if version != VOXEL_VERSION {
        return Err(CoreError::data(format!("unsupported voxel container version {version}")));
    }
    let dim = |i: usize| {
        u32::from_le_bytes([bytes[4 + 4 * i], bytes[5 + 4 * i], bytes[6 + 4 * i], bytes[7 + 4 * i]])
            as usize
    };
    let shape = vec![dim(0), dim(1), dim(2)];
    let n: usize = shape.iter().product();
    let payload = &bytes[16..];
    if payload.len() != n {
        return Err(CoreError::data(format!(
            "voxel payload truncated: expected {n} bytes, found {}",
            payload.len()
        )));
    }
    let mut data = vec![0.0; n];
    for (slot, &b) in data.iter_mut().zip(payload) {
        *slot = match b {
            0 => 0.0,
            1 => 1.0,
            other => return Err(CoreError::data(format!("non-binary voxel byte {other}"))),
        };
    }
    Ok(Tensor::new(shape, data))
}

/// `{0, 1}` occupancy → tanh range `{-1, 1}`.
#[must_use]
pub fn binary_to_signed(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// Tanh range → `{0, 1}` occupancy, thresholding at the midpoint 0.
#[must_use]
pub fn signed_to_binary(t: &Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

/// Lays out equally sized `[C, h, w]` tiles in a grid with `cols` columns,
/// separated by `pad` pixels of `pad_value`.
#[must_use]
pub fn assemble_grid(tiles: &[Tensor], cols: usize, pad: usize, pad_value: f64) -> Tensor {
    assert!(!tiles.is_empty() && cols >= 1);
    let shape = tiles[0].shape().to_vec();
    assert_eq!(shape.len(), 3);
    for t in tiles {
        assert_eq!(t.shape(), shape.as_slice(), "grid tiles must share a shape");
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let rows = tiles.len().div_ceil(cols);
    let out_h = rows * h + (rows + 1) * pad;
    let out_w = cols * w + (cols + 1) * pad;
    let mut out = Tensor::full(vec![c, out_h, out_w], pad_value);
    for (idx, tile) in tiles.iter().enumerate() {
        let (r, col) = (idx / cols, idx % cols);
        let top = pad + r * (h + pad);
        let left = pad + col * (w + pad);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[(ch * out_h + top + y) * out_w + left + x] =
                        tile.at(&[ch, y, x]);
                }
            }
        }
    }
    out
}

/// 3×5 bitmap glyphs for numeric annotations: digits, minus, dot.
fn glyph(ch: char) -> Option<[u8; 5]> {
    // Each row is 3 bits, most significant on the left.
    let rows = match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        ' ' => [0b000; 5],
        _ => return None,
    };
    Some(rows)
}

/// Stamps `text` (digits, minus, dot) onto all channels of a `[C, H, W]`
/// canvas at `(row, col)`, one pixel per bit; glyphs are 3×5 with a one-pixel
/// gap. Out-of-canvas pixels are skipped; unknown characters are blanks.
pub fn draw_text(canvas: &mut Tensor, row: usize, col: usize, text: &str, value: f64) {
    let shape = canvas.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut x0 = col;
    for ch in text.chars() {
        if let Some(rows) = glyph(ch) {
            for (dy, bits) in rows.iter().enumerate() {
                for dx in 0..3 {
                    if bits >> (2 - dx) & 1 == 1 {
                        let (y, x) = (row + dy, x0 + dx);
                        if y < h && x < w {
                            for chn in 0..c {
                                canvas.data_mut()[(chn * h + y) * w + x] = value;
                            }
                        }
                    }
                }
            }
        }
        x0 += 4;
    }
}

/// Pixel width of [`draw_text`] output for `text`.
#[must_use]
pub fn text_width(text: &str) -> usize {
    text.chars().count() * 4
}

//! 8-bit RGB buffers, binary PPM I/O, and the float-image preprocessing chain:
//! unit rescaling, bilinear resizing and center cropping.

use std::fmt;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum ImageError {
    #[error("not a binary PPM: expected magic \"P6\"")]
    BadMagic,
    #[error("malformed PPM header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (only 255 is supported)")]
    UnsupportedMaxval(u32),
    #[error("truncated PPM payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} unexpected bytes after PPM payload")]
    TrailingData(usize),
    #[error("invalid image dimensions {width}x{height}")]
    Dimensions { width: usize, height: usize },
    #[error("pixel buffer length {len} does not match {width}x{height}x{channels}")]
    BufferLength {
        len: usize,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("normalized image value {0} outside [0,1]")]
    OutOfRange(f64),
    #[error("crop size {size} exceeds image {width}x{height}")]
    CropTooLarge { size: usize, width: usize, height: usize },
    #[error("{0} requires a square image, got {1}x{2}")]
    NotSquare(&'static str, usize, usize),
    #[error("invalid preprocessing sizes: {0}")]
    Sizes(String),
}

/// Interleaved row-major RGB image, 8 bits per sample.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::Dimensions { width, height });
        }
        if pixels.len() != width * height * 3 {
            return Err(ImageError::BufferLength {
                len: pixels.len(),
                width,
                height,
                channels: 3,
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, pixels).expect("filled image dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8], ImageError> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(ImageError::BadHeader("unexpected end of header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, ImageError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ImageError::BadHeader(format!("bad {what} {:?}", String::from_utf8_lossy(tok))))
}

/// Parses a binary "P6" PPM with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, ImageError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(ImageError::BadMagic);
    }
    let mut pos = 2;
    if pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::BadMagic);
    }
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(ImageError::UnsupportedMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(ImageError::Dimensions { width, height });
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(ImageError::Truncated {
            expected: width * height * 3,
            found: 0,
        });
    }
    pos += 1;
    let expected = width * height * 3;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(ImageError::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(ImageError::TrailingData(payload.len() - expected));
    }
    ImageBuffer::new(width, height, payload.to_vec())
}

/// Canonical encoding: `P6\n<w> <h>\n255\n` followed by the raw samples.
pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

/// Planar `[C,H,W]` float image with every value in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    tensor: Tensor,
}

impl NormalizedImage {
    pub fn new(tensor: Tensor) -> Result<Self, ImageError> {
        if tensor.ndim() != 3 {
            return Err(ImageError::Sizes(format!(
                "normalized image must be [C,H,W], got {:?}",
                tensor.shape()
            )));
        }
        if let Some(&bad) = tensor.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ImageError::OutOfRange(bad));
        }
        Ok(Self { tensor })
    }

    /// Skips the range check; callers guarantee values are convex combinations
    /// or permutations of in-range values.
    pub(crate) fn from_tensor_unchecked(tensor: Tensor) -> Self {
        debug_assert_eq!(tensor.ndim(), 3);
        Self { tensor }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Back to 8-bit RGB, rounding to nearest. Requires three channels.
    pub fn to_buffer(&self) -> ImageBuffer {
        assert_eq!(self.channels(), 3, "to_buffer needs an RGB image");
        let (h, w) = (self.height(), self.width());
        let d = self.tensor.data();
        let mut px = Vec::with_capacity(h * w * 3);
        for i in 0..h * w {
            for c in 0..3 {
                px.push((d[c * h * w + i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        ImageBuffer::new(w, h, px).expect("normalized image dims")
    }
}

/// `sample / 255`, converting interleaved `H×W×3` into planar `3×H×W`.
pub fn rescale_to_unit(img: &ImageBuffer) -> NormalizedImage {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    NormalizedImage::from_tensor_unchecked(Tensor::new(vec![3, h, w], data).expect("rescale dims"))
}

/// Interpolation taps along one axis: (lower index, upper index, weight of upper).
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resampling with half-pixel centers and clamped edges.
pub fn resize_bilinear(img: &NormalizedImage, out_w: usize, out_h: usize) -> Result<NormalizedImage, ImageError> {
    if out_w == 0 || out_h == 0 {
        return Err(ImageError::Dimensions {
            width: out_w,
            height: out_h,
        });
    }
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let xs = bilinear_taps(w, out_w);
    let ys = bilinear_taps(h, out_h);
    let src = img.tensor.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    let mut rows = vec![0.0; h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, &(lo, hi, t)) in xs.iter().enumerate() {
                let (a, b) = (row[lo], row[hi]);
                rows[y * out_w + x] = a + t * (b - a);
            }
        }
        for &(lo, hi, t) in &ys {
            for x in 0..out_w {
                let (a, b) = (rows[lo * out_w + x], rows[hi * out_w + x]);
                out.push(a + t * (b - a));
            }
        }
    }
    Ok(NormalizedImage::from_tensor_unchecked(
        Tensor::new(vec![c, out_h, out_w], out).expect("resize dims"),
    ))
}

/// Square crop whose top-left corner is at `floor((H-size)/2), floor((W-size)/2)`.
pub fn center_crop(img: &NormalizedImage, size: usize) -> Result<NormalizedImage, ImageError> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    if size == 0 || size > h.min(w) {
        return Err(ImageError::CropTooLarge {
            size,
            width: w,
            height: h,
        });
    }
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let src = img.tensor.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in 0..size {
            let start = (ch * h + oy + y) * w + ox;
            out.extend_from_slice(&src[start..start + size]);
        }
    }
    Ok(NormalizedImage::from_tensor_unchecked(
        Tensor::new(vec![c, size, size], out).expect("crop dims"),
    ))
}

/// Sizes of the two input scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleSizes {
    pub coarse: usize,
    pub fine_resize: usize,
    pub crop: usize,
}

impl Default for ScaleSizes {
    fn default() -> Self {
        Self {
            coarse: 64,
            fine_resize: 128,
            crop: 64,
        }
    }
}

impl ScaleSizes {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.coarse == 0 || self.fine_resize == 0 || self.crop == 0 {
            return Err(ImageError::Sizes(format!("all sizes must be positive: {self:?}")));
        }
        if self.crop > self.fine_resize {
            return Err(ImageError::Sizes(format!(
                "crop {} exceeds fine resize {}",
                self.crop, self.fine_resize
            )));
        }
        Ok(())
    }
}

/// Coarse view (whole image resized) and fine view (larger resize, then center crop).
pub fn preprocess_pair(img: &ImageBuffer, sizes: ScaleSizes) -> Result<(NormalizedImage, NormalizedImage), ImageError> {
    sizes.validate()?;
    let unit = rescale_to_unit(img);
    let coarse = resize_bilinear(&unit, sizes.coarse, sizes.coarse)?;
    let fine = center_crop(
        &resize_bilinear(&unit, sizes.fine_resize, sizes.fine_resize)?,
        sizes.crop,
    )?;
    Ok((coarse, fine))
}

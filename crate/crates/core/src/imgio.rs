//! Image buffers, PGM/PPM/PNG I/O, resampling and channel manipulation.
//!
//! Samples are stored as `f32` in `[0, 1]`; 8-bit values only appear at the
//! file boundary (`v / 255` on load, `round(v * 255)` on save).

use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Argument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Argument(format!(
                "channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "sample count {} does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Argument(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value; width * height * channels],
        )
    }

    /// Builds an image from a per-pixel function returning `channels` samples.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
        Self::new(width, height, channels, data)
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Bilinear sample at continuous pixel-center coordinates; `None` outside
    /// `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> Option<f32> {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = (x - x0 as f64) as f32;
        let ty = (y - y0 as f64) as f32;
        let top = lerp(self.get(x0, y0, c), self.get(x1, y0, c), tx);
        let bottom = lerp(self.get(x0, y1, c), self.get(x1, y1, c), tx);
        Some(lerp(top, bottom, ty))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

/// `a + (b - a) t`, clamped to the segment so rounding never leaves `[min(a,b), max(a,b)]`.
#[inline]
pub(crate) fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + (b - a) * t;
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

/// Supported on-disk encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Pgm,
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("pgm") => Ok(ImageFormat::Pgm),
            Some("ppm") => Ok(ImageFormat::Ppm),
            Some("png") => Ok(ImageFormat::Png),
            other => Err(Error::format(
                "extension",
                format!("unsupported image extension {other:?} (expected pgm, ppm or png)"),
            )),
        }
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Writes `img`, choosing the encoding from the file extension. PGM requires
/// one channel and PPM three.
pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let format = ImageFormat::from_path(path)?;
    let bytes = encode_image(img, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decodes PGM (P5), PPM (P6) or 8-bit gray/RGB PNG, sniffing the magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageBuffer> {
    const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P5") {
        decode_pnm(bytes, 1)
    } else if bytes.starts_with(b"P6") {
        decode_pnm(bytes, 3)
    } else {
        Err(Error::format(
            "magic",
            "not a P5 PGM, P6 PPM or PNG file",
        ))
    }
}

pub fn encode_image(img: &ImageBuffer, format: ImageFormat) -> Result<Vec<u8>> {
    match format {
        ImageFormat::Pgm | ImageFormat::Ppm => {
            let (magic, want) = if format == ImageFormat::Pgm {
                ("P5", 1)
            } else {
                ("P6", 3)
            };
            if img.channels != want {
                return Err(Error::Argument(format!(
                    "{magic} requires {want} channel(s), image has {}",
                    img.channels
                )));
            }
            let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend(img.to_u8());
            Ok(out)
        }
        ImageFormat::Png => encode_png(img),
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImageBuffer> {
    let mut pos = 2;
    let mut header = [0usize; 3];
    for (slot, field) in header.iter_mut().zip(["width", "height", "maxval"]) {
        // Skip whitespace and comments before each token.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).unwrap_or_default();
        *slot = token
            .parse()
            .map_err(|_| Error::format(field, format!("expected a decimal number, found {token:?}")))?;
    }
    let [width, height, maxval] = header;
    if maxval != 255 {
        return Err(Error::format(
            "maxval",
            format!("only 8-bit (255) supported, found {maxval}"),
        ));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format("maxval", "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::format(
            "raster",
            format!("truncated: expected {need} bytes, found {}", raster.len()),
        ));
    }
    ImageBuffer::from_u8(width, height, channels, &raster[..need])
}

fn decode_png(bytes: &[u8]) -> Result<ImageBuffer> {
    let png_err = |e: png::DecodingError| Error::format("png", e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            "bit depth",
            format!("only 8-bit PNG supported, found {:?}", info.bit_depth),
        ));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::format(
                "color type",
                format!("only grayscale and RGB PNG supported, found {other:?}"),
            ))
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format("png", "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    let line = frame.line_size;
    let row = width * channels;
    let mut packed = Vec::with_capacity(row * height);
    for y in 0..height {
        packed.extend_from_slice(&buf[y * line..y * line + row]);
    }
    ImageBuffer::from_u8(width, height, channels, &packed)
}

fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let png_err = |e: png::EncodingError| Error::format("png", e.to_string());
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(if img.channels == 1 {
            png::ColorType::Grayscale
        } else {
            png::ColorType::Rgb
        });
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(png_err)?;
        writer.write_image_data(&img.to_u8()).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
    }
    Ok(out)
}

/// Per-output-index source taps for half-pixel-centered bilinear sampling.
fn bilinear_taps(out: usize, inp: usize) -> Vec<(usize, usize, f32)> {
    let scale = inp as f64 / out as f64;
    let max = (inp - 1) as f64;
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, max);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(inp - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (align-corners off); edges clamp.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    let xs = bilinear_taps(out_w, img.width);
    let ys = bilinear_taps(out_h, img.height);
    let ch = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            for c in 0..ch {
                let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), tx);
                let bottom = lerp(img.get(x0, y1, c), img.get(x1, y1, c), tx);
                data.push(lerp(top, bottom, ty));
            }
        }
    }
    ImageBuffer::new(out_w, out_h, ch, data)
}

/// Normalized box-filter weights: output pixel `o` integrates the source
/// interval `[o*s, (o+1)*s)` in pixel-edge coordinates.
fn area_taps(out: usize, inp: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = ((o + 1) as f64 * scale).min(inp as f64);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(inp);
            let taps: Vec<(usize, f64)> = (first..last)
                .map(|i| {
                    let overlap = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    (i, overlap / (hi - lo))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            taps
        })
        .collect()
}

/// Area-averaging resize. Models a sensor integrating light over each pixel;
/// an integer downscale factor reduces to a plain block mean.
pub fn resize_area(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Argument(format!(
            "resize target must be positive, got {out_w}x{out_h}"
        )));
    }
    let ch = img.channels;
    let xs = area_taps(out_w, img.width);
    let ys = area_taps(out_h, img.height);
    // Horizontal pass into f64 rows, then vertical.
    let mut horiz = vec![0f64; out_w * img.height * ch];
    for y in 0..img.height {
        for (ox, taps) in xs.iter().enumerate() {
            for c in 0..ch {
                horiz[(y * out_w + ox) * ch + c] =
                    taps.iter().map(|&(x, w)| w * f64::from(img.get(x, y, c))).sum();
            }
        }
    }
    let mut data = Vec::with_capacity(out_w * out_h * ch);
    for taps in &ys {
        for ox in 0..out_w {
            for c in 0..ch {
                let v: f64 = taps
                    .iter()
                    .map(|&(y, w)| w * horiz[(y * out_w + ox) * ch + c])
                    .sum();
                data.push((v as f32).clamp(0.0, 1.0));
            }
        }
    }
    ImageBuffer::new(out_w, out_h, ch, data)
}

/// Integer-aligned crop.
pub fn crop(img: &ImageBuffer, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
    if w == 0 || h == 0 || x0 + w > img.width || y0 + h > img.height {
        return Err(Error::Argument(format!(
            "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
            img.width, img.height
        )));
    }
    let ch = img.channels;
    let mut data = Vec::with_capacity(w * h * ch);
    for y in y0..y0 + h {
        let start = (y * img.width + x0) * ch;
        data.extend_from_slice(&img.data[start..start + w * ch]);
    }
    ImageBuffer::new(w, h, ch, data)
}

/// Luma weights for RGB to gray.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// How [`apply_channel_transform`] treats the color channels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelMode {
    /// Multiply each channel by its gain and clamp to `[0, 1]`.
    Gain,
    /// Replicate channel `k` into all three channels.
    Separate(usize),
}

pub fn apply_channel_transform(
    img: &ImageBuffer,
    gains: [f32; 3],
    mode: ChannelMode,
) -> Result<ImageBuffer> {
    if img.channels != 3 {
        return Err(Error::Shape(format!(
            "channel transform needs 3 channels, image has {}",
            img.channels
        )));
    }
    let data = match mode {
        ChannelMode::Gain => {
            if let Some(g) = gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
                return Err(Error::Argument(format!("gains must be positive, got {g}")));
            }
            img.data
                .chunks_exact(3)
                .flat_map(|p| {
                    [0, 1, 2].map(|c| (p[c] * gains[c]).clamp(0.0, 1.0))
                })
                .collect()
        }
        ChannelMode::Separate(k) => {
            if k > 2 {
                return Err(Error::Argument(format!(
                    "separate channel must be 0, 1 or 2, got {k}"
                )));
            }
            img.data.chunks_exact(3).flat_map(|p| [p[k]; 3]).collect()
        }
    };
    Ok(ImageBuffer {
        data,
        ..img.clone_shape()
    })
}

impl ImageBuffer {
    fn clone_shape(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: Vec::new(),
        }
    }
}

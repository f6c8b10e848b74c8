use std::fs;
use std::path::Path;

use super::{write_atomic, DataError};
use crate::error::Result;
use crate::tensor::Tensor;

fn to_byte(v: f32) -> u8 {
    // Round half up after clamping to [0, 1].
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Encodes `images` (`[N, C, H, W]`, values in `[0, 1]`) as a `cols`-wide
/// montage: P5 for one channel, P6 for three.
pub fn encode_grid(images: &Tensor, cols: usize) -> Result<Vec<u8>> {
    let [n, c, h, w] = images.dims4("write_image_grid")?;
    if c != 1 && c != 3 {
        return Err(DataError::UnsupportedChannels(c).into());
    }
    let cols = cols.clamp(1, n.max(1));
    let rows = n.div_ceil(cols).max(1);
    let (gw, gh) = (cols * w, rows * h);
    let mut pixels = vec![0u8; gw * gh * c];
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = images.data()[((i * c + ch) * h + y) * w + x];
                    let (py, px) = (gy * h + y, gx * w + x);
                    pixels[(py * gw + px) * c + ch] = to_byte(v);
                }
            }
        }
    }
    let mut out = format!("{}\n{} {}\n255\n", if c == 1 { "P5" } else { "P6" }, gw, gh).into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn write_image_grid(images: &Tensor, cols: usize, path: &Path) -> Result<()> {
    let bytes = encode_grid(images, cols)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn header_tokens<'a>(file: &str, bytes: &'a [u8], count: usize) -> Result<(Vec<&'a str>, usize), DataError> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(DataError::Malformed { file: file.into(), detail: "incomplete NetPBM header".into() });
        }
        tokens.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| DataError::Malformed {
            file: file.into(),
            detail: "non-ASCII header".into(),
        })?);
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((tokens, i + 1))
}

/// Decodes a binary P5/P6 image into `[1, C, H, W]`.
pub fn decode_image(file: &str, bytes: &[u8]) -> Result<Tensor, DataError> {
    let (tokens, body) = header_tokens(file, bytes, 4)?;
    let c = match tokens[0] {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(DataError::Malformed { file: file.into(), detail: format!("unsupported NetPBM kind {other}") })
        }
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| DataError::Malformed { file: file.into(), detail: format!("bad header field {s:?}") })
    };
    let (w, h, maxval) = (parse(tokens[1])?, parse(tokens[2])?, parse(tokens[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(DataError::Malformed { file: file.into(), detail: format!("maxval {maxval} unsupported") });
    }
    let expected = body + w * h * c;
    if bytes.len() < expected {
        return Err(DataError::Truncated { file: file.into(), expected, found: bytes.len() });
    }
    let raster = &bytes[body..expected];
    let mut data = vec![0.0f32; c * h * w];
    for (p, px) in raster.chunks_exact(c).enumerate() {
        for (ch, &v) in px.iter().enumerate() {
            data[ch * h * w + p] = v as f32 / maxval as f32;
        }
    }
    Ok(Tensor::new([1, c, h, w], data).expect("size checked"))
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    Ok(decode_image(&path.display().to_string(), &fs::read(path)?)?)
}

//! Portable float maps. A file may hold several frames back to back; each
//! frame is `PF` (RGB) or `Pf` (grey) with rows stored bottom-up.

use std::path::Path;

use crate::diffusion::Trajectory;
use crate::error::{Error, Result};
use crate::grid::{Grid, Image};

/// One frame, rows top-down, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct PfmFrame {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        format: "pfm",
        offset,
        message: message.into(),
    }
}

impl PfmFrame {
    pub fn from_gray(values: &Grid<f64>) -> Self {
        Self {
            width: values.width(),
            height: values.height(),
            channels: 1,
            data: values.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_rgb(img: &Image) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            channels: 3,
            data: img.iter().flat_map(|c| c.map(|v| v as f32)).collect(),
        }
    }

    pub fn to_gray(&self) -> Result<Grid<f64>> {
        if self.channels != 1 {
            return Err(Error::invalid(format!(
                "expected a grey frame, got {} channels",
                self.channels
            )));
        }
        Grid::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn to_rgb(&self) -> Result<Image> {
        if self.channels != 3 {
            return Err(Error::invalid(format!(
                "expected an RGB frame, got {} channels",
                self.channels
            )));
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
            .collect();
        Grid::from_vec(self.width, self.height, data)
    }
}

pub fn encode_frames(frames: &[PfmFrame]) -> Vec<u8> {
    let mut out = Vec::new();
    for f in frames {
        let magic = if f.channels == 3 { "PF" } else { "Pf" };
        out.extend(format!("{magic}\n{} {}\n-1.0\n", f.width, f.height).bytes());
        let row = f.width * f.channels;
        for y in (0..f.height).rev() {
            for v in &f.data[y * row..(y + 1) * row] {
                out.extend(v.to_le_bytes());
            }
        }
    }
    out
}

/// Reads a whitespace-delimited header token, returning it and the new offset.
fn token(bytes: &[u8], mut pos: usize) -> Result<(&str, usize)> {
    while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    let start = pos;
    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
        pos += 1;
    }
    if start == pos {
        return Err(err(start, "unexpected end of header"));
    }
    let s = std::str::from_utf8(&bytes[start..pos]).map_err(|_| err(start, "header is not ASCII"))?;
    Ok((s, pos))
}

pub fn parse_frames(bytes: &[u8]) -> Result<Vec<PfmFrame>> {
    let mut frames = Vec::new();
    let mut pos = 0;
    if bytes.is_empty() {
        return Err(err(0, "empty file"));
    }
    while pos < bytes.len() {
        let start = pos;
        let (magic, p) = token(bytes, pos)?;
        let channels = match magic {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(err(start, format!("bad magic '{magic}'"))),
        };
        let (w, p) = token(bytes, p)?;
        let width: usize = w.parse().map_err(|_| err(p - w.len(), format!("bad width '{w}'")))?;
        let (h, p) = token(bytes, p)?;
        let height: usize = h.parse().map_err(|_| err(p - h.len(), format!("bad height '{h}'")))?;
        let (s, p) = token(bytes, p)?;
        let scale: f64 = s.parse().map_err(|_| err(p - s.len(), format!("bad scale '{s}'")))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(err(p - s.len(), "scale must be finite and non-zero"));
        }
        let little = scale < 0.0;
        // exactly one whitespace byte separates the header from the data
        let data_start = p + 1;
        let count = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| err(start, "frame size overflows"))?;
        let end = count
            .checked_mul(4)
            .and_then(|n| n.checked_add(data_start))
            .ok_or_else(|| err(start, "frame size overflows"))?;
        if end > bytes.len() {
            return Err(err(
                bytes.len(),
                format!("truncated frame: need {} bytes, file has {}", end, bytes.len()),
            ));
        }
        let row = width * channels;
        let mut data = vec![0f32; count];
        for (i, chunk) in bytes[data_start..end].chunks_exact(4).enumerate() {
            let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if little {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            let (file_y, x) = (i / row, i % row);
            data[(height - 1 - file_y) * row + x] = v;
        }
        frames.push(PfmFrame {
            width,
            height,
            channels,
            data,
        });
        pos = end;
    }
    Ok(frames)
}

pub fn save_frames(path: &Path, frames: &[PfmFrame]) -> Result<()> {
    std::fs::write(path, encode_frames(frames))?;
    Ok(())
}

pub fn load_frames(path: &Path) -> Result<Vec<PfmFrame>> {
    parse_frames(&std::fs::read(path)?)
}

pub fn save_depth(path: &Path, depth: &Grid<f64>) -> Result<()> {
    save_frames(path, &[PfmFrame::from_gray(depth)])
}

pub fn load_depth(path: &Path) -> Result<Grid<f64>> {
    let frames = load_frames(path)?;
    match frames.as_slice() {
        [f] => f.to_gray(),
        _ => Err(Error::invalid(format!(
            "expected one depth frame, found {}",
            frames.len()
        ))),
    }
}

/// One grey frame per latent channel, in trajectory order.
pub fn trajectory_frames(traj: &Trajectory) -> Vec<PfmFrame> {
    let mut frames = Vec::new();
    for latent in &traj.latents {
        let (c, h, w) = latent.data.shape();
        for ch in 0..c {
            frames.push(PfmFrame {
                width: w,
                height: h,
                channels: 1,
                data: latent.data.plane(ch).iter().map(|&v| v as f32).collect(),
            });
        }
    }
    frames
}

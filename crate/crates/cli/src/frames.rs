//! Video I/O: raw tensor files and binary 8-bit PPM frames.

use std::fs;
use std::path::{Path, PathBuf};

use fgst::numerics::io;
use fgst::Tensor;

use crate::error::CliError;

/// How a video was stored, so results can be written back the same way.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoFormat {
    /// One `[T, 3, H, W]` tensor file.
    Tensor,
    /// A directory of per-frame files.
    PpmFrames,
    FgtFrames,
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(format!("{}: {msg}", path.display()))
}

/// Parses a binary PPM with maxval 255 into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("expected P6, got {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval is {maxval}"));
    }
    // exactly one whitespace byte separates the header from the pixels
    let body = &bytes[(pos + 1).min(bytes.len())..];
    if body.len() != 3 * w * h {
        return Err(format!("expected {} pixel bytes, found {}", 3 * w * h, body.len()));
    }
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (p, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).map_err(|e| e.to_string())
}

/// Encodes a `[3, H, W]` tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>, CliError> {
    let (c, h, w) = frame.dims3()?;
    if c != 3 {
        return Err(CliError::Validation(format!("PPM frames need 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = frame.data();
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn frame_files(dir: &Path) -> Result<(Vec<PathBuf>, VideoFormat), CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(format!("reading {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    let ext = |p: &Path, e: &str| p.extension().is_some_and(|x| x == e);
    let ppm: Vec<PathBuf> = files.iter().filter(|p| ext(p, "ppm")).cloned().collect();
    let fgt: Vec<PathBuf> = files.iter().filter(|p| ext(p, "fgt")).cloned().collect();
    match (ppm.is_empty(), fgt.is_empty()) {
        (false, true) => Ok((ppm, VideoFormat::PpmFrames)),
        (true, false) => Ok((fgt, VideoFormat::FgtFrames)),
        (true, true) => Err(bad(dir, "no .ppm or .fgt frames")),
        (false, false) => Err(bad(dir, "mixes .ppm and .fgt frames")),
    }
}

fn read_frame(path: &Path, format: VideoFormat) -> Result<Tensor, CliError> {
    let bytes = fs::read(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    match format {
        VideoFormat::PpmFrames => decode_ppm(&bytes).map_err(|m| bad(path, m)),
        _ => io::decode(&bytes).map_err(|e| bad(path, e)),
    }
}

/// Reads a video as `[T, 3, H, W]`: a tensor file (`[T, 3, H, W]` or a single
/// `[3, H, W]` frame), a single PPM, or a directory of frames in file-name
/// order.
pub fn read_video(path: &Path) -> Result<(Tensor, VideoFormat), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("input {} does not exist", path.display())));
    }
    let (frames, format) = if path.is_dir() {
        let (files, format) = frame_files(path)?;
        let frames = files.iter().map(|f| read_frame(f, format)).collect::<Result<Vec<_>, _>>()?;
        (frames, format)
    } else if path.extension().is_some_and(|e| e == "ppm") {
        (vec![read_frame(path, VideoFormat::PpmFrames)?], VideoFormat::PpmFrames)
    } else {
        let t = read_frame(path, VideoFormat::Tensor)?;
        match t.rank() {
            4 => (
                (0..t.shape()[0]).map(|i| t.slice_outer(i)).collect::<Result<Vec<_>, _>>()?,
                VideoFormat::Tensor,
            ),
            3 => (vec![t], VideoFormat::Tensor),
            r => return Err(bad(path, format!("expected a rank 3 or 4 tensor, got rank {r}"))),
        }
    };
    let shape = frames[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(bad(path, format!("frames must be [3, H, W], got {shape:?}")));
    }
    if let Some(f) = frames.iter().find(|f| f.shape() != shape.as_slice()) {
        return Err(bad(path, format!("frame shapes differ: {:?} vs {shape:?}", f.shape())));
    }
    Ok((Tensor::stack(&frames)?, format))
}

/// Writes `video` under `dir` with base name `stem`, in `format`. Returns the
/// path written.
pub fn write_video(dir: &Path, stem: &str, video: &Tensor, format: VideoFormat) -> Result<PathBuf, CliError> {
    let (frames, _, _, _) = video.dims4()?;
    match format {
        VideoFormat::Tensor => {
            let path = dir.join(format!("{stem}.fgt"));
            io::save(&path, video)?;
            Ok(path)
        }
        VideoFormat::PpmFrames | VideoFormat::FgtFrames => {
            let sub = dir.join(stem);
            fs::create_dir_all(&sub).map_err(CliError::io(format!("creating {}", sub.display())))?;
            for t in 0..frames {
                let frame = video.slice_outer(t)?;
                if format == VideoFormat::PpmFrames {
                    let path = sub.join(format!("frame_{t:04}.ppm"));
                    fs::write(&path, encode_ppm(&frame)?).map_err(CliError::io(format!("writing {}", path.display())))?;
                } else {
                    io::save(sub.join(format!("frame_{t:04}.fgt")), &frame)?;
                }
            }
            Ok(sub)
        }
    }
}

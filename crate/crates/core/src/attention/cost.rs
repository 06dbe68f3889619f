use crate::error::{arg_err, Result};

/// Attention variant whose cost is being counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Global,
    Fgs { r: usize },
    Fgsw { r: usize, window: usize },
}

/// Closed-form multiply-accumulate count over `frames * height * width` tokens
/// of `channels` channels.
pub fn mac_count(kind: AttentionKind, frames: usize, height: usize, width: usize, channels: usize) -> u64 {
    let n = (frames * height * width) as u64;
    let c = channels as u64;
    match kind {
        AttentionKind::Global => 4 * n * c * c + 2 * n * n * c,
        AttentionKind::Fgs { r } => {
            let r = r as u64;
            2 * n * c * (2 * (r + 1) * c + 2 * r + 1)
        }
        AttentionKind::Fgsw { r, window } => {
            let (r, m) = (r as u64, window as u64);
            2 * n * c * (c + (2 * r + 1) * (c + m * m))
        }
    }
}

/// Side length of the region a window can draw keys from under flows of at
/// most `max_abs_flow` pixels.
pub fn receptive_extent(max_abs_flow: usize, window: usize) -> Result<usize> {
    if window.is_multiple_of(2) {
        return arg_err(format!("window size must be odd, got {window}"));
    }
    Ok(2 * max_abs_flow + window)
}

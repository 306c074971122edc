use crate::error::{Error, Result};

use super::{Frame, FrameSequence};

/// Frame indices of the `2N+1` window centred on every position of a clip
/// of `len` frames, replicating the first/last frame past either end.
pub fn window_indices(len: usize, radius: usize) -> Vec<Vec<usize>> {
    (0..len)
        .map(|t| {
            (0..=2 * radius)
                .map(|j| (t as isize + j as isize - radius as isize).clamp(0, len as isize - 1) as usize)
                .collect()
        })
        .collect()
}

/// One sequence per frame of `frames`, optionally paired with the matching
/// high-resolution targets.
pub fn window_clip(frames: &[Frame], targets: Option<&[Frame]>, radius: usize, scale: usize) -> Result<Vec<FrameSequence>> {
    if frames.is_empty() {
        return Err(Error::invalid("window_clip", "empty clip"));
    }
    if let Some(t) = targets {
        if t.len() != frames.len() {
            return Err(Error::shape("window_clip", format!("{} targets for {} frames", t.len(), frames.len())));
        }
    }
    window_indices(frames.len(), radius)
        .into_iter()
        .enumerate()
        .map(|(t, idx)| {
            let lr = idx.iter().map(|&i| frames[i].clone()).collect();
            FrameSequence::new(lr, targets.map(|ts| ts[t].clone()), radius, scale)
        })
        .collect()
}

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use super::{degrade, eval_frames, mod_crop, EvalProtocol, Report, Upscaler};
use crate::error::{Error, Result};
use crate::pipeline::io::{list_clips, list_frames, read_png, write_png};
use crate::pipeline::{window_clip, Frame};

/// Where low-resolution inputs come from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DegradeMode {
    /// Cubic downscaling of the ground truth at load time.
    On,
    /// Frames with the same names under the `<root>_lr/<clip>` mirror.
    Precomputed,
}

impl FromStr for DegradeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(DegradeMode::On),
            "precomputed" => Ok(DegradeMode::Precomputed),
            _ => Err(Error::invalid("degrade", format!("unknown mode `{s}` (expected on|precomputed)"))),
        }
    }
}

fn lr_mirror(hr_clip: &Path) -> Result<PathBuf> {
    let name = hr_clip.file_name().ok_or_else(|| Error::format(hr_clip, "clip path has no name"))?;
    let root = hr_clip.parent().ok_or_else(|| Error::format(hr_clip, "clip has no dataset root"))?;
    let mut mirror = root.as_os_str().to_owned();
    mirror.push("_lr");
    Ok(PathBuf::from(mirror).join(name))
}

/// Reads a ground-truth clip and its low-resolution inputs. Ground truth is
/// cropped to a multiple of `scale`.
pub fn load_clip(hr_dir: &Path, mode: DegradeMode, scale: usize) -> Result<(Vec<Frame>, Vec<Frame>)> {
    let paths = list_frames(hr_dir)?;
    let hr = paths.iter().map(|p| read_png(p).and_then(|f| mod_crop(&f, scale))).collect::<Result<Vec<_>>>()?;
    let lr = match mode {
        DegradeMode::On => hr.iter().map(|f| degrade(f, scale)).collect::<Result<Vec<_>>>()?,
        DegradeMode::Precomputed => {
            let dir = lr_mirror(hr_dir)?;
            paths
                .iter()
                .zip(&hr)
                .map(|(p, gt)| {
                    let lp = dir.join(p.file_name().expect("listed files have names"));
                    let f = read_png(&lp)?;
                    if (f.height() * scale, f.width() * scale) != (gt.height(), gt.width()) {
                        return Err(Error::format(
                            &lp,
                            format!("{}x{} is not 1/{scale} of the {}x{} target", f.height(), f.width(), gt.height(), gt.width()),
                        ));
                    }
                    Ok(f)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok((lr, hr))
}

fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let clips = list_clips(root)?;
    if clips.is_empty() {
        // a bare clip directory
        list_frames(root)?;
        return Ok(vec![root.to_path_buf()]);
    }
    Ok(clips)
}

fn clip_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string())
}

/// Scores every clip under `root` (or `root` itself when it holds frames).
/// Clips run in parallel; the report lists them in name order.
pub fn eval_dataset(up: &Upscaler, root: &Path, mode: DegradeMode, proto: &EvalProtocol) -> Result<Report> {
    let clips = clip_dirs(root)?
        .par_iter()
        .map(|dir| {
            let (lr, hr) = load_clip(dir, mode, up.scale())?;
            eval_frames(up, &clip_name(dir), &lr, &hr, proto)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { clips })
}

/// Upscales every frame of a low-resolution clip into `out_dir`, keeping
/// file names. Returns the number of frames written.
pub fn infer(up: &Upscaler, clip_dir: &Path, out_dir: &Path) -> Result<usize> {
    let paths = list_frames(clip_dir)?;
    let frames = paths.iter().map(|p| read_png(p)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (seq, p) in window_clip(&frames, None, up.radius(), up.scale())?.iter().zip(&paths) {
        let sr = up.upscale(seq)?;
        write_png(&out_dir.join(p.file_name().expect("listed files have names")), &sr)?;
    }
    Ok(paths.len())
}

/// Writes cubic `1/scale` versions of every frame under `input` (a clip or
/// a dataset root) to `out`, mirroring the directory layout.
pub fn degrade_dir(input: &Path, out: &Path, scale: usize) -> Result<usize> {
    let clips = list_clips(input)?;
    let jobs: Vec<(PathBuf, PathBuf)> = if clips.is_empty() {
        vec![(input.to_path_buf(), out.to_path_buf())]
    } else {
        clips.iter().map(|c| (c.clone(), out.join(c.file_name().expect("clip dirs have names")))).collect()
    };
    let mut count = 0;
    for (src, dst) in jobs {
        std::fs::create_dir_all(&dst).map_err(|e| Error::io(&dst, e))?;
        for p in list_frames(&src)? {
            let hr = mod_crop(&read_png(&p)?, scale)?;
            write_png(&dst.join(p.file_name().expect("listed files have names")), &degrade(&hr, scale)?)?;
            count += 1;
        }
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::io::write_clip;
    use crate::tensor::Tensor;

    fn hr_clip(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|k| Frame::rgb(Tensor::from_fn(&[3, 48, 52], |i| (((i + k) * 7) % 31) as f64 / 30.0)).unwrap())
            .collect()
    }

    #[test]
    fn precomputed_matches_on_the_fly() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("set");
        write_clip(&root.join("a"), &hr_clip(6)).unwrap();
        assert_eq!(degrade_dir(&root, &tmp.path().join("set_lr"), 4).unwrap(), 6);
        let up = Upscaler::Bicubic { scale: 4 };
        let proto = EvalProtocol::default();
        let on = eval_dataset(&up, &root, DegradeMode::On, &proto).unwrap();
        let pre = eval_dataset(&up, &root, DegradeMode::Precomputed, &proto).unwrap();
        assert_eq!(on, pre);
        assert_eq!(on.clips[0].frames.len(), 2);
        assert_eq!(on.clips[0].name, "a");
    }

    #[test]
    fn infer_writes_every_frame() {
        let tmp = tempfile::tempdir().unwrap();
        let lr: Vec<Frame> = hr_clip(3).iter().map(|f| degrade(f, 4).unwrap()).collect();
        write_clip(&tmp.path().join("in"), &lr).unwrap();
        let up = Upscaler::Bicubic { scale: 4 };
        assert_eq!(infer(&up, &tmp.path().join("in"), &tmp.path().join("out")).unwrap(), 3);
        let out = list_frames(&tmp.path().join("out")).unwrap();
        assert_eq!(out.len(), 3);
        let f = read_png(&out[0]).unwrap();
        assert_eq!((f.height(), f.width()), (48, 52));
        assert!(load_clip(&tmp.path().join("missing"), DegradeMode::On, 4).unwrap_err().to_string().contains("missing"));
    }
}

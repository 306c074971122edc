//! On-disk checkpoints: a directory holding a text manifest and one blob
//! file.
//!
//! ```text
//! dnln-checkpoint 1
//! [config]
//! channels=8
//! ...
//! [state]
//! step=200
//! [tensors]
//! param extract.conv0.weight 4 8 3 3 3 0
//! adam.m extract.conv0.weight 4 8 3 3 3 1748
//! ```
//!
//! Each tensor record is `kind name rank extents... offset`, where `offset`
//! is the byte position of the tensor's blob (header included) inside
//! `tensors.bin`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{parse_kv, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::train::AdamState;

pub const MANIFEST: &str = "manifest.txt";
pub const BLOBS: &str = "tensors.bin";
const MAGIC: &str = "dnln-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    /// Free-form training state (`step`, `loss`, ...).
    pub state: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamStore) -> Self {
        Checkpoint { config, params, adam: None, state: BTreeMap::new() }
    }

    /// Serialises to `(manifest, blobs)`.
    pub fn encode(&self) -> (String, Vec<u8>) {
        let mut manifest = format!("{MAGIC}\n[config]\n{}", self.config.to_kv());
        let mut state = self.state.clone();
        if let Some(a) = &self.adam {
            state.insert("adam.step".into(), a.step.to_string());
            state.insert("adam.lr".into(), format!("{:?}", a.lr));
            state.insert("adam.beta1".into(), format!("{:?}", a.beta1));
            state.insert("adam.beta2".into(), format!("{:?}", a.beta2));
            state.insert("adam.eps".into(), format!("{:?}", a.eps));
        }
        manifest.push_str("[state]\n");
        for (k, v) in &state {
            writeln!(manifest, "{k}={v}").unwrap();
        }
        manifest.push_str("[tensors]\n");

        let mut blobs = Vec::new();
        let mut record = |kind: &str, name: &str, t: &Tensor| {
            let extents: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(manifest, "{kind} {name} {} {} {}", t.rank(), extents.join(" "), blobs.len()).unwrap();
            t.write_blob(&mut blobs).expect("writing to memory");
        };
        for (name, t) in self.params.iter() {
            record("param", name, t);
        }
        if let Some(a) = &self.adam {
            for (name, t) in &a.m {
                record("adam.m", name, t);
            }
            for (name, t) in &a.v {
                record("adam.v", name, t);
            }
        }
        (manifest, blobs)
    }

    pub fn decode(manifest: &str, blobs: &[u8], path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path.join(MANIFEST), d);
        let mut lines = manifest.lines();
        if lines.next() != Some(MAGIC) {
            return Err(bad("missing checkpoint header".into()));
        }
        let mut section = "";
        let (mut config_text, mut state_text) = (String::new(), String::new());
        let mut records = Vec::new();
        for line in lines {
            match line {
                "[config]" | "[state]" | "[tensors]" => section = line,
                _ if section == "[config]" => writeln!(config_text, "{line}").unwrap(),
                _ if section == "[state]" => writeln!(state_text, "{line}").unwrap(),
                _ if section == "[tensors]" => records.push(line),
                _ => return Err(bad(format!("line outside any section: `{line}`"))),
            }
        }
        let config = ModelConfig::from_kv(&config_text).map_err(|e| bad(e.to_string()))?;
        let mut state: BTreeMap<String, String> =
            parse_kv(&state_text).map_err(|e| bad(e.to_string()))?.into_iter().collect();

        let mut params = ParamStore::new();
        let (mut m, mut v) = (BTreeMap::new(), BTreeMap::new());
        for rec in records {
            let fields: Vec<&str> = rec.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}` in `{rec}`")));
            if fields.len() < 4 {
                return Err(bad(format!("short tensor record `{rec}`")));
            }
            let (kind, name, rank) = (fields[0], fields[1], num(fields[2])?);
            if fields.len() != 4 + rank {
                return Err(bad(format!("tensor record `{rec}` does not match rank {rank}")));
            }
            let extents = fields[3..3 + rank].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
            let offset = num(fields[3 + rank])?;
            let t = blobs
                .get(offset..)
                .and_then(|b| Tensor::read_blob(&mut Cursor::new(b)).ok())
                .ok_or_else(|| Error::format(path.join(BLOBS), format!("truncated blob for `{name}` at {offset}")))?;
            if t.shape() != extents.as_slice() {
                return Err(Error::format(
                    path.join(BLOBS),
                    format!("blob for `{name}` is {:?}, manifest says {extents:?}", t.shape()),
                ));
            }
            let slot = match kind {
                "param" => {
                    if params.get(name).is_some() {
                        return Err(bad(format!("duplicate parameter `{name}`")));
                    }
                    params.insert(name, t);
                    continue;
                }
                "adam.m" => &mut m,
                "adam.v" => &mut v,
                _ => return Err(bad(format!("unknown tensor kind `{kind}`"))),
            };
            if slot.insert(name.to_string(), t).is_some() {
                return Err(bad(format!("duplicate {kind} `{name}`")));
            }
        }

        let adam = match state.remove("adam.step") {
            Some(step) => {
                let mut take = |k: &str| -> Result<f64> {
                    let s = state.remove(k).ok_or_else(|| bad(format!("missing `{k}`")))?;
                    s.parse().map_err(|_| bad(format!("bad value `{s}` for `{k}`")))
                };
                let (lr, beta1, beta2, eps) = (take("adam.lr")?, take("adam.beta1")?, take("adam.beta2")?, take("adam.eps")?);
                let step = step.parse().map_err(|_| bad(format!("bad adam.step `{step}`")))?;
                Some(AdamState { m, v, step, lr, beta1, beta2, eps })
            }
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(bad("optimizer moments without adam.step".into())),
        };
        Ok(Checkpoint { config, params, adam, state })
    }

    /// Writes `dir/manifest.txt` and `dir/tensors.bin`, creating `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blobs) = self.encode();
        write_atomic(&dir.join(BLOBS), &blobs)?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOBS);
        let blobs = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        Self::decode(&manifest, &blobs, dir)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    tmp.set_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dnln;
    use crate::train::adam_step;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig::desk();
        let model = Dnln::new(cfg.clone()).unwrap();
        let mut params = model.init_params(3);
        for (_, t) in params.iter_mut() {
            let g = vec![0.01; t.numel()];
            t.accumulate_grad(&g);
        }
        let mut adam = AdamState::new(1e-3);
        adam_step(&mut params, &mut adam).unwrap();
        params.zero_grad();
        let mut ck = Checkpoint::new(cfg, params);
        ck.adam = Some(adam);
        ck.state.insert("step".into(), "1".into());
        ck
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample();
        ck.save(dir.path()).unwrap();
        let loaded = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(loaded, ck);
        let again = tempfile::tempdir().unwrap();
        loaded.save(again.path()).unwrap();
        for f in [MANIFEST, BLOBS] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap());
        }
    }

    #[test]
    fn errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err();
        assert!(err.is_io() && err.to_string().contains(MANIFEST));

        let ck = sample();
        ck.save(dir.path()).unwrap();
        let blobs = fs::read(dir.path().join(BLOBS)).unwrap();
        fs::write(dir.path().join(BLOBS), &blobs[..blobs.len() / 2]).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains(BLOBS), "{err}");
    }

    #[test]
    fn every_parameter_once() {
        let (manifest, _) = sample().encode();
        let names: Vec<&str> =
            manifest.lines().filter(|l| l.starts_with("param ")).map(|l| l.split(' ').nth(1).unwrap()).collect();
        let set: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let model = Dnln::new(ModelConfig::desk()).unwrap();
        assert_eq!(names.len(), model.param_names().len());
    }
}

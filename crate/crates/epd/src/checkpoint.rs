//! Versioned checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json  format tag, version, stage, ablation, config hash, frame
//! <dir>/config.txt     canonical `key = value` configuration
//! <dir>/params.bin     named parameter blocks
//! <dir>/buffer.bin     replay buffer dump
//! <dir>/schedule.csv   t, beta, alpha, alpha_bar, sigma
//! ```
//!
//! `params.bin` is `EPDPARAM`, a `u32` version and a `u32` block count,
//! then per block: `u32` name length, UTF-8 name, `u8` group, `u32` rank,
//! `u64` per dimension and the values as little-endian `f64`.
//! `buffer.bin` is `EPDBUFFR`, a `u32` version, then `u64` capacity, size,
//! cursor and dimension followed by `size * dim` little-endian `f64`.
//! Every file is written to a temporary name first and renamed into place.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use epd_core::config::TrainConfig;
use epd_core::energy::BufferSnapshot;
use epd_core::params::Group;
use epd_core::pipeline::{EpdModel, Stage};
use epd_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const FORMAT: &str = "epd-checkpoint";
pub const VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 8] = b"EPDPARAM";
const BUFFER_MAGIC: &[u8; 8] = b"EPDBUFFR";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub stage: String,
    pub ablation: String,
    /// 16 hex digits of the configuration hash.
    pub config_hash: String,
    pub parameters: usize,
    pub buffer_size: usize,
    /// Coordinate frame the model was trained in.
    pub normalization: String,
}

/// Windows are translated so the last observed ego position is the origin.
pub const NORMALIZATION: &str = "ego-last-observation-origin";

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

fn hash_hex(h: u64) -> String {
    format!("{h:016x}")
}

fn encode_params(model: &EpdModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAM_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(Group::ALL.iter().position(|g| *g == p.group).expect("known group") as u8);
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.path, "size out of range"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "size out of range"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.path, "bad magic"));
        }
        let v = self.u32()?;
        if v != VERSION {
            return Err(Error::format(self.path, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.path, "trailing bytes"));
        }
        Ok(())
    }
}

fn decode_params(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.header(PARAM_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "parameter name is not UTF-8"))?
            .to_string();
        let group = r.take(1)?[0];
        if group as usize >= Group::ALL.len() {
            return Err(Error::format(path, format!("`{name}`: unknown group {group}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::format(path, "size out of range"))?;
        let data = r.f64s(n)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(epd_core::error::Error::NonFinite(format!("parameter `{name}` in {}", path.display())).into());
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    r.finish()?;
    Ok(out)
}

fn encode_buffer(s: &BufferSnapshot) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BUFFER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [s.capacity, s.size, s.cursor, s.dim] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in &s.slots {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_buffer(path: &Path, bytes: &[u8]) -> Result<BufferSnapshot> {
    let mut r = Reader { path, bytes, pos: 0 };
    r.header(BUFFER_MAGIC)?;
    let (capacity, size, cursor, dim) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    let n = size.checked_mul(dim).ok_or_else(|| Error::format(path, "size out of range"))?;
    let slots = r.f64s(n)?;
    r.finish()?;
    Ok(BufferSnapshot {
        capacity,
        size,
        cursor,
        dim,
        slots,
    })
}

fn schedule_csv(model: &EpdModel) -> String {
    let s = &model.schedule;
    let mut out = String::from("t,beta,alpha,alpha_bar,sigma\n");
    for t in 1..=s.steps() {
        out.push_str(&format!("{t},{:?},{:?},{:?},{:?}\n", s.beta(t), s.alpha(t), s.alpha_bar(t), s.sigma(t)));
    }
    out
}

/// Writes `model` to `dir`, creating it if needed.
pub fn save(model: &EpdModel, dir: &Path) -> Result<()> {
    if !model.store.all_finite() {
        return Err(epd_core::error::Error::NonFinite("refusing to save non-finite parameters".into()).into());
    }
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let snapshot = model.buffer.snapshot();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        stage: model.stage.name().into(),
        ablation: model.config.ablation.label().into(),
        config_hash: hash_hex(model.config.hash()),
        parameters: model.store.len(),
        buffer_size: snapshot.size,
        normalization: NORMALIZATION.into(),
    };
    let mut m = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    m.push('\n');
    write_atomic(&dir.join("config.txt"), model.config.render().as_bytes())?;
    write_atomic(&dir.join("params.bin"), &encode_params(model))?;
    write_atomic(&dir.join("buffer.bin"), &encode_buffer(&snapshot))?;
    write_atomic(&dir.join("schedule.csv"), schedule_csv(model).as_bytes())?;
    write_atomic(&dir.join("manifest.json"), m.as_bytes())
}

fn read(path: PathBuf) -> Result<Vec<u8>> {
    let mut f = fs::File::open(&path).map_err(Error::io(&path))?;
    let mut v = Vec::new();
    f.read_to_end(&mut v).map_err(Error::io(&path))?;
    Ok(v)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let m: Manifest = serde_json::from_slice(&read(path.clone())?).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(&path, format!("not a checkpoint (`{}`)", m.format)));
    }
    if m.version != VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", m.version)));
    }
    Ok(m)
}

/// Loads and cross-checks a checkpoint directory.
pub fn load(dir: &Path) -> Result<EpdModel> {
    let manifest = read_manifest(dir)?;
    let cfg_path = dir.join("config.txt");
    let text = String::from_utf8(read(cfg_path.clone())?).map_err(|_| Error::format(&cfg_path, "not UTF-8"))?;
    let config = TrainConfig::parse(&text)?;
    if hash_hex(config.hash()) != manifest.config_hash {
        return Err(Error::format(&cfg_path, "configuration does not match the manifest hash"));
    }
    let params_path = dir.join("params.bin");
    let params = decode_params(&params_path, &read(params_path.clone())?)?;
    let buf_path = dir.join("buffer.bin");
    let buffer = decode_buffer(&buf_path, &read(buf_path.clone())?)?;
    let stage = Stage::from_name(&manifest.stage)?;
    let model = EpdModel::from_parts(config, &params, &buffer, stage)?;
    let sched_path = dir.join("schedule.csv");
    let stored = String::from_utf8(read(sched_path.clone())?).map_err(|_| Error::format(&sched_path, "not UTF-8"))?;
    if stored != schedule_csv(&model) {
        return Err(Error::format(&sched_path, "schedule does not match the configuration"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EpdModel {
        let cfg = TrainConfig::parse(
            "td.hidden = 4\ntd.fuse = 4\ngg.hidden = 4\ngg.feature = 4\nenergy.hidden = 4\nenergy.encoder_hidden = 4\n\
             denoiser.d_model = 4\ndenoiser.time_dim = 4\ndenoiser.ffn = 4\ndenoiser.layers = 1\nenergy.buffer_capacity = 5\n",
        )
        .unwrap();
        let mut m = EpdModel::new(cfg).unwrap();
        for i in 0..7 {
            m.buffer.push(&vec![i as f64 * 0.5; 60]).unwrap();
        }
        m.stage = Stage::Sc;
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let m = tiny();
        save(&m, tmp.path()).unwrap();
        let back = load(tmp.path()).unwrap();
        assert_eq!(back.store, m.store);
        assert_eq!(back.buffer, m.buffer);
        assert_eq!(back.stage, Stage::Sc);
        assert_eq!(back.config, m.config);
        let manifest = read_manifest(tmp.path()).unwrap();
        assert_eq!(manifest.buffer_size, 5);
        assert_eq!(manifest.stage, "sc");
        // saving again yields identical bytes
        let tmp2 = tempfile::tempdir().unwrap();
        save(&back, tmp2.path()).unwrap();
        for f in ["manifest.json", "config.txt", "params.bin", "buffer.bin", "schedule.csv"] {
            assert_eq!(fs::read(tmp.path().join(f)).unwrap(), fs::read(tmp2.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn tampering_is_detected() {
        let tmp = tempfile::tempdir().unwrap();
        save(&tiny(), tmp.path()).unwrap();
        let cfg = tmp.path().join("config.txt");
        let text = fs::read_to_string(&cfg).unwrap().replace("seed = 0", "seed = 1");
        fs::write(&cfg, text).unwrap();
        assert!(matches!(load(tmp.path()), Err(Error::Format { .. })));

        save(&tiny(), tmp.path()).unwrap();
        let p = tmp.path().join("params.bin");
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, &bytes).unwrap();
        let e = load(tmp.path()).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");

        save(&tiny(), tmp.path()).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        let n = bytes.len();
        bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert_eq!(load(tmp.path()).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn missing_directory_is_a_data_error() {
        let e = load(Path::new("/definitely/not/here")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}

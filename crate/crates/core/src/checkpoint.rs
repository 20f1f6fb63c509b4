//! Binary checkpoints of a [`TrainState`].
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "NTIR2DC\0"
//! version  u32
//! iteration u64
//! rng      seed [u8; 32], stream u64, word_pos u128
//! config   u32 length + UTF-8 `key = value` text
//! adam     step of the generator optimizer u64, of the discriminator u64
//! tensors  u32 count, then per tensor:
//!          section u8, name (u32 length + UTF-8), rank u32, dims u64 × rank,
//!          values f64 × product(dims)
//! ```
//!
//! Values are widened to `f64`, which is exact for `f32` states, so a
//! reload reproduces the saved state bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"NTIR2DC\0";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 8] = ["gen", "gen_buffer", "disc", "disc_buffer", "adam_g_m", "adam_g_v", "adam_d_m", "adam_d_v"];

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, section: u8, name: &str, t: &Tensor<T>) {
    buf.push(section);
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_f64c().to_le_bytes());
    }
}

/// Serializes `state`.
pub fn to_bytes<T: Scalar>(state: &TrainState<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&state.iteration.to_le_bytes());
    buf.extend_from_slice(&state.rng.get_seed());
    buf.extend_from_slice(&state.rng.get_stream().to_le_bytes());
    buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    let cfg = state.cfg.to_kv();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    buf.extend_from_slice(&state.opt_g.step.to_le_bytes());
    buf.extend_from_slice(&state.opt_d.step.to_le_bytes());

    let groups: [Vec<(&String, &Tensor<T>)>; 8] = [
        state.gen.params().collect(),
        state.gen.buffers().collect(),
        state.disc.params().collect(),
        state.disc.buffers().collect(),
        state.opt_g.m.iter().collect(),
        state.opt_g.v.iter().collect(),
        state.opt_d.m.iter().collect(),
        state.opt_d.v.iter().collect(),
    ];
    let count: usize = groups.iter().map(Vec::len).sum();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (section, group) in groups.iter().enumerate() {
        for (name, t) in group {
            put_tensor(&mut buf, section as u8, name, t);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }
}

/// Checks that `loaded` has exactly the names and shapes of `expected`.
fn check_names<'a, T: Scalar + 'a>(
    what: &str,
    expected: impl Iterator<Item = (&'a String, &'a Tensor<T>)>,
    loaded: &BTreeMap<String, Tensor<T>>,
) -> Result<()> {
    let expected: BTreeMap<&String, &[usize]> = expected.map(|(k, v)| (k, v.shape())).collect();
    if expected.len() != loaded.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {} tensors, found {}",
            expected.len(),
            loaded.len()
        )));
    }
    for (name, t) in loaded {
        match expected.get(name) {
            Some(&shape) if shape == t.shape() => {}
            Some(shape) => {
                return Err(Error::Checkpoint(format!("{what} `{name}`: shape {:?}, expected {shape:?}", t.shape())))
            }
            None => return Err(Error::Checkpoint(format!("{what}: unexpected tensor `{name}`"))),
        }
    }
    Ok(())
}

/// Deserializes a state written by [`to_bytes`].
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<TrainState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| Error::Checkpoint("bad magic: file too short".into()))? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: VERSION });
    }
    let iteration = r.u64()?;
    let seed: [u8; 32] = r.array()?;
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    let cfg = TrainConfig::from_text(&r.string()?)?;
    let step_g = r.u64()?;
    let step_d = r.u64()?;

    let mut groups: [BTreeMap<String, Tensor<T>>; 8] = Default::default();
    let count = r.u32()?;
    for _ in 0..count {
        let section = r.u8()? as usize;
        if section >= SECTIONS.len() {
            return Err(Error::Checkpoint(format!("unknown section {section}")));
        }
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > bytes.len() - r.pos) {
            return Err(Error::Checkpoint(format!("truncated: tensor `{name}` needs {n} values")));
        }
        let data = (0..n).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
        groups[section].insert(name, Tensor::from_vec(&shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut state = TrainState::<T>::new(cfg)?;
    let [gen_p, gen_b, disc_p, disc_b, gm, gv, dm, dv] = groups;
    check_names(SECTIONS[0], state.gen.params(), &gen_p)?;
    check_names(SECTIONS[1], state.gen.buffers(), &gen_b)?;
    check_names(SECTIONS[2], state.disc.params(), &disc_p)?;
    check_names(SECTIONS[3], state.disc.buffers(), &disc_b)?;
    for (what, m) in [(SECTIONS[4], &gm), (SECTIONS[5], &gv)] {
        if let Some(name) = m.keys().find(|k| !state.gen.contains_param(k)) {
            return Err(Error::Checkpoint(format!("{what}: unknown parameter `{name}`")));
        }
    }
    for (what, m) in [(SECTIONS[6], &dm), (SECTIONS[7], &dv)] {
        if let Some(name) = m.keys().find(|k| !state.disc.contains_param(k)) {
            return Err(Error::Checkpoint(format!("{what}: unknown parameter `{name}`")));
        }
    }
    let store = |params: BTreeMap<String, Tensor<T>>, buffers: BTreeMap<String, Tensor<T>>| {
        let mut s = ParamStore::new();
        params.into_iter().for_each(|(k, v)| s.insert_param(k, v));
        buffers.into_iter().for_each(|(k, v)| s.insert_buffer(k, v));
        s
    };
    state.gen = store(gen_p, gen_b);
    state.disc = store(disc_p, disc_b);
    state.opt_g.step = step_g;
    state.opt_g.m = gm;
    state.opt_g.v = gv;
    state.opt_d.step = step_d;
    state.opt_d.m = dm;
    state.opt_d.v = dv;
    state.iteration = iteration;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    Ok(state)
}

pub fn save<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, to_bytes(state)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<TrainState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state() -> TrainState<f32> {
        let mut cfg = TrainConfig::desk();
        cfg.generator.n_res_enc = 1;
        cfg.generator.n_res_dec = 1;
        cfg.seed = 5;
        TrainState::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut s = tiny_state();
        s.iteration = 17;
        s.opt_g.step = 3;
        let name = s.gen.params().next().unwrap().0.clone();
        let shape = s.gen.param(&name).shape().to_vec();
        s.opt_g.m.insert(name.clone(), Tensor::full(&shape, 0.25));
        s.opt_g.v.insert(name, Tensor::full(&shape, 1e-7));
        let _: u64 = rand::Rng::random(&mut s.rng);
        let back = from_bytes::<f32>(&to_bytes(&s)).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&s));
        assert_eq!(back.iteration, 17);
        assert_eq!(back.rng, s.rng);
        assert_eq!(back.cfg, s.cfg);
    }

    #[test]
    fn corrupt_and_truncated_files_are_rejected() {
        let bytes = to_bytes(&tiny_state());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes::<f32>(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(from_bytes::<f32>(&v2), Err(Error::CheckpointVersion { found: 2, expected: 1 })));
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(from_bytes::<f32>(cut), Err(Error::Checkpoint(m)) if m.contains("truncated")));
        assert!(from_bytes::<f32>(&bytes[..4]).is_err());
    }
}

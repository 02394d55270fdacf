//! Binary checkpoints of the network and, optionally, the full trainer.
//!
//! Layout: magic, format version, the network config as `key=value` text,
//! the network parameters, then a flag byte and the trainer state. Values
//! that live in `f64` (weighter, Adam moments, loss statistics) are stored
//! at full precision so a resumed run continues bit-for-bit.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::aux_weighter::{AuxNet, LossStats};
use crate::error::{Error, Result};
use crate::losses::TASKS;
use crate::optim::{AdamState, TrainConfig, Trainer};
use crate::segnet::{NetworkConfig, SegNet};
use crate::tensor::{read_u64, Tensor};

const MAGIC: &[u8; 8] = b"SIAMSEG\0";
const VERSION: u32 = 1;

/// Contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub net: SegNet,
    pub trainer: Option<Trainer>,
}

impl Checkpoint {
    /// Rejects a checkpoint whose configs differ from the expected ones,
    /// naming every mismatched field.
    pub fn check_config(&self, path: &Path, network: &NetworkConfig, training: Option<&TrainConfig>) -> Result<()> {
        let mut diffs = self.net.config().diff(network);
        if let (Some(t), Some(expected)) = (&self.trainer, training) {
            diffs.extend(t.config.diff(expected));
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint {
                path: path.to_path_buf(),
                detail: format!("config mismatch (checkpoint vs expected): {}", diffs.join(", ")),
            })
        }
    }
}

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    put_u64(w, v.len() as u64)?;
    v.iter().try_for_each(|&x| put_f64(w, x))
}

fn put_text(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    put_u64(w, s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn put_tensor64(w: &mut impl Write, t: &Tensor<f64>) -> std::io::Result<()> {
    put_u64(w, t.rank() as u64)?;
    t.shape().iter().try_for_each(|&d| put_u64(w, d as u64))?;
    t.data().iter().try_for_each(|&x| put_f64(w, x))
}

fn put_adam(w: &mut impl Write, s: &AdamState) -> std::io::Result<()> {
    put_u64(w, s.t)?;
    for v in [s.lr, s.beta1, s.beta2, s.epsilon] {
        put_f64(w, v)?;
    }
    w.write_all(&[s.clip_norm.is_some() as u8])?;
    put_f64(w, s.clip_norm.unwrap_or(0.0))?;
    put_u64(w, s.m.len() as u64)?;
    for (m, v) in s.m.iter().zip(&s.v) {
        put_f64s(w, m)?;
        put_f64s(w, v)?;
    }
    Ok(())
}

fn put_stats(w: &mut impl Write, s: &LossStats) -> std::io::Result<()> {
    for arr in [&s.current, &s.ema, &s.variance] {
        arr.iter().try_for_each(|&x| put_f64(w, x))?;
    }
    put_f64(w, s.decay)?;
    w.write_all(&[s.initialized as u8])
}

/// Upper bound on any stored length, to fail fast on corrupt files.
const MAX_LEN: u64 = 1 << 32;

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.inner.read_exact(&mut b)?;
        Ok(b[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(read_u64(&mut self.inner)?)
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > MAX_LEN {
            return Err(Error::invalid("checkpoint decode", format!("implausible length {n}")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn array(&mut self) -> Result<[f64; TASKS]> {
        let mut a = [0.0; TASKS];
        for v in &mut a {
            *v = self.f64()?;
        }
        Ok(a)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::invalid("checkpoint decode", e.to_string()))
    }

    fn tensor64(&mut self) -> Result<Tensor<f64>> {
        let rank = self.len()?;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n as u64 > MAX_LEN {
            return Err(Error::invalid("checkpoint decode", format!("implausible extents {shape:?}")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(&shape, data)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let t = self.u64()?;
        let (lr, beta1, beta2, epsilon) = (self.f64()?, self.f64()?, self.f64()?, self.f64()?);
        let has_clip = self.u8()? != 0;
        let clip = self.f64()?;
        let n = self.len()?;
        let (mut m, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for _ in 0..n {
            m.push(self.f64s()?);
            v.push(self.f64s()?);
        }
        Ok(AdamState { m, v, t, lr, beta1, beta2, epsilon, clip_norm: has_clip.then_some(clip) })
    }

    fn stats(&mut self) -> Result<LossStats> {
        let (current, ema, variance) = (self.array()?, self.array()?, self.array()?);
        let decay = self.f64()?;
        let initialized = self.u8()? != 0;
        let mut s = LossStats::new(decay)?;
        s.current = current;
        s.ema = ema;
        s.variance = variance;
        s.initialized = initialized;
        Ok(s)
    }
}

fn encode(net: &SegNet, trainer: Option<&Trainer>, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_text(w, &net.config().to_text())?;
    put_u64(w, net.params().len() as u64)?;
    for p in net.params() {
        p.write_to(w)?;
    }
    let Some(t) = trainer else {
        return w.write_all(&[0]);
    };
    w.write_all(&[1])?;
    put_text(w, &t.config.to_text())?;
    put_u64(w, t.iteration)?;
    put_stats(w, &t.stats)?;
    put_f64(w, t.aux.entropy_beta)?;
    put_u64(w, t.aux.params().len() as u64)?;
    for p in t.aux.params() {
        put_tensor64(w, p)?;
    }
    put_adam(w, &t.opt)?;
    put_adam(w, &t.aux_opt)
}

fn decode(r: impl Read) -> Result<Checkpoint> {
    let mut r = Reader { inner: r };
    let mut magic = [0u8; 8];
    r.inner.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("checkpoint decode", "not a checkpoint file (bad magic)"));
    }
    let mut v = [0u8; 4];
    r.inner.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != VERSION {
        return Err(Error::invalid("checkpoint decode", format!("unsupported version {version}")));
    }
    let config = NetworkConfig::from_text(&r.text()?)?;
    let n = r.len()?;
    let params = (0..n).map(|_| Tensor::read_from(&mut r.inner)).collect::<Result<Vec<_>>>()?;
    let net = SegNet::from_params(config, params)?;
    let trainer = match r.u8()? {
        0 => None,
        _ => {
            let config = TrainConfig::from_text(&r.text()?)?;
            let iteration = r.u64()?;
            let stats = r.stats()?;
            let beta = r.f64()?;
            let n = r.len()?;
            let aux_params = (0..n).map(|_| r.tensor64()).collect::<Result<Vec<_>>>()?;
            let aux = AuxNet::from_params(aux_params, beta)?;
            let opt = r.adam()?;
            let aux_opt = r.adam()?;
            let shapes_ok = |s: &AdamState, lens: Vec<usize>| {
                s.m.len() == lens.len() && s.m.iter().zip(&s.v).zip(&lens).all(|((m, v), &l)| m.len() == l && v.len() == l)
            };
            if !shapes_ok(&opt, net.params().iter().map(Tensor::len).collect())
                || !shapes_ok(&aux_opt, aux.params().iter().map(Tensor::len).collect())
            {
                return Err(Error::invalid("checkpoint decode", "optimiser moments do not match the parameters"));
            }
            Some(Trainer { net: net.clone(), aux, opt, aux_opt, stats, config, iteration })
        }
    };
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::invalid("checkpoint decode", "trailing bytes after the trainer state"));
    }
    Ok(Checkpoint { net, trainer })
}

fn wrap(path: &Path, e: Error) -> Error {
    match e {
        e @ Error::Checkpoint { .. } => e,
        Error::Stream(s) if s.kind() == std::io::ErrorKind::UnexpectedEof => {
            Error::Checkpoint { path: path.to_path_buf(), detail: "file is truncated".into() }
        }
        e => Error::Checkpoint { path: path.to_path_buf(), detail: e.to_string() },
    }
}

fn write_atomic(path: &Path, net: &SegNet, trainer: Option<&Trainer>) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    encode(net, trainer, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes the network only.
pub fn save_network(net: &SegNet, path: &Path) -> Result<()> {
    write_atomic(path, net, None)
}

/// Writes the network together with everything needed to resume training.
pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &trainer.net, Some(trainer))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = fs::File::open(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        detail: format!("cannot open: {e}"),
    })?;
    decode(BufReader::new(file)).map_err(|e| wrap(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            in_channels: 3,
            input_h: 8,
            input_w: 8,
            stack_filters: vec![2, 3, 4],
            convs_per_stack: vec![1, 1, 1],
            kernel_sizes: vec![3, 3, 1],
            decoder_filters: vec![3, 2],
            ..NetworkConfig::desk()
        }
    }

    #[test]
    fn trainer_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let net = SegNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = Trainer::new(net, TrainConfig { clip_norm: Some(2.5), ..TrainConfig::desk() }).unwrap();
        t.iteration = 17;
        t.stats.update([0.1, 0.2, 0.3, 1.0 / 3.0]).unwrap();
        t.opt.m[0][0] = std::f64::consts::PI;
        t.aux_opt.t = 4;
        save_trainer(&t, &path).unwrap();
        let back = load(&path).unwrap();
        let bt = back.trainer.unwrap();
        assert_eq!(bt.iteration, 17);
        assert_eq!(bt.stats, t.stats);
        assert_eq!(bt.opt, t.opt);
        assert_eq!(bt.aux_opt, t.aux_opt);
        assert_eq!(bt.config, t.config);
        assert_eq!(bt.aux.params(), t.aux.params());
        assert_eq!(back.net.params(), t.net.params());
    }

    #[test]
    fn mismatch_names_fields_and_missing_file_is_clean() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.ckpt");
        let net = SegNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        save_network(&net, &path).unwrap();
        let ck = load(&path).unwrap();
        assert!(ck.trainer.is_none());
        ck.check_config(&path, &tiny(), None).unwrap();
        let other = NetworkConfig { seed: 9, dropout_rate: 0.5, ..tiny() };
        let err = ck.check_config(&path, &other, None).unwrap_err().to_string();
        assert!(err.contains("seed (0 vs 9)") && err.contains("dropout_rate"), "{err}");
        assert!(load(&dir.path().join("missing.ckpt")).unwrap_err().to_string().contains("missing.ckpt"));
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let net = SegNet::new(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        save_network(&net, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("truncated"));
        fs::write(&path, b"hello world, not a checkpoint").unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("magic"));
    }
}

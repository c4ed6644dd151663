//! Checkpoint format: magic header, format version, embedded config text,
//! step counter, RNG stream positions, Adam state and every parameter tensor
//! by name. Little-endian f64 payloads round-trip bit-exactly.

use crate::config::TrainConfig;
use crate::error::Error;
use crate::matrix::Matrix;
use crate::model::Model;
use crate::rng::RngStream;
use crate::train::{Adam, TrainState, STREAM_MODEL_INIT};
use crate::Result;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"GPOSE\x01";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer {
            buf: MAGIC.to_vec(),
        }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.buf.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.buf.extend_from_slice(b);
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u32(m.rows());
        self.u32(m.cols());
        for &v in m.as_slice() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn rng(&mut self, r: &RngStream) {
        let (seed, stream, counter) = r.state();
        self.u64(seed);
        self.u64(stream);
        self.u64(counter);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Result<Reader<'a>> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("bad magic header".into()));
        }
        Ok(Reader {
            buf,
            pos: MAGIC.len(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(self.take(8)?.try_into().unwrap()));
        }
        Ok(Matrix::from_vec(rows, cols, data))
    }

    fn rng(&mut self) -> Result<RngStream> {
        let seed = self.u64()?;
        let stream = self.u64()?;
        let counter = self.u64()?;
        Ok(RngStream::from_state(seed, stream, counter))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Serializes a training state (with its config) to bytes.
pub fn to_bytes(state: &TrainState, cfg: &TrainConfig) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(cfg.to_text().as_bytes());
    w.u64(state.step);
    w.rng(&state.rng_batch);
    w.rng(&state.rng_samples);
    match &state.model.frozen_adj {
        Some(adj) => {
            w.u8(1);
            w.matrix(adj);
        }
        None => w.u8(0),
    }
    let names = state.model.param_names();
    let params = state.model.params();
    w.u32(names.len());
    for (name, param) in names.iter().zip(&params) {
        w.bytes(name.as_bytes());
        w.matrix(param);
    }
    w.u64(state.adam.t);
    for m in &state.adam.m {
        w.matrix(m);
    }
    for v in &state.adam.v {
        w.matrix(v);
    }
    w.buf
}

/// Reconstructs a training state and its config from bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<(TrainState, TrainConfig)> {
    let mut r = Reader::new(bytes)?;
    let cfg_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Checkpoint("config block is not utf-8".into()))?;
    let cfg = TrainConfig::from_text(&cfg_text)?;
    let step = r.u64()?;
    let rng_batch = r.rng()?;
    let rng_samples = r.rng()?;
    let frozen_adj = if r.u8()? == 1 { Some(r.matrix()?) } else { None };

    // Rebuild the model skeleton from the config, then fill tensors by name.
    let mut init_rng = RngStream::new(cfg.seed, STREAM_MODEL_INIT);
    let mut model = Model::init(cfg.model_config(), &mut init_rng)?;
    model.frozen_adj = frozen_adj;
    let names = model.param_names();
    let n = r.u32()?;
    if n != names.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n} tensors, model expects {}",
            names.len()
        )));
    }
    {
        let mut params = model.params_mut();
        for (expect, slot) in names.iter().zip(params.iter_mut()) {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            if &name != expect {
                return Err(Error::Checkpoint(format!(
                    "tensor order mismatch: got '{name}', expected '{expect}'"
                )));
            }
            let mat = r.matrix()?;
            if (mat.rows(), mat.cols()) != (slot.rows(), slot.cols()) {
                return Err(Error::Checkpoint(format!("tensor '{name}' shape mismatch")));
            }
            **slot = mat;
        }
    }
    let t = r.u64()?;
    let mut adam = Adam::new(&model);
    adam.t = t;
    for m in adam.m.iter_mut() {
        *m = r.matrix()?;
    }
    for v in adam.v.iter_mut() {
        *v = r.matrix()?;
    }
    if !r.done() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok((
        TrainState {
            model,
            adam,
            step,
            rng_batch,
            rng_samples,
        },
        cfg,
    ))
}

pub fn save(path: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(state, cfg))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TrainState, TrainConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

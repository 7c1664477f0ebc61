//! Bit-exact binary checkpoints.
//!
//! Layout, all integers `u64` little-endian and all reals raw `f64` bits:
//!
//! ```text
//! magic   8 bytes  "ANSRECCK"
//! version u32      currently 1
//! seed, epoch, step
//! optimizer step, lr, beta1, beta2, eps
//! 15 tensors: params, first moment, second moment, each in the order
//!             user_emb, item_emb, w_item, w_user, w_mag, written as
//!             rows, cols, rows*cols values
//! checksum         FNV-1a over every preceding byte
//! ```
//!
//! Random streams are derived from `(seed, label, epoch, step, element)`, so
//! `seed`, `epoch` and `step` are the whole RNG state.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::ParamStore;
use crate::optim::OptimizerState;

const MAGIC: &[u8; 8] = b"ANSRECCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps completed over the whole run.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

struct Fnv(u64);

impl Fnv {
    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

struct HashWriter<W> {
    inner: W,
    hash: Fnv,
}

impl<W: Write> HashWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.hash.update(bytes);
        self.inner.write_all(bytes)
    }

    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.put(&v.to_le_bytes())
    }

    fn f64(&mut self, v: f64) -> std::io::Result<()> {
        self.put(&v.to_bits().to_le_bytes())
    }

    fn matrix(&mut self, m: &Matrix) -> std::io::Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        for &x in m.as_slice() {
            self.f64(x)?;
        }
        Ok(())
    }
}

struct HashReader<R> {
    inner: R,
    hash: Fnv,
}

impl<R: Read> HashReader<R> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        self.hash.update(&b);
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 34)
            .ok_or_else(|| Error::Checkpoint(format!("implausible tensor shape {rows}x{cols}")))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Matrix::from_vec(rows, cols, data)
    }

    fn store(&mut self) -> Result<ParamStore> {
        Ok(ParamStore {
            user_emb: self.matrix()?,
            item_emb: self.matrix()?,
            w_item: self.matrix()?,
            w_user: self.matrix()?,
            w_mag: self.matrix()?,
        })
    }
}

impl Checkpoint {
    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut out = HashWriter {
            inner: w,
            hash: Fnv(0xcbf2_9ce4_8422_2325),
        };
        let io = |e| Error::io("<checkpoint>", e);
        out.put(MAGIC).map_err(io)?;
        out.put(&VERSION.to_le_bytes()).map_err(io)?;
        for v in [
            self.rng.seed,
            self.rng.epoch,
            self.rng.step,
            self.optimizer.step,
        ] {
            out.u64(v).map_err(io)?;
        }
        let o = &self.optimizer;
        for v in [o.lr, o.beta1, o.beta2, o.eps] {
            out.f64(v).map_err(io)?;
        }
        for store in [&self.params, &o.first_moment, &o.second_moment] {
            for t in store.tensors() {
                out.matrix(t).map_err(io)?;
            }
        }
        let sum = out.hash.0;
        out.inner.write_all(&sum.to_le_bytes()).map_err(io)?;
        out.inner.flush().map_err(io)
    }

    pub fn read<R: Read>(r: R) -> Result<Self> {
        let mut inp = HashReader {
            inner: r,
            hash: Fnv(0xcbf2_9ce4_8422_2325),
        };
        if &inp.take::<8>()? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(inp.take()?);
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let rng = RngState {
            seed: inp.u64()?,
            epoch: inp.u64()?,
            step: inp.u64()?,
        };
        let opt_step = inp.u64()?;
        let (lr, beta1, beta2, eps) = (inp.f64()?, inp.f64()?, inp.f64()?, inp.f64()?);
        let params = inp.store()?;
        let first_moment = inp.store()?;
        let second_moment = inp.store()?;
        let expected = inp.hash.0;
        let mut tail = [0u8; 8];
        inp.inner
            .read_exact(&mut tail)
            .map_err(|e| Error::Checkpoint(format!("missing checksum: {e}")))?;
        if u64::from_le_bytes(tail) != expected {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        if !params.same_shape(&first_moment) || !params.same_shape(&second_moment) {
            return Err(Error::Checkpoint(
                "optimizer moments do not match parameter shapes".into(),
            ));
        }
        Ok(Checkpoint {
            params,
            optimizer: OptimizerState {
                first_moment,
                second_moment,
                step: opt_step,
                lr,
                beta1,
                beta2,
                eps,
            },
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read(std::io::BufReader::new(f))
    }
}

//! Binary checkpoints of a [`TrainState`].
//!
//! All integers and floats are little-endian. Layout, in order:
//!
//! ```text
//! magic            8 bytes  "GCLIPCKP"
//! version          u32
//! step             u64
//! rng              seed u64, sampler word u128, count word u128,
//!                  gradient draws u64, count draws u64
//! layers           count u32, then per layer a tag u8:
//!                    0 Linear: out u64, in u64, weight f64 x out*in, bias f64 x out
//!                    1 ReLU, 2 Tanh
//! clip state       tag u8:
//!                    0 non-private
//!                    1 flat: threshold f64
//!                    2 fixed: count u64, thresholds f64 x count
//!                    3 adaptive: count u64, then per group threshold f64,
//!                      target quantile f64, learning rate f64, count noise f64,
//!                      nominal batch u64; then has-global u8, global f64
//! moments          tag u8:
//!                    0 none
//!                    1 momentum: count u64, values f64 x count
//!                    2 Adam: t u64, count u64, m f64 x count, v f64 x count
//! ```

use std::io::{Read, Write};

use super::step::{ClipState, Moments, TrainState};
use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Linear, Model};
use crate::quantile::QuantileEstimator;
use crate::rng::{RandomStreams, StreamsSnapshot};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GCLIPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer<W> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b).map_err(Error::from)
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u128(&mut self, v: u128) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> Result<()> {
        v.iter().try_for_each(|&x| self.f64(x))
    }
    fn counted(&mut self, v: &[f64]) -> Result<()> {
        self.u64(v.len() as u64)?;
        self.f64s(v)
    }
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn fail<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset,
            detail: detail.into(),
        })
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => {
                self.offset += N as u64;
                Ok(buf)
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                self.fail("checkpoint is truncated")
            }
            Err(e) => Err(e.into()),
        }
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
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
    fn len(&mut self) -> Result<usize> {
        const LIMIT: u64 = 1 << 32;
        let n = self.u64()?;
        if n > LIMIT {
            return self.fail(format!("implausible length {n}"));
        }
        Ok(n as usize)
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    fn counted(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.f64s(n)
    }
}

pub fn write_checkpoint<W: Write>(state: &TrainState, out: W) -> Result<()> {
    let mut w = Writer { inner: out };
    w.bytes(CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u64(state.step)?;

    let s = state.streams.snapshot();
    w.u64(s.seed)?;
    w.u128(s.sampler_word_pos)?;
    w.u128(s.count_word_pos)?;
    w.u64(s.gradient_draws)?;
    w.u64(s.count_draws)?;

    let layers = state.model.layers();
    w.u32(layers.len() as u32)?;
    for layer in layers {
        match layer {
            Layer::Linear(lin) => {
                w.u8(0)?;
                w.u64(lin.out_features() as u64)?;
                w.u64(lin.in_features() as u64)?;
                w.f64s(lin.weight.data())?;
                w.f64s(lin.bias.data())?;
            }
            Layer::Activation(Activation::Relu) => w.u8(1)?,
            Layer::Activation(Activation::Tanh) => w.u8(2)?,
        }
    }

    match &state.clip {
        ClipState::NonPrivate => w.u8(0)?,
        ClipState::Flat(c) => {
            w.u8(1)?;
            w.f64(*c)?;
        }
        ClipState::Fixed(c) => {
            w.u8(2)?;
            w.counted(c)?;
        }
        ClipState::Adaptive {
            estimators,
            equivalent_global,
        } => {
            w.u8(3)?;
            w.u64(estimators.len() as u64)?;
            for e in estimators {
                w.f64(e.threshold())?;
                w.f64(e.target_quantile())?;
                w.f64(e.lr())?;
                w.f64(e.count_noise())?;
                w.u64(e.batch_size() as u64)?;
            }
            w.u8(equivalent_global.is_some() as u8)?;
            w.f64(equivalent_global.unwrap_or(0.0))?;
        }
    }

    match &state.moments {
        Moments::None => w.u8(0)?,
        Moments::Momentum(v) => {
            w.u8(1)?;
            w.counted(v)?;
        }
        Moments::Adam { m, v, t } => {
            w.u8(2)?;
            w.u64(*t)?;
            w.counted(m)?;
            w.f64s(v)?;
        }
    }
    w.inner.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<TrainState> {
    let mut r = Reader {
        inner: input,
        offset: 0,
    };
    if &r.array::<8>()? != CHECKPOINT_MAGIC {
        r.offset = 0;
        return r.fail("not a checkpoint (bad magic)");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return r.fail(format!("unsupported checkpoint version {version}"));
    }
    let step = r.u64()?;
    let snapshot = StreamsSnapshot {
        seed: r.u64()?,
        sampler_word_pos: r.u128()?,
        count_word_pos: r.u128()?,
        gradient_draws: r.u64()?,
        count_draws: r.u64()?,
    };

    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers as usize);
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            0 => {
                let out = r.len()?;
                let inp = r.len()?;
                let w = r.f64s(out * inp)?;
                let b = r.f64s(out)?;
                Layer::Linear(Linear::new(
                    Tensor::new(vec![out, inp], w)?,
                    Tensor::vector(b)?,
                )?)
            }
            1 => Layer::Activation(Activation::Relu),
            2 => Layer::Activation(Activation::Tanh),
            t => return r.fail(format!("unknown layer tag {t}")),
        };
        layers.push(layer);
    }
    let model = Model::new(layers)?;

    let clip = match r.u8()? {
        0 => ClipState::NonPrivate,
        1 => ClipState::Flat(r.f64()?),
        2 => ClipState::Fixed(r.counted()?),
        3 => {
            let n = r.len()?;
            let mut estimators = Vec::with_capacity(n);
            for _ in 0..n {
                let (c, q, lr, noise) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let batch = r.len()?;
                estimators.push(QuantileEstimator::new(c, q, lr, noise, batch)?);
            }
            let has_global = r.u8()? != 0;
            let global = r.f64()?;
            ClipState::Adaptive {
                estimators,
                equivalent_global: has_global.then_some(global),
            }
        }
        t => return r.fail(format!("unknown clip state tag {t}")),
    };

    let moments = match r.u8()? {
        0 => Moments::None,
        1 => Moments::Momentum(r.counted()?),
        2 => {
            let t = r.u64()?;
            let m = r.counted()?;
            let v = r.f64s(m.len())?;
            Moments::Adam { m, v, t }
        }
        t => return r.fail(format!("unknown moments tag {t}")),
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing)? != 0 {
        return r.fail("trailing bytes after checkpoint");
    }

    Ok(TrainState {
        model,
        clip,
        moments,
        step,
        streams: RandomStreams::restore(&snapshot),
    })
}

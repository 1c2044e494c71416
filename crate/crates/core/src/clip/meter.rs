//! Byte accounting for clipping buffers.
//!
//! Two kinds of buffer are tracked per thread: parameter-gradient buffers
//! (anything shaped like `theta_k`, including materialized per-example
//! gradients) and activation-gradient scratch (row-scaled copies of output
//! gradients). Each tracked allocation holds a [`Tracked`] guard that releases
//! its bytes on drop.

use std::cell::RefCell;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BufferKind {
    ParamGrad,
    ActivationGrad,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MeterReading {
    pub param_grad_peak: usize,
    pub activation_grad_peak: usize,
}

#[derive(Default)]
struct Meter {
    current: [usize; 2],
    peak: [usize; 2],
}

thread_local! {
    static METER: RefCell<Meter> = RefCell::new(Meter::default());
}

fn slot(kind: BufferKind) -> usize {
    match kind {
        BufferKind::ParamGrad => 0,
        BufferKind::ActivationGrad => 1,
    }
}

/// Guard for one tracked buffer.
#[derive(Debug)]
pub struct Tracked {
    kind: BufferKind,
    bytes: usize,
}

impl Tracked {
    pub fn new(kind: BufferKind, values: usize) -> Tracked {
        let bytes = values * std::mem::size_of::<f64>();
        METER.with(|m| {
            let mut m = m.borrow_mut();
            let s = slot(kind);
            m.current[s] += bytes;
            m.peak[s] = m.peak[s].max(m.current[s]);
        });
        Tracked { kind, bytes }
    }
}

impl Clone for Tracked {
    fn clone(&self) -> Self {
        Tracked::new(self.kind, self.bytes / std::mem::size_of::<f64>())
    }
}

impl Drop for Tracked {
    fn drop(&mut self) {
        METER.with(|m| m.borrow_mut().current[slot(self.kind)] -= self.bytes);
    }
}

/// Resets peaks to the bytes currently live.
pub fn reset_peaks() {
    METER.with(|m| {
        let mut m = m.borrow_mut();
        m.peak = m.current;
    });
}

pub fn reading() -> MeterReading {
    METER.with(|m| {
        let m = m.borrow();
        MeterReading {
            param_grad_peak: m.peak[0],
            activation_grad_peak: m.peak[1],
        }
    })
}

//! The untrusted-OS observer. ECALLs are seen through a dispatch hook, OCALLs
//! through trampolines installed in a copy of the enclave's OCALL table, and
//! every event is stamped from the chain's virtual cycle counter.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{Direction, EnclaveId, InterfaceEvent};
use crate::seed;

/// Virtual cycle counter shared by a chain and its collector.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock(Rc<Cell<u64>>);

impl VirtualClock {
    pub fn new(start: u64) -> Self {
        VirtualClock(Rc::new(Cell::new(start)))
    }

    pub fn now(&self) -> u64 {
        self.0.get()
    }

    pub fn advance(&self, cycles: u64) {
        self.0.set(self.0.get() + cycles);
    }

    /// Moves the clock forward to `cycle` if it is behind.
    pub fn catch_up(&self, cycle: u64) {
        if cycle > self.0.get() {
            self.0.set(cycle);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Channels {
    pub sequence: bool,
    pub param_size: bool,
    pub delay: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Channels {
            sequence: true,
            param_size: true,
            delay: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectorConfig {
    /// Half-width of the uniform read noise, in cycles.
    pub noise_amplitude: u64,
    pub cycle_per_instruction_scale: f64,
    pub enabled_channels: Channels,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        CollectorConfig {
            noise_amplitude: 0,
            cycle_per_instruction_scale: 1.0,
            enabled_channels: Channels::default(),
        }
    }
}

impl CollectorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.cycle_per_instruction_scale > 0.0 && self.cycle_per_instruction_scale.is_finite()) {
            return Err("cycle_per_instruction_scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CollectorError {
    #[error("trace already finalized")]
    Finalized,
    #[error("event {0} is not part of the trace")]
    NotInTrace(u64),
    #[error("OCALL event {ocall} precedes ECALL event {ecall}")]
    Order { ecall: u64, ocall: u64 },
}

/// Argument passed to an OCALL. `handle` identifies the buffer being handed
/// out; the observer never records it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OcallArg {
    pub param_bytes: u64,
    pub handle: u64,
}

pub type OcallFn = Rc<dyn Fn(&OcallArg) -> u64>;

#[derive(Clone)]
pub struct OcallTable {
    pub enclave_id: EnclaveId,
    pub entries: Vec<OcallFn>,
}

impl fmt::Debug for OcallTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OcallTable")
            .field("enclave_id", &self.enclave_id)
            .field("len", &self.entries.len())
            .finish()
    }
}

impl OcallTable {
    pub fn invoke(&self, index: u32, arg: &OcallArg) -> Option<u64> {
        self.entries.get(index as usize).map(|f| f(arg))
    }
}

struct State {
    events: Vec<InterfaceEvent>,
    last_cycle: u64,
    finalized: bool,
    rng: seed::Rng,
}

pub struct Collector {
    clock: VirtualClock,
    config: CollectorConfig,
    state: RefCell<State>,
}

impl Collector {
    pub fn new(clock: VirtualClock, config: CollectorConfig, seed_value: u64) -> Rc<Self> {
        Rc::new(Collector {
            clock,
            config,
            state: RefCell::new(State {
                events: Vec::new(),
                last_cycle: 0,
                finalized: false,
                rng: seed::rng(seed_value),
            }),
        })
    }

    pub fn config(&self) -> &CollectorConfig {
        &self.config
    }

    /// Reads the virtual counter with uniform noise in `[-A, A]`.
    pub fn read_cycles(&self) -> u64 {
        let scaled = (self.clock.now() as f64 * self.config.cycle_per_instruction_scale).round() as i64;
        let a = self.config.noise_amplitude as i64;
        let noise = if a == 0 {
            0
        } else {
            self.state.borrow_mut().rng.gen_range(-a..=a)
        };
        (scaled + noise).max(0) as u64
    }

    fn record(
        &self,
        enclave_id: EnclaveId,
        direction: Direction,
        call_id: u32,
        param_bytes: u64,
        aux: Option<u32>,
    ) -> Result<(), CollectorError> {
        if self.state.borrow().finalized {
            return Err(CollectorError::Finalized);
        }
        let raw = self.read_cycles();
        let ch = self.config.enabled_channels;
        let mut st = self.state.borrow_mut();
        // Stamps never run backwards even when read noise would say so.
        let cycle = raw.max(st.last_cycle);
        st.last_cycle = cycle;
        let seq_no = st.events.len() as u64;
        st.events.push(InterfaceEvent {
            seq_no,
            cycle: if ch.delay { cycle } else { 0 },
            enclave_id,
            direction,
            call_id: if ch.sequence { call_id } else { 0 },
            param_bytes: if ch.param_size { param_bytes } else { 0 },
            aux: if ch.sequence { aux } else { None },
        });
        Ok(())
    }

    /// Records the ECALL with a pre-call stamp, then runs `inner` unchanged.
    pub fn hook_ecall<R>(
        &self,
        enclave_id: EnclaveId,
        call_id: u32,
        param_bytes: u64,
        inner: impl FnOnce() -> R,
    ) -> Result<R, CollectorError> {
        self.record(enclave_id, Direction::Ecall, call_id, param_bytes, None)?;
        Ok(inner())
    }

    /// Returns a table whose entry `i` records an OCALL event with `aux = i`
    /// and then calls the original entry `i`.
    pub fn hijack_ocall_table(self: &Rc<Self>, table: &OcallTable) -> OcallTable {
        let entries = table
            .entries
            .iter()
            .enumerate()
            .map(|(i, original)| {
                let collector = Rc::clone(self);
                let original = Rc::clone(original);
                let enclave_id = table.enclave_id;
                let index = i as u32;
                Rc::new(move |arg: &OcallArg| {
                    if let Err(e) =
                        collector.record(enclave_id, Direction::Ocall, index, arg.param_bytes, Some(index))
                    {
                        log::warn!("dropped OCALL {index} of enclave {enclave_id}: {e}");
                    }
                    original(arg)
                }) as OcallFn
            })
            .collect();
        OcallTable {
            enclave_id: table.enclave_id,
            entries,
        }
    }

    pub fn events(&self) -> Vec<InterfaceEvent> {
        self.state.borrow().events.clone()
    }

    pub fn event_count(&self) -> usize {
        self.state.borrow().events.len()
    }

    /// Closes the trace; later hooks fail with [`CollectorError::Finalized`].
    pub fn finalize(&self) -> Vec<InterfaceEvent> {
        let mut st = self.state.borrow_mut();
        st.finalized = true;
        std::mem::take(&mut st.events)
    }
}

/// Cycles between an ECALL and a later OCALL of the same trace.
pub fn delay_of(
    trace: &[InterfaceEvent],
    ecall: &InterfaceEvent,
    ocall: &InterfaceEvent,
) -> Result<u64, CollectorError> {
    for ev in [ecall, ocall] {
        if !trace.iter().any(|e| e == ev) {
            return Err(CollectorError::NotInTrace(ev.seq_no));
        }
    }
    if ocall.seq_no < ecall.seq_no || ocall.cycle < ecall.cycle {
        return Err(CollectorError::Order {
            ecall: ecall.seq_no,
            ocall: ocall.seq_no,
        });
    }
    Ok(ocall.cycle - ecall.cycle)
}

//! The simulated service-function chain: NAT, WAF, IDS, and WAN optimizer,
//! each an enclave whose ECALL/OCALL traffic goes through the collector.

pub mod rules;
pub mod trie;
pub mod vnf;

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collector::{Collector, CollectorConfig, CollectorError, OcallArg, OcallFn, OcallTable, VirtualClock};
use crate::defense::{enclave_batch_verify, Batch, BatchGate, CountermeasureConfig, PaddingError, Verdict};
use crate::event::{Direction, EnclaveId, InterfaceEvent, ECALL_PROCESS, OCALL_DELIVER, OCALL_REJECT, OCALL_WRITE};
use crate::features::{PacketFeatureVector, VnfFeatures};
use crate::packet::{PacketGroundTruth, PacketKind};
use crate::seed;
use crate::traffic::{cipher_len, DEFAULT_RECORD_OVERHEAD};
use rules::{synth_content, RuleConfig, RuleSet};
use vnf::{DelayModel, Role, VnfOutcome, WafRoute};

/// Size of one IDS log record handed to `write()`.
pub const LOG_RECORD_BYTES: u64 = 64;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain config: {0}")]
    Config(String),
    #[error(transparent)]
    Padding(#[from] PaddingError),
    #[error(transparent)]
    Collector(#[from] CollectorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VnfSlot {
    pub enclave_id: EnclaveId,
    pub role: Role,
}

/// Request path NAT→WAF→WANOPT; response path WAF→(IDS when the WAF flags
/// the packet)→NAT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainTopology {
    pub vnfs: Vec<VnfSlot>,
    /// Whether IDS output continues to the NAT or leaves the chain.
    pub ids_to_nat: bool,
}

impl Default for ChainTopology {
    fn default() -> Self {
        ChainTopology {
            vnfs: Role::ALL
                .iter()
                .enumerate()
                .map(|(i, &role)| VnfSlot {
                    enclave_id: i as EnclaveId + 1,
                    role,
                })
                .collect(),
            ids_to_nat: true,
        }
    }
}

impl ChainTopology {
    pub fn validate(&self) -> Result<(), ChainError> {
        for role in Role::ALL {
            let n = self.vnfs.iter().filter(|s| s.role == role).count();
            if n != 1 {
                return Err(ChainError::Config(format!(
                    "role {} appears {n} times; exactly one required",
                    role.name()
                )));
            }
        }
        let mut ids: Vec<EnclaveId> = self.vnfs.iter().map(|s| s.enclave_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.vnfs.len() {
            return Err(ChainError::Config("enclave ids must be distinct".into()));
        }
        Ok(())
    }

    pub fn enclave(&self, role: Role) -> EnclaveId {
        self.vnfs
            .iter()
            .find(|s| s.role == role)
            .map(|s| s.enclave_id)
            .expect("validated topology holds every role")
    }

    pub fn role_of(&self, id: EnclaveId) -> Option<Role> {
        self.vnfs.iter().find(|s| s.enclave_id == id).map(|s| s.role)
    }

    pub fn ingress(&self, kind: PacketKind) -> Role {
        match kind {
            PacketKind::Request => Role::Nat,
            PacketKind::Response => Role::Waf,
        }
    }

    pub fn next_hop(&self, kind: PacketKind, at: Role, route: Option<WafRoute>) -> Option<Role> {
        match (kind, at) {
            (_, Role::Waf) if route == Some(WafRoute::Ids) => Some(Role::Ids),
            (PacketKind::Request, Role::Nat) => Some(Role::Waf),
            (PacketKind::Request, Role::Waf) | (PacketKind::Request, Role::Ids) => Some(Role::Wanopt),
            (PacketKind::Response, Role::Waf) => Some(Role::Nat),
            (PacketKind::Response, Role::Ids) if self.ids_to_nat => Some(Role::Nat),
            _ => None,
        }
    }

    /// Every role sequence a single packet can take.
    pub fn paths(&self) -> Vec<Vec<Role>> {
        let mut out = Vec::new();
        for kind in [PacketKind::Request, PacketKind::Response] {
            for route in [WafRoute::Onward, WafRoute::Ids] {
                let mut path = vec![self.ingress(kind)];
                while let Some(next) = self.next_hop(kind, *path.last().unwrap(), Some(route)) {
                    path.push(next);
                }
                if !out.contains(&path) {
                    out.push(path);
                }
            }
        }
        out
    }

    /// Splits a trace into packet units by following the chain's paths: a
    /// unit grows while its role sequence is still a prefix of some path.
    pub fn segment(&self, events: &[InterfaceEvent]) -> Vec<Range<usize>> {
        let paths = self.paths();
        let mut units = Vec::new();
        let mut start = 0usize;
        let mut roles: Vec<Role> = Vec::new();
        for (i, ev) in events.iter().enumerate() {
            if ev.direction != Direction::Ecall {
                continue;
            }
            let role = self.role_of(ev.enclave_id);
            let extends = role.is_some_and(|r| {
                !roles.is_empty()
                    && paths.iter().any(|p| p.len() > roles.len() && p[..roles.len()] == roles[..] && p[roles.len()] == r)
            });
            if !extends {
                if i > start {
                    units.push(start..i);
                }
                start = i;
                roles.clear();
            }
            if let Some(r) = role {
                roles.push(r);
            }
        }
        if events.len() > start {
            units.push(start..events.len());
        }
        units
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    pub topology: ChainTopology,
    pub rules: RuleConfig,
    pub delay: DelayModel,
    pub record_overhead: u64,
    pub cpu_hz: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            topology: ChainTopology::default(),
            rules: RuleConfig::default(),
            delay: DelayModel::default(),
            record_overhead: DEFAULT_RECORD_OVERHEAD,
            cpu_hz: 3.4e9,
        }
    }
}

/// A configured chain: topology plus generated rule tables.
#[derive(Debug, Clone)]
pub struct Chain {
    pub config: ChainConfig,
    pub rules: RuleSet,
}

impl Chain {
    pub fn new(config: ChainConfig, rules_seed: u64) -> Result<Self, ChainError> {
        config.topology.validate()?;
        if !(config.cpu_hz > 0.0 && config.cpu_hz.is_finite()) {
            return Err(ChainError::Config("cpu_hz must be positive".into()));
        }
        let rules = RuleSet::generate(&config.rules, rules_seed)?;
        Ok(Chain { config, rules })
    }

    pub fn cycles_at(&self, seconds: f64) -> u64 {
        (seconds * self.config.cpu_hz).round() as u64
    }
}

/// Ground-truth record of what the chain did with one packet.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub packet_uid: u64,
    pub page_id: u32,
    pub dummy: bool,
    pub path: Vec<EnclaveId>,
    pub logged: bool,
    /// Per-packet features; absent when the packet was processed in a batch.
    pub features: Option<PacketFeatureVector>,
}

#[derive(Debug, Default)]
struct Host {
    delivered: Vec<(EnclaveId, u64, u64)>,
    writes: u64,
    rejects: u64,
}

struct EnclaveRt {
    id: EnclaveId,
    table: OcallTable,
    last_batch: Option<u64>,
}

/// Per-packet (or per-batch) plan computed inside the enclaves.
struct Plan {
    hops: Vec<(Role, u32, VnfOutcome)>,
}

/// One running chain with its collector. Single owner, one packet (or one
/// batch) in flight at a time.
pub struct ChainInstance<'a> {
    chain: &'a Chain,
    cm: CountermeasureConfig,
    clock: VirtualClock,
    collector: Rc<Collector>,
    observed: bool,
    enclaves: HashMap<Role, EnclaveRt>,
    host: Rc<RefCell<Host>>,
    noise_rng: seed::Rng,
    order_rng: seed::Rng,
    records: Vec<PacketRecord>,
    rejected_batches: u64,
}

impl<'a> ChainInstance<'a> {
    pub fn new(
        chain: &'a Chain,
        cm: CountermeasureConfig,
        collector_config: CollectorConfig,
        seed_value: u64,
    ) -> Result<Self, ChainError> {
        Self::build(chain, cm, collector_config, seed_value, true)
    }

    /// Same chain without interposition; used to check that observing is
    /// functionally transparent.
    pub fn unobserved(chain: &'a Chain, cm: CountermeasureConfig, seed_value: u64) -> Result<Self, ChainError> {
        Self::build(chain, cm, CollectorConfig::default(), seed_value, false)
    }

    fn build(
        chain: &'a Chain,
        cm: CountermeasureConfig,
        collector_config: CollectorConfig,
        seed_value: u64,
        observed: bool,
    ) -> Result<Self, ChainError> {
        cm.validate().map_err(ChainError::Config)?;
        collector_config.validate().map_err(ChainError::Config)?;
        let clock = VirtualClock::new(0);
        let collector = Collector::new(clock.clone(), collector_config, seed::derive(seed_value, "collector"));
        let host = Rc::new(RefCell::new(Host::default()));
        let mut enclaves = HashMap::new();
        for slot in &chain.config.topology.vnfs {
            let original = host_table(slot.enclave_id, &host);
            let table = if observed {
                collector.hijack_ocall_table(&original)
            } else {
                original
            };
            enclaves.insert(
                slot.role,
                EnclaveRt {
                    id: slot.enclave_id,
                    table,
                    last_batch: None,
                },
            );
        }
        Ok(ChainInstance {
            chain,
            cm,
            clock,
            collector,
            observed,
            enclaves,
            host,
            noise_rng: seed::rng(seed::derive(seed_value, "delay-noise")),
            order_rng: seed::rng(seed::derive(seed_value, "batch-order")),
            records: Vec::new(),
            rejected_batches: 0,
        })
    }

    fn cipher(&self, len: u32) -> Result<u64, ChainError> {
        Ok(cipher_len(u64::from(self.cm.pad(len)?), self.chain.config.record_overhead))
    }

    fn compute(&mut self, role: Role, pkt: &PacketGroundTruth, content: &[u8], len: u32) -> Result<VnfOutcome, ChainError> {
        // Drawn for every hop so runs at different amplitudes share draws.
        let v: f64 = self.noise_rng.gen();
        let model = &self.chain.config.delay;
        let rules = &self.chain.rules;
        let mut out = match role {
            Role::Nat => vnf::nat_process(pkt.page_id, len, rules.trie(), model, v)?,
            Role::Waf => vnf::waf_process(content, &rules.waf, model, v),
            Role::Ids => vnf::ids_process(content, &rules.ids, model, v),
            Role::Wanopt => vnf::wanopt_process(pkt.page_id, pkt.object_id, pkt.content_class, len, model, v),
        };
        // Decrypting padding costs time too; zero when padding is off.
        let padded = self.cm.pad(len)?;
        out.delay += model.copy_per_byte * u64::from(padded - len);
        Ok(out)
    }

    fn plan(&mut self, pkt: &PacketGroundTruth) -> Result<Plan, ChainError> {
        let topo = &self.chain.config.topology;
        let content = synth_content(pkt);
        let mut role = topo.ingress(pkt.kind);
        let mut len = pkt.payload_bytes;
        let mut hops = Vec::new();
        loop {
            let out = self.compute(role, pkt, &content, len)?;
            let next = self.chain.config.topology.next_hop(pkt.kind, role, out.route);
            let out_len = out.out_bytes;
            hops.push((role, len, out));
            len = out_len;
            match next {
                Some(r) => role = r,
                None => break,
            }
        }
        Ok(Plan { hops })
    }

    fn enter<R>(&self, id: EnclaveId, param: u64, body: impl FnOnce() -> R) -> Result<R, ChainError> {
        if self.observed {
            Ok(self.collector.hook_ecall(id, ECALL_PROCESS, param, body)?)
        } else {
            Ok(body())
        }
    }

    /// Processes one packet with nothing else in flight.
    pub fn process_packet(&mut self, pkt: &PacketGroundTruth) -> Result<PacketFeatureVector, ChainError> {
        self.clock.catch_up(self.chain.cycles_at(pkt.arrival_time));
        let plan = self.plan(pkt)?;
        let mut vnfs = Vec::with_capacity(plan.hops.len());
        let mut logged = false;
        for (k, (role, len, out)) in plan.hops.iter().enumerate() {
            if k > 0 {
                self.clock.advance(self.chain.config.delay.transfer);
            }
            let (p_in, p_out) = (self.cipher(*len)?, self.cipher(out.out_bytes)?);
            let rt = &self.enclaves[role];
            let (clock, table) = (&self.clock, &rt.table);
            self.enter(rt.id, p_in, || {
                clock.advance(out.delay);
                for &oc in &out.ocalls {
                    table.invoke(oc, &OcallArg { param_bytes: LOG_RECORD_BYTES, handle: pkt.packet_uid });
                }
                table.invoke(OCALL_DELIVER, &OcallArg { param_bytes: p_out, handle: pkt.packet_uid });
            })?;
            logged |= out.ocalls.contains(&OCALL_WRITE);
            vnfs.push(VnfFeatures {
                enclave_id: rt.id,
                param_bytes_in: p_in,
                param_bytes_out: p_out,
                delay_cycles: out.delay,
                ocall_indices: out.ocalls.iter().copied().chain([OCALL_DELIVER]).collect(),
            });
        }
        let fv = PacketFeatureVector::new(vnfs, Some(self.chain.config.topology.enclave(Role::Wanopt)));
        self.records.push(PacketRecord {
            packet_uid: pkt.packet_uid,
            page_id: pkt.page_id,
            dummy: false,
            path: fv.chain_path.clone(),
            logged,
            features: Some(fv.clone()),
        });
        Ok(fv)
    }

    /// Runs a batch through every VNF in topology order. Each enclave
    /// verifies the batch, processes the members whose path includes it,
    /// passes the rest through, and releases all outputs in random order.
    /// Returns false if the batch was rejected.
    pub fn process_batch(&mut self, batch: &Batch) -> Result<bool, ChainError> {
        let n = self
            .cm
            .batch
            .map(|b| b.threshold_n)
            .ok_or_else(|| ChainError::Config("batch processing without a batch policy".into()))?;
        self.clock.catch_up(self.chain.cycles_at(batch.release_time));
        let mut plans = Vec::with_capacity(batch.members.len());
        for m in &batch.members {
            plans.push(if m.dummy { None } else { Some(self.plan(&m.packet)?) });
        }
        let mut cur_len: Vec<u32> = batch.members.iter().map(|m| m.packet.payload_bytes).collect();
        let model = self.chain.config.delay.clone();
        let slots = self.chain.config.topology.vnfs.clone();
        for (k, slot) in slots.iter().enumerate() {
            if k > 0 {
                self.clock.advance(model.transfer);
            }
            let mut p_in = 0u64;
            let mut work = model.base(slot.role);
            let mut writes = 0usize;
            let mut outputs = Vec::with_capacity(batch.members.len());
            for (i, m) in batch.members.iter().enumerate() {
                let len_in = cur_len[i];
                let c_in = self.cipher(len_in)?;
                p_in += c_in;
                let hop = plans[i]
                    .as_ref()
                    .and_then(|p| p.hops.iter().find(|(r, _, _)| *r == slot.role));
                match hop {
                    Some((_, _, out)) => {
                        work += out.delay;
                        writes += out.ocalls.iter().filter(|&&o| o == OCALL_WRITE).count();
                        cur_len[i] = out.out_bytes;
                    }
                    None => work += model.copy_per_byte * c_in,
                }
                outputs.push((m.packet.packet_uid, self.cipher(cur_len[i])?));
            }
            let rt = self.enclaves.get_mut(&slot.role).expect("validated topology");
            let verdict = enclave_batch_verify(batch, n, rt.last_batch);
            if verdict == Verdict::Accept {
                rt.last_batch = Some(batch.batch_seq);
            }
            let rt = &self.enclaves[&slot.role];
            let (clock, table, rng) = (&self.clock, &rt.table, &mut self.order_rng);
            let accepted = if self.observed {
                self.collector.hook_ecall(rt.id, ECALL_PROCESS, p_in, || {
                    batch_body(verdict, clock, table, rng, &model, slot.role, work, writes, p_in, &mut outputs)
                })?
            } else {
                batch_body(verdict, clock, table, rng, &model, slot.role, work, writes, p_in, &mut outputs)
            };
            if !accepted {
                self.rejected_batches += 1;
                return Ok(false);
            }
        }
        for (m, plan) in batch.members.iter().zip(&plans) {
            let (path, logged) = match plan {
                Some(p) => (
                    p.hops.iter().map(|(r, _, _)| self.chain.config.topology.enclave(*r)).collect(),
                    p.hops.iter().any(|(_, _, o)| o.ocalls.contains(&OCALL_WRITE)),
                ),
                None => (Vec::new(), false),
            };
            self.records.push(PacketRecord {
                packet_uid: m.packet.packet_uid,
                page_id: m.packet.page_id,
                dummy: m.dummy,
                path,
                logged,
                features: None,
            });
        }
        Ok(true)
    }

    pub fn finish(self) -> ChainRun {
        let cycles = self.clock.now();
        let host = self.host.borrow();
        ChainRun {
            events: self.collector.finalize(),
            records: self.records,
            rejected_batches: self.rejected_batches,
            final_cycle: cycles,
            log_writes: host.writes,
            deliveries: host.delivered.len() as u64,
            host_rejects: host.rejects,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn batch_body(
    verdict: Verdict,
    clock: &VirtualClock,
    table: &OcallTable,
    rng: &mut seed::Rng,
    model: &DelayModel,
    role: Role,
    work: u64,
    writes: usize,
    p_in: u64,
    outputs: &mut [(u64, u64)],
) -> bool {
    if let Verdict::Reject(reason) = verdict {
        clock.advance(model.base(role));
        log::debug!("{} rejected batch: {reason:?}", role.name());
        table.invoke(OCALL_REJECT, &OcallArg { param_bytes: p_in, handle: 0 });
        return false;
    }
    clock.advance(work);
    for _ in 0..writes {
        table.invoke(OCALL_WRITE, &OcallArg { param_bytes: LOG_RECORD_BYTES, handle: 0 });
    }
    outputs.shuffle(rng);
    for &(uid, bytes) in outputs.iter() {
        table.invoke(OCALL_DELIVER, &OcallArg { param_bytes: bytes, handle: uid });
    }
    true
}

fn host_table(enclave_id: EnclaveId, host: &Rc<RefCell<Host>>) -> OcallTable {
    let deliver = {
        let host = Rc::clone(host);
        Rc::new(move |a: &OcallArg| {
            host.borrow_mut().delivered.push((enclave_id, a.handle, a.param_bytes));
            0u64
        }) as OcallFn
    };
    let write = {
        let host = Rc::clone(host);
        Rc::new(move |a: &OcallArg| {
            host.borrow_mut().writes += 1;
            a.param_bytes
        }) as OcallFn
    };
    let reject = {
        let host = Rc::clone(host);
        Rc::new(move |_: &OcallArg| {
            host.borrow_mut().rejects += 1;
            0u64
        }) as OcallFn
    };
    let mut entries = vec![deliver.clone(); 3];
    entries[OCALL_DELIVER as usize] = deliver;
    entries[OCALL_WRITE as usize] = write;
    entries[OCALL_REJECT as usize] = reject;
    OcallTable { enclave_id, entries }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct ChainRun {
    pub events: Vec<InterfaceEvent>,
    pub records: Vec<PacketRecord>,
    pub rejected_batches: u64,
    pub final_cycle: u64,
    pub log_writes: u64,
    pub deliveries: u64,
    pub host_rejects: u64,
}

impl ChainRun {
    pub fn real_packets(&self) -> usize {
        self.records.iter().filter(|r| !r.dummy).count()
    }
}

/// Drives a whole stream through a fresh observed chain, batching when the
/// countermeasure config asks for it.
pub fn run_stream(
    chain: &Chain,
    packets: &[PacketGroundTruth],
    cm: CountermeasureConfig,
    collector_config: CollectorConfig,
    seed_value: u64,
) -> Result<ChainRun, ChainError> {
    let mut inst = ChainInstance::new(chain, cm, collector_config, seed_value)?;
    drive(&mut inst, packets)?;
    Ok(inst.finish())
}

pub fn drive(inst: &mut ChainInstance<'_>, packets: &[PacketGroundTruth]) -> Result<(), ChainError> {
    match inst.cm.batch {
        None => {
            for p in packets {
                inst.process_packet(p)?;
            }
        }
        Some(policy) => {
            let mut gate = BatchGate::new(policy);
            for p in packets {
                for b in gate.push(p.clone()) {
                    inst.process_batch(&b)?;
                }
            }
            let end = packets.last().map_or(0.0, |p| p.arrival_time);
            if let Some(b) = gate.flush(end) {
                inst.process_batch(&b)?;
            }
        }
    }
    Ok(())
}

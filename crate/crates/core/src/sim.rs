//! Discrete-event co-simulation: several target VMs sharing one radio medium.
//!
//! Events are ordered by `(time, sequence)`, so simultaneous events run in
//! the order they were scheduled. A receiver only captures frames that
//! start while it is already listening.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::firmware::{Bytecode, Resume, RunOutput, Trap, Vm, VmConfig, VmCrash, Yield};
use crate::radio::{Band, Medium, NodeId, RadioError, Reception, SenseResult, TxId};
use crate::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SlotId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub enum SlotOutcome {
    Halted(RunOutput),
    Trapped(VmCrash),
    /// Still running when the simulation deadline passed.
    Deadline(RunOutput),
}

#[derive(Debug, Clone, PartialEq)]
enum Event {
    Resume(SlotId, Resume),
    TxEnd(SlotId, TxId),
    RxTimeout(SlotId, u64),
    SenseEnd {
        slot: SlotId,
        channel: u32,
        start: Micros,
        window: Micros,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Activity {
    Busy,
    Listening {
        channel: u32,
        since: Micros,
        token: u64,
    },
    Done,
}

struct Slot {
    node: NodeId,
    band: Band,
    vm: Vm,
    activity: Activity,
    sensed: Vec<SenseResult>,
    crash: Option<Trap>,
}

/// Trace entry: which frames reached which receivers.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub at: Micros,
    pub tx: TxId,
    pub from: SlotId,
    pub to: SlotId,
    pub reception: Reception,
}

pub struct Cosim {
    medium: Medium,
    now: Micros,
    seq: u64,
    queue: BTreeMap<(Micros, u64), Event>,
    slots: Vec<Slot>,
    deliveries: Vec<Delivery>,
    next_token: u64,
}

impl Cosim {
    pub fn new(medium: Medium) -> Self {
        Self {
            medium,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            slots: Vec::new(),
            deliveries: Vec::new(),
            next_token: 0,
        }
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn medium_mut(&mut self) -> &mut Medium {
        &mut self.medium
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn deliveries(&self) -> &[Delivery] {
        &self.deliveries
    }

    /// Boots a VM on `node`'s radio in `band` at `start`.
    pub fn add_vm(
        &mut self,
        node: NodeId,
        band: Band,
        code: Bytecode,
        cfg: VmConfig,
        start: Micros,
    ) -> Result<SlotId, RadioError> {
        self.medium
            .node(node)?
            .radio(band)
            .ok_or(RadioError::NoRadio(band))?;
        let id = SlotId(self.slots.len());
        self.slots.push(Slot {
            node,
            band,
            vm: Vm::new(code, cfg),
            activity: Activity::Busy,
            sensed: Vec::new(),
            crash: None,
        });
        self.schedule(start.max(self.now), Event::Resume(id, Resume::Continue));
        Ok(id)
    }

    fn schedule(&mut self, at: Micros, e: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), e);
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Processes every event up to and including `deadline`.
    pub fn run_until(&mut self, deadline: Micros) {
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > deadline {
                break;
            }
            let ((t, _), e) = entry.remove_entry();
            self.now = t;
            self.dispatch(e);
        }
        if self.queue.is_empty() {
            return;
        }
        self.now = self.now.max(deadline);
    }

    fn dispatch(&mut self, e: Event) {
        match e {
            Event::Resume(slot, input) => self.resume(slot, input),
            Event::TxEnd(slot, tx) => self.tx_end(slot, tx),
            Event::RxTimeout(slot, token) => {
                if let Activity::Listening { token: t, .. } = self.slots[slot.0].activity {
                    if t == token {
                        self.slots[slot.0].activity = Activity::Busy;
                        self.resume(slot, Resume::Received(None));
                    }
                }
            }
            Event::SenseEnd {
                slot,
                channel,
                start,
                window,
            } => {
                let s = &self.slots[slot.0];
                let occupancy = match self.medium.sense(s.node, s.band, channel, start, window) {
                    Ok(r) => {
                        let o = r.occupancy;
                        self.slots[slot.0].sensed.push(r);
                        o
                    }
                    Err(_) => 0.0,
                };
                self.resume(slot, Resume::Sensed(occupancy));
            }
        }
    }

    fn resume(&mut self, slot: SlotId, input: Resume) {
        let now = self.now;
        let s = &mut self.slots[slot.0];
        if s.activity == Activity::Done {
            return;
        }
        let (node, band) = (s.node, s.band);
        let y = s.vm.resume(now, input);
        match y {
            Yield::Transmit {
                channel,
                power_dbm,
                payload,
            } => {
                match self
                    .medium
                    .schedule_tx(node, band, channel, now, power_dbm, payload)
                {
                    Ok(tx) => {
                        let end = self.medium.transmission(tx).map_or(now, |t| t.end);
                        self.schedule(end, Event::TxEnd(slot, tx));
                    }
                    Err(e) => {
                        let trap = match e {
                            RadioError::PowerOutOfRange(_) => Trap::PowerOutOfRange,
                            _ => Trap::ChannelOutOfRange,
                        };
                        let s = &mut self.slots[slot.0];
                        s.crash = Some(trap);
                        s.activity = Activity::Done;
                    }
                }
            }
            Yield::Sleep { until } => {
                self.schedule(until.max(now), Event::Resume(slot, Resume::Continue))
            }
            Yield::Receive { channel, timeout } => {
                self.next_token += 1;
                let token = self.next_token;
                self.slots[slot.0].activity = Activity::Listening {
                    channel,
                    since: now,
                    token,
                };
                self.schedule(now.saturating_add(timeout), Event::RxTimeout(slot, token));
            }
            Yield::Sense { channel, window } => self.schedule(
                now.saturating_add(window),
                Event::SenseEnd {
                    slot,
                    channel,
                    start: now,
                    window,
                },
            ),
            Yield::Halted | Yield::Trapped(_) => self.slots[slot.0].activity = Activity::Done,
        }
    }

    fn tx_end(&mut self, from: SlotId, tx: TxId) {
        let Some(frame) = self.medium.transmission(tx).cloned() else {
            return;
        };
        let mut delivered = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            if i == from.0 || s.band != frame.band {
                continue;
            }
            if let Activity::Listening { channel, since, .. } = s.activity {
                if channel != frame.channel || since > frame.start {
                    continue;
                }
                let Ok(reception) = self.medium.evaluate(tx, s.node) else {
                    continue;
                };
                self.deliveries.push(Delivery {
                    at: self.now,
                    tx,
                    from,
                    to: SlotId(i),
                    reception: reception.clone(),
                });
                if let Reception::Delivered(p) = reception {
                    delivered.push((SlotId(i), p));
                }
            }
        }
        for (slot, payload) in delivered {
            self.slots[slot.0].activity = Activity::Busy;
            self.schedule(
                self.now,
                Event::Resume(slot, Resume::Received(Some(payload))),
            );
        }
        self.schedule(self.now, Event::Resume(from, Resume::Continue));
    }

    pub fn outcome(&self, slot: SlotId) -> SlotOutcome {
        let s = &self.slots[slot.0];
        let out = s.vm.output().clone();
        if let Some(trap) = s.crash {
            return SlotOutcome::Trapped(VmCrash { trap, output: out });
        }
        match s.activity {
            Activity::Done => match out.log.entries().last() {
                Some((_, crate::firmware::VmEvent::Trap(trap))) => SlotOutcome::Trapped(VmCrash {
                    trap: *trap,
                    output: out,
                }),
                _ => SlotOutcome::Halted(out),
            },
            _ if self.queue.is_empty() => SlotOutcome::Halted(out),
            _ => SlotOutcome::Deadline(out),
        }
    }

    pub fn sensed(&self, slot: SlotId) -> &[SenseResult] {
        &self.slots[slot.0].sensed
    }

    pub fn all_done(&self) -> bool {
        self.slots.iter().all(|s| s.activity == Activity::Done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::{compile, VmEvent};
    use crate::radio::{
        Environment, InterfererProfile, NodeSpec, Position, PropagationConfig, Transceiver,
    };
    use crate::{MS, SECOND};
    use alloc::vec;

    fn node(name: &str, x: f64) -> NodeSpec {
        NodeSpec {
            name: name.into(),
            position: Position::new(x, 0.0, 3.5),
            environment: Environment::Outdoor,
            radios: vec![Transceiver::new(
                "AT86RF212",
                Band::Srd868,
                10.0,
                -110.0,
                320,
            )],
            faulty: false,
        }
    }

    fn cfg() -> VmConfig {
        VmConfig {
            channel_count: 35,
            max_power_dbm: 10.0,
            initial_power_dbm: 10.0,
            ..VmConfig::default()
        }
    }

    fn pair() -> (Cosim, NodeId, NodeId) {
        let mut m = Medium::new(PropagationConfig::default(), 0);
        let a = m.add_node(node("tx", 0.0));
        let b = m.add_node(node("rx", 10.0));
        (Cosim::new(m), a, b)
    }

    #[test]
    fn min_test_delivers_at_ten_metres() {
        let (mut sim, a, b) = pair();
        let rx = sim
            .add_vm(
                b,
                Band::Srd868,
                compile("RX TIMEOUT 2000\nREPORT RX_DATA").unwrap(),
                cfg(),
                0,
            )
            .unwrap();
        let tx = sim
            .add_vm(
                a,
                Band::Srd868,
                compile("TX DEADBEEF").unwrap(),
                cfg(),
                50 * MS,
            )
            .unwrap();
        sim.run_until(10_000 * MS);
        let SlotOutcome::Halted(out) = sim.outcome(rx) else {
            panic!()
        };
        assert_eq!(out.report, Some(vec![0xde, 0xad, 0xbe, 0xef]));
        // 4 bytes at 320 us/byte
        assert_eq!(out.log.entries()[0].0, 50 * MS + 1280);
        assert!(matches!(sim.outcome(tx), SlotOutcome::Halted(_)));
    }

    #[test]
    fn channel_mismatch_times_out() {
        let (mut sim, a, b) = pair();
        let rx = sim
            .add_vm(
                b,
                Band::Srd868,
                compile("RX TIMEOUT 2000\nREPORT RX_DATA").unwrap(),
                cfg(),
                0,
            )
            .unwrap();
        sim.add_vm(
            a,
            Band::Srd868,
            compile("SET_CHANNEL 5\nTX DEADBEEF").unwrap(),
            cfg(),
            50 * MS,
        )
        .unwrap();
        sim.run_until(10_000 * MS);
        let SlotOutcome::Halted(out) = sim.outcome(rx) else {
            panic!()
        };
        assert_eq!(out.report, Some(vec![]));
        assert!(out
            .log
            .entries()
            .iter()
            .any(|(t, e)| *t == 2000 * MS && matches!(e, VmEvent::RxTimeout { .. })));
    }

    #[test]
    fn jammer_blocks_delivery() {
        let (mut sim, a, b) = pair();
        sim.medium_mut()
            .add_interferer(InterfererProfile::continuous(
                Band::Srd868,
                0,
                10.0,
                Position::new(10.0, 1.0, 3.5),
            ))
            .unwrap();
        let rx = sim
            .add_vm(
                b,
                Band::Srd868,
                compile("RX TIMEOUT 500\nREPORT RX_COUNT").unwrap(),
                cfg(),
                0,
            )
            .unwrap();
        sim.add_vm(a, Band::Srd868, compile("TX 01").unwrap(), cfg(), MS)
            .unwrap();
        sim.run_until(SECOND);
        let SlotOutcome::Halted(out) = sim.outcome(rx) else {
            panic!()
        };
        assert_eq!(out.report, Some(b"0".to_vec()));
        assert!(matches!(
            sim.deliveries()[0].reception,
            Reception::Collision { .. }
        ));
    }

    #[test]
    fn deadline_and_traps() {
        let (mut sim, a, b) = pair();
        let forever = sim
            .add_vm(
                a,
                Band::Srd868,
                compile("LOOP FOREVER\nRX TIMEOUT 100\nEND").unwrap(),
                cfg(),
                0,
            )
            .unwrap();
        let crash = sim
            .add_vm(b, Band::Srd868, compile("REPORT 1 / 0").unwrap(), cfg(), 0)
            .unwrap();
        sim.run_until(SECOND);
        assert!(matches!(sim.outcome(forever), SlotOutcome::Deadline(_)));
        let SlotOutcome::Trapped(c) = sim.outcome(crash) else {
            panic!()
        };
        assert_eq!(c.trap, Trap::DivZero);
    }

    #[test]
    fn sensing_in_cosim() {
        let (mut sim, _, b) = pair();
        sim.medium_mut()
            .add_interferer(InterfererProfile::continuous(
                Band::Srd868,
                2,
                0.0,
                Position::new(10.0, 0.0, 3.5),
            ))
            .unwrap();
        let s = sim
            .add_vm(
                b,
                Band::Srd868,
                compile("SET_CHANNEL 2\nSENSE WINDOW 100\nREPORT OCCUPANCY").unwrap(),
                cfg(),
                0,
            )
            .unwrap();
        sim.run_until(SECOND);
        let SlotOutcome::Halted(out) = sim.outcome(s) else {
            panic!()
        };
        assert_eq!(out.report, Some(b"1".to_vec()));
        assert_eq!(sim.sensed(s)[0].log.samples.len(), 100);
    }
}

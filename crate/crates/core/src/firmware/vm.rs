use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use super::bytecode::{Bytecode, Op};
use crate::{Micros, MS};

pub const DEFAULT_BUDGET: u64 = 1_000_000;
pub const MAX_STACK: usize = 64;
/// Target RAM: event log, operand stack, receive buffer and report together.
pub const MEMORY_LIMIT: usize = 64 * 1024;

const EVENT_OVERHEAD: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum Trap {
    #[error("budget")]
    Budget,
    #[error("stack")]
    StackOverflow,
    #[error("div-zero")]
    DivZero,
    #[error("channel-out-of-range")]
    ChannelOutOfRange,
    #[error("power-out-of-range")]
    PowerOutOfRange,
    #[error("memory")]
    Memory,
    #[error("type-mismatch")]
    TypeMismatch,
    #[error("overflow")]
    Overflow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bytes(Vec<u8>),
    Int(i64),
    Num(f64),
    Bool(bool),
}

impl Value {
    fn size(&self) -> usize {
        match self {
            Value::Bytes(b) => 8 + b.len(),
            _ => 8,
        }
    }

    /// Wire form served at `/result`.
    pub fn render(&self) -> Vec<u8> {
        match self {
            Value::Bytes(b) => b.clone(),
            Value::Int(v) => format!("{v}").into_bytes(),
            Value::Num(v) => format!("{v}").into_bytes(),
            Value::Bool(v) => format!("{v}").into_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VmEvent {
    SetChannel(u32),
    SetPower(f64),
    Tx {
        channel: u32,
        power_dbm: f64,
        payload: Vec<u8>,
    },
    Rx {
        channel: u32,
        payload: Vec<u8>,
    },
    RxTimeout {
        channel: u32,
    },
    Sense {
        channel: u32,
        window_ms: u32,
        occupancy: f64,
    },
    Report(Vec<u8>),
    Halt,
    Trap(Trap),
}

impl VmEvent {
    fn size(&self) -> usize {
        EVENT_OVERHEAD
            + match self {
                VmEvent::Tx { payload, .. }
                | VmEvent::Rx { payload, .. }
                | VmEvent::Report(payload) => payload.len(),
                _ => 0,
            }
    }
}

impl fmt::Display for VmEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VmEvent::SetChannel(c) => write!(f, "set_channel {c}"),
            VmEvent::SetPower(p) => write!(f, "set_power {p}"),
            VmEvent::Tx {
                channel,
                power_dbm,
                payload,
            } => write!(
                f,
                "tx ch={channel} power={power_dbm} data={}",
                hex::encode(payload)
            ),
            VmEvent::Rx { channel, payload } => {
                write!(f, "rx ch={channel} data={}", hex::encode(payload))
            }
            VmEvent::RxTimeout { channel } => write!(f, "rx_timeout ch={channel}"),
            VmEvent::Sense {
                channel,
                window_ms,
                occupancy,
            } => write!(
                f,
                "sense ch={channel} window_ms={window_ms} occupancy={occupancy}"
            ),
            VmEvent::Report(v) => write!(f, "report {}", hex::encode(v)),
            VmEvent::Halt => f.write_str("halt"),
            VmEvent::Trap(t) => write!(f, "trap {t}"),
        }
    }
}

/// Time-stamped record of everything the firmware did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    entries: Vec<(Micros, VmEvent)>,
    bytes: usize,
}

impl EventLog {
    pub fn entries(&self) -> &[(Micros, VmEvent)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One `<t_us> <event>` line per entry.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (t, e) in &self.entries {
            out.push_str(&format!("{t} {e}\n"));
        }
        out
    }

    fn push(&mut self, t: Micros, e: VmEvent) {
        self.bytes += e.size();
        self.entries.push((t, e));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmConfig {
    pub channel_count: u32,
    pub min_power_dbm: f64,
    pub max_power_dbm: f64,
    pub budget: u64,
    pub memory_limit: usize,
    pub initial_channel: u32,
    pub initial_power_dbm: f64,
}

impl Default for VmConfig {
    fn default() -> Self {
        Self {
            channel_count: 1,
            min_power_dbm: -30.0,
            max_power_dbm: 20.0,
            budget: DEFAULT_BUDGET,
            memory_limit: MEMORY_LIMIT,
            initial_channel: 0,
            initial_power_dbm: 0.0,
        }
    }
}

/// What the VM needs from the host before it can continue.
#[derive(Debug, Clone, PartialEq)]
pub enum Yield {
    /// Put one frame on air now; resume with `Continue` when it ends.
    Transmit {
        channel: u32,
        power_dbm: f64,
        payload: Vec<u8>,
    },
    /// Resume with `Continue` at `until`.
    Sleep {
        until: Micros,
    },
    /// Listen; resume with `Received` on delivery or at the timeout.
    Receive {
        channel: u32,
        timeout: Micros,
    },
    /// Resume with `Sensed` at the end of the window.
    Sense {
        channel: u32,
        window: Micros,
    },
    Halted,
    Trapped(Trap),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resume {
    Continue,
    Received(Option<Vec<u8>>),
    Sensed(f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub log: EventLog,
    pub report: Option<Vec<u8>>,
    pub steps: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("target trapped: {trap}")]
pub struct VmCrash {
    pub trap: Trap,
    pub output: RunOutput,
}

#[derive(Debug, Clone, PartialEq)]
enum Pending {
    None,
    Tx {
        payload: u16,
        next: u32,
        repeat: u32,
        t0: Micros,
        interval: Micros,
    },
    Rx {
        channel: u32,
    },
    Sense {
        channel: u32,
        window_ms: u32,
    },
    Done(Yield),
}

struct LoopFrame {
    remaining: Option<u32>,
}

/// Resumable interpreter. The host owns time and the radio; the VM only
/// sees `now` at each resume.
pub struct Vm {
    code: Bytecode,
    cfg: VmConfig,
    pc: usize,
    stack: Vec<Value>,
    stack_bytes: usize,
    loops: Vec<LoopFrame>,
    channel: u32,
    power_dbm: f64,
    rx_data: Vec<u8>,
    rx_count: i64,
    occupancy: f64,
    output: RunOutput,
    pending: Pending,
}

impl Vm {
    pub fn new(code: Bytecode, cfg: VmConfig) -> Self {
        Self {
            code,
            pc: 0,
            stack: Vec::new(),
            stack_bytes: 0,
            loops: Vec::new(),
            channel: cfg.initial_channel,
            power_dbm: cfg.initial_power_dbm,
            rx_data: Vec::new(),
            rx_count: 0,
            occupancy: 0.0,
            output: RunOutput::default(),
            pending: Pending::None,
            cfg,
        }
    }

    pub fn channel(&self) -> u32 {
        self.channel
    }

    pub fn power_dbm(&self) -> f64 {
        self.power_dbm
    }

    pub fn output(&self) -> &RunOutput {
        &self.output
    }

    pub fn into_output(self) -> RunOutput {
        self.output
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.pending, Pending::Done(_))
    }

    /// Runs until the next interaction with the host. The first call should
    /// pass `Resume::Continue` at the start time.
    pub fn resume(&mut self, now: Micros, input: Resume) -> Yield {
        let y = self.step(now, input);
        if matches!(y, Yield::Halted | Yield::Trapped(_)) {
            self.pending = Pending::Done(y.clone());
        }
        y
    }

    fn step(&mut self, now: Micros, input: Resume) -> Yield {
        match core::mem::replace(&mut self.pending, Pending::None) {
            Pending::Done(y) => {
                self.pending = Pending::Done(y.clone());
                return y;
            }
            Pending::None => {}
            Pending::Tx {
                payload,
                next,
                repeat,
                t0,
                interval,
            } => {
                if next < repeat {
                    return self.tx_frame(now, payload, next, repeat, t0, interval);
                }
            }
            Pending::Rx { channel } => {
                let ev = match input {
                    Resume::Received(Some(data)) => {
                        self.rx_count += 1;
                        self.rx_data = data.clone();
                        VmEvent::Rx {
                            channel,
                            payload: data,
                        }
                    }
                    _ => VmEvent::RxTimeout { channel },
                };
                if let Err(t) = self.log(now, ev) {
                    return self.trap(now, t);
                }
            }
            Pending::Sense { channel, window_ms } => {
                if let Resume::Sensed(o) = input {
                    self.occupancy = o;
                }
                let ev = VmEvent::Sense {
                    channel,
                    window_ms,
                    occupancy: self.occupancy,
                };
                if let Err(t) = self.log(now, ev) {
                    return self.trap(now, t);
                }
            }
        }
        match self.exec(now) {
            Ok(y) => y,
            Err(t) => self.trap(now, t),
        }
    }

    fn tx_frame(
        &mut self,
        now: Micros,
        payload: u16,
        next: u32,
        repeat: u32,
        t0: Micros,
        interval: Micros,
    ) -> Yield {
        let due = t0.saturating_add(interval.saturating_mul(next as u64));
        self.pending = Pending::Tx {
            payload,
            next: if now < due { next } else { next + 1 },
            repeat,
            t0,
            interval,
        };
        if now < due {
            return Yield::Sleep { until: due };
        }
        let data = self.code.consts[payload as usize].clone();
        let ev = VmEvent::Tx {
            channel: self.channel,
            power_dbm: self.power_dbm,
            payload: data.clone(),
        };
        if let Err(t) = self.log(now, ev) {
            self.pending = Pending::None;
            return self.trap(now, t);
        }
        Yield::Transmit {
            channel: self.channel,
            power_dbm: self.power_dbm,
            payload: data,
        }
    }

    fn trap(&mut self, now: Micros, t: Trap) -> Yield {
        // the trap entry itself is allowed to exceed the memory limit
        self.output.log.push(now, VmEvent::Trap(t));
        Yield::Trapped(t)
    }

    fn memory(&self) -> usize {
        self.output.log.bytes
            + self.stack_bytes
            + self.rx_data.len()
            + self.output.report.as_ref().map_or(0, Vec::len)
    }

    fn log(&mut self, now: Micros, e: VmEvent) -> Result<(), Trap> {
        self.output.log.push(now, e);
        self.check_memory()
    }

    fn check_memory(&self) -> Result<(), Trap> {
        if self.memory() > self.cfg.memory_limit {
            Err(Trap::Memory)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, v: Value) -> Result<(), Trap> {
        if self.stack.len() + self.loops.len() >= MAX_STACK {
            return Err(Trap::StackOverflow);
        }
        self.stack_bytes += v.size();
        self.stack.push(v);
        self.check_memory()
    }

    fn pop(&mut self) -> Result<Value, Trap> {
        // validated bytecode never underflows
        let v = self.stack.pop().ok_or(Trap::StackOverflow)?;
        self.stack_bytes -= v.size();
        Ok(v)
    }

    fn exec(&mut self, now: Micros) -> Result<Yield, Trap> {
        loop {
            let Some(op) = self.code.ops.get(self.pc).cloned() else {
                self.log(now, VmEvent::Halt)?;
                return Ok(Yield::Halted);
            };
            if self.output.steps >= self.cfg.budget {
                return Err(Trap::Budget);
            }
            self.output.steps += 1;
            self.pc += 1;
            match op {
                Op::PushInt(v) => self.push(Value::Int(v))?,
                Op::PushNum(v) => self.push(Value::Num(v))?,
                Op::PushBytes(i) => {
                    let b = self.code.consts[i as usize].clone();
                    self.push(Value::Bytes(b))?
                }
                Op::RxData => self.push(Value::Bytes(self.rx_data.clone()))?,
                Op::RxCount => self.push(Value::Int(self.rx_count))?,
                Op::Occupancy => self.push(Value::Num(self.occupancy))?,
                Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Eq => {
                    let b = self.pop()?;
                    let a = self.pop()?;
                    let v = binary(&op, a, b)?;
                    self.push(v)?;
                }
                Op::SetChannel(c) => {
                    if c >= self.cfg.channel_count {
                        return Err(Trap::ChannelOutOfRange);
                    }
                    self.channel = c;
                    self.log(now, VmEvent::SetChannel(c))?;
                }
                Op::SetPower(p) => {
                    if !(self.cfg.min_power_dbm..=self.cfg.max_power_dbm).contains(&p) {
                        return Err(Trap::PowerOutOfRange);
                    }
                    self.power_dbm = p;
                    self.log(now, VmEvent::SetPower(p))?;
                }
                Op::Tx {
                    payload,
                    repeat,
                    interval_ms,
                } => {
                    return Ok(self.tx_frame(
                        now,
                        payload,
                        0,
                        repeat,
                        now,
                        interval_ms as Micros * MS,
                    ));
                }
                Op::Rx { timeout_ms } => {
                    self.pending = Pending::Rx {
                        channel: self.channel,
                    };
                    return Ok(Yield::Receive {
                        channel: self.channel,
                        timeout: timeout_ms as Micros * MS,
                    });
                }
                Op::Sense { window_ms } => {
                    self.pending = Pending::Sense {
                        channel: self.channel,
                        window_ms,
                    };
                    return Ok(Yield::Sense {
                        channel: self.channel,
                        window: window_ms as Micros * MS,
                    });
                }
                Op::Report => {
                    let v = self.pop()?.render();
                    self.output.report = Some(v.clone());
                    self.log(now, VmEvent::Report(v))?;
                }
                Op::Loop { count, exit } => {
                    if count == 0 {
                        self.pc = exit as usize;
                    } else {
                        self.enter_loop(Some(count))?;
                    }
                }
                Op::LoopForever => self.enter_loop(None)?,
                Op::EndLoop { start } => {
                    let again = match self.loops.last_mut() {
                        Some(LoopFrame { remaining: Some(r) }) => {
                            *r -= 1;
                            *r > 0
                        }
                        Some(LoopFrame { remaining: None }) => true,
                        None => false,
                    };
                    if again {
                        self.pc = start as usize;
                    } else {
                        self.loops.pop();
                    }
                }
                Op::Halt => {
                    self.log(now, VmEvent::Halt)?;
                    return Ok(Yield::Halted);
                }
            }
        }
    }

    fn enter_loop(&mut self, remaining: Option<u32>) -> Result<(), Trap> {
        if self.stack.len() + self.loops.len() >= MAX_STACK {
            return Err(Trap::StackOverflow);
        }
        self.loops.push(LoopFrame { remaining });
        Ok(())
    }
}

fn binary(op: &Op, a: Value, b: Value) -> Result<Value, Trap> {
    use Value::*;
    if let Op::Eq = op {
        let eq = match (&a, &b) {
            (Int(x), Int(y)) => x == y,
            (Int(x), Num(y)) | (Num(y), Int(x)) => (*x as f64) == *y,
            (Num(x), Num(y)) => x == y,
            (Bytes(x), Bytes(y)) => x == y,
            (Bool(x), Bool(y)) => x == y,
            _ => false,
        };
        return Ok(Bool(eq));
    }
    match (a, b) {
        (Bytes(mut x), Bytes(y)) if matches!(op, Op::Add) => {
            x.extend_from_slice(&y);
            Ok(Bytes(x))
        }
        (Int(x), Int(y)) => {
            let r = match op {
                Op::Add => x.checked_add(y),
                Op::Sub => x.checked_sub(y),
                Op::Mul => x.checked_mul(y),
                _ => {
                    if y == 0 {
                        return Err(Trap::DivZero);
                    }
                    x.checked_div(y)
                }
            };
            r.map(Int).ok_or(Trap::Overflow)
        }
        (x, y) => {
            let (x, y) = (num(&x)?, num(&y)?);
            let r = match op {
                Op::Add => x + y,
                Op::Sub => x - y,
                Op::Mul => x * y,
                _ => {
                    if y == 0.0 {
                        return Err(Trap::DivZero);
                    }
                    x / y
                }
            };
            if r.is_finite() {
                Ok(Num(r))
            } else {
                Err(Trap::Overflow)
            }
        }
    }
}

fn num(v: &Value) -> Result<f64, Trap> {
    match v {
        Value::Int(i) => Ok(*i as f64),
        Value::Num(n) => Ok(*n),
        _ => Err(Trap::TypeMismatch),
    }
}

/// Blocking radio access for running a VM outside the co-simulation.
pub trait RadioPort {
    fn now(&self) -> Micros;
    /// Returns once the frame has left the antenna.
    fn transmit(&mut self, channel: u32, power_dbm: f64, payload: &[u8]);
    fn sleep_until(&mut self, t: Micros);
    fn receive(&mut self, channel: u32, timeout: Micros) -> Option<Vec<u8>>;
    fn sense(&mut self, channel: u32, window: Micros) -> f64;
}

/// Runs a program to completion against a blocking radio port.
pub fn run(code: &Bytecode, port: &mut dyn RadioPort, cfg: VmConfig) -> Result<RunOutput, VmCrash> {
    let mut vm = Vm::new(code.clone(), cfg);
    let mut input = Resume::Continue;
    loop {
        input = match vm.resume(port.now(), input) {
            Yield::Transmit {
                channel,
                power_dbm,
                payload,
            } => {
                port.transmit(channel, power_dbm, &payload);
                Resume::Continue
            }
            Yield::Sleep { until } => {
                port.sleep_until(until);
                Resume::Continue
            }
            Yield::Receive { channel, timeout } => Resume::Received(port.receive(channel, timeout)),
            Yield::Sense { channel, window } => Resume::Sensed(port.sense(channel, window)),
            Yield::Halted => return Ok(vm.into_output()),
            Yield::Trapped(trap) => {
                return Err(VmCrash {
                    trap,
                    output: vm.into_output(),
                })
            }
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::compile;
    use alloc::vec;

    /// Idle medium: frames take 1 ms, nothing is ever received.
    struct Quiet {
        t: Micros,
        inbox: Vec<(Micros, Vec<u8>)>,
    }

    impl RadioPort for Quiet {
        fn now(&self) -> Micros {
            self.t
        }
        fn transmit(&mut self, _c: u32, _p: f64, _d: &[u8]) {
            self.t += MS;
        }
        fn sleep_until(&mut self, t: Micros) {
            self.t = self.t.max(t);
        }
        fn receive(&mut self, _c: u32, timeout: Micros) -> Option<Vec<u8>> {
            let deadline = self.t + timeout;
            if let Some(i) = self
                .inbox
                .iter()
                .position(|(at, _)| *at >= self.t && *at <= deadline)
            {
                let (at, d) = self.inbox.remove(i);
                self.t = at;
                return Some(d);
            }
            self.t = deadline;
            None
        }
        fn sense(&mut self, _c: u32, window: Micros) -> f64 {
            self.t += window;
            0.25
        }
    }

    fn quiet() -> Quiet {
        Quiet {
            t: 0,
            inbox: Vec::new(),
        }
    }

    fn cfg(channels: u32) -> VmConfig {
        VmConfig {
            channel_count: channels,
            ..VmConfig::default()
        }
    }

    fn tx_times(out: &RunOutput) -> Vec<Micros> {
        out.log
            .entries()
            .iter()
            .filter(|(_, e)| matches!(e, VmEvent::Tx { .. }))
            .map(|(t, _)| *t)
            .collect()
    }

    #[test]
    fn tx_repeat_timing() {
        let code = compile("SET_CHANNEL 1\nTX DEADBEEF REPEAT 3 INTERVAL 100\n").unwrap();
        let mut port = quiet();
        port.t = 5 * MS;
        let out = run(&code, &mut port, cfg(2)).unwrap();
        assert_eq!(tx_times(&out), vec![5 * MS, 105 * MS, 205 * MS]);
    }

    #[test]
    fn back_to_back_frames_when_interval_shorter_than_airtime() {
        let code = compile("TX 00 REPEAT 3").unwrap();
        let out = run(&code, &mut quiet(), cfg(1)).unwrap();
        assert_eq!(tx_times(&out), vec![0, MS, 2 * MS]);
    }

    #[test]
    fn rx_report() {
        let code = compile("RX TIMEOUT 2000\nREPORT RX_DATA\n").unwrap();
        let mut port = quiet();
        port.inbox.push((50 * MS, vec![0xde, 0xad, 0xbe, 0xef]));
        let out = run(&code, &mut port, cfg(1)).unwrap();
        assert_eq!(out.report, Some(vec![0xde, 0xad, 0xbe, 0xef]));

        let out = run(&code, &mut quiet(), cfg(1)).unwrap();
        assert_eq!(out.report, Some(vec![]));
        assert!(out
            .log
            .entries()
            .contains(&(2000 * MS, VmEvent::RxTimeout { channel: 0 })));
    }

    #[test]
    fn traps() {
        let t = |src: &str, ch: u32| {
            run(&compile(src).unwrap(), &mut quiet(), cfg(ch))
                .unwrap_err()
                .trap
        };
        assert_eq!(t("SET_CHANNEL 99", 1), Trap::ChannelOutOfRange);
        assert_eq!(t("REPORT 1 / 0", 1), Trap::DivZero);
        assert_eq!(t("REPORT 1.5 / 0", 1), Trap::DivZero);
        assert_eq!(t("SET_POWER 40", 1), Trap::PowerOutOfRange);
        assert_eq!(t("REPORT 0x01 * 2", 1), Trap::TypeMismatch);
        assert_eq!(t("REPORT 9223372036854775807 + 1", 1), Trap::Overflow);
        assert_eq!(t("LOOP FOREVER\nEND", 1), Trap::Budget);
        let deep = alloc::format!("REPORT {}1{}", "(1+".repeat(70), ")".repeat(70));
        assert_eq!(t(&deep, 1), Trap::StackOverflow);
        let big = alloc::format!("LOOP FOREVER\nTX {}\nEND", "ab".repeat(255));
        assert_eq!(t(&big, 1), Trap::Memory);
    }

    #[test]
    fn trap_is_logged_and_sticky() {
        let code = compile("SET_CHANNEL 3").unwrap();
        let mut vm = Vm::new(code, cfg(1));
        assert_eq!(
            vm.resume(0, Resume::Continue),
            Yield::Trapped(Trap::ChannelOutOfRange)
        );
        assert_eq!(
            vm.resume(10, Resume::Continue),
            Yield::Trapped(Trap::ChannelOutOfRange)
        );
        assert_eq!(vm.output().log.render(), "0 trap channel-out-of-range\n");
    }

    #[test]
    fn loops_and_values() {
        let code =
            compile("LOOP 0\nTX 01\nEND\nLOOP 2\nSENSE WINDOW 10\nEND\nREPORT OCCUPANCY == 0.25\n")
                .unwrap();
        let out = run(&code, &mut quiet(), cfg(1)).unwrap();
        assert!(tx_times(&out).is_empty());
        assert_eq!(out.report, Some(b"true".to_vec()));
        assert_eq!(out.log.entries()[1].0, 20 * MS);

        let out = run(
            &compile("REPORT RX_COUNT + 2 * 3").unwrap(),
            &mut quiet(),
            cfg(1),
        )
        .unwrap();
        assert_eq!(out.report, Some(b"6".to_vec()));
        let out = run(
            &compile("REPORT 0xab + 0xcd").unwrap(),
            &mut quiet(),
            cfg(1),
        )
        .unwrap();
        assert_eq!(out.report, Some(vec![0xab, 0xcd]));
    }

    #[test]
    fn log_rendering() {
        let out = run(
            &compile("SET_CHANNEL 1\nTX 0a0b\n").unwrap(),
            &mut quiet(),
            cfg(2),
        )
        .unwrap();
        assert_eq!(
            out.log.render(),
            "0 set_channel 1\n0 tx ch=1 power=0 data=0a0b\n1000 halt\n"
        );
    }
}

//! The target node: flash receiver on the development interface, LCSP
//! server on the application interface and host for one firmware VM.
//!
//! Images arrive in [`FLASH_BLOCK`]-byte blocks, each acknowledged by index.
//! The full image checksum is checked at commit; a failed commit leaves the
//! previous image in place.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::digest::sha256_hex;
use crate::firmware::{Bytecode, BytecodeError, RunOutput, Trap, VmConfig, MAX_IMAGE_BYTES};
use crate::lcsp::{LcspRequest, LcspResponse, LcspServer, Method, MAX_RESPONSE_BODY};
use crate::radio::{Transceiver, MIN_TX_POWER_DBM};
use crate::{Micros, MS};

pub const FLASH_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetStatus {
    Unflashed,
    Idle,
    Armed,
    Running,
}

impl TargetStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetStatus::Unflashed => "unflashed",
            TargetStatus::Idle => "idle",
            TargetStatus::Armed => "armed",
            TargetStatus::Running => "busy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FlashError {
    #[error("target busy")]
    TargetBusy,
    #[error("no flash transfer in progress")]
    NoTransfer,
    #[error("expected block {expected}, got {got}")]
    OutOfOrder { expected: u32, got: u32 },
    #[error("block larger than {FLASH_BLOCK} bytes")]
    BlockTooLarge,
    #[error("image of {0} bytes exceeds target memory")]
    ImageTooLarge(usize),
    #[error("transfer incomplete: {received} of {total} bytes")]
    Incomplete { received: usize, total: usize },
    #[error("checksum mismatch: expected {expected}, computed {actual}")]
    VerifyFailed { expected: String, actual: String },
    #[error("image rejected: {0}")]
    InvalidImage(#[from] BytecodeError),
}

/// Body of `POST /start`: `channel=<n> power=<dBm> start_ms=<t>`, every
/// key optional.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StartCommand {
    pub channel: Option<u32>,
    pub power_dbm: Option<f64>,
    pub start_ms: u64,
}

impl StartCommand {
    pub fn encode(&self) -> Vec<u8> {
        let mut parts = Vec::new();
        if let Some(c) = self.channel {
            parts.push(format!("channel={c}"));
        }
        if let Some(p) = self.power_dbm {
            parts.push(format!("power={p}"));
        }
        parts.push(format!("start_ms={}", self.start_ms));
        parts.join(" ").into_bytes()
    }

    pub fn parse(body: &[u8]) -> Result<Self, String> {
        let text =
            core::str::from_utf8(body).map_err(|_| "start command is not UTF-8".to_string())?;
        let mut cmd = StartCommand::default();
        for part in text.split_whitespace() {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part}"))?;
            match k {
                "channel" => cmd.channel = Some(v.parse().map_err(|_| format!("bad channel {v}"))?),
                "power" => {
                    let p: f64 = v.parse().map_err(|_| format!("bad power {v}"))?;
                    if !p.is_finite() {
                        return Err(format!("bad power {v}"));
                    }
                    cmd.power_dbm = Some(p)
                }
                "start_ms" => cmd.start_ms = v.parse().map_err(|_| format!("bad start_ms {v}"))?,
                _ => return Err(format!("unknown key {k}")),
            }
        }
        Ok(cmd)
    }
}

/// Everything needed to boot the flashed program in a co-simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmedProgram {
    pub code: Bytecode,
    pub config: VmConfig,
    pub start: Micros,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunRecord {
    Halted(RunOutput),
    Trapped { trap: Trap, output: RunOutput },
    Deadline(RunOutput),
}

impl RunRecord {
    pub fn output(&self) -> &RunOutput {
        match self {
            RunRecord::Halted(o) | RunRecord::Deadline(o) => o,
            RunRecord::Trapped { output, .. } => output,
        }
    }
}

#[derive(Debug, Clone)]
struct Flashed {
    checksum: String,
    code: Bytecode,
}

#[derive(Debug, Clone)]
struct Transfer {
    total: usize,
    checksum: String,
    data: Vec<u8>,
}

impl Transfer {
    fn next_block(&self) -> u32 {
        self.data.len().div_ceil(FLASH_BLOCK) as u32
    }
}

#[derive(Debug, Clone)]
pub struct TargetNode {
    radio: Transceiver,
    image: Option<Flashed>,
    transfer: Option<Transfer>,
    armed: Option<StartCommand>,
    running: bool,
    last: Option<RunRecord>,
    budget: u64,
}

impl TargetNode {
    pub fn new(radio: Transceiver) -> Self {
        Self {
            radio,
            image: None,
            transfer: None,
            armed: None,
            running: false,
            last: None,
            budget: crate::firmware::DEFAULT_BUDGET,
        }
    }

    pub fn set_budget(&mut self, budget: u64) {
        self.budget = budget;
    }

    pub fn radio(&self) -> &Transceiver {
        &self.radio
    }

    pub fn status(&self) -> TargetStatus {
        if self.running {
            TargetStatus::Running
        } else if self.armed.is_some() {
            TargetStatus::Armed
        } else if self.image.is_some() {
            TargetStatus::Idle
        } else {
            TargetStatus::Unflashed
        }
    }

    pub fn checksum(&self) -> Option<&str> {
        self.image.as_ref().map(|i| i.checksum.as_str())
    }

    fn check_not_busy(&self) -> Result<(), FlashError> {
        match self.status() {
            TargetStatus::Armed | TargetStatus::Running => Err(FlashError::TargetBusy),
            _ => Ok(()),
        }
    }

    /// Opens a transfer, or resumes one for the same image. Returns the
    /// index of the next block the target expects.
    pub fn flash_begin(&mut self, total: usize, checksum: &str) -> Result<u32, FlashError> {
        self.check_not_busy()?;
        if total > MAX_IMAGE_BYTES {
            return Err(FlashError::ImageTooLarge(total));
        }
        if let Some(t) = &self.transfer {
            if t.total == total && t.checksum == checksum {
                return Ok(t.next_block());
            }
        }
        self.transfer = Some(Transfer {
            total,
            checksum: checksum.into(),
            data: Vec::with_capacity(total),
        });
        Ok(0)
    }

    /// Stores block `index`; returns the acknowledged index. A repeated
    /// block is acknowledged again without being stored twice.
    pub fn flash_block(&mut self, index: u32, data: &[u8]) -> Result<u32, FlashError> {
        self.check_not_busy()?;
        let t = self.transfer.as_mut().ok_or(FlashError::NoTransfer)?;
        if data.len() > FLASH_BLOCK {
            return Err(FlashError::BlockTooLarge);
        }
        let expected = t.next_block();
        if index < expected {
            return Ok(index);
        }
        if index != expected || t.data.len() % FLASH_BLOCK != 0 {
            return Err(FlashError::OutOfOrder {
                expected,
                got: index,
            });
        }
        if t.data.len() + data.len() > t.total {
            return Err(FlashError::ImageTooLarge(t.data.len() + data.len()));
        }
        t.data.extend_from_slice(data);
        Ok(index)
    }

    /// Verifies the assembled image and makes it current.
    pub fn flash_commit(&mut self) -> Result<String, FlashError> {
        self.check_not_busy()?;
        let t = self.transfer.take().ok_or(FlashError::NoTransfer)?;
        if t.data.len() != t.total {
            let e = FlashError::Incomplete {
                received: t.data.len(),
                total: t.total,
            };
            self.transfer = Some(t);
            return Err(e);
        }
        let actual = sha256_hex(&t.data);
        if actual != t.checksum {
            return Err(FlashError::VerifyFailed {
                expected: t.checksum,
                actual,
            });
        }
        let code = Bytecode::decode(&t.data)?;
        self.image = Some(Flashed {
            checksum: actual.clone(),
            code,
        });
        // results of the previous image are stale
        self.last = None;
        Ok(actual)
    }

    pub fn next_block(&self) -> Option<u32> {
        self.transfer.as_ref().map(Transfer::next_block)
    }

    pub fn arm(&mut self, cmd: StartCommand) -> Result<(), String> {
        match self.status() {
            TargetStatus::Unflashed => return Err("no image flashed".into()),
            TargetStatus::Armed | TargetStatus::Running => return Err("target busy".into()),
            TargetStatus::Idle => {}
        }
        if let Some(c) = cmd.channel {
            if c >= self.radio.channel_count {
                return Err(format!("channel {c} out of range"));
            }
        }
        if let Some(p) = cmd.power_dbm {
            if !(MIN_TX_POWER_DBM..=self.radio.tx_power_dbm).contains(&p) {
                return Err(format!("power {p} dBm out of range"));
            }
        }
        self.armed = Some(cmd);
        Ok(())
    }

    pub fn disarm(&mut self) {
        self.armed = None;
        self.running = false;
    }

    /// Hands the armed program to the simulator and marks the target busy.
    pub fn take_armed(&mut self) -> Option<ArmedProgram> {
        let cmd = self.armed.take()?;
        let image = self.image.as_ref()?;
        self.running = true;
        Some(ArmedProgram {
            code: image.code.clone(),
            config: VmConfig {
                channel_count: self.radio.channel_count,
                min_power_dbm: MIN_TX_POWER_DBM,
                max_power_dbm: self.radio.tx_power_dbm,
                budget: self.budget,
                memory_limit: crate::firmware::MEMORY_LIMIT,
                initial_channel: cmd.channel.unwrap_or(0),
                initial_power_dbm: cmd.power_dbm.unwrap_or(self.radio.tx_power_dbm),
            },
            start: cmd.start_ms * MS,
        })
    }

    /// Records the end of a run; the target returns to flashed-idle.
    pub fn finish(&mut self, record: RunRecord) {
        self.running = false;
        self.last = Some(record);
    }

    pub fn last_run(&self) -> Option<&RunRecord> {
        self.last.as_ref()
    }
}

fn page(bytes: &[u8], resource: &str, base: &str) -> Option<LcspResponse> {
    let n: usize = if resource == base {
        0
    } else {
        resource
            .strip_prefix(base)?
            .strip_prefix('/')?
            .parse()
            .ok()?
    };
    let start = n.saturating_mul(MAX_RESPONSE_BODY).min(bytes.len());
    let end = (start + MAX_RESPONSE_BODY).min(bytes.len());
    LcspResponse::ok(&bytes[start..end]).ok()
}

fn error(reason: &str) -> LcspResponse {
    LcspResponse::error(reason).expect("static reasons are valid")
}

impl LcspServer for TargetNode {
    fn handle(&mut self, req: &LcspRequest) -> LcspResponse {
        let r = req.resource();
        match (req.method(), r) {
            (Method::Get, "/status") => LcspResponse::ok(self.status().as_str()).expect("short"),
            (Method::Get, "/checksum") => match self.checksum() {
                Some(c) => LcspResponse::ok(c).expect("short"),
                None => error("no image flashed"),
            },
            (Method::Post, "/start") => match StartCommand::parse(req.body())
                .and_then(|c| self.arm(c))
            {
                Ok(()) => LcspResponse::ok("armed").expect("short"),
                Err(e) => LcspResponse::error(&e).unwrap_or_else(|_| error("bad start command")),
            },
            (Method::Get, _) if r == "/result" || r.starts_with("/result/") => match &self.last {
                None => error("no result"),
                Some(RunRecord::Trapped { trap, .. }) => error(&format!("trap {trap}")),
                Some(RunRecord::Deadline(_)) => error("deadline exceeded"),
                Some(RunRecord::Halted(out)) => {
                    let report = out.report.clone().unwrap_or_default();
                    page(&report, r, "/result").unwrap_or_else(|| error("unknown resource"))
                }
            },
            (Method::Get, _) if r == "/log" || r.starts_with("/log/") => {
                let log = self
                    .last
                    .as_ref()
                    .map(|l| l.output().log.render())
                    .unwrap_or_default();
                page(log.as_bytes(), r, "/log").unwrap_or_else(|| error("unknown resource"))
            }
            _ => error("unknown resource"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::firmware::compile;
    use crate::radio::Band;

    fn target() -> TargetNode {
        TargetNode::new(Transceiver::new(
            "AT86RF212",
            Band::Srd868,
            10.0,
            -110.0,
            320,
        ))
    }

    fn flash(t: &mut TargetNode, image: &[u8]) -> Result<String, FlashError> {
        let sum = sha256_hex(image);
        let mut next = t.flash_begin(image.len(), &sum)?;
        for (i, block) in image.chunks(FLASH_BLOCK).enumerate().skip(next as usize) {
            next = t.flash_block(i as u32, block)?;
        }
        let _ = next;
        t.flash_commit()
    }

    fn get(t: &mut TargetNode, r: &str) -> LcspResponse {
        t.handle(&LcspRequest::get(r).unwrap())
    }

    #[test]
    fn flash_and_status() {
        let mut t = target();
        assert_eq!(get(&mut t, "/status").body(), b"unflashed");
        let image = compile("TX DEADBEEF").unwrap().encode();
        let sum = flash(&mut t, &image).unwrap();
        assert_eq!(sum, sha256_hex(&image));
        assert_eq!(get(&mut t, "/status").body(), b"idle");
        assert_eq!(get(&mut t, "/checksum").body(), sum.as_bytes());
        assert_eq!(
            get(&mut t, "/nope"),
            LcspResponse::Error("unknown resource".into())
        );
    }

    #[test]
    fn corrupted_transfer_keeps_previous_image() {
        let mut t = target();
        let old = compile("HALT").unwrap().encode();
        let old_sum = flash(&mut t, &old).unwrap();
        let src: String = (0..60)
            .map(|i| format!("TX {:02x}{}\n", i, "ee".repeat(10)))
            .collect();
        let new = compile(&src).unwrap().encode();
        assert!(new.len() > FLASH_BLOCK);
        let sum = sha256_hex(&new);
        t.flash_begin(new.len(), &sum).unwrap();
        for (i, b) in new.chunks(FLASH_BLOCK).enumerate() {
            let mut b = b.to_vec();
            if i == 1 {
                b[0] ^= 0xff;
            }
            t.flash_block(i as u32, &b).unwrap();
        }
        assert!(matches!(
            t.flash_commit(),
            Err(FlashError::VerifyFailed { .. })
        ));
        assert_eq!(t.checksum(), Some(old_sum.as_str()));
    }

    #[test]
    fn transfer_resumes_from_last_ack() {
        let mut t = target();
        let src: String = (0..60)
            .map(|i| format!("TX {:02x}{}\n", i, "ee".repeat(10)))
            .collect();
        let image = compile(&src).unwrap().encode();
        let sum = sha256_hex(&image);
        t.flash_begin(image.len(), &sum).unwrap();
        t.flash_block(0, &image[..FLASH_BLOCK]).unwrap();
        // link drops, transfer restarts
        assert_eq!(t.flash_begin(image.len(), &sum).unwrap(), 1);
        assert_eq!(t.flash_block(0, &image[..FLASH_BLOCK]).unwrap(), 0);
        assert!(matches!(
            t.flash_block(5, &image[..1]),
            Err(FlashError::OutOfOrder {
                expected: 1,
                got: 5
            })
        ));
        assert_eq!(flash(&mut t, &image).unwrap(), sum);
    }

    #[test]
    fn busy_target_refuses_flash() {
        let mut t = target();
        flash(&mut t, &compile("HALT").unwrap().encode()).unwrap();
        let start = LcspRequest::post(
            "/start",
            StartCommand {
                channel: Some(1),
                ..Default::default()
            }
            .encode(),
        )
        .unwrap();
        assert!(t.handle(&start).is_ok());
        assert_eq!(get(&mut t, "/status").body(), b"armed");
        assert_eq!(t.flash_begin(10, "x"), Err(FlashError::TargetBusy));
        let armed = t.take_armed().unwrap();
        assert_eq!(armed.config.initial_channel, 1);
        assert_eq!(get(&mut t, "/status").body(), b"busy");
        t.finish(RunRecord::Halted(RunOutput::default()));
        assert_eq!(get(&mut t, "/status").body(), b"idle");
        assert_eq!(get(&mut t, "/result").body(), b"");
    }

    #[test]
    fn start_command_round_trip() {
        let c = StartCommand {
            channel: Some(3),
            power_dbm: Some(-2.5),
            start_ms: 40,
        };
        assert_eq!(StartCommand::parse(&c.encode()).unwrap(), c);
        assert!(StartCommand::parse(b"colour=red").is_err());
    }

    #[test]
    fn paged_log() {
        let mut t = target();
        flash(&mut t, &compile("HALT").unwrap().encode()).unwrap();
        let src: String = (0..300).map(|_| "REPORT 0xdeadbeef\n").collect();
        let code = compile(&src).unwrap();
        let out = crate::firmware::run(&code, &mut NullPort, VmConfig::default()).unwrap();
        let full = out.log.render();
        t.arm(StartCommand::default()).unwrap();
        t.take_armed();
        t.finish(RunRecord::Halted(out));
        let mut joined = Vec::new();
        for n in 0.. {
            let p = get(&mut t, &format!("/log/{n}"));
            if p.body().is_empty() {
                break;
            }
            joined.extend_from_slice(p.body());
        }
        assert!(full.len() > MAX_RESPONSE_BODY);
        assert_eq!(joined, full.as_bytes());
    }

    struct NullPort;

    impl crate::firmware::RadioPort for NullPort {
        fn now(&self) -> Micros {
            0
        }
        fn transmit(&mut self, _: u32, _: f64, _: &[u8]) {}
        fn sleep_until(&mut self, _: Micros) {}
        fn receive(&mut self, _: u32, _: Micros) -> Option<Vec<u8>> {
            None
        }
        fn sense(&mut self, _: u32, _: Micros) -> f64 {
            0.0
        }
    }
}

use std::path::PathBuf;

use coins_core::firmware::{
    compile, run, Bytecode, CompileError, RadioPort, Trap, VmConfig, VmEvent,
};
use coins_core::{Micros, MS};
use proptest::prelude::*;

/// Replays a fixed input schedule: frames appear at given times, sensing
/// returns a fixed occupancy per channel.
#[derive(Default)]
struct ScheduledPort {
    t: Micros,
    channels: u32,
    airtime_per_byte: Micros,
    frames: Vec<(Micros, u32, Vec<u8>)>,
    occupancy: Vec<(u32, f64)>,
}

impl ScheduledPort {
    fn parse(text: &str) -> Self {
        let mut p = ScheduledPort {
            channels: 1,
            airtime_per_byte: 320,
            ..Default::default()
        };
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f[0] {
                "channels" => p.channels = f[1].parse().unwrap(),
                "airtime_us_per_byte" => p.airtime_per_byte = f[1].parse().unwrap(),
                "frame" => p.frames.push((
                    f[1].parse::<u64>().unwrap() * MS,
                    f[2].parse().unwrap(),
                    hex::decode(f[3]).unwrap(),
                )),
                "occupancy" => p
                    .occupancy
                    .push((f[1].parse().unwrap(), f[2].parse().unwrap())),
                other => panic!("unknown schedule line {other}"),
            }
        }
        p
    }
}

impl RadioPort for ScheduledPort {
    fn now(&self) -> Micros {
        self.t
    }
    fn transmit(&mut self, _channel: u32, _power: f64, payload: &[u8]) {
        self.t += self.airtime_per_byte * payload.len() as u64;
    }
    fn sleep_until(&mut self, t: Micros) {
        self.t = self.t.max(t);
    }
    fn receive(&mut self, channel: u32, timeout: Micros) -> Option<Vec<u8>> {
        let deadline = self.t + timeout;
        let hit = self
            .frames
            .iter()
            .position(|(at, ch, _)| *ch == channel && *at >= self.t && *at <= deadline);
        match hit {
            Some(i) => {
                let (at, _, data) = self.frames.remove(i);
                self.t = at;
                Some(data)
            }
            None => {
                self.t = deadline;
                None
            }
        }
    }
    fn sense(&mut self, channel: u32, window: Micros) -> f64 {
        self.t += window;
        self.occupancy
            .iter()
            .find(|(c, _)| *c == channel)
            .map_or(0.0, |(_, v)| *v)
    }
}

fn execute(source: &str, port: &mut ScheduledPort) -> String {
    let code = compile(source).unwrap();
    let cfg = VmConfig {
        channel_count: port.channels,
        ..VmConfig::default()
    };
    match run(&code, port, cfg) {
        Ok(out) => out.log.render(),
        Err(crash) => crash.output.log.render(),
    }
}

#[test]
fn golden_corpus() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../corpus/firmware");
    let mut sources: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "fw"))
        .collect();
    sources.sort();
    assert!(sources.len() >= 10);
    for src in sources {
        let source = std::fs::read_to_string(&src).unwrap();
        let mut port =
            ScheduledPort::parse(&std::fs::read_to_string(src.with_extension("schedule")).unwrap());
        let expected = std::fs::read_to_string(src.with_extension("log")).unwrap();
        assert_eq!(execute(&source, &mut port), expected, "{}", src.display());
    }
}

#[test]
fn tx_repeat_is_spaced_by_the_interval() {
    let mut port = ScheduledPort::parse("channels 2");
    port.t = 7 * MS;
    let code = compile("SET_CHANNEL 1\nTX DEADBEEF REPEAT 3 INTERVAL 100\n").unwrap();
    let cfg = VmConfig {
        channel_count: 2,
        ..VmConfig::default()
    };
    let out = run(&code, &mut port, cfg).unwrap();
    let tx: Vec<Micros> = out
        .log
        .entries()
        .iter()
        .filter(|(_, e)| matches!(e, VmEvent::Tx { channel: 1, .. }))
        .map(|(t, _)| *t)
        .collect();
    assert_eq!(tx, vec![7 * MS, 107 * MS, 207 * MS]);
}

#[test]
fn receive_reports_the_frame() {
    let mut port = ScheduledPort::parse("frame 50 0 deadbeef");
    let code = compile("RX TIMEOUT 2000\nREPORT RX_DATA\n").unwrap();
    let out = run(&code, &mut port, VmConfig::default()).unwrap();
    assert_eq!(out.report.as_deref(), Some(&[0xde, 0xad, 0xbe, 0xef][..]));
}

#[test]
fn documented_examples_compile() {
    let doc = std::fs::read_to_string(
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../docs/firmware.md"),
    )
    .unwrap();
    let examples = &doc[doc.find("## Examples").unwrap()..];
    let blocks: Vec<&str> = examples
        .split("```text\n")
        .skip(1)
        .map(|b| b.split("```").next().unwrap())
        .collect();
    assert_eq!(blocks.len(), 3);
    for b in blocks {
        compile(b).unwrap_or_else(|e| panic!("{b}: {e}"));
    }
}

#[test]
fn non_hex_payload_is_a_syntax_error() {
    assert!(matches!(
        compile("TX ZZZZ"),
        Err(CompileError::Syntax { line: 1, .. })
    ));
}

#[test]
fn unknown_identifier_fails_at_compile_time() {
    assert!(compile("REPORT RX_BOGUS\n").is_err());
    assert!(compile("LOOP 2\nTX AA\n").is_err());
    assert!(compile("END\n").is_err());
}

#[test]
fn channel_out_of_range_traps() {
    let code = compile("SET_CHANNEL 99\n").unwrap();
    let crash = run(&code, &mut ScheduledPort::parse(""), VmConfig::default()).unwrap_err();
    assert_eq!(crash.trap, Trap::ChannelOutOfRange);
}

#[test]
fn endless_loop_exhausts_the_budget() {
    let code = compile("LOOP FOREVER\nREPORT 1\nEND\n").unwrap();
    let cfg = VmConfig {
        budget: 10_000,
        ..VmConfig::default()
    };
    let crash = run(&code, &mut ScheduledPort::parse(""), cfg).unwrap_err();
    assert!(matches!(crash.trap, Trap::Budget | Trap::Memory));
    assert!(crash.output.steps <= 10_000);
}

#[test]
fn bytecode_image_round_trips() {
    let code =
        compile("SET_CHANNEL 1\nLOOP 3\nTX 00ff REPEAT 2 INTERVAL 5\nEND\nREPORT OCCUPANCY == 1\n")
            .unwrap();
    let image = code.encode();
    assert_eq!(&image[..4], b"CFW1");
    assert_eq!(Bytecode::decode(&image).unwrap(), code);
}

fn statement() -> impl Strategy<Value = String> {
    let hex = proptest::collection::vec(any::<u8>(), 1..8).prop_map(hex::encode);
    prop_oneof![
        (0u32..4).prop_map(|c| format!("SET_CHANNEL {c}")),
        (-40i32..30).prop_map(|p| format!("SET_POWER {p}")),
        (hex, 1u32..4, 0u32..50).prop_map(|(h, r, i)| format!("TX {h} REPEAT {r} INTERVAL {i}")),
        (0u32..300).prop_map(|t| format!("RX TIMEOUT {t}")),
        (1u32..50).prop_map(|w| format!("SENSE WINDOW {w}")),
        prop_oneof![
            Just("RX_DATA".to_string()),
            Just("RX_COUNT / 0".to_string()),
            Just("OCCUPANCY == 0".to_string()),
            Just("RX_DATA + 1".to_string()),
            (any::<u32>(), any::<u32>()).prop_map(|(a, b)| format!("{a} * {b} * {b}")),
        ]
        .prop_map(|e| format!("REPORT {e}")),
        Just("HALT".to_string()),
    ]
}

fn program() -> impl Strategy<Value = String> {
    proptest::collection::vec((statement(), 0u8..4), 0..12).prop_map(|lines| {
        let mut out = String::new();
        for (s, wrap) in lines {
            match wrap {
                0 => out.push_str(&format!("LOOP FOREVER\n{s}\nEND\n")),
                1 => out.push_str(&format!("LOOP 50\n{s}\nEND\n")),
                _ => out.push_str(&format!("{s}\n")),
            }
        }
        out
    })
}

proptest! {
    #[test]
    fn compilation_is_deterministic(src in program()) {
        let a = compile(&src).map(|c| c.encode());
        let b = compile(&src).map(|c| c.encode());
        prop_assert_eq!(a, b);
    }

    #[test]
    fn every_program_terminates(src in program(), frames in proptest::collection::vec((0u64..400, 0u32..4), 0..6)) {
        let code = compile(&src).unwrap();
        let mut port = ScheduledPort::parse("channels 4\noccupancy 1 0.5");
        port.frames = frames.into_iter().map(|(t, c)| (t * MS, c, vec![1, 2, 3])).collect();
        let cfg = VmConfig { channel_count: 4, budget: 20_000, ..VmConfig::default() };
        let out = match run(&code, &mut port, cfg) {
            Ok(o) => o,
            Err(c) => {
                prop_assert!(matches!(c.output.log.entries().last(), Some((_, VmEvent::Trap(t))) if *t == c.trap));
                c.output
            }
        };
        prop_assert!(out.steps <= 20_000);
        let times: Vec<Micros> = out.log.entries().iter().map(|(t, _)| *t).collect();
        prop_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }
}

mod common;

use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use coins::client::Client;
use coins::server::{Health, SenseReply};
use coins_core::registry::DeviceRecord;
use coins_core::run::PipelineRun;

const BIN: &str = env!("CARGO_BIN_EXE_coins");

struct Server {
    child: Child,
    addr: String,
    _dir: tempfile::TempDir,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn free_addr() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

fn serve(extra: &[&str]) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let addr = free_addr();
    let data = dir.path().join("data");
    let mut args = vec![
        "serve",
        "--data-dir",
        data.to_str().unwrap(),
        "--listen",
        &addr,
    ];
    args.extend_from_slice(extra);
    let child = Command::new(BIN)
        .args(&args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let s = Server {
        child,
        addr,
        _dir: dir,
    };
    let deadline = Instant::now() + Duration::from_secs(20);
    while Instant::now() < deadline {
        if coins_at(&s.addr, &["--json", "devices", "--state", "available"])
            .status
            .success()
        {
            return s;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    panic!("server on {} did not come up", s.addr);
}

fn coins_at(addr: &str, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--addr")
        .arg(addr)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

impl Server {
    fn run(&self, args: &[&str]) -> Output {
        coins_at(&self.addr, args)
    }
}

#[test]
fn serve_lists_the_seed_fleet() {
    let s = serve(&[]);
    let o = s.run(&["devices"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 79);
    let o = s.run(&["devices", "--type", "UWB"]);
    assert_eq!(stdout(&o).lines().count(), 31);
    let o = s.run(&["--json", "devices", "--type", "LPWA", "--env", "outdoor"]);
    let ds: Vec<DeviceRecord> = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(ds.len(), 3);
    let back = serde_json::to_string_pretty(&ds).unwrap();
    assert_eq!(back.trim(), stdout(&o).trim());
    let h: Health = Client::new(&s.addr).health().unwrap();
    assert_eq!(h.devices, 79);
}

#[test]
fn second_server_on_one_address_fails() {
    let s = serve(&[]);
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args([
            "serve",
            "--data-dir",
            dir.path().to_str().unwrap(),
            "--listen",
            &s.addr,
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("AddressInUse"));
}

#[test]
fn empty_seed_serves_no_devices() {
    let dir = tempfile::tempdir().unwrap();
    let seed = dir.path().join("empty.json");
    std::fs::write(&seed, r#"{"devices": []}"#).unwrap();
    let s = serve(&["--seed", seed.to_str().unwrap()]);
    let o = s.run(&["devices"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "");
    let h: Health = Client::new(&s.addr).health().unwrap();
    assert_eq!(h.devices, 0);
}

#[test]
fn bad_seed_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let seed = dir.path().join("bad.json");
    std::fs::write(&seed, "{not json").unwrap();
    let o = Command::new(BIN)
        .args([
            "serve",
            "--data-dir",
            dir.path().to_str().unwrap(),
            "--listen",
            &free_addr(),
            "--seed",
            seed.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("BadSeedFile"));
}

fn scenario_dir(name: &str) -> String {
    common::scenarios().join(name).to_str().unwrap().to_string()
}

#[test]
fn push_then_status() {
    let s = serve(&[]);
    let o = s.run(&["push", &scenario_dir("min-test")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let id = stdout(&o).trim().to_string();
    let deadline = Instant::now() + Duration::from_secs(60);
    let line = loop {
        let line = stdout(&s.run(&["status", &id])).trim().to_string();
        if line.starts_with("Reported") || line.starts_with("Failed") || Instant::now() > deadline {
            break line;
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(line, "Reported PASS");

    let o = s.run(&["--json", "status", &id]);
    let run: PipelineRun = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(
        serde_json::to_string_pretty(&run).unwrap().trim(),
        stdout(&o).trim()
    );
    let o = s.run(&["report", &id]);
    let text = stdout(&o);
    assert!(text.contains("verdict PASS"), "{text}");
    assert!(text.contains("notification "), "{text}");
}

#[test]
fn push_without_config_exits_3() {
    let s = serve(&[]);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("main.fw"), "HALT\n").unwrap();
    let o = s.run(&["push", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("MissingConfig"));
}

#[test]
fn push_with_server_down_exits_2() {
    let o = coins_at(&free_addr(), &["push", &scenario_dir("min-test")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_ids_exit_4() {
    let s = serve(&[]);
    assert_eq!(s.run(&["status", "r999999"]).status.code(), Some(4));
    assert_eq!(s.run(&["report", "r999999"]).status.code(), Some(4));
    assert_eq!(
        s.run(&["sense", "no-such-device", "0"]).status.code(),
        Some(4)
    );
    assert_eq!(
        s.run(&["tag", &"0".repeat(64), "v1"]).status.code(),
        Some(4)
    );
}

fn sense(s: &Server, window_ms: &str) -> SenseReply {
    let o = s.run(&["--json", "sense", "srd-a-01", "0", "--window-ms", window_ms]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn sense_reports_interferer_duty() {
    let interferers = |f: &str| {
        common::scenarios()
            .join("interferers")
            .join(f)
            .to_str()
            .unwrap()
            .to_string()
    };
    let s = serve(&["--interferers", &interferers("jammer.json")]);
    let r = sense(&s, "1000");
    assert!(r.occupancy > 0.99, "{}", r.occupancy);
    drop(s);
    let s = serve(&["--interferers", &interferers("duty30.json")]);
    let r = sense(&s, "10000");
    assert!(r.samples >= 10_000);
    assert!((r.occupancy - 0.30).abs() <= 0.02, "{}", r.occupancy);
    let quiet = s.run(&["--json", "sense", "srd-a-01", "3"]);
    let q: SenseReply = serde_json::from_str(&stdout(&quiet)).unwrap();
    assert_eq!(q.occupancy, 0.0);
}

#[test]
fn histogram_is_reproducible() {
    let s = serve(&[]);
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let o = s.run(&[
            "histogram",
            "srd-a-01",
            "0",
            "--window-ms",
            "500",
            "--out",
            p.to_str().unwrap(),
        ]);
        assert!(o.status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(Path::new(&a).metadata().unwrap().len() > 0);
}

#[test]
fn seed_prints_the_built_in_fleet() {
    let o = Command::new(BIN)
        .args(["seed", "--print"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let f: coins::fleet::SeedFile = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(f.devices.len(), 79);
}

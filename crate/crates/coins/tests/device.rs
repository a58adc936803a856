mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use coins::app::App;
use coins::daemon::{DeviceDaemon, DeviceError, FlashFault};
use coins_core::firmware::VmEvent;
use coins_core::lcsp::LcspRequest;
use coins_core::target::StartCommand;
use coins_core::SECOND;

const RUN: &str = "r-device";

const SPEC: &str = "[build]\ncache_inputs = build.spec, fw/app.fw\nstep = compile_firmware fw/app.fw -> out/app.cfw\n";

fn files(fw: &str) -> BTreeMap<String, Vec<u8>> {
    BTreeMap::from([
        ("build.spec".to_string(), SPEC.as_bytes().to_vec()),
        ("fw/app.fw".to_string(), fw.as_bytes().to_vec()),
        ("README".to_string(), b"notes".to_vec()),
    ])
}

fn setup(dir: &std::path::Path) -> (Arc<App>, Arc<DeviceDaemon>) {
    let mut cfg = common::config(dir);
    cfg.workers = false;
    cfg.sweeper = false;
    let app = App::start(cfg).unwrap();
    let d = app.testbed.daemon("srd-a-07").unwrap();
    app.registry.reserve(RUN, &[d.id().clone()]).unwrap();
    (app, d)
}

fn build(d: &DeviceDaemon, commit: &str) -> Result<coins::daemon::BuildReport, DeviceError> {
    d.build(RUN, "build.spec", "out/app.cfw", "rx", commit)
}

fn image(d: &DeviceDaemon, commit: &str) -> coins_core::build::FirmwareImage {
    let r = build(d, commit).unwrap();
    d.cached_image(&r.cache_key, commit).unwrap()
}

#[test]
fn deploy_replaces_the_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let (_app, d) = setup(dir.path());
    let staged = d.deploy(RUN, files("HALT\n")).unwrap();
    assert_eq!(staged, vec!["README", "build.spec", "fw/app.fw"]);
    let mut changed = files("HALT\n");
    changed.insert("README".into(), b"edited".to_vec());
    d.deploy(RUN, changed).unwrap();
    let ws = d.workspace(RUN).unwrap();
    assert_eq!(ws["README"], b"edited");
    assert_eq!(ws["fw/app.fw"], b"HALT\n");
    assert_eq!(ws["build.spec"], SPEC.as_bytes());
}

#[test]
fn deploy_requires_a_reservation() {
    let dir = tempfile::tempdir().unwrap();
    let (app, _) = setup(dir.path());
    let other = app.testbed.daemon("srd-a-08").unwrap();
    assert!(matches!(
        other.deploy(RUN, files("HALT\n")),
        Err(DeviceError::NotReserved { .. })
    ));
}

#[test]
fn rebuild_of_identical_inputs_hits_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let (_app, d) = setup(dir.path());
    d.deploy(RUN, files("TX AA\n")).unwrap();
    let cold = build(&d, "c1").unwrap();
    assert!(!cold.cache_hit);
    assert_eq!(cold.steps_executed, 1);
    let img = d.cached_image(&cold.cache_key, "c1").unwrap();
    assert_eq!(img.checksum, coins_core::digest::sha256_hex(&img.bytecode));
    assert_eq!(cold.checksum, img.checksum);
    // a non-input file changes, the image does not
    let mut f = files("TX AA\n");
    f.insert("README".into(), b"other".to_vec());
    d.deploy(RUN, f).unwrap();
    let warm = build(&d, "c2").unwrap();
    assert!(warm.cache_hit);
    assert_eq!(warm.steps_executed, 0);
    assert_eq!(warm.checksum, cold.checksum);
    assert!(warm.virtual_us < cold.virtual_us);
}

#[test]
fn syntax_error_fails_the_build_but_not_the_daemon() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::config(dir.path());
    cfg.workers = false;
    cfg.sweeper = false;
    let app = App::start(cfg).unwrap();
    let d = app.testbed.daemon("srd-a-07").unwrap();
    app.registry.reserve(RUN, &[d.id().clone()]).unwrap();
    let before = d.heartbeat_count();
    d.deploy(RUN, files("TX ZZZZ\n")).unwrap();
    for _ in 0..3 {
        match build(&d, "c1") {
            Err(DeviceError::BuildFailed { log }) => assert!(log.contains("fw/app.fw"), "{log}"),
            other => panic!("{other:?}"),
        }
    }
    // heartbeats are every 10 s virtual, 0.1 s wall in fast mode
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    while d.heartbeat_count() < before + 2 && std::time::Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(20));
    }
    assert!(d.heartbeat_count() >= before + 2);
    assert_eq!(d.metrics()["builds_failed"], 3.0);
}

#[test]
fn flash_verifies_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let (_app, d) = setup(dir.path());
    let big: String = (0..200)
        .map(|i| format!("TX {:02x}{:02x}\n", i % 256, (i * 7) % 256))
        .collect();
    d.deploy(RUN, files(&big)).unwrap();
    let img = image(&d, "c1");
    assert!(img.bytecode.len() > 2 * coins_core::target::FLASH_BLOCK);
    assert_eq!(d.flash(&img).unwrap(), img.checksum);
    d.inject_flash_fault(FlashFault::CorruptBlock(1));
    assert!(matches!(
        d.flash(&img),
        Err(DeviceError::FlashVerifyFailed(_))
    ));
    // the previous image is still in place
    assert_eq!(
        d.with_target(|t| t.checksum().map(str::to_string)),
        Some(img.checksum.clone())
    );
    assert_eq!(d.flash(&img).unwrap(), img.checksum);
}

#[test]
fn flash_while_armed_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (_app, d) = setup(dir.path());
    d.deploy(RUN, files("RX TIMEOUT 10\n")).unwrap();
    let img = image(&d, "c1");
    d.flash(&img).unwrap();
    let start = LcspRequest::post("/start", StartCommand::default().encode()).unwrap();
    assert!(d.lcsp(&start).unwrap().is_ok());
    assert_eq!(
        d.lcsp(&LcspRequest::get("/status").unwrap())
            .unwrap()
            .body(),
        b"armed"
    );
    assert_eq!(d.flash(&img), Err(DeviceError::TargetBusy));
}

#[test]
fn exec_examples() {
    let dir = tempfile::tempdir().unwrap();
    let (app, d) = setup(dir.path());
    let start = LcspRequest::post("/start", StartCommand::default().encode()).unwrap();

    d.deploy(RUN, files("RX TIMEOUT 200\nREPORT RX_DATA\n"))
        .unwrap();
    d.flash(&image(&d, "c1")).unwrap();
    let (out, log) = app
        .testbed
        .exec_and_collect("srd-a-07", &start, 5 * SECOND)
        .unwrap();
    assert!(out.is_empty());
    assert!(log.contains("rx_timeout ch=0"), "{log}");

    d.deploy(RUN, files("TX 0102 REPEAT 4 INTERVAL 20\n"))
        .unwrap();
    d.flash(&image(&d, "c2")).unwrap();
    let (_, log) = app
        .testbed
        .exec_and_collect("srd-a-07", &start, 5 * SECOND)
        .unwrap();
    assert_eq!(
        log.lines().filter(|l| l.contains(" tx ch=0")).count(),
        4,
        "{log}"
    );
    let last = d.with_target(|t| t.last_run().cloned()).unwrap();
    let txs = last
        .output()
        .log
        .entries()
        .iter()
        .filter(|(_, e)| matches!(e, VmEvent::Tx { .. }))
        .count();
    assert_eq!(txs, 4);

    d.deploy(RUN, files("REPORT 1 / 0\n")).unwrap();
    d.flash(&image(&d, "c3")).unwrap();
    match app.testbed.exec_and_collect("srd-a-07", &start, 5 * SECOND) {
        Err(DeviceError::TargetCrash { log }) => assert!(log.contains("trap div-zero"), "{log}"),
        other => panic!("{other:?}"),
    }
    d.deploy(RUN, files("HALT\n")).unwrap();
    let img = image(&d, "c4");
    assert_eq!(d.flash(&img).unwrap(), img.checksum);
}

#[test]
fn build_is_deterministic_across_devices() {
    let dir = tempfile::tempdir().unwrap();
    let (app, d) = setup(dir.path());
    let e = app.testbed.daemon("srd-b-01").unwrap();
    app.registry.reserve("r-other", &[e.id().clone()]).unwrap();
    let src = "SET_CHANNEL 2\nLOOP 3\nTX CAFE\nEND\n";
    d.deploy(RUN, files(src)).unwrap();
    e.deploy("r-other", files(src)).unwrap();
    let a = build(&d, "c1").unwrap();
    let b = e
        .build("r-other", "build.spec", "out/app.cfw", "rx", "c1")
        .unwrap();
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(a.cache_key, b.cache_key);
}

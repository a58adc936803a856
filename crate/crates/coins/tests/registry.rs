mod common;

use std::collections::BTreeMap;

use coins::fleet::{table1, SeedFile};
use coins_core::radio::{Environment, Position};
use coins_core::registry::{Availability, DeviceFilter, InfraState, NodeType};

fn count(f: &SeedFile, t: NodeType, e: Environment) -> usize {
    f.devices
        .iter()
        .filter(|d| d.node_type == t && d.environment == e)
        .count()
}

#[test]
fn built_in_fleet_matches_the_published_counts() {
    let f = table1();
    assert_eq!(f.devices.len(), 79);
    let expect = [
        (NodeType::SRD_A, 21, 0),
        (NodeType::SRD_B, 21, 0),
        (NodeType::LPWA, 3, 1),
        (NodeType::UWB, 11, 20),
        (NodeType::UHF_SENSE, 2, 0),
    ];
    for (t, out, ind) in expect {
        assert_eq!(count(&f, t, Environment::Outdoor), out, "{t:?}");
        assert_eq!(count(&f, t, Environment::Indoor), ind, "{t:?}");
    }
    let mut names: Vec<_> = f.devices.iter().map(|d| &d.name).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), 79);
}

#[test]
fn shipped_seed_file_is_the_built_in_fleet() {
    let f = SeedFile::load(&common::scenarios().join("fleet.json")).unwrap();
    assert_eq!(f, table1());
}

#[test]
fn seeded_fleet_is_live_after_a_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let app = common::start(dir.path());
    assert_eq!(app.registry.len(), 79);
    std::thread::sleep(std::time::Duration::from_millis(300));
    let report = app.registry.sweep();
    assert_eq!(report.devices.len(), 79);
    assert_eq!(report.count(Availability::Available), 79);
    let lpwa = DeviceFilter {
        node_type: Some(NodeType::LPWA),
        ..Default::default()
    };
    assert_eq!(app.registry.list(&lpwa).unwrap().len(), 4);
}

#[test]
fn spatial_filter_agrees_with_brute_force() {
    let dir = tempfile::tempdir().unwrap();
    let app = common::start(dir.path());
    let all = app.registry.list(&DeviceFilter::default()).unwrap();
    for (centre, radius) in [
        (Position::new(27.5, 30.0, 0.0), 100.0),
        (Position::new(27.5, 30.0, 3.5), 12.0),
        (Position::new(0.0, 0.0, 0.0), 20.0),
        (Position::new(80.0, 20.0, 4.0), 8.0),
    ] {
        let f = DeviceFilter {
            within: Some((centre, radius)),
            ..Default::default()
        };
        let got: Vec<String> = app
            .registry
            .list(&f)
            .unwrap()
            .into_iter()
            .map(|d| d.name)
            .collect();
        let mut want: Vec<String> = all
            .iter()
            .filter(|d| {
                let (dx, dy, dz) = (
                    d.position.x - centre.x,
                    d.position.y - centre.y,
                    d.position.z - centre.z,
                );
                (dx * dx + dy * dy + dz * dz).sqrt() <= radius
            })
            .map(|d| d.name.clone())
            .collect();
        want.sort();
        assert_eq!(got, want, "{centre:?} r={radius}");
    }
}

#[test]
fn filters_combine() {
    let dir = tempfile::tempdir().unwrap();
    let app = common::start(dir.path());
    let f = DeviceFilter {
        node_type: Some(NodeType::UWB),
        environment: Some(Environment::Indoor),
        state: Some(InfraState::Available),
        within: None,
    };
    let uwb = app.registry.list(&f).unwrap();
    assert_eq!(uwb.len(), 20);
    let names: Vec<_> = uwb.iter().map(|d| d.name.clone()).collect();
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
}

#[test]
fn registry_journal_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let id = {
        let app = common::start(dir.path());
        let rec = app.registry.by_name("uwb-25").unwrap();
        app.registry
            .heartbeat(
                &rec.device_id,
                BTreeMap::from([("mem_free_MB".to_string(), 48.0)]),
            )
            .unwrap();
        app.shutdown();
        rec.device_id
    };
    let app = common::start(dir.path());
    assert_eq!(app.registry.len(), 79);
    let rec = app.registry.get(&id).unwrap();
    assert_eq!(rec.name, "uwb-25");
}

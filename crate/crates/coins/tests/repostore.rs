use std::collections::BTreeMap;

use coins::repostore::{CommitId, RepoError, RepoStore, ResultArtifact, WorkTree};
use coins_core::config::{ChannelPolicy, ConfigError, DeploymentConfig, Selector};
use coins_core::testkit::Verdict;
use proptest::prelude::*;

const DEPLOY: &str = "[build]\nspec = build.spec\n[test]\nentry = test/controller\n[role.tx]\ndevice = srd-a-01\nimage = out/tx.cfw\n[role.rx]\ndevice = srd-a-02\nimage = out/rx.cfw\n[channel]\npolicy = sense_and_select\n";

fn tree() -> WorkTree {
    let mut t = WorkTree::new();
    t.insert("test/tx_rx.fw", b"TX DEADBEEF\n".to_vec())
        .unwrap();
    t.insert("coins.deploy", DEPLOY.as_bytes().to_vec())
        .unwrap();
    t
}

fn store() -> (tempfile::TempDir, RepoStore) {
    let dir = tempfile::tempdir().unwrap();
    let s = RepoStore::open(dir.path().join("repo")).unwrap();
    (dir, s)
}

#[test]
fn commit_ids_are_stable() {
    let (_d, s) = store();
    let a = s.ingest(&tree(), None).unwrap();
    let b = s.ingest(&tree(), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, RepoStore::commit_id(&tree(), None));
    assert_eq!(a.0.len(), 64);
    assert!(a.0.chars().all(|c| c.is_ascii_hexdigit()));
    assert_ne!(s.ingest(&tree(), Some(&a)).unwrap(), a);
    assert_eq!(s.worktree(&a).unwrap(), tree());
}

#[test]
fn escaping_paths_are_rejected() {
    let mut t = WorkTree::new();
    assert!(matches!(
        t.insert("../evil", b"x".to_vec()),
        Err(RepoError::InvalidPath(_))
    ));
    assert!(matches!(
        t.insert("/etc/passwd", b"x".to_vec()),
        Err(RepoError::InvalidPath(_))
    ));
    let files = BTreeMap::from([("a/../../b".to_string(), b"x".to_vec())]);
    assert!(WorkTree::from_files(files).is_err());
}

#[test]
fn deployment_config_examples() {
    let c = DeploymentConfig::parse(DEPLOY).unwrap();
    assert_eq!(c.channel_policy, ChannelPolicy::SenseAndSelect);
    assert_eq!(c.test_entry, "test/controller");
    let tx = c.selector("tx").unwrap();
    assert_eq!(tx.selector, Selector::Names(vec!["srd-a-01".into()]));
    assert!(c.selector("rx").is_some());

    let no_rx = DEPLOY.replace("[role.rx]\ndevice = srd-a-02\nimage = out/rx.cfw\n", "");
    assert!(matches!(
        DeploymentConfig::parse(&no_rx),
        Err(ConfigError::Invalid(_))
    ));
    let zero = format!("{DEPLOY}[retry]\nmax_attempts = 0\n");
    assert!(matches!(
        DeploymentConfig::parse(&zero),
        Err(ConfigError::Invalid(_))
    ));
    assert!(matches!(
        DeploymentConfig::parse("[build\n"),
        Err(ConfigError::Syntax { .. })
    ));
}

#[test]
fn tags_bind_once() {
    let (_d, s) = store();
    let c1 = s.ingest(&tree(), None).unwrap();
    let c2 = s.ingest(&tree(), Some(&c1)).unwrap();
    s.tag(&c1, "v1").unwrap();
    assert_eq!(s.resolve_tag("v1").unwrap(), c1);
    assert!(matches!(s.tag(&c2, "v1"), Err(RepoError::TagExists(_))));
    assert!(matches!(
        s.resolve("missing"),
        Err(RepoError::UnknownCommit(_))
    ));
    assert!(matches!(s.tag(&c1, "../x"), Err(RepoError::InvalidTag(_))));
    assert!(s.tag(&CommitId("00".repeat(32)), "v2").is_err());
}

fn artifact(run: &str, verdict: Verdict, log: &[u8]) -> ResultArtifact {
    ResultArtifact {
        run_id: run.into(),
        verdict,
        result_files: BTreeMap::from([("report.json".to_string(), b"{}".to_vec())]),
        debug_log: log.to_vec(),
    }
}

#[test]
fn results_are_write_once() {
    let (_d, s) = store();
    let c = s.ingest(&tree(), None).unwrap();
    let pass = artifact("r000001", Verdict::Pass, b"");
    s.write_results(&c, &pass).unwrap();
    assert_eq!(s.read_result(&c, "r000001").unwrap(), pass);
    assert!(matches!(
        s.write_results(&c, &pass),
        Err(RepoError::DuplicateRun { .. })
    ));
    let failed = artifact(
        "r000002",
        Verdict::Error,
        b"fw/rx.fw: line 1: syntax error\n",
    );
    s.write_results(&c, &failed).unwrap();
    let back = s.read_result(&c, "r000002").unwrap();
    assert_eq!(back.verdict, Verdict::Error);
    assert!(String::from_utf8(back.debug_log)
        .unwrap()
        .contains("syntax error"));
    assert_eq!(s.list_results(&c).unwrap(), vec!["r000001", "r000002"]);
    assert_eq!(s.worktree(&c).unwrap(), tree());
}

#[test]
fn store_survives_reopening() {
    let dir = tempfile::tempdir().unwrap();
    let c = {
        let s = RepoStore::open(dir.path()).unwrap();
        let c = s.ingest(&tree(), None).unwrap();
        s.tag(&c, "v1").unwrap();
        c
    };
    let s = RepoStore::open(dir.path()).unwrap();
    assert_eq!(s.resolve("v1").unwrap(), c);
    assert_eq!(s.worktree(&c).unwrap(), tree());
}

fn files() -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    proptest::collection::btree_map(
        "[a-z]{1,6}(/[a-z]{1,6}){0,2}",
        proptest::collection::vec(any::<u8>(), 0..64),
        1..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn commit_id_is_a_function_of_tree_and_parent(f in files(), g in files()) {
        let (_d, s) = store();
        let a = WorkTree::from_files(f.clone()).unwrap();
        let b = WorkTree::from_files(g.clone()).unwrap();
        let ia = s.ingest(&a, None).unwrap();
        prop_assert_eq!(&ia, &RepoStore::commit_id(&a, None));
        prop_assert_eq!(s.ingest(&b, None).unwrap() == ia, f == g);
        prop_assert_ne!(s.ingest(&a, Some(&ia)).unwrap(), ia.clone());
        prop_assert_eq!(s.worktree(&ia).unwrap(), a);
    }
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use coins::app::{App, AppConfig};
use coins::fleet::table1;
use coins::repostore::{CommitId, WorkTree};
use coins_core::run::{HookEvent, PipelineRun, RunId};

pub fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

pub fn scenario(name: &str) -> WorkTree {
    WorkTree::from_dir(&scenarios().join(name)).expect("scenario exists")
}

pub fn config(dir: &Path) -> AppConfig {
    AppConfig::new(dir, table1())
}

pub fn start(dir: &Path) -> Arc<App> {
    App::start(config(dir)).expect("app starts")
}

pub fn commit(app: &App, tree: &WorkTree, git_ref: &str) -> CommitId {
    let parent = app.store.ref_head(git_ref).unwrap();
    let id = app.store.ingest(tree, parent.as_ref()).unwrap();
    app.store.set_ref(git_ref, &id).unwrap();
    id
}

pub fn trigger(app: &App, commit: &CommitId, git_ref: &str) -> RunId {
    let ev = HookEvent {
        commit: commit.0.clone(),
        git_ref: git_ref.into(),
        author: "dev@example.org".into(),
        received_at: 0,
    };
    app.pipeline.handle_hook_event(ev).unwrap().0
}

/// Commits `tree`, triggers a run and waits for it to finish.
pub fn run_tree(app: &App, tree: &WorkTree, git_ref: &str) -> PipelineRun {
    let c = commit(app, tree, git_ref);
    let id = trigger(app, &c, git_ref);
    let run = app
        .pipeline
        .wait(&id, Duration::from_secs(120))
        .expect("run exists");
    assert!(
        run.state.is_terminal(),
        "run {id} did not finish: {:?}",
        run.state
    );
    run
}

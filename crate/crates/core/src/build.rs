//! Build step executor over an in-memory worktree, cache keys and firmware
//! images.
//!
//! Steps run in spec order against a private copy of the workspace. Every
//! step has a fixed virtual cost so build durations are reproducible; the
//! host adds wall-clock timeouts on top.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;
use serde::{Deserialize, Serialize};

use crate::config::{BuildCommand, BuildSpec};
use crate::digest::{sha256_hex, Hasher};
use crate::firmware::{compile_bytes, Bytecode};
use crate::{Micros, MS};

pub type Files = BTreeMap<String, Vec<u8>>;

/// Digest of a build spec plus the contents of its cache inputs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(pub String);

impl core::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirmwareImage {
    #[serde(with = "crate::digest::hex_serde")]
    pub bytecode: Vec<u8>,
    pub checksum: String,
    pub built_from: String,
    pub role: String,
}

impl FirmwareImage {
    pub fn new(bytecode: Vec<u8>, built_from: impl Into<String>, role: impl Into<String>) -> Self {
        let checksum = sha256_hex(&bytecode);
        Self {
            bytecode,
            checksum,
            built_from: built_from.into(),
            role: role.into(),
        }
    }

    pub fn verify(&self) -> bool {
        sha256_hex(&self.bytecode) == self.checksum
    }
}

/// Key over the canonical spec, the image path and every cache input. With
/// no declared cache inputs, every workspace file counts.
pub fn cache_key(spec: &BuildSpec, image: &str, files: &Files) -> CacheKey {
    let mut h = Hasher::new();
    h.update(spec.canonical().as_bytes());
    h.update(b"\0image\0");
    h.update(image.as_bytes());
    let mut feed = |path: &str, content: Option<&Vec<u8>>| {
        h.update(b"\0file\0");
        h.update(path.as_bytes());
        match content {
            Some(c) => {
                h.update(b"\0");
                h.update(sha256_hex(c).as_bytes());
            }
            None => {
                h.update(b"\0missing");
            }
        }
    };
    if spec.cache_key_inputs.is_empty() {
        for (p, c) in files {
            feed(p, Some(c));
        }
    } else {
        let mut inputs: Vec<&String> = spec.cache_key_inputs.iter().collect();
        inputs.sort();
        inputs.dedup();
        for p in inputs {
            feed(p, files.get(p));
        }
    }
    CacheKey(h.finish_hex())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildLimits {
    /// Total bytes all steps may write.
    pub output_quota: usize,
    /// Virtual time after which the build is abandoned.
    pub timeout: Micros,
}

impl Default for BuildLimits {
    fn default() -> Self {
        Self {
            output_quota: 1 << 20,
            timeout: 60 * crate::SECOND,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildFailureKind {
    MissingInput,
    Compile,
    Quota,
    Timeout,
    MissingImage,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("build failed ({kind:?})")]
pub struct BuildFailure {
    pub kind: BuildFailureKind,
    pub log: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub files: Files,
    pub log: String,
    pub steps_executed: u32,
    pub virtual_cost: Micros,
}

fn step_cost(cmd: BuildCommand, input_len: usize) -> Micros {
    let per_kib = (input_len as Micros).div_ceil(1024);
    match cmd {
        BuildCommand::CompileFirmware => 200 * MS + 20 * MS * per_kib,
        BuildCommand::Copy => 5 * MS + MS * per_kib,
        BuildCommand::Checksum => 10 * MS + MS * per_kib,
    }
}

/// Runs every step. Outputs land alongside the inputs, so later steps read
/// earlier outputs; only outputs are returned.
pub fn execute(
    spec: &BuildSpec,
    workspace: &Files,
    limits: &BuildLimits,
) -> Result<BuildOutput, BuildFailure> {
    let mut tree = workspace.clone();
    let mut outputs = Files::new();
    let mut log = String::new();
    let mut written = 0usize;
    let mut cost: Micros = 0;
    let fail = |kind, log: String| Err(BuildFailure { kind, log });
    for (n, step) in spec.steps.iter().enumerate() {
        let input = &step.inputs[0];
        let output = &step.outputs[0];
        let _ = writeln!(
            log,
            "[{}] {} {} -> {}",
            n + 1,
            step.command.as_str(),
            input,
            output
        );
        let Some(src) = tree.get(input) else {
            let _ = writeln!(log, "error: no such file {input}");
            return fail(BuildFailureKind::MissingInput, log);
        };
        cost += step_cost(step.command, src.len());
        if cost > limits.timeout {
            let _ = writeln!(log, "error: build exceeded {} ms", limits.timeout / MS);
            return fail(BuildFailureKind::Timeout, log);
        }
        let bytes = match step.command {
            BuildCommand::Copy => src.clone(),
            BuildCommand::Checksum => format!("{}\n", sha256_hex(src)).into_bytes(),
            BuildCommand::CompileFirmware => match compile_bytes(src) {
                Ok(code) => code.encode(),
                Err(e) => {
                    let _ = writeln!(log, "{input}: {e}");
                    return fail(BuildFailureKind::Compile, log);
                }
            },
        };
        written += bytes.len();
        if written > limits.output_quota {
            let _ = writeln!(
                log,
                "error: outputs exceed quota of {} bytes",
                limits.output_quota
            );
            return fail(BuildFailureKind::Quota, log);
        }
        let _ = writeln!(log, "    wrote {} bytes", bytes.len());
        tree.insert(output.clone(), bytes.clone());
        outputs.insert(output.clone(), bytes);
    }
    Ok(BuildOutput {
        files: outputs,
        log,
        steps_executed: spec.steps.len() as u32,
        virtual_cost: cost,
    })
}

/// Fetches the image for `image` from a finished build and checks that it
/// decodes as bytecode.
pub fn extract_image(
    out: &BuildOutput,
    image: &str,
    commit: &str,
    role: &str,
) -> Result<FirmwareImage, BuildFailure> {
    let Some(bytes) = out.files.get(image) else {
        return Err(BuildFailure {
            kind: BuildFailureKind::MissingImage,
            log: format!("{}error: build did not produce {image}\n", out.log),
        });
    };
    if let Err(e) = Bytecode::decode(bytes) {
        return Err(BuildFailure {
            kind: BuildFailureKind::MissingImage,
            log: format!("{}error: {image} is not a firmware image: {e}\n", out.log),
        });
    }
    Ok(FirmwareImage::new(bytes.clone(), commit, role))
}

/// Images by cache key. A hit rebinds `built_from` to the requesting commit;
/// the bytecode and checksum are untouched.
#[derive(Debug, Clone, Default)]
pub struct BuildCache {
    entries: BTreeMap<CacheKey, FirmwareImage>,
}

impl BuildCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &CacheKey, commit: &str) -> Option<FirmwareImage> {
        self.entries.get(key).map(|img| FirmwareImage {
            built_from: commit.into(),
            ..img.clone()
        })
    }

    pub fn insert(&mut self, key: CacheKey, image: FirmwareImage) {
        self.entries.insert(key, image);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ws() -> Files {
        let mut f = Files::new();
        f.insert("fw/tx.fw".into(), b"TX DEADBEEF\nHALT\n".to_vec());
        f.insert("README".into(), b"notes".to_vec());
        f
    }

    fn spec() -> BuildSpec {
        BuildSpec::parse("[build]\ncache_inputs = fw/tx.fw\nstep = compile_firmware fw/tx.fw -> out/tx.cfw\nstep = checksum out/tx.cfw -> out/tx.sum\n").unwrap()
    }

    #[test]
    fn builds_and_checksums() {
        let out = execute(&spec(), &ws(), &BuildLimits::default()).unwrap();
        assert_eq!(out.steps_executed, 2);
        let img = extract_image(&out, "out/tx.cfw", "c1", "tx").unwrap();
        assert!(img.verify());
        assert_eq!(
            out.files["out/tx.sum"],
            format!("{}\n", img.checksum).into_bytes()
        );
        assert_eq!(out.virtual_cost, 200 * MS + 20 * MS + 10 * MS + MS);
    }

    #[test]
    fn cache_key_tracks_declared_inputs_only() {
        let s = spec();
        let a = cache_key(&s, "out/tx.cfw", &ws());
        let mut other = ws();
        other.insert("README".into(), b"changed".to_vec());
        assert_eq!(a, cache_key(&s, "out/tx.cfw", &other));
        other.insert("fw/tx.fw".into(), b"TX 00".to_vec());
        assert_ne!(a, cache_key(&s, "out/tx.cfw", &other));
        assert_ne!(a, cache_key(&s, "out/rx.cfw", &ws()));
    }

    #[test]
    fn failures_carry_logs() {
        let mut bad = ws();
        bad.insert("fw/tx.fw".into(), b"TX ZZ\n".to_vec());
        let e = execute(&spec(), &bad, &BuildLimits::default()).unwrap_err();
        assert_eq!(e.kind, BuildFailureKind::Compile);
        assert!(e.log.contains("fw/tx.fw: line 1"), "{}", e.log);
        let tight = BuildLimits {
            output_quota: 10,
            ..BuildLimits::default()
        };
        assert_eq!(
            execute(&spec(), &ws(), &tight).unwrap_err().kind,
            BuildFailureKind::Quota
        );
        let slow = BuildLimits {
            timeout: 100 * MS,
            ..BuildLimits::default()
        };
        assert_eq!(
            execute(&spec(), &ws(), &slow).unwrap_err().kind,
            BuildFailureKind::Timeout
        );
        assert_eq!(
            execute(&spec(), &Files::new(), &BuildLimits::default())
                .unwrap_err()
                .kind,
            BuildFailureKind::MissingInput
        );
    }

    #[test]
    fn cache_hit_rebinds_commit() {
        let mut c = BuildCache::new();
        let img = FirmwareImage::new(alloc::vec![1, 2, 3], "c1", "tx");
        c.insert(CacheKey("k".into()), img.clone());
        let hit = c.get(&CacheKey("k".into()), "c2").unwrap();
        assert_eq!(
            (hit.bytecode, hit.checksum, hit.built_from.as_str()),
            (img.bytecode, img.checksum, "c2")
        );
    }
}

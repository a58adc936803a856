//! Strict `key = value` files with `[section]` headers, and the three
//! documents written in that format: the deployment config (`coins.deploy`),
//! the build spec and the test controller spec.
//!
//! ```text
//! # comment
//! [section]
//! key = value   # trailing comment
//! ```
//!
//! Unknown sections and keys are errors, so typos fail a run early.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::radio::Environment;
use crate::registry::NodeType;

/// Deployment config location at the worktree root.
pub const DEPLOY_PATH: &str = "coins.deploy";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("missing {0}")]
    Missing(String),
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::Syntax {
        line,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    /// Removes the single value for `key`; a repeated key is an error.
    fn take(&mut self, key: &str) -> Result<Option<Entry>, ConfigError> {
        let mut found: Option<Entry> = None;
        let mut i = 0;
        while i < self.entries.len() {
            if self.entries[i].key == key {
                let e = self.entries.remove(i);
                if found.is_some() {
                    return Err(syntax(e.line, format!("duplicate key {key}")));
                }
                found = Some(e);
            } else {
                i += 1;
            }
        }
        Ok(found)
    }

    fn take_all(&mut self, key: &str) -> Vec<Entry> {
        let (hit, rest): (Vec<Entry>, Vec<Entry>) =
            self.entries.drain(..).partition(|e| e.key == key);
        self.entries = rest;
        hit
    }

    fn require(&mut self, key: &str) -> Result<Entry, ConfigError> {
        let line = self.line;
        let name = self.name.clone();
        self.take(key)?
            .ok_or_else(|| syntax(line, format!("[{name}] requires key {key}")))
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.first() {
            Some(e) => Err(syntax(
                e.line,
                format!("unknown key {} in [{}]", e.key, self.name),
            )),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub sections: Vec<Section>,
}

impl Document {
    fn take(&mut self, name: &str) -> Option<Section> {
        let i = self.sections.iter().position(|s| s.name == name)?;
        Some(self.sections.remove(i))
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.sections.first() {
            Some(s) => Err(syntax(s.line, format!("unknown section [{}]", s.name))),
            None => Ok(()),
        }
    }
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-')
}

pub fn parse_document(text: &str) -> Result<Document, ConfigError> {
    let mut doc = Document::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let mut s = raw.trim();
        if s.starts_with('#') || s.is_empty() {
            continue;
        }
        if let Some(p) = s.find(" #").or_else(|| s.find("\t#")) {
            s = s[..p].trim_end();
        }
        if let Some(rest) = s.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| syntax(line, "unterminated section header"))?
                .trim();
            if name.is_empty() || !name.chars().all(is_name_char) {
                return Err(syntax(line, format!("bad section name [{name}]")));
            }
            if doc.sections.iter().any(|x| x.name == name) {
                return Err(syntax(line, format!("duplicate section [{name}]")));
            }
            doc.sections.push(Section {
                name: name.into(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| syntax(line, "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty()
            || !k
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
        {
            return Err(syntax(line, format!("bad key {k:?}")));
        }
        let sec = doc
            .sections
            .last_mut()
            .ok_or_else(|| syntax(line, "key outside of a section"))?;
        sec.entries.push(Entry {
            key: k.into(),
            value: v.into(),
            line,
        });
    }
    Ok(doc)
}

fn list(v: &str) -> Vec<String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn num<T: core::str::FromStr>(e: &Entry) -> Result<T, ConfigError> {
    e.value.parse().map_err(|_| {
        syntax(
            e.line,
            format!("{}: expected a number, got {:?}", e.key, e.value),
        )
    })
}

fn boolean(e: &Entry) -> Result<bool, ConfigError> {
    match e.value.as_str() {
        "true" | "yes" | "on" => Ok(true),
        "false" | "no" | "off" => Ok(false),
        _ => Err(syntax(e.line, format!("{}: expected true or false", e.key))),
    }
}

/// Worktree paths are relative, `/`-separated and free of `.`/`..`.
pub fn is_valid_path(p: &str) -> bool {
    !p.is_empty()
        && !p.starts_with('/')
        && !p.contains('\\')
        && !p.contains('\0')
        && p.split('/').all(|c| !c.is_empty() && c != "." && c != "..")
}

fn path(e: Entry) -> Result<String, ConfigError> {
    if is_valid_path(&e.value) {
        Ok(e.value)
    } else {
        Err(syntax(
            e.line,
            format!("{}: invalid path {:?}", e.key, e.value),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Names(Vec<String>),
    Query {
        node_type: NodeType,
        environment: Option<Environment>,
        count: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSelector {
    pub role: String,
    pub selector: Selector,
    /// Build output flashed to this role's target.
    pub image: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelPolicy {
    Fixed(u32),
    SenseAndSelect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub reselect_channel: bool,
    pub jam_threshold: f64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        Self {
            max_attempts: 1,
            reselect_channel: false,
            jam_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentConfig {
    pub device_selectors: Vec<RoleSelector>,
    pub build: String,
    pub test_entry: String,
    pub channel_policy: ChannelPolicy,
    pub candidates: Vec<u32>,
    pub retry: RetryConfig,
    pub redundancy: u32,
    /// Optional interferer scenario shipped with the commit.
    pub interferers: Option<String>,
}

pub const DEFAULT_CANDIDATES: [u32; 4] = [0, 1, 2, 3];

impl DeploymentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = parse_document(text)?;
        let mut build = doc
            .take("build")
            .ok_or_else(|| ConfigError::Missing("[build] section".into()))?;
        let spec = path(build.require("spec")?)?;
        build.finish()?;
        let mut test = doc
            .take("test")
            .ok_or_else(|| ConfigError::Missing("[test] section".into()))?;
        let entry = path(test.require("entry")?)?;
        test.finish()?;

        let role_names: Vec<String> = doc
            .sections
            .iter()
            .filter_map(|s| s.name.strip_prefix("role.").map(String::from))
            .collect();
        let mut device_selectors = Vec::new();
        for role in role_names {
            let mut s = doc.take(&format!("role.{role}")).expect("listed above");
            if role.is_empty() {
                return Err(syntax(s.line, "empty role name"));
            }
            let device = s.take("device")?;
            let ty = s.take("type")?;
            let env = s.take("environment")?;
            let count = s.take("count")?;
            let selector = match (device, ty) {
                (Some(d), None) => {
                    if let Some(e) = env.or(count) {
                        return Err(syntax(
                            e.line,
                            "device cannot be combined with type/environment/count",
                        ));
                    }
                    let names = list(&d.value);
                    if names.is_empty() {
                        return Err(syntax(d.line, "device list is empty"));
                    }
                    Selector::Names(names)
                }
                (None, Some(t)) => {
                    let node_type = NodeType::parse(&t.value)
                        .ok_or_else(|| syntax(t.line, format!("unknown node type {}", t.value)))?;
                    let environment = match env {
                        Some(e) => Some(Environment::parse(&e.value).ok_or_else(|| {
                            syntax(e.line, format!("unknown environment {}", e.value))
                        })?),
                        None => None,
                    };
                    let count = match count {
                        Some(c) => num(&c)?,
                        None => 1,
                    };
                    Selector::Query {
                        node_type,
                        environment,
                        count,
                    }
                }
                (Some(d), Some(_)) => {
                    return Err(syntax(d.line, "use either device or type, not both"))
                }
                (None, None) => {
                    return Err(syntax(
                        s.line,
                        format!("[role.{role}] needs device or type"),
                    ))
                }
            };
            let image = path(s.require("image")?)?;
            s.finish()?;
            device_selectors.push(RoleSelector {
                role,
                selector,
                image,
            });
        }

        let mut channel_policy = ChannelPolicy::SenseAndSelect;
        let mut candidates = DEFAULT_CANDIDATES.to_vec();
        if let Some(mut s) = doc.take("channel") {
            if let Some(p) = s.take("policy")? {
                channel_policy = match p.value.split_whitespace().collect::<Vec<_>>().as_slice() {
                    ["sense_and_select"] => ChannelPolicy::SenseAndSelect,
                    ["fixed", n] => ChannelPolicy::Fixed(
                        n.parse()
                            .map_err(|_| syntax(p.line, "fixed needs a channel number"))?,
                    ),
                    _ => return Err(syntax(p.line, "policy is sense_and_select or fixed <n>")),
                };
            }
            if let Some(c) = s.take("candidates")? {
                candidates = list(&c.value)
                    .iter()
                    .map(|v| {
                        v.parse()
                            .map_err(|_| syntax(c.line, format!("bad channel {v}")))
                    })
                    .collect::<Result<_, _>>()?;
            }
            s.finish()?;
        }
        let mut retry = RetryConfig::default();
        if let Some(mut s) = doc.take("retry") {
            if let Some(e) = s.take("max_attempts")? {
                retry.max_attempts = num(&e)?;
            }
            if let Some(e) = s.take("reselect_channel")? {
                retry.reselect_channel = boolean(&e)?;
            }
            if let Some(e) = s.take("jam_threshold")? {
                retry.jam_threshold = num(&e)?;
            }
            s.finish()?;
        }
        let mut redundancy = 1;
        if let Some(mut s) = doc.take("redundancy") {
            if let Some(e) = s.take("subsets")? {
                redundancy = num(&e)?;
            }
            s.finish()?;
        }
        let mut interferers = None;
        if let Some(mut s) = doc.take("environment") {
            if let Some(e) = s.take("interferers")? {
                interferers = Some(path(e)?);
            }
            s.finish()?;
        }
        doc.finish()?;
        let cfg = Self {
            device_selectors,
            build: spec,
            test_entry: entry,
            channel_policy,
            candidates,
            retry,
            redundancy,
            interferers,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.into()));
        if !self.device_selectors.iter().any(|s| s.role == "tx") {
            return invalid("communication test needs a tx role");
        }
        if !self.device_selectors.iter().any(|s| s.role == "rx") {
            return invalid("communication test needs an rx role");
        }
        if self.retry.max_attempts < 1 {
            return invalid("retry.max_attempts must be >= 1");
        }
        if !(self.retry.jam_threshold > 0.0 && self.retry.jam_threshold <= 1.0) {
            return invalid("retry.jam_threshold must lie in (0, 1]");
        }
        if self.redundancy < 1 {
            return invalid("redundancy.subsets must be >= 1");
        }
        if self.candidates.is_empty() {
            return invalid("channel.candidates must not be empty");
        }
        for s in &self.device_selectors {
            if let Selector::Query { count: 0, .. } = s.selector {
                return invalid("selector count must be >= 1");
            }
        }
        Ok(())
    }

    pub fn roles(&self) -> Vec<&str> {
        let mut r: Vec<&str> = self
            .device_selectors
            .iter()
            .map(|s| s.role.as_str())
            .collect();
        r.sort_unstable();
        r
    }

    pub fn selector(&self, role: &str) -> Option<&RoleSelector> {
        self.device_selectors.iter().find(|s| s.role == role)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildCommand {
    CompileFirmware,
    Copy,
    Checksum,
}

impl BuildCommand {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "compile_firmware" => Some(Self::CompileFirmware),
            "copy" => Some(Self::Copy),
            "checksum" => Some(Self::Checksum),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CompileFirmware => "compile_firmware",
            Self::Copy => "copy",
            Self::Checksum => "checksum",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStep {
    pub inputs: Vec<String>,
    pub command: BuildCommand,
    pub outputs: Vec<String>,
}

/// `step = <command> <inputs...> -> <outputs...>`, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSpec {
    pub steps: Vec<BuildStep>,
    pub cache_key_inputs: Vec<String>,
}

impl BuildSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = parse_document(text)?;
        let mut s = doc
            .take("build")
            .ok_or_else(|| ConfigError::Missing("[build] section".into()))?;
        let cache_key_inputs = match s.take("cache_inputs")? {
            Some(e) => {
                let line = e.line;
                let v = list(&e.value);
                if let Some(bad) = v.iter().find(|p| !is_valid_path(p)) {
                    return Err(syntax(line, format!("invalid path {bad:?}")));
                }
                v
            }
            None => Vec::new(),
        };
        let mut steps = Vec::new();
        for e in s.take_all("step") {
            let (lhs, rhs) = e
                .value
                .split_once("->")
                .ok_or_else(|| syntax(e.line, "step needs `->`"))?;
            let mut words = lhs.split_whitespace();
            let cmd = words
                .next()
                .ok_or_else(|| syntax(e.line, "step needs a command"))?;
            let command = BuildCommand::parse(cmd)
                .ok_or_else(|| syntax(e.line, format!("unknown command {cmd}")))?;
            let inputs: Vec<String> = words.map(String::from).collect();
            let outputs: Vec<String> = rhs.split_whitespace().map(String::from).collect();
            if let Some(bad) = inputs.iter().chain(&outputs).find(|p| !is_valid_path(p)) {
                return Err(syntax(e.line, format!("invalid path {bad:?}")));
            }
            if inputs.len() != 1 || outputs.len() != 1 {
                return Err(syntax(
                    e.line,
                    format!("{cmd} takes one input and one output"),
                ));
            }
            steps.push(BuildStep {
                inputs,
                command,
                outputs,
            });
        }
        s.finish()?;
        doc.finish()?;
        let spec = Self {
            steps,
            cache_key_inputs,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// No step may read an output of itself or of a later step, and no
    /// path is produced twice.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.steps.is_empty() {
            return Err(ConfigError::Invalid("build spec has no steps".into()));
        }
        let mut produced_at: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, st) in self.steps.iter().enumerate() {
            for o in &st.outputs {
                if produced_at.insert(o, i).is_some() {
                    return Err(ConfigError::Invalid(format!("{o} is produced twice")));
                }
            }
        }
        for (i, st) in self.steps.iter().enumerate() {
            for input in &st.inputs {
                if let Some(&j) = produced_at.get(input.as_str()) {
                    if j >= i {
                        return Err(ConfigError::Invalid(format!(
                            "step {} reads {input} before it is produced",
                            i + 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text, hashed into cache keys.
    pub fn canonical(&self) -> String {
        let mut out = String::from("[build]\n");
        out.push_str(&format!(
            "cache_inputs = {}\n",
            self.cache_key_inputs.join(", ")
        ));
        for s in &self.steps {
            out.push_str(&format!(
                "step = {} {} -> {}\n",
                s.command.as_str(),
                s.inputs.join(" "),
                s.outputs.join(" ")
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    MinTest,
}

/// The test controller program: what to check and when.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSpec {
    pub kind: TestKind,
    pub payload: Vec<u8>,
    pub rx_start_ms: u64,
    pub tx_start_ms: u64,
    pub deadline_ms: u64,
    pub sense_window_ms: u64,
}

impl TestSpec {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut doc = parse_document(text)?;
        let mut s = doc
            .take("test")
            .ok_or_else(|| ConfigError::Missing("[test] section".into()))?;
        let kind = s.require("kind")?;
        let kind = match kind.value.as_str() {
            "min_test" => TestKind::MinTest,
            other => return Err(syntax(kind.line, format!("unknown test kind {other}"))),
        };
        let p = s.require("payload")?;
        let payload = hex::decode(&p.value).map_err(|_| syntax(p.line, "payload must be hex"))?;
        if payload.is_empty() {
            return Err(syntax(p.line, "payload must not be empty"));
        }
        let mut get = |k: &str, default: u64| -> Result<u64, ConfigError> {
            match s.take(k)? {
                Some(e) => num(&e),
                None => Ok(default),
            }
        };
        let rx_start_ms = get("rx_start_ms", 0)?;
        let tx_start_ms = get("tx_start_ms", 50)?;
        let deadline_ms = get("deadline_ms", 5_000)?;
        let sense_window_ms = get("sense_window_ms", 100)?;
        s.finish()?;
        doc.finish()?;
        if deadline_ms == 0 || sense_window_ms == 0 {
            return Err(ConfigError::Invalid(
                "deadline_ms and sense_window_ms must be positive".into(),
            ));
        }
        Ok(Self {
            kind,
            payload,
            rx_start_ms,
            tx_start_ms,
            deadline_ms,
            sense_window_ms,
        })
    }
}

impl core::fmt::Display for ChannelPolicy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ChannelPolicy::Fixed(n) => write!(f, "fixed {n}"),
            ChannelPolicy::SenseAndSelect => f.write_str("sense_and_select"),
        }
    }
}

impl core::fmt::Display for Selector {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Selector::Names(n) => f.write_str(&n.join(", ")),
            Selector::Query {
                node_type,
                environment,
                count,
            } => match environment {
                Some(e) => write!(f, "{count} x {node_type} {}", e.as_str()),
                None => write!(f, "{count} x {node_type}"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIN: &str = "\
[build]
spec = build.spec
[test]
entry = test/controller
[role.tx]
device = srd-a-01
image = out/tx.cfw
[role.rx]
device = srd-a-02   # receiver
image = out/rx.cfw
[channel]
policy = sense_and_select
";

    #[test]
    fn parses_min_test_config() {
        let c = DeploymentConfig::parse(MIN).unwrap();
        assert_eq!(c.roles(), ["rx", "tx"]);
        assert_eq!(
            c.selector("tx").unwrap().selector,
            Selector::Names(alloc::vec!["srd-a-01".into()])
        );
        assert_eq!(c.channel_policy, ChannelPolicy::SenseAndSelect);
        assert_eq!(c.test_entry, "test/controller");
        assert_eq!(c.retry, RetryConfig::default());
    }

    #[test]
    fn rule_violations() {
        let no_rx = MIN.replace(
            "[role.rx]\ndevice = srd-a-02   # receiver\nimage = out/rx.cfw\n",
            "",
        );
        assert!(matches!(
            DeploymentConfig::parse(&no_rx),
            Err(ConfigError::Invalid(_))
        ));
        let zero = format!("{MIN}[retry]\nmax_attempts = 0\n");
        assert!(matches!(
            DeploymentConfig::parse(&zero),
            Err(ConfigError::Invalid(_))
        ));
        let subsets = format!("{MIN}[redundancy]\nsubsets = 0\n");
        assert!(matches!(
            DeploymentConfig::parse(&subsets),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn strictness() {
        let typo = format!("{MIN}[retry]\nmax_atempts = 2\n");
        assert_eq!(
            DeploymentConfig::parse(&typo),
            Err(ConfigError::Syntax {
                line: 14,
                message: "unknown key max_atempts in [retry]".into()
            })
        );
        assert!(matches!(
            DeploymentConfig::parse("[build]\nspec"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            DeploymentConfig::parse("x = 1"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            DeploymentConfig::parse(&format!("{MIN}[extra]\n")),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(matches!(
            DeploymentConfig::parse(&format!("{MIN}[build]\n")),
            Err(ConfigError::Syntax { .. })
        ));
        let traversal = MIN.replace("out/tx.cfw", "../tx.cfw");
        assert!(matches!(
            DeploymentConfig::parse(&traversal),
            Err(ConfigError::Syntax { .. })
        ));
    }

    #[test]
    fn query_selectors_and_policies() {
        let text = MIN
            .replace(
                "device = srd-a-01",
                "type = UWB\nenvironment = outdoor\ncount = 12",
            )
            .replace(
                "policy = sense_and_select",
                "policy = fixed 3\ncandidates = 3, 4",
            );
        let c = DeploymentConfig::parse(&text).unwrap();
        assert_eq!(
            c.selector("tx").unwrap().selector,
            Selector::Query {
                node_type: NodeType::UWB,
                environment: Some(Environment::Outdoor),
                count: 12
            }
        );
        assert_eq!(c.channel_policy, ChannelPolicy::Fixed(3));
        assert_eq!(c.candidates, [3, 4]);
    }

    #[test]
    fn build_spec() {
        let s = BuildSpec::parse(
            "[build]\ncache_inputs = fw/tx.fw, build.spec\nstep = compile_firmware fw/tx.fw -> out/tx.cfw\nstep = checksum out/tx.cfw -> out/tx.sum\n",
        )
        .unwrap();
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[1].command, BuildCommand::Checksum);
        assert_eq!(BuildSpec::parse(&s.canonical()).unwrap(), s);
        let cycle = "[build]\nstep = copy out/b -> out/a\nstep = copy out/a -> out/b\n";
        assert!(matches!(
            BuildSpec::parse(cycle),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            BuildSpec::parse("[build]\nstep = make a -> b\n"),
            Err(ConfigError::Syntax { .. })
        ));
    }

    #[test]
    fn test_spec() {
        let t = TestSpec::parse("[test]\nkind = min_test\npayload = DEADBEEF\ntx_start_ms = 50\n")
            .unwrap();
        assert_eq!(t.payload, [0xde, 0xad, 0xbe, 0xef]);
        assert_eq!(t.deadline_ms, 5_000);
        assert!(TestSpec::parse("[test]\nkind = soak\npayload = 00\n").is_err());
    }
}

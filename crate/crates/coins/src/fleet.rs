//! Seed fleet files.
//!
//! ```json
//! {"devices": [{"name": "srd-a-01", "node_type": "SRD_A", "environment": "outdoor",
//!               "position": {"x": 2.5, "y": 5.0, "z": 3.5}, "cluster": "park-poles"}]}
//! ```
//!
//! The built-in fleet has 58 outdoor and 21 indoor devices: 21 SRD_A, 21
//! SRD_B, 3 + 1 LPWA, 11 + 20 UWB and 2 UHF_SENSE. Outdoor devices sit on a
//! 6 x 6 grid of light poles (10 m spacing, 3.5 m high) in a 55 m x 60 m park
//! and on the buildings north of it (2.0 m to 9.3 m). Indoor devices occupy
//! two floors of a 28.4 m x 16.6 m building east of the park. The exact
//! coordinates are illustrative.

use std::path::Path;

use coins_core::radio::{Environment, Position};
use coins_core::registry::{DeviceDescriptor, NodeType};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDevice {
    pub name: String,
    pub node_type: NodeType,
    pub environment: Environment,
    pub position: Position,
    pub cluster: String,
}

impl SeedDevice {
    pub fn descriptor(&self) -> DeviceDescriptor {
        DeviceDescriptor::standard(
            &self.name,
            self.node_type,
            self.environment,
            self.position,
            &self.cluster,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SeedFile {
    pub devices: Vec<SeedDevice>,
}

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("cannot read seed file: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad seed file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("bad seed device {name}: {message}")]
    Device { name: String, message: String },
}

impl SeedFile {
    pub fn load(path: &Path) -> Result<Self, SeedError> {
        let f: SeedFile = serde_json::from_slice(&std::fs::read(path)?)?;
        for d in &f.devices {
            d.descriptor().validate().map_err(|e| SeedError::Device {
                name: d.name.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(f)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("seed serializes");
        s.push('\n');
        s
    }
}

fn r1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// The built-in fleet.
pub fn table1() -> SeedFile {
    let mut outdoor: Vec<(String, NodeType)> = Vec::new();
    let push = |prefix: &str,
                t: NodeType,
                range: std::ops::RangeInclusive<u32>,
                out: &mut Vec<(String, NodeType)>| {
        for i in range {
            out.push((format!("{prefix}-{i:02}"), t));
        }
    };
    push("srd-a", NodeType::SRD_A, 1..=21, &mut outdoor);
    push("srd-b", NodeType::SRD_B, 1..=21, &mut outdoor);
    push("lpwa", NodeType::LPWA, 1..=3, &mut outdoor);
    push("uwb", NodeType::UWB, 1..=11, &mut outdoor);
    push("uhf", NodeType::UHF_SENSE, 1..=2, &mut outdoor);
    let mut indoor = Vec::new();
    push("lpwa", NodeType::LPWA, 4..=4, &mut indoor);
    push("uwb", NodeType::UWB, 12..=31, &mut indoor);

    let heights = [2.0, 4.5, 6.0, 7.5, 9.3];
    let mut devices = Vec::new();
    for (i, (name, t)) in outdoor.into_iter().enumerate() {
        let (position, cluster) = if i < 36 {
            let (col, row) = (i % 6, i / 6);
            (
                Position::new(2.5 + 10.0 * col as f64, 5.0 + 10.0 * row as f64, 3.5),
                "park-poles",
            )
        } else {
            let k = i - 36;
            (
                Position::new(
                    r1(2.5 * k as f64 + 1.0),
                    62.0 + (k % 2) as f64 * 4.0,
                    heights[k % heights.len()],
                ),
                "park-buildings",
            )
        };
        devices.push(SeedDevice {
            name,
            node_type: t,
            environment: Environment::Outdoor,
            position,
            cluster: cluster.into(),
        });
    }
    for (i, (name, t)) in indoor.into_iter().enumerate() {
        let floor = i % 2;
        let k = i / 2;
        devices.push(SeedDevice {
            name,
            node_type: t,
            environment: Environment::Indoor,
            position: Position::new(
                r1(72.0 + 2.6 * k as f64),
                if k % 2 == 0 { 3.0 } else { 13.6 },
                4.0 + 3.5 * floor as f64,
            ),
            cluster: if floor == 0 {
                "indoor-floor2"
            } else {
                "indoor-floor3"
            }
            .into(),
        });
    }
    devices.sort_by(|a, b| a.name.cmp(&b.name));
    SeedFile { devices }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_match_the_deployment() {
        let f = table1();
        assert_eq!(f.devices.len(), 79);
        let count = |t: NodeType, e: Environment| {
            f.devices
                .iter()
                .filter(|d| d.node_type == t && d.environment == e)
                .count()
        };
        assert_eq!(
            f.devices
                .iter()
                .filter(|d| d.environment == Environment::Outdoor)
                .count(),
            58
        );
        assert_eq!(count(NodeType::UWB, Environment::Outdoor), 11);
        assert_eq!(count(NodeType::UWB, Environment::Indoor), 20);
        assert_eq!(count(NodeType::LPWA, Environment::Indoor), 1);
        for d in &f.devices {
            d.descriptor().validate().unwrap();
        }
    }
}

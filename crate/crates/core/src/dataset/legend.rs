use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label for unlabeled or padded pixels.
pub const IGNORE: u8 = 255;
/// Palette color written for [`IGNORE`] pixels.
pub const IGNORE_COLOR: [u8; 3] = [0x80, 0x80, 0x80];

pub const BACKGROUND: u8 = 0;
pub const WATER: u8 = 1;
pub const ICE: u8 = 2;
pub const SNOW: u8 = 3;
pub const CLUTTER: u8 = 4;
pub const LAKE: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    LakeDetection,
    IceSegmentation,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::LakeDetection => "lake_detection",
            Task::IceSegmentation => "ice_segmentation",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lake_detection" | "lake" => Ok(Task::LakeDetection),
            "ice_segmentation" | "ice" => Ok(Task::IceSegmentation),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
    /// Annotation labels that also resolve to this class.
    #[serde(default)]
    pub aliases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLegend {
    task: Task,
    entries: Vec<ClassEntry>,
}

fn entry(id: u8, name: &str, color: [u8; 3], aliases: &[&str]) -> ClassEntry {
    ClassEntry {
        id,
        name: name.to_string(),
        color,
        aliases: aliases.iter().map(|s| s.to_string()).collect(),
    }
}

impl ClassLegend {
    pub fn new(task: Task, entries: Vec<ClassEntry>) -> Result<Self> {
        if entries.is_empty() || entries.len() >= IGNORE as usize {
            return Err(Error::Validation(format!(
                "legend must have 1..255 classes, got {}",
                entries.len()
            )));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::Validation(format!(
                    "class ids must be contiguous from 0; entry {i} has id {}",
                    e.id
                )));
            }
            for other in &entries[..i] {
                if other.name == e.name {
                    return Err(Error::Validation(format!("duplicate class name `{}`", e.name)));
                }
                if other.color == e.color {
                    return Err(Error::Validation(format!(
                        "classes `{}` and `{}` share a color",
                        other.name, e.name
                    )));
                }
            }
            if e.color == IGNORE_COLOR {
                return Err(Error::Validation(format!(
                    "class `{}` uses the reserved ignore color",
                    e.name
                )));
            }
        }
        Ok(Self { task, entries })
    }

    /// background(0), water(1), ice(2), snow(3), clutter(4).
    pub fn ice_segmentation() -> Self {
        Self {
            task: Task::IceSegmentation,
            entries: vec![
                entry(BACKGROUND, "background", [0x00, 0x00, 0x00], &[]),
                entry(WATER, "water", [0x00, 0x00, 0xFF], &[]),
                entry(ICE, "ice", [0x00, 0xFF, 0xFF], &[]),
                entry(SNOW, "snow", [0xFF, 0xFF, 0xFF], &[]),
                entry(CLUTTER, "clutter", [0xFF, 0x00, 0x00], &[]),
            ],
        }
    }

    /// background(0), lake(1). Surface-state labels count as lake.
    pub fn lake_detection() -> Self {
        Self {
            task: Task::LakeDetection,
            entries: vec![
                entry(BACKGROUND, "background", [0x00, 0x00, 0x00], &[]),
                entry(LAKE, "lake", [0x00, 0x00, 0xFF], &["water", "ice", "snow", "clutter"]),
            ],
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::LakeDetection => Self::lake_detection(),
            Task::IceSegmentation => Self::ice_segmentation(),
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        self.entries.get(id as usize).map(|e| e.name.as_str())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    /// Resolves an annotation label (case-insensitive, trimmed).
    pub fn id_of(&self, label: &str) -> Result<u8> {
        let needle = label.trim().to_ascii_lowercase();
        self.entries
            .iter()
            .find(|e| e.name == needle || e.aliases.iter().any(|a| *a == needle))
            .map(|e| e.id)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                task: self.task.to_string(),
            })
    }

    pub fn color(&self, id: u8) -> [u8; 3] {
        if id == IGNORE {
            return IGNORE_COLOR;
        }
        self.entries[id as usize].color
    }

    /// Class for a palette color; [`IGNORE`] for the reserved gray.
    pub fn class_of_color(&self, color: [u8; 3]) -> Option<u8> {
        if color == IGNORE_COLOR {
            return Some(IGNORE);
        }
        self.entries.iter().find(|e| e.color == color).map(|e| e.id)
    }

    pub fn is_valid_label(&self, label: u8) -> bool {
        label == IGNORE || (label as usize) < self.entries.len()
    }
}

use serde::{Deserialize, Serialize};

/// Version of the class ordering below; bump on any change.
pub const CATALOG_VERSION: u32 = 1;

/// Class names in index order. Index 0 is background.
pub const CLASS_NAMES: [&str; 6] = [
    "background",
    "crack",
    "microcrack",
    "finger_interruption",
    "black_spot",
    "bad_soldering",
];

pub const BACKGROUND: u8 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Crack = 1,
    Microcrack = 2,
    FingerInterruption = 3,
    BlackSpot = 4,
    BadSoldering = 5,
}

impl DefectKind {
    pub const ALL: [DefectKind; 5] = [
        DefectKind::Crack,
        DefectKind::Microcrack,
        DefectKind::FingerInterruption,
        DefectKind::BlackSpot,
        DefectKind::BadSoldering,
    ];

    /// Classes visible during base training.
    pub const BASE: [DefectKind; 3] = [DefectKind::Crack, DefectKind::Microcrack, DefectKind::FingerInterruption];

    /// Classes added later by imprinting, in event order.
    pub const NEW: [DefectKind; 2] = [DefectKind::BlackSpot, DefectKind::BadSoldering];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }

    pub fn from_index(index: u8) -> Option<Self> {
        Self::ALL.get((index as usize).wrapping_sub(1)).copied()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn is_base(self) -> bool {
        Self::BASE.contains(&self)
    }
}

/// Names of background plus the base classes, i.e. the class slots of a
/// freshly trained model.
pub fn base_class_names() -> Vec<String> {
    std::iter::once(CLASS_NAMES[0])
        .chain(DefectKind::BASE.iter().map(|k| k.name()))
        .map(str::to_string)
        .collect()
}

//! Rig data model: emotion labels, controller maps and controller sequences.
//!
//! A rig frame is a fixed-width vector of controller activations. Everything
//! that depends on *which* controller does what (eye lids, gaze, mouth area)
//! is looked up through [`ControllerMap`] tags, never through hard-coded
//! indices, so a user-supplied map for a different character drops in.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of controller channels in a rig frame.
pub const RIG_CHANNELS: usize = 174;

/// Frame rate of every rig sequence.
pub const RIG_FPS: f64 = 60.0;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("controller map must list {expected} entries, found {found}")]
    WrongCount { expected: usize, found: usize },
    #[error("duplicate controller index {0}")]
    DuplicateIndex(usize),
    #[error("controller index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("duplicate controller name {0:?}")]
    DuplicateName(String),
    #[error("asymmetric pairing: {index} pairs {pair}, but {pair} does not pair back")]
    AsymmetricPair { index: usize, pair: usize },
    #[error("lateral controller {0:?} has no opposite-side pair")]
    UnpairedLateral(String),
    #[error("center controller {0:?} must not be paired")]
    PairedCenter(String),
    #[error("{side:?} eye has no {role:?} controller")]
    MissingEyeRole { side: Side, role: EyeRole },
    #[error("controller {0:?} has invalid bounds")]
    InvalidBounds(String),
    #[error("malformed controller map: {0}")]
    Json(#[from] serde_json::Error),
    #[error("controller map i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum RigError {
    #[error("rig frames must have {expected} channels, got {found}")]
    Width { expected: usize, found: usize },
    #[error("rig sequence must be {expected} fps, got {found}")]
    Fps { expected: f64, found: f64 },
    #[error("rig sequence contains a non-finite value at frame {frame}, channel {channel}")]
    NonFinite { frame: usize, channel: usize },
    #[error("unknown emotion {0:?}")]
    UnknownEmotion(String),
    #[error("emotion timeline keys must start at frame 0 and increase strictly")]
    TimelineKeys,
}

/// One of the seven discrete emotion categories.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmotionLabel {
    Neutral,
    Happy,
    Sad,
    Angry,
    Surprised,
    Fear,
    Disgusted,
}

impl EmotionLabel {
    pub const COUNT: usize = 7;

    pub const ALL: [EmotionLabel; Self::COUNT] = [
        EmotionLabel::Neutral,
        EmotionLabel::Happy,
        EmotionLabel::Sad,
        EmotionLabel::Angry,
        EmotionLabel::Surprised,
        EmotionLabel::Fear,
        EmotionLabel::Disgusted,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Self> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionLabel::Neutral => "neutral",
            EmotionLabel::Happy => "happy",
            EmotionLabel::Sad => "sad",
            EmotionLabel::Angry => "angry",
            EmotionLabel::Surprised => "surprised",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Disgusted => "disgusted",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Accepts either the label name (case-insensitive) or its numeric id.
impl FromStr for EmotionLabel {
    type Err = RigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(id) = s.parse::<usize>() {
            return Self::from_id(id).ok_or_else(|| RigError::UnknownEmotion(s.to_string()));
        }
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| RigError::UnknownEmotion(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Eye,
    Jaw,
    Mouth,
    Teeth,
    Tongue,
    Brow,
    Ear,
    Nose,
    Neck,
}

impl Region {
    pub const ALL: [Region; 9] = [
        Region::Eye,
        Region::Jaw,
        Region::Mouth,
        Region::Teeth,
        Region::Tongue,
        Region::Brow,
        Region::Ear,
        Region::Nose,
        Region::Neck,
    ];

    /// Regions counted as the mouth area in evaluation.
    pub const MOUTH_AREA: [Region; 4] = [Region::Jaw, Region::Mouth, Region::Teeth, Region::Tongue];

    /// Regions counted as the eye area in evaluation.
    pub const EYE_AREA: [Region; 2] = [Region::Eye, Region::Brow];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EyeRole {
    LidClosure,
    GazeHorizontal,
    GazeVertical,
}

fn default_min() -> f64 {
    -1.0
}

fn default_max() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerEntry {
    pub name: String,
    pub index: usize,
    pub region: Region,
    pub side: Side,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eye_role: Option<EyeRole>,
    #[serde(default = "default_min")]
    pub min: f64,
    #[serde(default = "default_max")]
    pub max: f64,
}

#[derive(Serialize, Deserialize)]
struct MapDocument {
    controllers: Vec<ControllerEntry>,
}

/// Validated, index-ordered set of controller descriptions.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerMap {
    entries: Vec<ControllerEntry>,
}

impl ControllerMap {
    /// Validates `entries` and orders them by index.
    pub fn new(mut entries: Vec<ControllerEntry>) -> Result<Self, MapError> {
        if entries.len() != RIG_CHANNELS {
            return Err(MapError::WrongCount { expected: RIG_CHANNELS, found: entries.len() });
        }
        let mut seen_index = [false; RIG_CHANNELS];
        let mut seen_name = BTreeSet::new();
        for e in &entries {
            if e.index >= RIG_CHANNELS {
                return Err(MapError::IndexOutOfRange(e.index));
            }
            if std::mem::replace(&mut seen_index[e.index], true) {
                return Err(MapError::DuplicateIndex(e.index));
            }
            if !seen_name.insert(e.name.as_str()) {
                return Err(MapError::DuplicateName(e.name.clone()));
            }
            if !(e.min.is_finite() && e.max.is_finite() && e.min <= e.max) {
                return Err(MapError::InvalidBounds(e.name.clone()));
            }
        }
        entries.sort_by_key(|e| e.index);

        for e in &entries {
            match (e.side, e.pair) {
                (Side::Center, Some(_)) => return Err(MapError::PairedCenter(e.name.clone())),
                (Side::Center, None) => {}
                (_, None) => return Err(MapError::UnpairedLateral(e.name.clone())),
                (side, Some(p)) => {
                    if p >= RIG_CHANNELS {
                        return Err(MapError::IndexOutOfRange(p));
                    }
                    let other = &entries[p];
                    if other.pair != Some(e.index) {
                        return Err(MapError::AsymmetricPair { index: e.index, pair: p });
                    }
                    let opposite = if side == Side::Left { Side::Right } else { Side::Left };
                    if other.side != opposite {
                        return Err(MapError::UnpairedLateral(e.name.clone()));
                    }
                }
            }
        }

        for side in [Side::Left, Side::Right] {
            for role in [EyeRole::LidClosure, EyeRole::GazeHorizontal, EyeRole::GazeVertical] {
                if !entries.iter().any(|e| e.side == side && e.eye_role == Some(role)) {
                    return Err(MapError::MissingEyeRole { side, role });
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json_str(document: &str) -> Result<Self, MapError> {
        let doc: MapDocument = serde_json::from_str(document)?;
        Self::new(doc.controllers)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_string(&self) -> String {
        let doc = MapDocument { controllers: self.entries.clone() };
        serde_json::to_string_pretty(&doc).expect("controller map serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        std::fs::write(path, self.to_json_string())?;
        Ok(())
    }

    pub fn entries(&self) -> &[ControllerEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &ControllerEntry {
        &self.entries[index]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.index)
    }

    /// Sorted, duplicate-free indices of every controller in `regions`.
    pub fn region_indices(&self, regions: &[Region]) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| regions.contains(&e.region))
            .map(|e| e.index)
            .collect()
    }

    pub fn mouth_area(&self) -> Vec<usize> {
        self.region_indices(&Region::MOUTH_AREA)
    }

    pub fn eye_area(&self) -> Vec<usize> {
        self.region_indices(&Region::EYE_AREA)
    }

    pub fn role_indices(&self, role: EyeRole) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.eye_role == Some(role))
            .map(|e| e.index)
            .collect()
    }

    pub fn side_indices(&self, side: Side) -> Vec<usize> {
        self.entries.iter().filter(|e| e.side == side).map(|e| e.index).collect()
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.entries.iter().map(|e| (e.min, e.max)).collect()
    }

    /// The stand-in map shipped with the crate.
    ///
    /// Production MetaHuman controller names are not public; these names
    /// follow the same `CTRL_<side>_<region>_<action>` shape and cover the
    /// nine facial regions. Lateral controllers come in L/R pairs.
    pub fn default_map() -> Self {
        Self::new(default_entries()).expect("shipped controller map is valid")
    }
}

type Base = (&'static str, Region, Option<EyeRole>, f64, f64);

const fn base(name: &'static str, region: Region) -> Base {
    (name, region, None, -1.0, 1.0)
}

const BILATERAL: &[Base] = &[
    ("eye_blink", Region::Eye, Some(EyeRole::LidClosure), 0.0, 1.0),
    ("eye_look_horizontal", Region::Eye, Some(EyeRole::GazeHorizontal), -1.0, 1.0),
    ("eye_look_vertical", Region::Eye, Some(EyeRole::GazeVertical), -1.0, 1.0),
    base("eye_widen", Region::Eye),
    base("eye_squint_inner", Region::Eye),
    base("eye_cheek_raise", Region::Eye),
    base("eye_lid_press", Region::Eye),
    base("eye_upper_lid_up", Region::Eye),
    base("eye_upper_lid_down", Region::Eye),
    base("eye_lower_lid_up", Region::Eye),
    base("eye_lower_lid_down", Region::Eye),
    base("eye_relax", Region::Eye),
    base("eye_pupil_wide", Region::Eye),
    base("eye_pupil_narrow", Region::Eye),
    base("eye_lid_follow_up", Region::Eye),
    base("eye_lid_follow_down", Region::Eye),
    base("brow_down", Region::Brow),
    base("brow_lateral", Region::Brow),
    base("brow_raise_inner", Region::Brow),
    base("brow_raise_outer", Region::Brow),
    base("brow_tension", Region::Brow),
    base("nose_wrinkle", Region::Nose),
    base("nose_wrinkle_upper", Region::Nose),
    base("nose_nostril_dilate", Region::Nose),
    base("nose_nostril_compress", Region::Nose),
    base("nose_nasolabial_deepen", Region::Nose),
    base("ear_up", Region::Ear),
    base("neck_stretch", Region::Neck),
    base("neck_mastoid_contract", Region::Neck),
    base("jaw_clench", Region::Jaw),
    base("mouth_corner_pull", Region::Mouth),
    base("mouth_corner_sharpen", Region::Mouth),
    base("mouth_corner_depress", Region::Mouth),
    base("mouth_corner_narrow", Region::Mouth),
    base("mouth_corner_wide", Region::Mouth),
    base("mouth_stretch", Region::Mouth),
    base("mouth_dimple", Region::Mouth),
    base("mouth_upper_lip_raise", Region::Mouth),
    base("mouth_lower_lip_depress", Region::Mouth),
    base("mouth_lips_purse_upper", Region::Mouth),
    base("mouth_lips_purse_lower", Region::Mouth),
    base("mouth_lips_towards_upper", Region::Mouth),
    base("mouth_lips_towards_lower", Region::Mouth),
    base("mouth_funnel_upper", Region::Mouth),
    base("mouth_funnel_lower", Region::Mouth),
    base("mouth_roll_in_upper", Region::Mouth),
    base("mouth_roll_in_lower", Region::Mouth),
    base("mouth_roll_out_upper", Region::Mouth),
    base("mouth_roll_out_lower", Region::Mouth),
    base("mouth_press_upper", Region::Mouth),
    base("mouth_press_lower", Region::Mouth),
    base("mouth_tighten_upper", Region::Mouth),
    base("mouth_tighten_lower", Region::Mouth),
    base("mouth_cheek_blow", Region::Mouth),
    base("mouth_cheek_suck", Region::Mouth),
    base("mouth_lip_bite_upper", Region::Mouth),
    base("mouth_lip_bite_lower", Region::Mouth),
    base("mouth_sticky_inner", Region::Mouth),
    base("mouth_sticky_outer", Region::Mouth),
    base("mouth_lips_thick_upper", Region::Mouth),
    base("mouth_lips_thick_lower", Region::Mouth),
    base("mouth_lips_push_upper", Region::Mouth),
    base("mouth_lips_push_lower", Region::Mouth),
];

const CENTER: &[Base] = &[
    base("jaw_open", Region::Jaw),
    base("jaw_left_right", Region::Jaw),
    base("jaw_forward_back", Region::Jaw),
    base("jaw_chin_raise_upper", Region::Jaw),
    base("jaw_chin_raise_lower", Region::Jaw),
    base("jaw_chin_compress", Region::Jaw),
    base("jaw_open_extreme", Region::Jaw),
    base("mouth_left_right", Region::Mouth),
    base("mouth_up_down", Region::Mouth),
    base("mouth_lips_together_upper", Region::Mouth),
    base("mouth_lips_together_lower", Region::Mouth),
    base("mouth_lips_blow", Region::Mouth),
    base("mouth_lips_part", Region::Mouth),
    base("mouth_upper_lip_shift", Region::Mouth),
    base("mouth_lower_lip_shift", Region::Mouth),
    base("mouth_lips_tight_center", Region::Mouth),
    base("mouth_funnel_center", Region::Mouth),
    base("mouth_upper_lip_bite_center", Region::Mouth),
    base("mouth_lower_lip_bite_center", Region::Mouth),
    base("mouth_lips_close_tight", Region::Mouth),
    base("teeth_upper_up_down", Region::Teeth),
    base("teeth_upper_left_right", Region::Teeth),
    base("teeth_upper_forward_back", Region::Teeth),
    base("teeth_lower_up_down", Region::Teeth),
    base("teeth_lower_left_right", Region::Teeth),
    base("teeth_lower_forward_back", Region::Teeth),
    base("tongue_out", Region::Tongue),
    base("tongue_up_down", Region::Tongue),
    base("tongue_left_right", Region::Tongue),
    base("tongue_roll", Region::Tongue),
    base("tongue_tip_up_down", Region::Tongue),
    base("tongue_tip_left_right", Region::Tongue),
    base("tongue_wide", Region::Tongue),
    base("tongue_narrow", Region::Tongue),
    base("tongue_press", Region::Tongue),
    base("tongue_bend_up", Region::Tongue),
    base("tongue_bend_down", Region::Tongue),
    base("tongue_twist", Region::Tongue),
    base("tongue_thick", Region::Tongue),
    base("tongue_thin", Region::Tongue),
    base("tongue_in", Region::Tongue),
    base("nose_tip_up_down", Region::Nose),
    base("nose_tip_left_right", Region::Nose),
    base("brow_procerus", Region::Brow),
    base("neck_swallow", Region::Neck),
    base("neck_throat_up_down", Region::Neck),
    base("neck_throat_exhale", Region::Neck),
    base("neck_throat_inhale", Region::Neck),
];

fn default_entries() -> Vec<ControllerEntry> {
    let mut entries = Vec::with_capacity(RIG_CHANNELS);
    for &(name, region, eye_role, min, max) in BILATERAL {
        let left = entries.len();
        for (side, tag, pair) in [(Side::Left, "L", left + 1), (Side::Right, "R", left)] {
            entries.push(ControllerEntry {
                name: format!("CTRL_{tag}_{name}"),
                index: entries.len(),
                region,
                side,
                pair: Some(pair),
                eye_role,
                min,
                max,
            });
        }
    }
    for &(name, region, eye_role, min, max) in CENTER {
        entries.push(ControllerEntry {
            name: format!("CTRL_C_{name}"),
            index: entries.len(),
            region,
            side: Side::Center,
            pair: None,
            eye_role,
            min,
            max,
        });
    }
    entries
}

/// A timeline of rig frames at [`RIG_FPS`]; one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct RigSequence {
    values: Array2<f64>,
}

impl RigSequence {
    pub fn new(values: Array2<f64>) -> Result<Self, RigError> {
        if values.ncols() != RIG_CHANNELS {
            return Err(RigError::Width { expected: RIG_CHANNELS, found: values.ncols() });
        }
        if let Some(((frame, channel), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(RigError::NonFinite { frame, channel });
        }
        Ok(Self { values })
    }

    pub fn zeros(frames: usize) -> Self {
        Self { values: Array2::zeros((frames, RIG_CHANNELS)) }
    }

    pub fn fps(&self) -> f64 {
        RIG_FPS
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.values.row(t)
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.column(c)
    }
}

/// Per-frame emotion labels aligned with the output rig frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmotionTimeline {
    labels: Vec<EmotionLabel>,
}

impl EmotionTimeline {
    pub fn new(labels: Vec<EmotionLabel>) -> Self {
        Self { labels }
    }

    pub fn constant(label: EmotionLabel, frames: usize) -> Self {
        Self { labels: vec![label; frames] }
    }

    /// Expands `(frame, label)` keys with step-hold semantics: each key's
    /// label holds until the next key.
    pub fn from_keys(keys: &[(usize, EmotionLabel)], frames: usize) -> Result<Self, RigError> {
        if keys.first().map(|k| k.0) != Some(0) || keys.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(RigError::TimelineKeys);
        }
        let mut labels = Vec::with_capacity(frames);
        let mut key = 0;
        for t in 0..frames {
            while key + 1 < keys.len() && keys[key + 1].0 <= t {
                key += 1;
            }
            labels.push(keys[key].1);
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

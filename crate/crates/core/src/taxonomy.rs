//! Synthetic semantic taxonomy shared by the simulator, the rasterizer and the
//! metrics. Label 0 is empty, labels `1..=NUM_CLASSES` are semantic classes and
//! 255 marks unobserved voxels. A Gaussian's semantic vector index `k` holds the
//! probability of label `k + 1`.

pub const NUM_CLASSES: usize = 8;
pub const EMPTY: u8 = 0;
pub const UNOBSERVED: u8 = 255;

pub const GROUND: u8 = 1;
pub const BUILDING: u8 = 2;
pub const VEGETATION: u8 = 3;
pub const BARRIER: u8 = 4;
pub const CAR: u8 = 5;
pub const TRUCK: u8 = 6;
pub const PEDESTRIAN: u8 = 7;
pub const CYCLIST: u8 = 8;

/// Movable classes used when no dynamic set is configured.
pub const DEFAULT_DYNAMIC: [u8; 4] = [CAR, TRUCK, PEDESTRIAN, CYCLIST];

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "ground",
    "building",
    "vegetation",
    "barrier",
    "car",
    "truck",
    "pedestrian",
    "cyclist",
];

/// BEV colour of columns with no occupied voxel.
pub const BACKGROUND_RGB: [u8; 3] = [0, 0, 0];

/// BEV palette, indexed by `label - 1`. Stable across versions; the BEV decoder
/// relies on every entry being distinct and different from the background.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [255, 0, 255],   // ground
    [213, 213, 213], // building
    [0, 175, 0],     // vegetation
    [255, 120, 50],  // barrier
    [0, 150, 245],   // car
    [160, 32, 240],  // truck
    [255, 0, 0],     // pedestrian
    [255, 192, 203], // cyclist
];

pub fn is_semantic(label: u8) -> bool {
    (1..=NUM_CLASSES as u8).contains(&label)
}

pub fn class_name(label: u8) -> &'static str {
    match label {
        EMPTY => "empty",
        UNOBSERVED => "unobserved",
        l if is_semantic(l) => CLASS_NAMES[l as usize - 1],
        _ => "invalid",
    }
}

pub fn label_from_name(name: &str) -> Option<u8> {
    CLASS_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(name))
        .map(|i| i as u8 + 1)
}

//! Semantic class table and display colors.

/// Number of semantic classes; labels `0..NUM_CLASSES` are semantic and
/// [`FREE`] marks empty space.
pub const NUM_CLASSES: usize = 17;

pub const FREE: u8 = NUM_CLASSES as u8;

pub const OTHERS: u8 = 0;
pub const BARRIER: u8 = 1;
pub const BICYCLE: u8 = 2;
pub const BUS: u8 = 3;
pub const CAR: u8 = 4;
pub const CONSTRUCTION_VEHICLE: u8 = 5;
pub const MOTORCYCLE: u8 = 6;
pub const PEDESTRIAN: u8 = 7;
pub const TRAFFIC_CONE: u8 = 8;
pub const TRAILER: u8 = 9;
pub const TRUCK: u8 = 10;
pub const DRIVEABLE_SURFACE: u8 = 11;
pub const OTHER_FLAT: u8 = 12;
pub const SIDEWALK: u8 = 13;
pub const TERRAIN: u8 = 14;
pub const MANMADE: u8 = 15;
pub const VEGETATION: u8 = 16;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "others",
    "barrier",
    "bicycle",
    "bus",
    "car",
    "const. veh.",
    "motorcycle",
    "pedestrian",
    "traffic cone",
    "trailer",
    "truck",
    "drive. suf.",
    "other flat",
    "sidewalk",
    "terrain",
    "manmade",
    "vegetation",
];

/// Display color per class.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [112, 128, 144],
    [220, 20, 60],
    [255, 127, 80],
    [255, 158, 0],
    [233, 150, 70],
    [255, 61, 99],
    [0, 0, 230],
    [47, 79, 79],
    [255, 140, 0],
    [255, 99, 71],
    [0, 207, 191],
    [175, 0, 75],
    [75, 0, 75],
    [112, 180, 60],
    [222, 184, 135],
    [0, 75, 0],
];

/// Canvas color for free space in renders.
pub const FREE_COLOR: [u8; 3] = [255, 255, 255];

/// Sky color used by the synthetic camera renderer.
pub const SKY_COLOR: [u8; 3] = [135, 206, 235];

pub fn class_name(label: u8) -> &'static str {
    CLASS_NAMES.get(label as usize).copied().unwrap_or("free")
}

pub fn class_color(label: u8) -> [u8; 3] {
    PALETTE.get(label as usize).copied().unwrap_or(FREE_COLOR)
}

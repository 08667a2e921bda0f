use core::fmt;
use core::str::FromStr;

use crate::boxcodec::SizeAnchor;
use crate::pipeline::SamplingRegion;

/// Object categories handled by the refinement module. One model is trained
/// per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ObjectClass {
    Car,
    Pedestrian,
    Cyclist,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist];

    pub fn anchor(self) -> SizeAnchor {
        match self {
            ObjectClass::Car => SizeAnchor::CAR,
            ObjectClass::Pedestrian => SizeAnchor::PEDESTRIAN,
            ObjectClass::Cyclist => SizeAnchor::CYCLIST,
        }
    }

    /// Cropping region around a box center. The per-class bands are given
    /// from the bottom of the object, so they are lowered by half the anchor
    /// height.
    pub fn sampling_region(self) -> SamplingRegion {
        let base = match self {
            ObjectClass::Car => SamplingRegion::CAR,
            ObjectClass::Pedestrian => SamplingRegion::PEDESTRIAN,
            ObjectClass::Cyclist => SamplingRegion::CYCLIST,
        };
        base.lowered(0.5 * self.anchor().h)
    }

    /// 3D IoU needed for a prediction to count as a detection.
    pub fn iou_threshold(self) -> f64 {
        match self {
            ObjectClass::Car => 0.7,
            ObjectClass::Pedestrian | ObjectClass::Cyclist => 0.5,
        }
    }

    /// Name used in KITTI label files.
    pub fn kitti_name(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::Cyclist => "Cyclist",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Pedestrian => 1,
            ObjectClass::Cyclist => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectClass::Car => "car",
            ObjectClass::Pedestrian => "pedestrian",
            ObjectClass::Cyclist => "cyclist",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown object class `{0}` (expected car, pedestrian or cyclist)")]
pub struct UnknownClass(pub alloc::string::String);

impl FromStr for ObjectClass {
    type Err = UnknownClass;

    /// Accepts the lowercase names and the KITTI label spelling.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "car" | "Car" => Ok(ObjectClass::Car),
            "pedestrian" | "Pedestrian" => Ok(ObjectClass::Pedestrian),
            "cyclist" | "Cyclist" => Ok(ObjectClass::Cyclist),
            other => Err(UnknownClass(other.into())),
        }
    }
}

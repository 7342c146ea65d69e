//! Body_25B keypoint layout.

use serde::{Deserialize, Serialize};

/// Number of keypoint slots in a detection record.
pub const LANDMARK_COUNT: usize = 25;

/// The 25 Body_25B keypoints in detector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Landmark {
    Nose = 0,
    LEye = 1,
    REye = 2,
    LEar = 3,
    REar = 4,
    LShoulder = 5,
    RShoulder = 6,
    LElbow = 7,
    RElbow = 8,
    LWrist = 9,
    RWrist = 10,
    LHip = 11,
    RHip = 12,
    LKnee = 13,
    RKnee = 14,
    LAnkle = 15,
    RAnkle = 16,
    UpperNeck = 17,
    HeadTop = 18,
    LBigToe = 19,
    LSmallToe = 20,
    LHeel = 21,
    RBigToe = 22,
    RSmallToe = 23,
    RHeel = 24,
}

impl Landmark {
    pub const ALL: [Landmark; LANDMARK_COUNT] = [
        Landmark::Nose,
        Landmark::LEye,
        Landmark::REye,
        Landmark::LEar,
        Landmark::REar,
        Landmark::LShoulder,
        Landmark::RShoulder,
        Landmark::LElbow,
        Landmark::RElbow,
        Landmark::LWrist,
        Landmark::RWrist,
        Landmark::LHip,
        Landmark::RHip,
        Landmark::LKnee,
        Landmark::RKnee,
        Landmark::LAnkle,
        Landmark::RAnkle,
        Landmark::UpperNeck,
        Landmark::HeadTop,
        Landmark::LBigToe,
        Landmark::LSmallToe,
        Landmark::LHeel,
        Landmark::RBigToe,
        Landmark::RSmallToe,
        Landmark::RHeel,
    ];

    /// The keypoints consumed by marker augmentation: everything except the
    /// eyes and ears.
    pub const AUGMENTATION_SET: [Landmark; 21] = [
        Landmark::Nose,
        Landmark::LShoulder,
        Landmark::RShoulder,
        Landmark::LElbow,
        Landmark::RElbow,
        Landmark::LWrist,
        Landmark::RWrist,
        Landmark::LHip,
        Landmark::RHip,
        Landmark::LKnee,
        Landmark::RKnee,
        Landmark::LAnkle,
        Landmark::RAnkle,
        Landmark::UpperNeck,
        Landmark::HeadTop,
        Landmark::LBigToe,
        Landmark::LSmallToe,
        Landmark::LHeel,
        Landmark::RBigToe,
        Landmark::RSmallToe,
        Landmark::RHeel,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Landmark> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Landmark::Nose => "Nose",
            Landmark::LEye => "LEye",
            Landmark::REye => "REye",
            Landmark::LEar => "LEar",
            Landmark::REar => "REar",
            Landmark::LShoulder => "LShoulder",
            Landmark::RShoulder => "RShoulder",
            Landmark::LElbow => "LElbow",
            Landmark::RElbow => "RElbow",
            Landmark::LWrist => "LWrist",
            Landmark::RWrist => "RWrist",
            Landmark::LHip => "LHip",
            Landmark::RHip => "RHip",
            Landmark::LKnee => "LKnee",
            Landmark::RKnee => "RKnee",
            Landmark::LAnkle => "LAnkle",
            Landmark::RAnkle => "RAnkle",
            Landmark::UpperNeck => "UpperNeck",
            Landmark::HeadTop => "HeadTop",
            Landmark::LBigToe => "LBigToe",
            Landmark::LSmallToe => "LSmallToe",
            Landmark::LHeel => "LHeel",
            Landmark::RBigToe => "RBigToe",
            Landmark::RSmallToe => "RSmallToe",
            Landmark::RHeel => "RHeel",
        }
    }

    pub fn from_name(name: &str) -> Option<Landmark> {
        Self::ALL.iter().copied().find(|l| l.name() == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_dense_and_names_unique() {
        for (i, l) in Landmark::ALL.iter().enumerate() {
            assert_eq!(l.index(), i);
            assert_eq!(Landmark::from_index(i), Some(*l));
            assert_eq!(Landmark::from_name(l.name()), Some(*l));
        }
        assert_eq!(Landmark::from_index(25), None);
    }

    #[test]
    fn augmentation_set_drops_eyes_and_ears() {
        let set = Landmark::AUGMENTATION_SET;
        assert_eq!(set.len(), 21);
        for l in [Landmark::LEye, Landmark::REye, Landmark::LEar, Landmark::REar] {
            assert!(!set.contains(&l));
        }
        let mut sorted = set.to_vec();
        sorted.dedup();
        assert_eq!(sorted.len(), 21);
    }
}

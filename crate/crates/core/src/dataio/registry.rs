/// Segmentation classes in train-id order.
pub const SEGMENTATION_CLASSES: [&str; 19] = [
    "road",
    "sidewalk",
    "building",
    "wall",
    "fence",
    "pole",
    "traffic light",
    "traffic sign",
    "vegetation",
    "terrain",
    "sky",
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
];

/// Detection labels 1..=10: the eight instance classes, then two extras.
pub const DETECTION_CLASSES: [&str; 10] = [
    "person",
    "rider",
    "car",
    "truck",
    "bus",
    "train",
    "motorcycle",
    "bicycle",
    "traffic light",
    "traffic sign",
];

/// Class name tables. Detection label `k` (1-based) is `detection[k - 1]`;
/// segmentation id `i` is `segmentation[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassRegistry {
    pub detection: Vec<String>,
    pub segmentation: Vec<String>,
}

impl Default for ClassRegistry {
    fn default() -> Self {
        Self {
            detection: DETECTION_CLASSES.iter().map(|s| s.to_string()).collect(),
            segmentation: SEGMENTATION_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassRegistry {
    pub fn detection_label(&self, name: &str) -> Option<usize> {
        self.detection.iter().position(|c| c == name).map(|i| i + 1)
    }

    pub fn detection_name(&self, label: usize) -> Option<&str> {
        label.checked_sub(1).and_then(|i| self.detection.get(i)).map(String::as_str)
    }

    pub fn segmentation_id(&self, name: &str) -> Option<u8> {
        self.segmentation.iter().position(|c| c == name).map(|i| i as u8)
    }

    /// Segmentation id painted for a detection label, when the class exists in both tables.
    pub fn segmentation_of_detection(&self, label: usize) -> Option<u8> {
        self.detection_name(label).and_then(|n| self.segmentation_id(n))
    }
}

use core::fmt;
use core::str::FromStr;

/// Number of output classes, including `Unknown`.
pub const NUM_CLASSES: usize = 7;

/// Semantic classes. The discriminant is the 1-based label used on the
/// wire and in the sample store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[repr(u8)]
pub enum ClassLabel {
    Person = 1,
    Car = 2,
    Cyclist = 3,
    Trunk = 4,
    Bush = 5,
    Building = 6,
    Unknown = 7,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Person,
        ClassLabel::Car,
        ClassLabel::Cyclist,
        ClassLabel::Trunk,
        ClassLabel::Bush,
        ClassLabel::Building,
        ClassLabel::Unknown,
    ];

    /// The six named classes (everything but `Unknown`).
    pub const NAMED: [ClassLabel; 6] = [
        ClassLabel::Person,
        ClassLabel::Car,
        ClassLabel::Cyclist,
        ClassLabel::Trunk,
        ClassLabel::Bush,
        ClassLabel::Building,
    ];

    /// Zero-based index into probability vectors.
    #[inline]
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    /// One-based wire label (1..=7).
    #[inline]
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1..=7 => Some(Self::ALL[id as usize - 1]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Person => "person",
            ClassLabel::Car => "car",
            ClassLabel::Cyclist => "cyclist",
            ClassLabel::Trunk => "trunk",
            ClassLabel::Bush => "bush",
            ClassLabel::Building => "building",
            ClassLabel::Unknown => "unknown",
        }
    }

    /// Persons, cars and cyclists move; everything else is static.
    pub fn is_movable(self) -> bool {
        matches!(self, ClassLabel::Person | ClassLabel::Car | ClassLabel::Cyclist)
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown class label")]
pub struct ParseClassError;

impl FromStr for ClassLabel {
    type Err = ParseClassError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or(ParseClassError)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_indices_round_trip() {
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(ClassLabel::from_index(i), Some(*c));
            assert_eq!(ClassLabel::from_id(c.id()), Some(*c));
            assert_eq!(c.name().parse::<ClassLabel>(), Ok(*c));
        }
        assert_eq!(ClassLabel::from_id(0), None);
        assert_eq!(ClassLabel::from_id(8), None);
        assert!("pole".parse::<ClassLabel>().is_err());
    }
}

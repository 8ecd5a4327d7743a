//! Interaction events, behavior sequences and labelled samples.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Number of behavior types.
pub const NUM_BEHAVIORS: usize = 4;

/// The kind of interaction a user had with an item. Codes are stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BehaviorType {
    Click = 0,
    Cart = 1,
    Favorite = 2,
    Purchase = 3,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; NUM_BEHAVIORS] = [
        BehaviorType::Click,
        BehaviorType::Cart,
        BehaviorType::Favorite,
        BehaviorType::Purchase,
    ];

    #[inline]
    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorType::Click => "click",
            BehaviorType::Cart => "cart",
            BehaviorType::Favorite => "favorite",
            BehaviorType::Purchase => "purchase",
        }
    }
}

impl fmt::Display for BehaviorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BehaviorType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "click" => Ok(BehaviorType::Click),
            "cart" => Ok(BehaviorType::Cart),
            "favorite" => Ok(BehaviorType::Favorite),
            "purchase" => Ok(BehaviorType::Purchase),
            other => Err(Error::UnknownBehavior(other.to_string())),
        }
    }
}

/// One user interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub item_id: u64,
    pub category_id: u64,
    pub behavior: BehaviorType,
    /// Seconds.
    pub timestamp: u64,
    /// Index of the event inside its sequence.
    pub position: usize,
}

/// A time-ordered list of events. Construction through [`BehaviorSequence::from_events`]
/// assigns positions from list order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BehaviorSequence {
    events: Vec<Event>,
}

/// The first broken invariant of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// Timestamp at `index` is smaller than its predecessor's.
    NonMonotoneTimestamp { index: usize },
    /// Event at `index` carries a position other than `index`.
    PositionMismatch { index: usize, position: usize },
    /// The sequence is longer than the configured maximum.
    TooLong { len: usize, max: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonMonotoneTimestamp { index } => {
                write!(f, "timestamp decreases at index {index}")
            }
            Violation::PositionMismatch { index, position } => {
                write!(f, "event at index {index} has position {position}")
            }
            Violation::TooLong { len, max } => write!(f, "sequence length {len} exceeds {max}"),
        }
    }
}

impl BehaviorSequence {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a sequence from events in log order, overwriting their positions.
    pub fn from_events(events: impl IntoIterator<Item = Event>) -> Self {
        let events = events
            .into_iter()
            .enumerate()
            .map(|(i, mut e)| {
                e.position = i;
                e
            })
            .collect();
        Self { events }
    }

    /// Wraps events as-is, without touching positions. Use [`validate_sequence`] to check them.
    pub fn from_raw(events: Vec<Event>) -> Self {
        Self { events }
    }

    /// Appends an event at the next position.
    pub fn push(&mut self, item_id: u64, category_id: u64, behavior: BehaviorType, timestamp: u64) {
        let position = self.events.len();
        self.events.push(Event {
            item_id,
            category_id,
            behavior,
            timestamp,
            position,
        });
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Event> {
        self.events.get(i)
    }

    /// Timestamp of the most recent event, if any.
    pub fn last_timestamp(&self) -> Option<u64> {
        self.events.last().map(|e| e.timestamp)
    }
}

/// Checks ordering and position invariants. `max_len` bounds the length when given.
pub fn validate_sequence_with_max(
    seq: &BehaviorSequence,
    max_len: Option<usize>,
) -> Result<(), Violation> {
    for (i, e) in seq.events.iter().enumerate() {
        if e.position != i {
            return Err(Violation::PositionMismatch {
                index: i,
                position: e.position,
            });
        }
        if i > 0 && e.timestamp < seq.events[i - 1].timestamp {
            return Err(Violation::NonMonotoneTimestamp { index: i });
        }
    }
    if let Some(max) = max_len {
        if seq.len() > max {
            return Err(Violation::TooLong { len: seq.len(), max });
        }
    }
    Ok(())
}

/// Checks ordering and position invariants.
pub fn validate_sequence(seq: &BehaviorSequence) -> Result<(), Violation> {
    validate_sequence_with_max(seq, None)
}

/// Keeps the most recent `k` events and re-indexes their positions from zero.
pub fn truncate_to_recent(seq: &BehaviorSequence, k: usize) -> BehaviorSequence {
    let start = seq.len().saturating_sub(k);
    BehaviorSequence::from_events(seq.events[start..].iter().copied())
}

/// The item being scored against a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub item: u64,
    pub cat: u64,
}

/// A labelled example: profile, history, candidate, conversion label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub user_profile: Vec<f64>,
    pub sequence: BehaviorSequence,
    pub candidate: Candidate,
    pub label: u8,
}

impl Sample {
    pub fn is_positive(&self) -> bool {
        self.label == 1
    }
}

/// SplitMix64 finalizer. Stable across platforms and releases.
#[inline]
pub fn hash64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a raw id into a vocabulary of `size` slots.
#[inline]
pub fn hash_bucket(id: u64, size: usize) -> usize {
    debug_assert!(size > 0);
    (hash64(id) % size as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_with_ts(ts: &[u64]) -> BehaviorSequence {
        BehaviorSequence::from_events(ts.iter().map(|&t| Event {
            item_id: 1,
            category_id: 1,
            behavior: BehaviorType::Click,
            timestamp: t,
            position: 0,
        }))
    }

    #[test]
    fn empty_sequence_is_valid() {
        assert_eq!(validate_sequence(&BehaviorSequence::new()), Ok(()));
    }

    #[test]
    fn monotone_sequence_is_valid() {
        let s = seq_with_ts(&[10, 20, 30]);
        let positions: Vec<_> = s.events().iter().map(|e| e.position).collect();
        assert_eq!(positions, vec![0, 1, 2]);
        assert_eq!(validate_sequence(&s), Ok(()));
    }

    #[test]
    fn ties_are_allowed() {
        assert_eq!(validate_sequence(&seq_with_ts(&[5, 5, 5])), Ok(()));
    }

    #[test]
    fn decreasing_timestamp_reports_index() {
        assert_eq!(
            validate_sequence(&seq_with_ts(&[10, 5])),
            Err(Violation::NonMonotoneTimestamp { index: 1 })
        );
    }

    #[test]
    fn position_gap_is_reported() {
        let mut events = seq_with_ts(&[1, 2]).events().to_vec();
        events[1].position = 5;
        assert_eq!(
            validate_sequence(&BehaviorSequence::from_raw(events)),
            Err(Violation::PositionMismatch { index: 1, position: 5 })
        );
    }

    #[test]
    fn too_long_is_reported() {
        let s = seq_with_ts(&[1, 2, 3]);
        assert_eq!(
            validate_sequence_with_max(&s, Some(2)),
            Err(Violation::TooLong { len: 3, max: 2 })
        );
    }

    #[test]
    fn truncate_keeps_most_recent() {
        let s = seq_with_ts(&[1, 2, 3, 4, 5]);
        let t = truncate_to_recent(&s, 3);
        let ts: Vec<_> = t.events().iter().map(|e| e.timestamp).collect();
        let pos: Vec<_> = t.events().iter().map(|e| e.position).collect();
        assert_eq!(ts, vec![3, 4, 5]);
        assert_eq!(pos, vec![0, 1, 2]);
    }

    #[test]
    fn truncate_short_and_empty() {
        let s = seq_with_ts(&[1, 2]);
        assert_eq!(truncate_to_recent(&s, 1024), s);
        assert!(truncate_to_recent(&BehaviorSequence::new(), 256).is_empty());
    }

    #[test]
    fn behavior_codes_are_stable() {
        for (i, b) in BehaviorType::ALL.iter().enumerate() {
            assert_eq!(b.code(), i);
            assert_eq!(BehaviorType::from_code(i), Some(*b));
            assert_eq!(b.as_str().parse::<BehaviorType>().unwrap(), *b);
        }
        assert!("buy".parse::<BehaviorType>().is_err());
    }

    #[test]
    fn hash_bucket_in_range() {
        for id in 0..1000 {
            assert!(hash_bucket(id, 37) < 37);
        }
        assert_eq!(hash64(42), hash64(42));
    }
}

//! Operator decisions over tracks and anchor samples.
//!
//! Every mutation appends to an audit log with a monotone sequence number;
//! the per-sample record map is the materialized latest state. Replaying
//! the log over the initial tracks reproduces the store exactly.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::class::{ClassLabel, NUM_CLASSES};
use crate::tracking::{constraints_from_track, Constraint, Track, TrackStatus};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotationError {
    #[error("unknown track {0}")]
    UnknownTrack(u32),
    #[error("track {0} has already been decided")]
    AlreadyDecided(u32),
    #[error("truncation index {at} out of range for track of length {len}")]
    IndexOutOfRange { at: usize, len: usize },
    #[error("sample {0} already carries a track label")]
    AnchorConflict(u32),
    #[error("audit entry {seq} does not apply: {reason}")]
    Replay { seq: u64, reason: &'static str },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum AnnotationSource {
    TrackLabel,
    Anchor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnnotationRecord {
    pub sample_id: u32,
    pub label: ClassLabel,
    pub source: AnnotationSource,
    /// Caller-supplied clock, milliseconds.
    pub timestamp: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AnchorBudget {
    pub per_class: usize,
    pub unknown: usize,
}

impl Default for AnchorBudget {
    fn default() -> Self {
        Self { per_class: 20, unknown: 100 }
    }
}

impl AnchorBudget {
    pub fn for_class(&self, class: ClassLabel) -> usize {
        if class == ClassLabel::Unknown {
            self.unknown
        } else {
            self.per_class
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "action", rename_all = "snake_case"))]
pub enum AuditAction {
    Label { track_id: u32, label: ClassLabel },
    Truncate { track_id: u32, at_index: usize },
    Discard { track_id: u32 },
    Anchor { sample_id: u32, label: ClassLabel, overrides: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AuditEntry {
    pub seq: u64,
    pub timestamp: u64,
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub action: AuditAction,
}

/// A proposed anchor sample.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorCandidate {
    pub sample_id: u32,
    pub predicted: ClassLabel,
    pub confidence: f64,
}

/// Counts shown to the operator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Progress {
    pub pending: usize,
    pub truncated: usize,
    pub confirmed: usize,
    pub discarded: usize,
    pub annotations: usize,
    pub anchors: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationStore {
    tracks: BTreeMap<u32, Track>,
    records: BTreeMap<u32, AnnotationRecord>,
    audit: Vec<AuditEntry>,
}

impl AnnotationStore {
    pub fn new(tracks: impl IntoIterator<Item = Track>) -> Self {
        Self {
            tracks: tracks.into_iter().map(|t| (t.track_id, t)).collect(),
            records: BTreeMap::new(),
            audit: Vec::new(),
        }
    }

    /// Rebuilds a store by replaying `audit` over the undecided `tracks`.
    pub fn replay(tracks: impl IntoIterator<Item = Track>, audit: &[AuditEntry]) -> Result<Self, AnnotationError> {
        let mut store = Self::new(tracks);
        for entry in audit {
            if entry.seq != store.audit.len() as u64 {
                return Err(AnnotationError::Replay { seq: entry.seq, reason: "sequence gap" });
            }
            store.apply(entry.action, entry.timestamp)?;
        }
        Ok(store)
    }

    pub fn track(&self, id: u32) -> Option<&Track> {
        self.tracks.get(&id)
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.tracks.values()
    }

    pub fn record(&self, sample_id: u32) -> Option<&AnnotationRecord> {
        self.records.get(&sample_id)
    }

    pub fn records(&self) -> impl Iterator<Item = &AnnotationRecord> {
        self.records.values()
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    fn apply(&mut self, action: AuditAction, now: u64) -> Result<Vec<AnnotationRecord>, AnnotationError> {
        let out = match action {
            AuditAction::Label { track_id, label } => self.label_inner(track_id, label, now)?,
            AuditAction::Truncate { track_id, at_index } => {
                self.truncate_inner(track_id, at_index)?;
                Vec::new()
            }
            AuditAction::Discard { track_id } => {
                self.discard_inner(track_id)?;
                Vec::new()
            }
            AuditAction::Anchor { sample_id, label, overrides } => {
                alloc::vec![self.anchor_inner(sample_id, label, overrides, now)?]
            }
        };
        self.audit.push(AuditEntry { seq: self.audit.len() as u64, timestamp: now, action });
        Ok(out)
    }

    fn pending_track(&mut self, track_id: u32) -> Result<&mut Track, AnnotationError> {
        let track = self.tracks.get_mut(&track_id).ok_or(AnnotationError::UnknownTrack(track_id))?;
        match track.status {
            TrackStatus::Pending => Ok(track),
            _ => Err(AnnotationError::AlreadyDecided(track_id)),
        }
    }

    fn label_inner(&mut self, track_id: u32, label: ClassLabel, now: u64) -> Result<Vec<AnnotationRecord>, AnnotationError> {
        let track = self.tracks.get_mut(&track_id).ok_or(AnnotationError::UnknownTrack(track_id))?;
        let truncated_at = match track.status {
            TrackStatus::Pending => None,
            TrackStatus::Truncated { at } => Some(at),
            _ => return Err(AnnotationError::AlreadyDecided(track_id)),
        };
        track.status = TrackStatus::Confirmed { label, truncated_at };
        let new: Vec<AnnotationRecord> = track
            .surviving()
            .iter()
            .filter_map(|m| m.sample_id)
            .map(|sample_id| AnnotationRecord { sample_id, label, source: AnnotationSource::TrackLabel, timestamp: now })
            .collect();
        for r in &new {
            self.records.insert(r.sample_id, *r);
        }
        Ok(new)
    }

    fn truncate_inner(&mut self, track_id: u32, at: usize) -> Result<(), AnnotationError> {
        let track = self.pending_track(track_id)?;
        if at >= track.members.len() {
            return Err(AnnotationError::IndexOutOfRange { at, len: track.members.len() });
        }
        track.status = if at == 0 { TrackStatus::Discarded } else { TrackStatus::Truncated { at } };
        Ok(())
    }

    fn discard_inner(&mut self, track_id: u32) -> Result<(), AnnotationError> {
        let track = self.tracks.get_mut(&track_id).ok_or(AnnotationError::UnknownTrack(track_id))?;
        match track.status {
            TrackStatus::Pending | TrackStatus::Truncated { .. } => {
                track.status = TrackStatus::Discarded;
                Ok(())
            }
            _ => Err(AnnotationError::AlreadyDecided(track_id)),
        }
    }

    fn anchor_inner(
        &mut self,
        sample_id: u32,
        label: ClassLabel,
        overrides: bool,
        now: u64,
    ) -> Result<AnnotationRecord, AnnotationError> {
        if let Some(existing) = self.records.get(&sample_id) {
            if existing.source == AnnotationSource::TrackLabel && !overrides {
                return Err(AnnotationError::AnchorConflict(sample_id));
            }
        }
        let record = AnnotationRecord { sample_id, label, source: AnnotationSource::Anchor, timestamp: now };
        self.records.insert(sample_id, record);
        Ok(record)
    }

    /// Labels every surviving member with a sample and confirms the track.
    /// A truncated track may still be labelled.
    pub fn apply_track_label(&mut self, track_id: u32, label: ClassLabel, now: u64) -> Result<Vec<AnnotationRecord>, AnnotationError> {
        self.apply(AuditAction::Label { track_id, label }, now)
    }

    /// Removes members from `at_index` on. Truncating at 0 discards.
    pub fn truncate_track(&mut self, track_id: u32, at_index: usize, now: u64) -> Result<(), AnnotationError> {
        self.apply(AuditAction::Truncate { track_id, at_index }, now).map(|_| ())
    }

    pub fn discard_track(&mut self, track_id: u32, now: u64) -> Result<(), AnnotationError> {
        self.apply(AuditAction::Discard { track_id }, now).map(|_| ())
    }

    /// Records an operator-confirmed anchor. Samples that already carry a
    /// track label are refused unless `overrides` is set.
    pub fn confirm_anchor(
        &mut self,
        sample_id: u32,
        label: ClassLabel,
        overrides: bool,
        now: u64,
    ) -> Result<AnnotationRecord, AnnotationError> {
        self.apply(AuditAction::Anchor { sample_id, label, overrides }, now).map(|mut v| v.remove(0))
    }

    /// Constraints from every decided track, sorted and de-duplicated.
    pub fn constraints(&self) -> Vec<Constraint> {
        let mut out: Vec<Constraint> = self
            .tracks
            .values()
            .filter(|t| t.status != TrackStatus::Pending)
            .flat_map(|t| constraints_from_track(t).unwrap_or_default())
            .collect();
        out.sort();
        out.dedup_by_key(|c| (c.i, c.j));
        out
    }

    pub fn progress(&self) -> Progress {
        let mut p = Progress::default();
        for t in self.tracks.values() {
            match t.status {
                TrackStatus::Pending => p.pending += 1,
                TrackStatus::Truncated { .. } => p.truncated += 1,
                TrackStatus::Confirmed { .. } => p.confirmed += 1,
                TrackStatus::Discarded => p.discarded += 1,
            }
        }
        p.annotations = self.records.len();
        p.anchors = self.records.values().filter(|r| r.source == AnnotationSource::Anchor).count();
        p
    }

    /// Proposals for samples that have no record yet.
    pub fn anchor_candidates(&self, predictions: &[(u32, &[f64])], budget: &AnchorBudget) -> Vec<AnchorCandidate> {
        let labelled: BTreeSet<u32> = self.records.keys().copied().collect();
        let unlabelled: Vec<(u32, &[f64])> =
            predictions.iter().filter(|(id, _)| !labelled.contains(id)).copied().collect();
        select_anchor_candidates(&unlabelled, budget)
    }
}

/// For each class, the `budget`-many samples predicted as that class with
/// the highest probability (ties by sample id).
pub fn select_anchor_candidates(predictions: &[(u32, &[f64])], budget: &AnchorBudget) -> Vec<AnchorCandidate> {
    let mut per_class: [Vec<AnchorCandidate>; NUM_CLASSES] = Default::default();
    for &(sample_id, probs) in predictions {
        let Some((k, &p)) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(core::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
        else {
            continue;
        };
        let Some(class) = ClassLabel::from_index(k) else { continue };
        per_class[k].push(AnchorCandidate { sample_id, predicted: class, confidence: p });
    }
    let mut out = Vec::new();
    for (k, mut list) in per_class.into_iter().enumerate() {
        list.sort_by(|a, b| {
            b.confidence
                .partial_cmp(&a.confidence)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.sample_id.cmp(&b.sample_id))
        });
        let class = ClassLabel::ALL[k];
        list.truncate(budget.for_class(class));
        out.extend(list);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracking::TrackMember;
    use alloc::vec;

    fn track(id: u32, len: usize, with_samples: bool) -> Track {
        Track {
            track_id: id,
            members: (0..len)
                .map(|f| TrackMember {
                    frame_index: f,
                    segment_id: id,
                    sample_id: with_samples.then_some(id * 100 + f as u32),
                })
                .collect(),
            status: TrackStatus::Pending,
        }
    }

    #[test]
    fn label_track() {
        let mut s = AnnotationStore::new([track(1, 5, true), track(2, 3, false)]);
        let recs = s.apply_track_label(1, ClassLabel::Car, 10).unwrap();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.label == ClassLabel::Car && r.source == AnnotationSource::TrackLabel));
        assert_eq!(s.track(1).unwrap().label(), Some(ClassLabel::Car));
        assert_eq!(s.constraints().len(), 4);

        assert!(s.apply_track_label(2, ClassLabel::Bush, 11).unwrap().is_empty());
        assert_eq!(s.track(2).unwrap().label(), Some(ClassLabel::Bush));

        assert_eq!(s.apply_track_label(1, ClassLabel::Person, 12), Err(AnnotationError::AlreadyDecided(1)));
        assert_eq!(s.apply_track_label(9, ClassLabel::Person, 12), Err(AnnotationError::UnknownTrack(9)));
        assert_eq!(s.records().count(), 5);
        assert_eq!(s.audit_log().len(), 2, "rejected mutations are not logged");
    }

    #[test]
    fn truncate_and_discard() {
        let mut s = AnnotationStore::new([track(1, 10, true), track(2, 10, true), track(3, 5, true)]);
        s.truncate_track(1, 6, 0).unwrap();
        assert_eq!(s.track(1).unwrap().surviving().len(), 6);
        s.truncate_track(2, 0, 0).unwrap();
        assert_eq!(s.track(2).unwrap().status, TrackStatus::Discarded);
        assert_eq!(s.truncate_track(3, 5, 0), Err(AnnotationError::IndexOutOfRange { at: 5, len: 5 }));
        s.truncate_track(3, 3, 0).unwrap();
        let recs = s.apply_track_label(3, ClassLabel::Person, 1).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(s.track(3).unwrap().status, TrackStatus::Confirmed { label: ClassLabel::Person, truncated_at: Some(3) });
        assert_eq!(s.truncate_track(3, 1, 2), Err(AnnotationError::AlreadyDecided(3)));
        s.discard_track(1, 3).unwrap();
        assert!(s.track(1).unwrap().surviving().is_empty());
        assert_eq!(s.discard_track(1, 3), Err(AnnotationError::AlreadyDecided(1)));
        let p = s.progress();
        assert_eq!((p.confirmed, p.discarded, p.annotations), (1, 2, 3));
        assert_eq!(s.constraints().len(), 2);
    }

    #[test]
    fn replay_reproduces_state() {
        let tracks = [track(1, 4, true), track(2, 4, true)];
        let mut s = AnnotationStore::new(tracks.clone());
        s.truncate_track(1, 2, 5).unwrap();
        s.apply_track_label(1, ClassLabel::Trunk, 6).unwrap();
        s.confirm_anchor(201, ClassLabel::Bush, false, 7).unwrap();
        let again = AnnotationStore::replay(tracks.clone(), s.audit_log()).unwrap();
        assert_eq!(again, s);
        let mut bad = s.audit_log().to_vec();
        bad[1].seq = 5;
        assert!(AnnotationStore::replay(tracks, &bad).is_err());
    }

    #[test]
    fn anchors_respect_track_labels() {
        let mut s = AnnotationStore::new([track(1, 2, true)]);
        s.apply_track_label(1, ClassLabel::Car, 0).unwrap();
        assert_eq!(s.confirm_anchor(100, ClassLabel::Bush, false, 1), Err(AnnotationError::AnchorConflict(100)));
        let r = s.confirm_anchor(100, ClassLabel::Bush, true, 1).unwrap();
        assert_eq!(r.source, AnnotationSource::Anchor);
        assert_eq!(s.record(100).unwrap().label, ClassLabel::Bush);
        s.confirm_anchor(500, ClassLabel::Unknown, false, 2).unwrap();
        assert_eq!(s.progress().anchors, 2);
    }

    fn probs(k: usize, p: f64) -> Vec<f64> {
        let mut v = vec![(1.0 - p) / 6.0; 7];
        v[k] = p;
        v
    }

    #[test]
    fn anchor_selection() {
        let mut owned = Vec::new();
        for id in 0..30u32 {
            owned.push((id, probs(1, 0.3 + id as f64 * 0.01)));
        }
        for id in 100..103u32 {
            owned.push((id, probs(2, 0.9)));
        }
        let preds: Vec<(u32, &[f64])> = owned.iter().map(|(i, p)| (*i, p.as_slice())).collect();
        let c = select_anchor_candidates(&preds, &AnchorBudget::default());
        let cars: Vec<_> = c.iter().filter(|a| a.predicted == ClassLabel::Car).collect();
        assert_eq!(cars.len(), 20);
        assert_eq!(cars[0].sample_id, 29, "most confident first");
        assert_eq!(c.iter().filter(|a| a.predicted == ClassLabel::Cyclist).count(), 3);
        let none = select_anchor_candidates(&preds, &AnchorBudget { per_class: 0, unknown: 0 });
        assert!(none.is_empty());

        let mut s = AnnotationStore::new([]);
        s.confirm_anchor(29, ClassLabel::Car, false, 0).unwrap();
        let c = s.anchor_candidates(&preds, &AnchorBudget::default());
        assert!(c.iter().all(|a| a.sample_id != 29));
    }
}

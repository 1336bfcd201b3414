//! Dataset manifests and incremental session schedules.
//!
//! A [`DatasetManifest`] names a dataset and lists its classes in a fixed
//! order, each with train/test sample references. Two manifests — one for the
//! base task, one for the incremental stream — are combined by
//! [`build_schedule`] into a [`SessionSchedule`]: session 1 holds every base
//! class, later sessions hold consecutive chunks of the incremental classes
//! after dropping any that duplicate a base class (exact name match or an
//! entry in an [`AliasMap`]).
//!
//! Class order is semantic: incremental sessions are consecutive chunks of the
//! manifest's class list, so manifests store classes as an ordered array, not
//! a sorted map. Schedules serialize to JSON byte-identically for the same
//! inputs, which makes generated benchmarks diffable and cacheable.
//!
//! The two published benchmark layouts ship with the crate as data files:
//! a synthetic-to-synthetic task (55 base classes, then 24 incremental classes
//! in chunks of 4) and a synthetic-to-real task (same base, then 41 classes in
//! chunks of 4 with a final single-class session).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of incremental classes per session in both shipped benchmarks.
pub const SHIPPED_CLASSES_PER_SESSION: usize = 4;

/// Which side of the train/test divide a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One sample of a dataset: a stable id, its split, and a storage path.
///
/// The path is relative to a dataset root chosen at load time; synthetic
/// datasets use the placeholder path `"synthetic"` because their clouds are
/// generated from the sample id rather than read from disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub sample_id: String,
    pub split: Split,
    pub path: String,
}

/// A class and its samples, in manifest order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_name: String,
    pub samples: Vec<SampleRef>,
}

/// An ordered list of classes with their samples.
///
/// Invariants (checked by [`DatasetManifest::validate`]): class names are in
/// normalized form and unique, and sample ids are unique across the whole
/// manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub classes: Vec<ClassEntry>,
}

/// Canonical form of a class name: lowercase, underscores as spaces, runs of
/// whitespace collapsed to single spaces, no surrounding whitespace.
///
/// Hyphens are preserved: they distinguish deliberate variant names such as
/// `"cube-tall"` from `"cube"`.
pub fn normalize_class_name(raw: &str) -> String {
    raw.to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

impl DatasetManifest {
    /// Builds a manifest, normalizing class names and validating invariants.
    pub fn new(name: &str, classes: Vec<ClassEntry>) -> Result<Self> {
        let mut normalized = classes;
        for entry in &mut normalized {
            entry.class_name = normalize_class_name(&entry.class_name);
        }
        let manifest = Self { name: name.to_string(), classes: normalized };
        manifest.validate()?;
        Ok(manifest)
    }

    /// Checks name normalization, class-name uniqueness, and sample-id
    /// uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut names = BTreeSet::new();
        let mut ids = BTreeSet::new();
        for entry in &self.classes {
            if entry.class_name != normalize_class_name(&entry.class_name) {
                return Err(Error::Manifest(format!(
                    "class name {:?} in dataset {:?} is not normalized",
                    entry.class_name, self.name
                )));
            }
            if entry.class_name.is_empty() {
                return Err(Error::Manifest(format!(
                    "empty class name in dataset {:?}",
                    self.name
                )));
            }
            if !names.insert(entry.class_name.clone()) {
                return Err(Error::Manifest(format!(
                    "duplicate class {:?} in dataset {:?}",
                    entry.class_name, self.name
                )));
            }
            for sample in &entry.samples {
                if !ids.insert(sample.sample_id.clone()) {
                    return Err(Error::Manifest(format!(
                        "duplicate sample id {:?} in dataset {:?}",
                        sample.sample_id, self.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Class names in manifest order.
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_name.clone()).collect()
    }

    /// Looks up a class entry by normalized name.
    pub fn class(&self, name: &str) -> Option<&ClassEntry> {
        let wanted = normalize_class_name(name);
        self.classes.iter().find(|c| c.class_name == wanted)
    }
}

/// Reads and validates a manifest from a JSON file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Writes a manifest as pretty-printed JSON.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Pairs of class names that refer to the same category under different
/// dataset vocabularies, e.g. `("keyboard", "computer keyboard")`.
///
/// Serialized as a JSON array of two-element arrays. Matching is symmetric:
/// a pair `(a, b)` makes `a` overlap a base class named `b` and vice versa.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AliasMap {
    pub pairs: Vec<(String, String)>,
}

impl AliasMap {
    /// Names equivalent to `name` under the alias pairs (not including
    /// `name` itself).
    pub fn equivalents<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a str> {
        self.pairs.iter().filter_map(move |(a, b)| {
            if a == name {
                Some(b.as_str())
            } else if b == name {
                Some(a.as_str())
            } else {
                None
            }
        })
    }
}

/// Reads an alias map from a JSON file.
pub fn load_aliases(path: &Path) -> Result<AliasMap> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Removes incremental classes that duplicate a base class, preserving order.
///
/// A class is dropped when its name equals a base class name or is linked to
/// one through `aliases`. Duplicate names inside either input list are a
/// manifest error: silent deduplication would hide a corrupt dataset.
pub fn exclude_overlap(
    incremental: &[String],
    base: &[String],
    aliases: &AliasMap,
) -> Result<Vec<String>> {
    let mut base_set = BTreeSet::new();
    for name in base {
        if !base_set.insert(name.as_str()) {
            return Err(Error::Manifest(format!("duplicate base class {name:?}")));
        }
    }
    let mut seen = BTreeSet::new();
    let mut kept = Vec::new();
    for name in incremental {
        if !seen.insert(name.as_str()) {
            return Err(Error::Manifest(format!(
                "duplicate incremental class {name:?}"
            )));
        }
        let overlaps = base_set.contains(name.as_str())
            || aliases.equivalents(name).any(|eq| base_set.contains(eq));
        if !overlaps {
            kept.push(name.clone());
        }
    }
    Ok(kept)
}

/// Splits classes into consecutive chunks of `per_session`; the final chunk
/// may be shorter. Empty input or a zero chunk size is an error.
pub fn partition_sessions(classes: &[String], per_session: usize) -> Result<Vec<Vec<String>>> {
    if per_session == 0 {
        return Err(Error::Config("classes per session must be at least 1".into()));
    }
    if classes.is_empty() {
        return Err(Error::Manifest(
            "no incremental classes left to partition".into(),
        ));
    }
    Ok(classes.chunks(per_session).map(|c| c.to_vec()).collect())
}

/// One session of a schedule: its 1-based index, the classes introduced in
/// it, and the sample ids of its train and test splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub index: usize,
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// The full session layout of an incremental benchmark.
///
/// Session 1 is the base task; sessions 2.. introduce disjoint chunks of new
/// classes. After training session `b`, a model is evaluated on the union of
/// the test splits of sessions 1..=b.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionSchedule {
    pub sessions: Vec<SessionPlan>,
}

impl SessionSchedule {
    /// Number of sessions, including the base session.
    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    /// Checks indices run 1..=B in order, classes are non-empty and globally
    /// disjoint, and sample ids are unique across the schedule.
    pub fn validate(&self) -> Result<()> {
        if self.sessions.is_empty() {
            return Err(Error::Protocol("schedule has no sessions".into()));
        }
        let mut classes_seen = BTreeSet::new();
        let mut ids_seen = BTreeSet::new();
        for (i, plan) in self.sessions.iter().enumerate() {
            if plan.index != i + 1 {
                return Err(Error::Protocol(format!(
                    "session at position {} has index {}, expected {}",
                    i,
                    plan.index,
                    i + 1
                )));
            }
            if plan.classes.is_empty() {
                return Err(Error::Protocol(format!(
                    "session {} introduces no classes",
                    plan.index
                )));
            }
            for class in &plan.classes {
                if !classes_seen.insert(class.clone()) {
                    return Err(Error::Protocol(format!(
                        "class {:?} appears in more than one session",
                        class
                    )));
                }
            }
            for id in plan.train.iter().chain(plan.test.iter()) {
                if !ids_seen.insert(id.clone()) {
                    return Err(Error::Protocol(format!(
                        "sample id {:?} appears more than once in the schedule",
                        id
                    )));
                }
            }
        }
        Ok(())
    }

    /// The plan for 1-based session `b`.
    pub fn plan(&self, session: usize) -> Result<&SessionPlan> {
        if session == 0 || session > self.sessions.len() {
            return Err(Error::Protocol(format!(
                "session {} outside schedule of {} sessions",
                session,
                self.sessions.len()
            )));
        }
        Ok(&self.sessions[session - 1])
    }

    /// All classes introduced up to and including session `b`, in
    /// introduction order.
    pub fn visible_classes(&self, session: usize) -> Result<Vec<String>> {
        self.plan(session)?;
        Ok(self.sessions[..session]
            .iter()
            .flat_map(|p| p.classes.iter().cloned())
            .collect())
    }

    /// The session that introduces `class`, if any.
    pub fn intro_session(&self, class: &str) -> Option<usize> {
        self.sessions
            .iter()
            .find(|p| p.classes.iter().any(|c| c == class))
            .map(|p| p.index)
    }

    /// Pretty-printed JSON; byte-identical for equal schedules.
    pub fn to_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses and validates a schedule from JSON text.
    pub fn from_json(text: &str) -> Result<Self> {
        let schedule: Self = serde_json::from_str(text)?;
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Writes a schedule to a JSON file.
pub fn save_schedule(schedule: &SessionSchedule, path: &Path) -> Result<()> {
    fs::write(path, schedule.to_json()?)?;
    Ok(())
}

/// Reads and validates a schedule from a JSON file.
pub fn load_schedule(path: &Path) -> Result<SessionSchedule> {
    SessionSchedule::from_json(&fs::read_to_string(path)?)
}

fn session_ids(entry: &ClassEntry, split: Split) -> impl Iterator<Item = String> + '_ {
    entry
        .samples
        .iter()
        .filter(move |s| s.split == split)
        .map(|s| s.sample_id.clone())
}

/// Builds the full schedule: session 1 carries every base class, later
/// sessions carry consecutive chunks of the incremental classes that survive
/// [`exclude_overlap`].
///
/// Sample ids must be unique across the two manifests, and no class may end
/// up in two sessions; either situation is an error rather than a silent
/// repair.
pub fn build_schedule(
    base: &DatasetManifest,
    incremental: &DatasetManifest,
    classes_per_session: usize,
    aliases: &AliasMap,
) -> Result<SessionSchedule> {
    base.validate()?;
    incremental.validate()?;

    let kept = exclude_overlap(
        &incremental.class_names(),
        &base.class_names(),
        aliases,
    )?;
    let chunks = partition_sessions(&kept, classes_per_session)?;

    let mut sessions = Vec::with_capacity(1 + chunks.len());
    let mut base_session = SessionPlan {
        index: 1,
        classes: base.class_names(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for entry in &base.classes {
        base_session.train.extend(session_ids(entry, Split::Train));
        base_session.test.extend(session_ids(entry, Split::Test));
    }
    sessions.push(base_session);

    for (i, chunk) in chunks.iter().enumerate() {
        let mut plan = SessionPlan {
            index: i + 2,
            classes: chunk.clone(),
            train: Vec::new(),
            test: Vec::new(),
        };
        for class in chunk {
            let entry = incremental.class(class).ok_or_else(|| {
                Error::Manifest(format!(
                    "class {class:?} missing from dataset {:?}",
                    incremental.name
                ))
            })?;
            plan.train.extend(session_ids(entry, Split::Train));
            plan.test.extend(session_ids(entry, Split::Test));
        }
        sessions.push(plan);
    }

    let schedule = SessionSchedule { sessions };
    schedule.validate()?;
    Ok(schedule)
}

/// Builds a manifest of synthetic samples: every class gets
/// `train_per_class` train and `test_per_class` test entries with ids of the
/// form `"{class}/train/{i:03}"`.
pub fn synthetic_manifest(
    name: &str,
    classes: &[&str],
    train_per_class: usize,
    test_per_class: usize,
) -> Result<DatasetManifest> {
    let entries = classes
        .iter()
        .map(|class| {
            let mut samples = Vec::with_capacity(train_per_class + test_per_class);
            for i in 0..train_per_class {
                samples.push(SampleRef {
                    sample_id: format!("{class}/train/{i:03}"),
                    split: Split::Train,
                    path: "synthetic".to_string(),
                });
            }
            for i in 0..test_per_class {
                samples.push(SampleRef {
                    sample_id: format!("{class}/test/{i:03}"),
                    split: Split::Test,
                    path: "synthetic".to_string(),
                });
            }
            ClassEntry { class_name: class.to_string(), samples }
        })
        .collect();
    DatasetManifest::new(name, entries)
}

fn shipped_manifest(text: &str) -> DatasetManifest {
    let manifest: DatasetManifest =
        serde_json::from_str(text).expect("shipped manifest parses");
    manifest.validate().expect("shipped manifest is valid");
    manifest
}

fn shipped_aliases(text: &str) -> AliasMap {
    serde_json::from_str(text).expect("shipped alias map parses")
}

/// The 55-class synthetic base dataset shared by both shipped benchmarks.
pub fn shapenet55_manifest() -> DatasetManifest {
    shipped_manifest(include_str!("../data/manifests/shapenet55.json"))
}

/// The 40-class synthetic dataset behind the synthetic-to-synthetic task.
pub fn modelnet40_manifest() -> DatasetManifest {
    shipped_manifest(include_str!("../data/manifests/modelnet40.json"))
}

/// The 50-class real-scan dataset behind the synthetic-to-real task, in its
/// published incremental order.
pub fn co3d_manifest() -> DatasetManifest {
    shipped_manifest(include_str!("../data/manifests/co3d.json"))
}

/// Alias pairs for the synthetic-to-synthetic task.
pub fn s2s_aliases() -> AliasMap {
    shipped_aliases(include_str!("../data/aliases/s2s.json"))
}

/// Alias pairs for the synthetic-to-real task (none are needed; all overlaps
/// are exact name matches).
pub fn s2r_aliases() -> AliasMap {
    shipped_aliases(include_str!("../data/aliases/s2r.json"))
}

/// Schedule of the shipped synthetic-to-synthetic task: 7 sessions sized
/// 55,4,4,4,4,4,4.
pub fn s2s_schedule() -> Result<SessionSchedule> {
    build_schedule(
        &shapenet55_manifest(),
        &modelnet40_manifest(),
        SHIPPED_CLASSES_PER_SESSION,
        &s2s_aliases(),
    )
}

/// Schedule of the shipped synthetic-to-real task: 12 sessions sized
/// 55,4,4,4,4,4,4,4,4,4,4,1.
pub fn s2r_schedule() -> Result<SessionSchedule> {
    build_schedule(
        &shapenet55_manifest(),
        &co3d_manifest(),
        SHIPPED_CLASSES_PER_SESSION,
        &s2r_aliases(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_lowercases_and_collapses_whitespace() {
        assert_eq!(normalize_class_name("Flower_Pot"), "flower pot");
        assert_eq!(normalize_class_name("  Night   Stand "), "night stand");
        assert_eq!(normalize_class_name("cube-tall"), "cube-tall");
        let once = normalize_class_name("Range_ Hood");
        assert_eq!(normalize_class_name(&once), once);
    }

    #[test]
    fn exclude_overlap_drops_exact_matches_in_order() {
        let kept = exclude_overlap(
            &names(&["a", "b", "c", "d"]),
            &names(&["b", "d"]),
            &AliasMap::default(),
        )
        .unwrap();
        assert_eq!(kept, names(&["a", "c"]));
    }

    #[test]
    fn exclude_overlap_honours_aliases_both_ways() {
        let aliases = AliasMap {
            pairs: vec![("keyboard".into(), "computer keyboard".into())],
        };
        let kept = exclude_overlap(
            &names(&["keyboard", "cone"]),
            &names(&["computer keyboard"]),
            &aliases,
        )
        .unwrap();
        assert_eq!(kept, names(&["cone"]));

        let kept = exclude_overlap(
            &names(&["computer keyboard", "cone"]),
            &names(&["keyboard"]),
            &aliases,
        )
        .unwrap();
        assert_eq!(kept, names(&["cone"]));
    }

    #[test]
    fn exclude_overlap_rejects_duplicates() {
        let err = exclude_overlap(
            &names(&["a", "a"]),
            &names(&["b"]),
            &AliasMap::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");

        let err = exclude_overlap(
            &names(&["a"]),
            &names(&["b", "b"]),
            &AliasMap::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }

    #[test]
    fn partition_chunks_with_short_tail() {
        let parts = partition_sessions(&names(&["a", "b", "c", "d", "e"]), 2).unwrap();
        assert_eq!(parts, vec![names(&["a", "b"]), names(&["c", "d"]), names(&["e"])]);
    }

    #[test]
    fn partition_rejects_empty_input_and_zero_chunk() {
        assert!(matches!(
            partition_sessions(&[], 2).unwrap_err(),
            Error::Manifest(_)
        ));
        assert!(matches!(
            partition_sessions(&names(&["a"]), 0).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn manifest_rejects_duplicate_sample_ids() {
        let err = DatasetManifest::new(
            "bad",
            vec![
                ClassEntry {
                    class_name: "a".into(),
                    samples: vec![SampleRef {
                        sample_id: "x".into(),
                        split: Split::Train,
                        path: "p".into(),
                    }],
                },
                ClassEntry {
                    class_name: "b".into(),
                    samples: vec![SampleRef {
                        sample_id: "x".into(),
                        split: Split::Test,
                        path: "q".into(),
                    }],
                },
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::Manifest(_)), "{err}");
    }

    #[test]
    fn synthetic_schedule_matches_expected_shape() {
        let base = synthetic_manifest(
            "base",
            &["c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7", "c8", "c9"],
            3,
            2,
        )
        .unwrap();
        let inc = synthetic_manifest("inc", &["i0", "i1", "i2", "i3", "i4", "i5"], 3, 2).unwrap();
        let schedule = build_schedule(&base, &inc, 2, &AliasMap::default()).unwrap();

        let sizes: Vec<usize> = schedule.sessions.iter().map(|p| p.classes.len()).collect();
        assert_eq!(sizes, vec![10, 2, 2, 2]);
        assert_eq!(schedule.sessions[0].train.len(), 30);
        assert_eq!(schedule.sessions[0].test.len(), 20);
        assert_eq!(schedule.sessions[1].classes, names(&["i0", "i1"]));
        assert_eq!(
            schedule.sessions[3].train,
            names(&[
                "i4/train/000",
                "i4/train/001",
                "i4/train/002",
                "i5/train/000",
                "i5/train/001",
                "i5/train/002"
            ])
        );
    }

    #[test]
    fn visible_classes_and_intro_session_follow_introduction_order() {
        let base = synthetic_manifest("base", &["b0", "b1"], 1, 1).unwrap();
        let inc = synthetic_manifest("inc", &["i0", "i1"], 1, 1).unwrap();
        let schedule = build_schedule(&base, &inc, 1, &AliasMap::default()).unwrap();

        assert_eq!(schedule.visible_classes(1).unwrap(), names(&["b0", "b1"]));
        assert_eq!(
            schedule.visible_classes(3).unwrap(),
            names(&["b0", "b1", "i0", "i1"])
        );
        assert_eq!(schedule.intro_session("b1"), Some(1));
        assert_eq!(schedule.intro_session("i1"), Some(3));
        assert_eq!(schedule.intro_session("missing"), None);
        assert!(schedule.visible_classes(4).is_err());
    }

    #[test]
    fn schedule_json_rejects_overlapping_sessions() {
        let text = r#"{
            "sessions": [
                { "index": 1, "classes": ["a"], "train": [], "test": [] },
                { "index": 2, "classes": ["a"], "train": [], "test": [] }
            ]
        }"#;
        let err = SessionSchedule::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn schedule_json_rejects_bad_indices() {
        let text = r#"{
            "sessions": [
                { "index": 2, "classes": ["a"], "train": [], "test": [] }
            ]
        }"#;
        let err = SessionSchedule::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn shipped_s2s_schedule_has_published_shape() {
        let schedule = s2s_schedule().unwrap();
        let sizes: Vec<usize> = schedule.sessions.iter().map(|p| p.classes.len()).collect();
        assert_eq!(sizes, vec![55, 4, 4, 4, 4, 4, 4]);
        assert_eq!(
            schedule.sessions[1].classes,
            names(&["cone", "cup", "curtain", "desk"])
        );
        assert_eq!(
            schedule.sessions[6].classes,
            names(&["tv stand", "vase", "wardrobe", "xbox"])
        );
        // The keyboard class overlaps the base vocabulary only through its
        // alias, so its absence proves the alias file is applied.
        assert_eq!(schedule.intro_session("keyboard"), None);
        assert_eq!(schedule.intro_session("computer keyboard"), Some(1));
    }

    #[test]
    fn shipped_s2r_schedule_has_published_shape() {
        let schedule = s2r_schedule().unwrap();
        let sizes: Vec<usize> = schedule.sessions.iter().map(|p| p.classes.len()).collect();
        assert_eq!(sizes, vec![55, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 1]);
        assert_eq!(
            schedule.sessions[1].classes,
            names(&["kite", "keyboard", "apple", "plant"])
        );
        assert_eq!(schedule.sessions[11].classes, names(&["suitcase"]));
        // Real-scan "keyboard" is a different vocabulary entry from the base
        // "computer keyboard" and stays in the incremental stream.
        assert_eq!(schedule.intro_session("keyboard"), Some(2));
    }

    #[test]
    fn shipped_schedules_serialize_byte_identically() {
        let a = s2s_schedule().unwrap().to_json().unwrap();
        let b = s2s_schedule().unwrap().to_json().unwrap();
        assert_eq!(a, b);
        let parsed = SessionSchedule::from_json(&a).unwrap();
        assert_eq!(parsed.to_json().unwrap(), a);
    }

    #[test]
    fn schedule_file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("schedule.json");
        let schedule = s2r_schedule().unwrap();
        save_schedule(&schedule, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = load_schedule(&path).unwrap();
        assert_eq!(loaded, schedule);
        save_schedule(&loaded, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn benchmark_vocabulary_has_96_distinct_names() {
        let mut all = shapenet55_manifest().class_names();
        all.extend(co3d_manifest().class_names());
        let distinct: BTreeSet<String> = all.iter().cloned().collect();
        assert_eq!(distinct.len(), 96);
    }

    #[test]
    fn text_embeddings_of_full_vocabulary_are_separated() {
        use crate::encoders::encode_text_toy;

        let mut names: BTreeSet<String> = shapenet55_manifest()
            .class_names()
            .into_iter()
            .chain(co3d_manifest().class_names())
            .collect();
        names.extend(modelnet40_manifest().class_names());
        let dim = 32;
        let embeddings: Vec<_> = names
            .iter()
            .map(|n| encode_text_toy(n, dim).unwrap())
            .collect();
        let mut max_abs_cos: f64 = 0.0;
        for i in 0..embeddings.len() {
            for j in (i + 1)..embeddings.len() {
                let cos = embeddings[i].dot(&embeddings[j]);
                max_abs_cos = max_abs_cos.max(cos.abs());
            }
        }
        // Unit-normalized embeddings: dot products are cosines. Distinct
        // prompts must stay clearly separated or prototype classification
        // would be ill-posed from the start.
        assert!(
            max_abs_cos < 0.9,
            "closest prompt pair has |cos| = {max_abs_cos}"
        );
    }
}

//! Blind rating sessions: per-subject randomized screens, validated rating
//! submission, JSON persistence and per-condition results.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evalstats::{
    median_iqr, significance_table, AnalysisMode, Comparison, ItemRatings, MedianIqr, RatingSet,
    Scale, StatsError,
};
use crate::stimulus::Condition;

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown session: {0}")]
    UnknownSession(String),
    #[error("session is complete")]
    Complete,
    #[error("invalid rating: {0}")]
    InvalidRating(String),
    #[error("unsupported session version: {0}")]
    UnsupportedVersion(u32),
    #[error("unknown item: {0}")]
    UnknownItem(String),
    #[error("session has no items")]
    NoItems,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed session file: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    SpeechQuality,
    OverallQuality,
    ListeningEffort,
}

impl Attribute {
    pub fn scale(self) -> Scale {
        match self {
            Attribute::SpeechQuality | Attribute::OverallQuality => Scale::Quality,
            Attribute::ListeningEffort => Scale::Effort,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Complete,
}

/// One stimulus on a screen. The handle is random per session; the
/// condition never leaves the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenStimulus {
    pub handle: String,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenPlan {
    pub item_id: String,
    pub stimuli: Vec<ScreenStimulus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub item_id: String,
    pub handle: String,
    pub condition: Condition,
    pub value: f64,
    pub timestamp_ms: u64,
}

/// Catalogue entry: an item and the conditions available for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogueItem {
    pub item_id: String,
    pub conditions: Vec<Condition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingSession {
    pub version: u32,
    pub id: String,
    pub subject: String,
    pub attribute: Attribute,
    pub seed: u64,
    pub state: SessionState,
    pub screens: Vec<ScreenPlan>,
    pub cursor: usize,
    pub ratings: Vec<RatingRecord>,
}

/// What a client sees of the current screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenView {
    pub session_id: String,
    pub screen_index: usize,
    pub screen_count: usize,
    pub item_id: String,
    pub attribute: Attribute,
    pub scale_min: f64,
    pub scale_max: f64,
    pub handles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingInput {
    pub handle: String,
    pub value: f64,
}

fn opaque_handle(rng: &mut ChaCha8Rng) -> String {
    format!("{:032x}", rng.random::<u128>())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RatingSession {
    /// Item order and stimulus order on every screen are shuffled from
    /// `seed`, so two subjects with different seeds see different layouts.
    pub fn new(
        id: impl Into<String>,
        subject: impl Into<String>,
        attribute: Attribute,
        items: &[CatalogueItem],
        seed: u64,
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(SessionError::NoItems);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<&CatalogueItem> = items.iter().collect();
        order.shuffle(&mut rng);
        let screens = order
            .into_iter()
            .map(|item| {
                let mut stimuli: Vec<ScreenStimulus> = item
                    .conditions
                    .iter()
                    .map(|&condition| ScreenStimulus {
                        handle: opaque_handle(&mut rng),
                        condition,
                    })
                    .collect();
                stimuli.shuffle(&mut rng);
                ScreenPlan {
                    item_id: item.item_id.clone(),
                    stimuli,
                }
            })
            .collect();
        Ok(Self {
            version: SCHEMA_VERSION,
            id: id.into(),
            subject: subject.into(),
            attribute,
            seed,
            state: SessionState::Open,
            screens,
            cursor: 0,
            ratings: Vec::new(),
        })
    }

    pub fn current_screen(&self) -> Option<ScreenView> {
        if self.state == SessionState::Complete {
            return None;
        }
        let plan = self.screens.get(self.cursor)?;
        let (lo, hi) = self.attribute.scale().bounds();
        Some(ScreenView {
            session_id: self.id.clone(),
            screen_index: self.cursor,
            screen_count: self.screens.len(),
            item_id: plan.item_id.clone(),
            attribute: self.attribute,
            scale_min: lo,
            scale_max: hi,
            handles: plan.stimuli.iter().map(|s| s.handle.clone()).collect(),
        })
    }

    /// Looks up a handle in any screen of this session.
    pub fn resolve(&self, handle: &str) -> Option<(&str, Condition)> {
        self.screens.iter().find_map(|p| {
            p.stimuli
                .iter()
                .find(|s| s.handle == handle)
                .map(|s| (p.item_id.as_str(), s.condition))
        })
    }

    /// Accepts the ratings for the current screen: every stimulus exactly
    /// once, each inside the attribute's scale. Nothing is recorded when
    /// any check fails.
    pub fn submit(&mut self, ratings: &[RatingInput]) -> Result<()> {
        if self.state == SessionState::Complete {
            return Err(SessionError::Complete);
        }
        let plan = &self.screens[self.cursor];
        let scale = self.attribute.scale();
        let mut seen: HashMap<&str, Condition> = HashMap::new();
        for r in ratings {
            let Some(stim) = plan.stimuli.iter().find(|s| s.handle == r.handle) else {
                return Err(SessionError::InvalidRating(format!(
                    "handle {} is not on the current screen",
                    r.handle
                )));
            };
            if !r.value.is_finite() || !scale.contains(r.value) {
                let (lo, hi) = scale.bounds();
                return Err(SessionError::InvalidRating(format!(
                    "value {} outside [{lo}, {hi}]",
                    r.value
                )));
            }
            if seen.insert(r.handle.as_str(), stim.condition).is_some() {
                return Err(SessionError::InvalidRating(format!(
                    "handle {} rated twice",
                    r.handle
                )));
            }
        }
        if seen.len() != plan.stimuli.len() {
            return Err(SessionError::InvalidRating(format!(
                "{} of {} stimuli rated",
                seen.len(),
                plan.stimuli.len()
            )));
        }
        let ts = now_ms();
        let item_id = plan.item_id.clone();
        for r in ratings {
            self.ratings.push(RatingRecord {
                item_id: item_id.clone(),
                handle: r.handle.clone(),
                condition: seen[r.handle.as_str()],
                value: r.value,
                timestamp_ms: ts,
            });
        }
        self.cursor += 1;
        if self.cursor == self.screens.len() {
            self.state = SessionState::Complete;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: Condition,
    pub n: usize,
    pub median: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResults {
    pub attribute: Attribute,
    pub sessions: usize,
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
}

/// Pairs compared in the results: all pairs of rated conditions except the
/// hidden reference and the anchor, which only calibrate the scale.
pub fn comparison_pairs(conditions: &[Condition]) -> Vec<(String, String)> {
    let tested: Vec<Condition> = conditions
        .iter()
        .copied()
        .filter(|c| !matches!(c, Condition::Reference | Condition::Anchor))
        .collect();
    let mut pairs = Vec::new();
    for i in 0..tested.len() {
        for j in i + 1..tested.len() {
            pairs.push((tested[i].name().to_string(), tested[j].name().to_string()));
        }
    }
    pairs
}

/// Median/IQR per condition and Bonferroni-corrected rank-sum comparisons
/// over the ratings of `sessions`, which must share one attribute.
pub fn summarize(
    sessions: &[&RatingSession],
    mode: AnalysisMode,
    alpha: f64,
) -> Result<SessionResults> {
    let first = sessions.first().ok_or(SessionError::NoItems)?;
    let attribute = first.attribute;
    let scale = attribute.scale();
    let mut by_condition: BTreeMap<Condition, Vec<f64>> = BTreeMap::new();
    let mut by_item: BTreeMap<(String, Condition), Vec<f64>> = BTreeMap::new();
    for s in sessions {
        if s.attribute != attribute {
            return Err(SessionError::InvalidRating(
                "sessions rate different attributes".into(),
            ));
        }
        for r in &s.ratings {
            by_condition.entry(r.condition).or_default().push(r.value);
            by_item
                .entry((r.item_id.clone(), r.condition))
                .or_default()
                .push(r.value);
        }
    }
    let conditions = by_condition
        .iter()
        .map(|(&condition, values)| {
            let MedianIqr { median, iqr, .. } = median_iqr(values)?;
            Ok(ConditionSummary {
                condition,
                n: values.len(),
                median,
                iqr,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<Condition> = by_condition.keys().copied().collect();
    let pairs = comparison_pairs(&names);
    let comparisons = if pairs.is_empty() {
        Vec::new()
    } else {
        let ratings = by_item
            .into_iter()
            .map(|((item, condition), values)| {
                Ok(ItemRatings {
                    item,
                    set: RatingSet::new(condition.name(), scale, values)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        significance_table(&ratings, &pairs, mode, alpha)?
    };
    Ok(SessionResults {
        attribute,
        sessions: sessions.len(),
        conditions,
        comparisons,
    })
}

/// A file that failed to load and was moved aside.
#[derive(Debug, Clone)]
pub struct Quarantined {
    pub original: PathBuf,
    pub moved_to: PathBuf,
    pub reason: String,
}

/// One `<id>.json` file per session in a directory.
#[derive(Debug, Clone)]
pub struct SessionStore {
    dir: PathBuf,
}

impl SessionStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.json"))
    }

    /// Written to a temporary file and renamed, so a crash never leaves a
    /// half-written session behind.
    pub fn save(&self, session: &RatingSession) -> Result<()> {
        let tmp = self.dir.join(format!(".{}.json.tmp", session.id));
        fs::write(&tmp, serde_json::to_vec_pretty(session)?)?;
        fs::rename(&tmp, self.path_for(&session.id))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<RatingSession> {
        let path = self.path_for(id);
        if !path.exists() {
            return Err(SessionError::UnknownSession(id.to_string()));
        }
        parse_session(&fs::read(path)?)
    }

    /// Loads every session; unreadable files are renamed with a
    /// `.corrupt` suffix and reported instead of aborting the load.
    pub fn load_all(&self) -> Result<(Vec<RatingSession>, Vec<Quarantined>)> {
        let mut sessions = Vec::new();
        let mut bad = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for path in paths {
            match fs::read(&path)
                .map_err(SessionError::from)
                .and_then(|b| parse_session(&b))
            {
                Ok(s) => sessions.push(s),
                Err(e) => {
                    let moved_to = path.with_extension("json.corrupt");
                    fs::rename(&path, &moved_to)?;
                    bad.push(Quarantined {
                        original: path,
                        moved_to,
                        reason: e.to_string(),
                    });
                }
            }
        }
        Ok((sessions, bad))
    }
}

pub fn parse_session(bytes: &[u8]) -> Result<RatingSession> {
    let raw: serde_json::Value = serde_json::from_slice(bytes)?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != SCHEMA_VERSION {
        return Err(SessionError::UnsupportedVersion(version));
    }
    Ok(serde_json::from_value(raw)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalogue() -> Vec<CatalogueItem> {
        ["a", "b", "c"]
            .iter()
            .map(|id| CatalogueItem {
                item_id: id.to_string(),
                conditions: vec![
                    Condition::Reference,
                    Condition::Anchor,
                    Condition::Original,
                    Condition::Lstm,
                    Condition::Nmf,
                ],
            })
            .collect()
    }

    fn rate_all(session: &mut RatingSession, value: impl Fn(Condition) -> f64) {
        while let Some(view) = session.current_screen() {
            let inputs: Vec<RatingInput> = view
                .handles
                .iter()
                .map(|h| RatingInput {
                    handle: h.clone(),
                    value: value(session.resolve(h).unwrap().1),
                })
                .collect();
            session.submit(&inputs).unwrap();
        }
    }

    #[test]
    fn layouts_differ_between_seeds() {
        let a = RatingSession::new("s1", "x", Attribute::OverallQuality, &catalogue(), 1).unwrap();
        let b = RatingSession::new("s2", "y", Attribute::OverallQuality, &catalogue(), 2).unwrap();
        let layout = |s: &RatingSession| -> Vec<(String, Vec<Condition>)> {
            s.screens
                .iter()
                .map(|p| {
                    (
                        p.item_id.clone(),
                        p.stimuli.iter().map(|x| x.condition).collect(),
                    )
                })
                .collect()
        };
        assert_ne!(layout(&a), layout(&b));
        let again =
            RatingSession::new("s1", "x", Attribute::OverallQuality, &catalogue(), 1).unwrap();
        assert_eq!(a, again);
    }

    #[test]
    fn view_hides_conditions() {
        let s = RatingSession::new("s", "x", Attribute::SpeechQuality, &catalogue(), 3).unwrap();
        let json = serde_json::to_string(&s.current_screen().unwrap()).unwrap();
        for c in ["reference", "anchor", "original", "lstm", "nmf"] {
            assert!(!json.contains(c), "{json}");
        }
    }

    #[test]
    fn submission_rules() {
        let mut s =
            RatingSession::new("s", "x", Attribute::ListeningEffort, &catalogue(), 4).unwrap();
        let view = s.current_screen().unwrap();
        let ok: Vec<RatingInput> = view
            .handles
            .iter()
            .map(|h| RatingInput {
                handle: h.clone(),
                value: 5.0,
            })
            .collect();
        let mut out_of_range = ok.clone();
        out_of_range[0].value = 14.0;
        assert!(matches!(
            s.submit(&out_of_range),
            Err(SessionError::InvalidRating(_))
        ));
        let mut duplicate = ok.clone();
        duplicate[1].handle = duplicate[0].handle.clone();
        assert!(matches!(
            s.submit(&duplicate),
            Err(SessionError::InvalidRating(_))
        ));
        assert!(matches!(
            s.submit(&ok[..2]),
            Err(SessionError::InvalidRating(_))
        ));
        assert!(s.ratings.is_empty());
        s.submit(&ok).unwrap();
        assert_eq!(s.cursor, 1);
        assert!(
            matches!(s.submit(&ok), Err(SessionError::InvalidRating(_))),
            "old screen handles"
        );
        rate_all(&mut s, |_| 7.0);
        assert_eq!(s.state, SessionState::Complete);
        assert!(matches!(s.submit(&ok), Err(SessionError::Complete)));
    }

    #[test]
    fn results_for_perfect_reference() {
        let sessions: Vec<RatingSession> = (0..4)
            .map(|k| {
                let mut s = RatingSession::new(
                    format!("s{k}"),
                    format!("p{k}"),
                    Attribute::OverallQuality,
                    &catalogue(),
                    k,
                )
                .unwrap();
                rate_all(&mut s, |c| match c {
                    Condition::Reference => 100.0,
                    Condition::Anchor => 10.0,
                    Condition::Lstm => 60.0 + k as f64,
                    _ => 40.0 + k as f64,
                });
                s
            })
            .collect();
        let refs: Vec<&RatingSession> = sessions.iter().collect();
        let res = summarize(&refs, AnalysisMode::Pooled, DEFAULT_SIGNIFICANCE).unwrap();
        let reference = res
            .conditions
            .iter()
            .find(|c| c.condition == Condition::Reference)
            .unwrap();
        assert_eq!(
            (reference.median, reference.iqr, reference.n),
            (100.0, 0.0, 12)
        );
        assert_eq!(res.comparisons.len(), 3);
        let per_item = summarize(&refs, AnalysisMode::PerItem, DEFAULT_SIGNIFICANCE).unwrap();
        assert_eq!(per_item.comparisons.len(), 9);
    }

    #[test]
    fn store_round_trip_and_quarantine() {
        let dir = tempfile::tempdir().unwrap();
        let store = SessionStore::open(dir.path()).unwrap();
        let mut s =
            RatingSession::new("abc", "x", Attribute::OverallQuality, &catalogue(), 5).unwrap();
        rate_all(&mut s, |_| 50.0);
        store.save(&s).unwrap();
        assert_eq!(store.load("abc").unwrap(), s);
        fs::write(dir.path().join("bad.json"), b"{not json").unwrap();
        let mut old = serde_json::to_value(&s).unwrap();
        old["version"] = 7.into();
        old["id"] = "old".into();
        fs::write(
            dir.path().join("old.json"),
            serde_json::to_vec(&old).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            store.load("old"),
            Err(SessionError::UnsupportedVersion(7))
        ));
        let (loaded, bad) = store.load_all().unwrap();
        assert_eq!(loaded, vec![s]);
        assert_eq!(bad.len(), 2);
        assert!(bad
            .iter()
            .any(|q| q.reason.contains("unsupported session version")));
        assert!(dir.path().join("bad.json.corrupt").exists());
    }
}

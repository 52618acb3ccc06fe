//! Impression records, the text log format, per-user sequence construction
//! and feature construction.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::numkernel::{mix64, Vector};

/// Header line of the impression log format.
pub const LOG_HEADER: &str =
    "user_id,timestamp,session_id,position,slot,ad_id,query_topic,relevance,clicked,dwell_seconds";

/// Dwell below this many seconds marks a click as a quick back.
pub const QUICK_BACK_SECONDS: f64 = 20.0;

pub const DEFAULT_HASH_BUCKETS: usize = 64;

/// Version of the feature layout. Bump whenever the layout below changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

const FIELD_TAG_AD: u64 = 0xA1;
const FIELD_TAG_USER: u64 = 0xB2;
const FIELD_TAG_TOPIC: u64 = 0xC3;

/// Where an ad was displayed on the result page.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Position {
    TopFirst,
    Mainline(u32),
    Sidebar(u32),
}

impl Position {
    /// Coarse class used for per-position evaluation.
    pub fn class(self) -> PositionClass {
        match self {
            Position::TopFirst => PositionClass::TopFirst,
            Position::Mainline(_) => PositionClass::Mainline,
            Position::Sidebar(_) => PositionClass::Sidebar,
        }
    }

    /// Page order key: mainline before sidebar, top-first as mainline slot 0.
    pub fn display_rank(self) -> (u8, u32) {
        match self {
            Position::TopFirst => (0, 0),
            Position::Mainline(s) => (0, s),
            Position::Sidebar(s) => (1, s),
        }
    }

    /// Slot number written to the log; 0 for top-first.
    pub fn slot(self) -> u32 {
        match self {
            Position::TopFirst => 0,
            Position::Mainline(s) | Position::Sidebar(s) => s,
        }
    }

    fn code(self) -> char {
        self.class().code()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PositionClass {
    TopFirst,
    Mainline,
    Sidebar,
}

impl PositionClass {
    pub const ALL: [PositionClass; 3] = [PositionClass::TopFirst, PositionClass::Mainline, PositionClass::Sidebar];

    pub fn code(self) -> char {
        match self {
            PositionClass::TopFirst => 'T',
            PositionClass::Mainline => 'M',
            PositionClass::Sidebar => 'S',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for PositionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// One logged ad view.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionRecord {
    pub user_id: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub session_id: u64,
    pub position: Position,
    pub ad_id: u64,
    pub query_topic: u32,
    /// Ad text / query relevance proxy in [0, 1].
    pub relevance: f64,
    pub clicked: bool,
    /// Seconds on the landing page; zero when not clicked.
    pub dwell_seconds: f64,
}

impl ImpressionRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        if !(0.0..=1.0).contains(&self.relevance) {
            return Err(RecordError::Relevance(self.relevance));
        }
        if !self.dwell_seconds.is_finite() || self.dwell_seconds < 0.0 {
            return Err(RecordError::Dwell(self.dwell_seconds));
        }
        if self.dwell_seconds > 0.0 && !self.clicked {
            return Err(RecordError::DwellWithoutClick(self.dwell_seconds));
        }
        match self.position {
            Position::Mainline(0) | Position::Sidebar(0) => Err(RecordError::ZeroSlot),
            _ => Ok(()),
        }
    }

    pub fn is_quick_back(&self) -> bool {
        self.clicked && self.dwell_seconds < QUICK_BACK_SECONDS
    }

    fn sort_key(&self) -> (u64, u64, (u8, u32)) {
        (self.timestamp, self.session_id, self.position.display_rank())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("relevance {0} outside [0, 1]")]
    Relevance(f64),
    #[error("dwell {0} must be finite and non-negative")]
    Dwell(f64),
    #[error("dwell {0} recorded on an unclicked impression")]
    DwellWithoutClick(f64),
    #[error("mainline and sidebar slots start at 1")]
    ZeroSlot,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line 1: header mismatch, expected `{LOG_HEADER}`, found `{0}`")]
    Header(String),
    #[error("{} malformed line(s); first: {}", .0.len(), .0[0])]
    Malformed(Vec<LineError>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("line {line}: {kind}")]
pub struct LineError {
    pub line: usize,
    pub kind: LineErrorKind,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LineErrorKind {
    #[error("expected 10 fields, found {0}")]
    FieldCount(usize),
    #[error("field `{field}` is not a valid number: `{value}`")]
    NotNumeric { field: &'static str, value: String },
    #[error("unknown position `{0}`, expected T, M or S")]
    Position(String),
    #[error("top-first impressions carry slot 0, found {0}")]
    TopFirstSlot(u32),
    #[error("clicked must be 0 or 1, found `{0}`")]
    Clicked(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

fn parse_num<T: std::str::FromStr>(field: &'static str, value: &str) -> Result<T, LineErrorKind> {
    value.parse().map_err(|_| LineErrorKind::NotNumeric {
        field,
        value: value.to_string(),
    })
}

fn parse_real(field: &'static str, value: &str) -> Result<f64, LineErrorKind> {
    let v: f64 = parse_num(field, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(LineErrorKind::NotNumeric {
            field,
            value: value.to_string(),
        })
    }
}

fn parse_line(line: &str) -> Result<ImpressionRecord, LineErrorKind> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 10 {
        return Err(LineErrorKind::FieldCount(fields.len()));
    }
    let slot: u32 = parse_num("slot", fields[4])?;
    let position = match fields[3] {
        "T" if slot == 0 => Position::TopFirst,
        "T" => return Err(LineErrorKind::TopFirstSlot(slot)),
        "M" => Position::Mainline(slot),
        "S" => Position::Sidebar(slot),
        other => return Err(LineErrorKind::Position(other.to_string())),
    };
    let clicked = match fields[8] {
        "0" => false,
        "1" => true,
        other => return Err(LineErrorKind::Clicked(other.to_string())),
    };
    let record = ImpressionRecord {
        user_id: parse_num("user_id", fields[0])?,
        timestamp: parse_num("timestamp", fields[1])?,
        session_id: parse_num("session_id", fields[2])?,
        position,
        ad_id: parse_num("ad_id", fields[5])?,
        query_topic: parse_num("query_topic", fields[6])?,
        relevance: parse_real("relevance", fields[7])?,
        clicked,
        dwell_seconds: parse_real("dwell_seconds", fields[9])?,
    };
    record.validate()?;
    Ok(record)
}

/// Parses an impression log. All malformed lines are collected and reported
/// together, each with its 1-based line number.
pub fn parse_log<R: BufRead>(reader: R) -> Result<Vec<ImpressionRecord>, LogError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end_matches('\r') != LOG_HEADER {
        return Err(LogError::Header(header));
    }
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        match parse_line(line) {
            Ok(r) => records.push(r),
            Err(kind) => errors.push(LineError { line: idx + 2, kind }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(LogError::Malformed(errors))
    }
}

/// Writes records in the log format. Reals are printed with 6 decimals, so
/// values already on a 1e-6 grid (see [`round6`]) survive a round trip exactly.
pub fn write_log<W: Write>(records: &[ImpressionRecord], mut out: W) -> io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{},{:.6}",
            r.user_id,
            r.timestamp,
            r.session_id,
            r.position.code(),
            r.position.slot(),
            r.ad_id,
            r.query_topic,
            r.relevance,
            u8::from(r.clicked),
            r.dwell_seconds
        )?;
    }
    out.flush()
}

/// Snaps a real onto the 1e-6 grid used by the log format.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Time-ordered impressions of one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSequence {
    pub user_id: u64,
    pub impressions: Vec<ImpressionRecord>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.impressions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.impressions.is_empty()
    }

    /// Each impression paired with its predecessor in the sequence.
    pub fn with_predecessors(&self) -> impl Iterator<Item = (&ImpressionRecord, Option<&ImpressionRecord>)> {
        self.impressions
            .iter()
            .enumerate()
            .map(|(i, r)| (r, i.checked_sub(1).map(|p| &self.impressions[p])))
    }
}

/// Groups records by user (ascending user id) and orders each user's records
/// by time, then session, then display order on the page.
pub fn build_sequences(records: Vec<ImpressionRecord>) -> Vec<UserSequence> {
    let mut by_user: BTreeMap<u64, Vec<ImpressionRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id).or_default().push(r);
    }
    by_user
        .into_iter()
        .map(|(user_id, mut impressions)| {
            impressions.sort_by_key(ImpressionRecord::sort_key);
            UserSequence { user_id, impressions }
        })
        .collect()
}

/// Feature layout: three hashed one-hot blocks (ad, user, topic) of
/// `hash_buckets` each, then the dense block
///
/// | offset | feature |
/// |---|---|
/// | 0..3 | position one-hot (T, M, S) |
/// | 3 | slot index |
/// | 4 | relevance |
/// | 5 | log1p(seconds since previous impression) |
/// | 6 | log1p(previous impression's dwell, 0 if not clicked) |
/// | 7 | previous impression was a quick back |
/// | 8 | head of sequence |
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSpec {
    pub hash_buckets: usize,
    pub version: u32,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            hash_buckets: DEFAULT_HASH_BUCKETS,
            version: FEATURE_LAYOUT_VERSION,
        }
    }
}

pub const DENSE_WIDTH: usize = 9;

pub mod dense {
    pub const POSITION: usize = 0;
    pub const SLOT: usize = 3;
    pub const RELEVANCE: usize = 4;
    pub const TIME_INTERVAL: usize = 5;
    pub const LAST_DWELL: usize = 6;
    pub const QUICK_BACK: usize = 7;
    pub const HEAD: usize = 8;
}

impl FeatureSpec {
    pub fn new(hash_buckets: usize) -> Self {
        Self {
            hash_buckets,
            ..Self::default()
        }
    }

    pub fn width(&self) -> usize {
        self.hash_buckets * 3 + DENSE_WIDTH
    }

    pub fn dense_offset(&self) -> usize {
        self.hash_buckets * 3
    }

    pub fn bucket(&self, field_tag: u64, id: u64) -> usize {
        (mix64(mix64(field_tag) ^ id) % self.hash_buckets as u64) as usize
    }

    /// Indices of the three active hashed buckets (ad, user, topic).
    pub fn hashed_indices(&self, record: &ImpressionRecord) -> [usize; 3] {
        let b = self.hash_buckets;
        [
            self.bucket(FIELD_TAG_AD, record.ad_id),
            b + self.bucket(FIELD_TAG_USER, record.user_id),
            2 * b + self.bucket(FIELD_TAG_TOPIC, u64::from(record.query_topic)),
        ]
    }
}

/// Dense input vector for one impression.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vector);

impl FeatureVector {
    pub fn values(&self) -> &Vector {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("predecessor timestamp {pred} is after record timestamp {current}")]
    PredecessorInFuture { pred: u64, current: u64 },
}

/// Builds the feature vector of `record` given the same user's immediately
/// preceding impression, if any.
pub fn featurize(
    spec: &FeatureSpec,
    record: &ImpressionRecord,
    predecessor: Option<&ImpressionRecord>,
) -> Result<FeatureVector, FeatureError> {
    let mut v = vec![0.0; spec.width()];
    featurize_into(spec, record, predecessor, &mut v)?;
    Ok(FeatureVector(Vector::from_vec(v)))
}

/// Same as [`featurize`] but writes into a caller-owned buffer of width
/// `spec.width()`, overwriting every slot.
pub fn featurize_into(
    spec: &FeatureSpec,
    record: &ImpressionRecord,
    predecessor: Option<&ImpressionRecord>,
    out: &mut [f64],
) -> Result<(), FeatureError> {
    assert_eq!(out.len(), spec.width(), "feature buffer width");
    out.fill(0.0);
    for idx in spec.hashed_indices(record) {
        out[idx] = 1.0;
    }
    let d = &mut out[spec.dense_offset()..];
    d[dense::POSITION + record.position.class().index()] = 1.0;
    d[dense::SLOT] = f64::from(record.position.slot());
    d[dense::RELEVANCE] = record.relevance;
    match predecessor {
        None => d[dense::HEAD] = 1.0,
        Some(p) => {
            if p.timestamp > record.timestamp {
                return Err(FeatureError::PredecessorInFuture {
                    pred: p.timestamp,
                    current: record.timestamp,
                });
            }
            d[dense::TIME_INTERVAL] = ((record.timestamp - p.timestamp) as f64).ln_1p();
            d[dense::LAST_DWELL] = if p.clicked { p.dwell_seconds.ln_1p() } else { 0.0 };
            d[dense::QUICK_BACK] = if p.is_quick_back() { 1.0 } else { 0.0 };
        }
    }
    Ok(())
}

/// Featurizes a whole sequence in order.
pub fn featurize_sequence(spec: &FeatureSpec, seq: &UserSequence) -> Result<Vec<FeatureVector>, FeatureError> {
    seq.with_predecessors().map(|(r, p)| featurize(spec, r, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    use proptest::prelude::*;
    use crate::numkernel::Rng;

    fn rec(user: u64, ts: u64, session: u64, position: Position) -> ImpressionRecord {
        ImpressionRecord {
            user_id: user,
            timestamp: ts,
            session_id: session,
            position,
            ad_id: 7,
            query_topic: 3,
            relevance: 0.5,
            clicked: false,
            dwell_seconds: 0.0,
        }
    }

    #[test]
    fn empty_log_parses_to_nothing() {
        let text = format!("{LOG_HEADER}\n");
        assert!(parse_log(text.as_bytes()).unwrap().is_empty());
        let mut buf = Vec::new();
        write_log(&[], &mut buf).unwrap();
        assert_eq!(buf, text.as_bytes());
    }

    #[test]
    fn single_line_round_trip_is_bit_identical() {
        let text = format!("{LOG_HEADER}\n12,1384000000,99,M,2,501,4,0.734512,1,35.250000\n");
        let recs = parse_log(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].position, Position::Mainline(2));
        let mut buf = Vec::new();
        write_log(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }

    #[test]
    fn header_mismatch_rejected() {
        let err = parse_log("user,timestamp\n".as_bytes()).unwrap_err();
        assert!(matches!(err, LogError::Header(_)));
        assert!(matches!(parse_log("".as_bytes()).unwrap_err(), LogError::Header(_)));
    }

    #[test]
    fn malformed_lines_carry_line_numbers() {
        let text = format!(
            "{LOG_HEADER}\n1,2,3,T,0,4,5,0.5,0,0.0\n1,2,3,M,1,4\n1,x,3,M,1,4,5,0.5,0,0.0\n1,2,3,Q,1,4,5,0.5,0,0\n1,2,3,S,1,4,5,0.5,0,3.0\n"
        );
        let LogError::Malformed(errs) = parse_log(text.as_bytes()).unwrap_err() else {
            panic!("expected malformed")
        };
        let lines: Vec<usize> = errs.iter().map(|e| e.line).collect();
        assert_eq!(lines, vec![3, 4, 5, 6]);
        assert_eq!(errs[0].kind, LineErrorKind::FieldCount(6));
        assert!(matches!(errs[1].kind, LineErrorKind::NotNumeric { field: "timestamp", .. }));
        assert!(matches!(errs[2].kind, LineErrorKind::Position(_)));
        assert!(matches!(errs[3].kind, LineErrorKind::Record(RecordError::DwellWithoutClick(_))));
    }

    #[test]
    fn single_record_single_sequence() {
        let seqs = build_sequences(vec![rec(1, 10, 1, Position::TopFirst)]);
        assert_eq!(seqs.len(), 1);
        assert_eq!(seqs[0].len(), 1);
    }

    #[test]
    fn mainline_precedes_sidebar_on_same_page() {
        let seqs = build_sequences(vec![rec(1, 10, 4, Position::Sidebar(1)), rec(1, 10, 4, Position::Mainline(2))]);
        assert_eq!(seqs[0].impressions[0].position, Position::Mainline(2));
        assert_eq!(seqs[0].impressions[1].position, Position::Sidebar(1));
    }

    #[test]
    fn top_first_is_mainline_slot_zero() {
        let seqs = build_sequences(vec![
            rec(1, 10, 4, Position::Mainline(1)),
            rec(1, 10, 4, Position::Sidebar(1)),
            rec(1, 10, 4, Position::TopFirst),
        ]);
        let order: Vec<Position> = seqs[0].impressions.iter().map(|r| r.position).collect();
        assert_eq!(order, vec![Position::TopFirst, Position::Mainline(1), Position::Sidebar(1)]);
    }

    fn ordered_log() -> Vec<ImpressionRecord> {
        let mut out = Vec::new();
        for user in [3u64, 8, 11] {
            for page in 0..6u64 {
                let ts = 1_000 + page * 600 + user;
                for pos in [Position::TopFirst, Position::Mainline(2), Position::Sidebar(1), Position::Sidebar(2)] {
                    let mut r = rec(user, ts, user * 100 + page, pos);
                    r.ad_id = out.len() as u64;
                    out.push(r);
                }
            }
        }
        out
    }

    #[test]
    fn shuffled_log_rebuilds_original_order() {
        let original = ordered_log();
        let mut rng = Rng::new(77);
        for _ in 0..10 {
            let mut shuffled = original.clone();
            rng.shuffle(&mut shuffled);
            let flat: Vec<ImpressionRecord> =
                build_sequences(shuffled).into_iter().flat_map(|s| s.impressions).collect();
            assert_eq!(flat, original);
        }
    }

    #[test]
    fn head_impression_features() {
        let spec = FeatureSpec::default();
        let r = rec(1, 10, 1, Position::TopFirst);
        let f = featurize(&spec, &r, None).unwrap();
        let d = &f.as_slice()[spec.dense_offset()..];
        assert_eq!(d[dense::HEAD], 1.0);
        assert_eq!(d[dense::TIME_INTERVAL], 0.0);
        assert_eq!(d[dense::LAST_DWELL], 0.0);
        assert_eq!(d[dense::QUICK_BACK], 0.0);
        assert_eq!(f.len(), spec.width());
        assert_eq!(spec.width(), 64 * 3 + 9);
    }

    #[test]
    fn quick_back_predecessor_sets_flag() {
        let spec = FeatureSpec::default();
        let mut prev = rec(1, 100, 1, Position::TopFirst);
        prev.clicked = true;
        prev.dwell_seconds = 15.0;
        let cur = rec(1, 160, 2, Position::TopFirst);
        let f = featurize(&spec, &cur, Some(&prev)).unwrap();
        let d = &f.as_slice()[spec.dense_offset()..];
        assert_eq!(d[dense::QUICK_BACK], 1.0);
        assert_eq!(d[dense::HEAD], 0.0);
        assert_eq!(d[dense::TIME_INTERVAL], 60f64.ln_1p());
        assert_eq!(d[dense::LAST_DWELL], 15f64.ln_1p());

        prev.dwell_seconds = 20.0;
        let f = featurize(&spec, &cur, Some(&prev)).unwrap();
        assert_eq!(f.as_slice()[spec.dense_offset() + dense::QUICK_BACK], 0.0);
    }

    #[test]
    fn unclicked_predecessor_contributes_no_dwell() {
        let spec = FeatureSpec::default();
        let prev = rec(1, 100, 1, Position::TopFirst);
        let cur = rec(1, 100, 1, Position::Mainline(2));
        let f = featurize(&spec, &cur, Some(&prev)).unwrap();
        let d = &f.as_slice()[spec.dense_offset()..];
        assert_eq!(d[dense::LAST_DWELL], 0.0);
        assert_eq!(d[dense::TIME_INTERVAL], 0.0);
        assert_eq!(d[dense::POSITION + 1], 1.0);
        assert_eq!(d[dense::SLOT], 2.0);
    }

    #[test]
    fn predecessor_from_future_rejected() {
        let spec = FeatureSpec::default();
        let prev = rec(1, 200, 1, Position::TopFirst);
        let cur = rec(1, 100, 2, Position::TopFirst);
        assert_eq!(
            featurize(&spec, &cur, Some(&prev)).unwrap_err(),
            FeatureError::PredecessorInFuture { pred: 200, current: 100 }
        );
    }

    #[test]
    fn exactly_one_head_per_sequence() {
        let spec = FeatureSpec::default();
        for seq in build_sequences(ordered_log()) {
            let feats = featurize_sequence(&spec, &seq).unwrap();
            let heads: Vec<usize> = feats
                .iter()
                .enumerate()
                .filter(|(_, f)| f.as_slice()[spec.dense_offset() + dense::HEAD] == 1.0)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(heads, vec![0]);
        }
    }

    fn arb_record() -> impl Strategy<Value = ImpressionRecord> {
        (
            0u64..50,
            0u64..2_000_000_000,
            0u64..1000,
            0u8..3,
            1u32..6,
            0u64..100_000,
            0u32..100,
            0u64..=1_000_000,
            any::<bool>(),
            0u64..5_000_000_000,
        )
            .prop_map(|(user, ts, session, pclass, slot, ad, topic, rel, clicked, dwell)| ImpressionRecord {
                user_id: user,
                timestamp: ts,
                session_id: session,
                position: match pclass {
                    0 => Position::TopFirst,
                    1 => Position::Mainline(slot),
                    _ => Position::Sidebar(slot),
                },
                ad_id: ad,
                query_topic: topic,
                relevance: rel as f64 / 1e6,
                clicked,
                dwell_seconds: if clicked { dwell as f64 / 1e6 } else { 0.0 },
            })
    }

    proptest! {
        #[test]
        fn log_round_trip(records in proptest::collection::vec(arb_record(), 0..40)) {
            let mut buf = Vec::new();
            write_log(&records, &mut buf).unwrap();
            let back = parse_log(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &records);
            let mut again = Vec::new();
            write_log(&back, &mut again).unwrap();
            prop_assert_eq!(buf, again);
        }

        #[test]
        fn sequences_are_ordered_permutations(records in proptest::collection::vec(arb_record(), 0..60)) {
            let seqs = build_sequences(records.clone());
            let total: usize = seqs.iter().map(UserSequence::len).sum();
            prop_assert_eq!(total, records.len());
            for s in &seqs {
                prop_assert!(s.impressions.iter().all(|r| r.user_id == s.user_id));
                for w in s.impressions.windows(2) {
                    prop_assert!(w[0].sort_key() <= w[1].sort_key());
                }
            }
            let mut flat: Vec<String> = seqs.iter().flat_map(|s| s.impressions.iter().map(|r| format!("{r:?}"))).collect();
            let mut orig: Vec<String> = records.iter().map(|r| format!("{r:?}")).collect();
            flat.sort();
            orig.sort();
            prop_assert_eq!(flat, orig);
        }

        #[test]
        fn featurize_is_pure_with_three_hashed_ones(r in arb_record(), p in arb_record()) {
            let spec = FeatureSpec::default();
            let pred = (p.timestamp <= r.timestamp).then_some(&p);
            let a = featurize(&spec, &r, pred).unwrap();
            let b = featurize(&spec, &r, pred).unwrap();
            prop_assert_eq!(a.as_slice(), b.as_slice());
            let hashed: f64 = a.as_slice()[..spec.dense_offset()].iter().sum();
            prop_assert_eq!(hashed, 3.0);
            prop_assert!(a.values().is_finite());
        }
    }
}

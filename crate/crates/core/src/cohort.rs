//! Clinical cohort data model: event-log and scan-index CSV ingestion,
//! window labels, task eligibility filters, sequence building with the
//! 360-hour lookback, patient-level splits, and a synthetic cohort
//! generator with a planted, tunable severity signal.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::{write_pgm, Image};

/// Lookback horizon for image sequences, in hours.
pub const SEQUENCE_CUTOFF_HOURS: f64 = 360.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventType {
    Icu,
    Intubation,
    Mortality,
    O2Gt6l,
}

impl EventType {
    pub const ALL: [EventType; 4] = [
        EventType::Icu,
        EventType::Intubation,
        EventType::Mortality,
        EventType::O2Gt6l,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventType::Icu => "icu",
            EventType::Intubation => "intubation",
            EventType::Mortality => "mortality",
            EventType::O2Gt6l => "o2_gt6l",
        }
    }

    pub fn parse(s: &str) -> Option<EventType> {
        Self::ALL.iter().copied().find(|e| e.as_str() == s)
    }

    /// The three deterioration events; oxygen support is tracked separately.
    pub fn is_adverse(self) -> bool {
        matches!(self, EventType::Icu | EventType::Intubation | EventType::Mortality)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub event_type: EventType,
    pub event_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Ed,
    Inpatient,
}

impl Location {
    pub fn as_str(self) -> &'static str {
        match self {
            Location::Ed => "ed",
            Location::Inpatient => "inpatient",
        }
    }

    pub fn parse(s: &str) -> Option<Location> {
        match s {
            "ed" => Some(Location::Ed),
            "inpatient" => Some(Location::Inpatient),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub patient_id: String,
    pub scan_id: String,
    pub acquired_time: f64,
    pub location: Location,
    pub image_path: String,
}

/// Prediction windows, applied identically to every label event.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Window {
    H24,
    H48,
    H72,
    H96,
    Any,
}

impl Window {
    pub const ALL: [Window; 5] = [
        Window::H24,
        Window::H48,
        Window::H72,
        Window::H96,
        Window::Any,
    ];

    /// None means an unbounded horizon.
    pub fn hours(self) -> Option<f64> {
        match self {
            Window::H24 => Some(24.0),
            Window::H48 => Some(48.0),
            Window::H72 => Some(72.0),
            Window::H96 => Some(96.0),
            Window::Any => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::H24 => "24h",
            Window::H48 => "48h",
            Window::H72 => "72h",
            Window::H96 => "96h",
            Window::Any => "any",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelEvent {
    Icu,
    Intubation,
    Mortality,
    /// Union of ICU transfer, intubation, and mortality.
    AnyAdverse,
    OxygenGt6l,
}

impl LabelEvent {
    pub fn name(self) -> &'static str {
        match self {
            LabelEvent::Icu => "icu",
            LabelEvent::Intubation => "intubation",
            LabelEvent::Mortality => "mortality",
            LabelEvent::AnyAdverse => "any_adverse",
            LabelEvent::OxygenGt6l => "oxygen_gt_6l",
        }
    }

    fn matches(self, t: EventType) -> bool {
        match self {
            LabelEvent::Icu => t == EventType::Icu,
            LabelEvent::Intubation => t == EventType::Intubation,
            LabelEvent::Mortality => t == EventType::Mortality,
            LabelEvent::AnyAdverse => t.is_adverse(),
            LabelEvent::OxygenGt6l => t == EventType::O2Gt6l,
        }
    }
}

/// Ordered (event, window) label grid. Label index = event_index * 5 +
/// window_index; this layout is part of every score file and checkpoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelLayout {
    pub events: Vec<LabelEvent>,
}

impl LabelLayout {
    /// Deterioration labels: icu, intubation, mortality, any_adverse, each
    /// over the five windows (20 labels). Used by SIP and MIP.
    pub fn adverse() -> Self {
        LabelLayout {
            events: vec![
                LabelEvent::Icu,
                LabelEvent::Intubation,
                LabelEvent::Mortality,
                LabelEvent::AnyAdverse,
            ],
        }
    }

    /// Oxygen-requirement labels over the five windows (5 labels).
    pub fn oxygen() -> Self {
        LabelLayout {
            events: vec![LabelEvent::OxygenGt6l],
        }
    }

    pub fn count(&self) -> usize {
        self.events.len() * Window::ALL.len()
    }

    pub fn index(&self, event: LabelEvent, window: Window) -> Option<usize> {
        let e = self.events.iter().position(|&x| x == event)?;
        let w = Window::ALL.iter().position(|&x| x == window).unwrap();
        Some(e * Window::ALL.len() + w)
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.count());
        for e in &self.events {
            for w in Window::ALL {
                out.push(format!("{}@{}", e.name(), w.name()));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub scan: ScanRecord,
    /// 0.0 or 1.0 per layout slot.
    pub labels: Vec<f32>,
    /// 1.0 where the label is defined, 0.0 where censored.
    pub mask: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SequenceEntry {
    pub scan: ScanRecord,
    pub hours_before_final: f64,
}

#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub patient_id: String,
    /// In acquisition order; the last entry is the index scan at 0 hours.
    pub entries: Vec<SequenceEntry>,
    pub labels: Vec<f32>,
    pub mask: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Sip,
    Orp,
    Mip,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s {
            "sip" => Ok(Task::Sip),
            "orp" => Ok(Task::Orp),
            "mip" => Ok(Task::Mip),
            other => Err(Error::contract(format!("unknown task {other:?}"))),
        }
    }

    pub fn layout(self) -> LabelLayout {
        match self {
            Task::Sip | Task::Mip => LabelLayout::adverse(),
            Task::Orp => LabelLayout::oxygen(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Sip => "sip",
            Task::Orp => "orp",
            Task::Mip => "mip",
        })
    }
}

pub struct Cohort {
    pub events: Vec<EventRecord>,
    pub scans: Vec<ScanRecord>,
    /// Soft integrity notes (events whose patient has no scans).
    pub warnings: Vec<String>,
}

pub const EVENTS_HEADER: [&str; 3] = ["patient_id", "event_type", "event_time_hours"];
pub const SCANS_HEADER: [&str; 5] = [
    "patient_id",
    "scan_id",
    "acquired_time_hours",
    "location",
    "image_path",
];

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        msg: format!("{}: {}", path.display(), msg.into()),
    }
}

fn io_error(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn open_csv(path: &Path, expect_header: &[&str]) -> Result<csv::Reader<std::fs::File>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| io_error(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expect_header {
        return Err(parse_err(
            path,
            1,
            format!("expected header {expect_header:?}, got {got:?}"),
        ));
    }
    Ok(rdr)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn parse_hours(path: &Path, rec: &csv::StringRecord, field: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| parse_err(path, record_line(rec), format!("{field} {raw:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, record_line(rec), format!("{field} {raw:?} is not finite")));
    }
    Ok(v)
}

pub fn read_events(path: &Path) -> Result<Vec<EventRecord>> {
    let mut rdr = open_csv(path, &EVENTS_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        let event_type = EventType::parse(&rec[1])
            .ok_or_else(|| parse_err(path, line, format!("unknown event_type {:?}", &rec[1])))?;
        out.push(EventRecord {
            patient_id: rec[0].to_string(),
            event_type,
            event_time: parse_hours(path, &rec, "event_time_hours", &rec[2])?,
        });
    }
    validate_events(&out)?;
    Ok(out)
}

fn validate_events(events: &[EventRecord]) -> Result<()> {
    let mut mortality: HashMap<&str, f64> = HashMap::new();
    for e in events {
        if e.event_type == EventType::Mortality
            && mortality.insert(&e.patient_id, e.event_time).is_some()
        {
            return Err(Error::Integrity(format!(
                "patient {} has more than one mortality event",
                e.patient_id
            )));
        }
    }
    for e in events {
        if let Some(&tm) = mortality.get(e.patient_id.as_str()) {
            if e.event_time > tm {
                return Err(Error::Integrity(format!(
                    "patient {} has an event at {}h after mortality at {}h",
                    e.patient_id, e.event_time, tm
                )));
            }
        }
    }
    Ok(())
}

pub fn read_scans(path: &Path) -> Result<Vec<ScanRecord>> {
    let mut rdr = open_csv(path, &SCANS_HEADER)?;
    let mut out: Vec<ScanRecord> = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        let scan_id = rec[1].to_string();
        if !seen.insert(scan_id.clone()) {
            return Err(Error::Integrity(format!("duplicate scan_id {scan_id:?}")));
        }
        let location = Location::parse(&rec[3])
            .ok_or_else(|| parse_err(path, line, format!("unknown location {:?}", &rec[3])))?;
        out.push(ScanRecord {
            patient_id: rec[0].to_string(),
            scan_id,
            acquired_time: parse_hours(path, &rec, "acquired_time_hours", &rec[2])?,
            location,
            image_path: rec[4].to_string(),
        });
    }
    Ok(out)
}

pub fn ingest(events_path: &Path, scans_path: &Path) -> Result<Cohort> {
    let events = read_events(events_path)?;
    let scans = read_scans(scans_path)?;
    let scanned: HashSet<&str> = scans.iter().map(|s| s.patient_id.as_str()).collect();
    let mut warned: HashSet<&str> = HashSet::new();
    let mut warnings = Vec::new();
    for e in &events {
        if !scanned.contains(e.patient_id.as_str()) && warned.insert(&e.patient_id) {
            warnings.push(format!(
                "patient {} has events but no scans; events retained",
                e.patient_id
            ));
        }
    }
    Ok(Cohort {
        events,
        scans,
        warnings,
    })
}

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(e))?;
    w.write_record(EVENTS_HEADER).map_err(|e| io_error(e))?;
    for e in events {
        w.write_record([
            e.patient_id.as_str(),
            e.event_type.as_str(),
            &e.event_time.to_string(),
        ])
        .map_err(|e| io_error(e))?;
    }
    w.flush().map_err(|e| io_error(e))?;
    Ok(())
}

pub fn write_scans(path: &Path, scans: &[ScanRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_error(e))?;
    w.write_record(SCANS_HEADER).map_err(|e| io_error(e))?;
    for s in scans {
        w.write_record([
            s.patient_id.as_str(),
            s.scan_id.as_str(),
            &s.acquired_time.to_string(),
            s.location.as_str(),
            s.image_path.as_str(),
        ])
        .map_err(|e| io_error(e))?;
    }
    w.flush().map_err(|e| io_error(e))?;
    Ok(())
}

/// label(e, w) = 1 iff an event matching e occurs in (scan_time,
/// scan_time + w]; the "any" window is (scan_time, infinity). Events at
/// exactly the scan instant count as prior history, not future labels.
pub fn window_labels(scan: &ScanRecord, events: &[EventRecord], layout: &LabelLayout) -> LabeledExample {
    window_labels_censored(scan, events, layout, None)
}

/// Censor-aware variant: when `followup_until` is given, a zero label whose
/// window extends past the follow-up horizon is masked as undefined.
pub fn window_labels_censored(
    scan: &ScanRecord,
    events: &[EventRecord],
    layout: &LabelLayout,
    followup_until: Option<f64>,
) -> LabeledExample {
    let n = layout.count();
    let mut labels = vec![0.0f32; n];
    let mut mask = vec![1.0f32; n];
    for (ei, &event) in layout.events.iter().enumerate() {
        for (wi, &window) in Window::ALL.iter().enumerate() {
            let idx = ei * Window::ALL.len() + wi;
            let hit = events.iter().any(|e| {
                e.patient_id == scan.patient_id
                    && event.matches(e.event_type)
                    && in_window(e.event_time, scan.acquired_time, window)
            });
            if hit {
                labels[idx] = 1.0;
            } else if let Some(until) = followup_until {
                let observed_through = match window.hours() {
                    Some(h) => scan.acquired_time + h <= until,
                    None => false,
                };
                if !observed_through {
                    mask[idx] = 0.0;
                }
            }
        }
    }
    LabeledExample {
        scan: scan.clone(),
        labels,
        mask,
    }
}

fn in_window(event_time: f64, scan_time: f64, window: Window) -> bool {
    let dt = event_time - scan_time;
    dt > 0.0 && window.hours().is_none_or(|h| dt <= h)
}

fn first_adverse_time(events: &[EventRecord], patient_id: &str) -> Option<f64> {
    events
        .iter()
        .filter(|e| e.patient_id == patient_id && e.event_type.is_adverse())
        .map(|e| e.event_time)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

/// Task eligibility.
/// SIP: ED scans with no adverse event at or before the scan.
/// ORP: every ED scan.
/// MIP: ED and inpatient scans strictly before the first adverse event.
pub fn apply_task_filter(scans: &[ScanRecord], events: &[EventRecord], task: Task) -> Vec<ScanRecord> {
    let mut first_adverse: HashMap<&str, f64> = HashMap::new();
    for s in scans {
        if !first_adverse.contains_key(s.patient_id.as_str()) {
            if let Some(t) = first_adverse_time(events, &s.patient_id) {
                first_adverse.insert(&s.patient_id, t);
            }
        }
    }
    scans
        .iter()
        .filter(|s| {
            let prior = first_adverse.get(s.patient_id.as_str());
            match task {
                Task::Sip => {
                    s.location == Location::Ed && prior.is_none_or(|&t| t > s.acquired_time)
                }
                Task::Orp => s.location == Location::Ed,
                Task::Mip => prior.is_none_or(|&t| s.acquired_time < t),
            }
        })
        .cloned()
        .collect()
}

/// One sequence per eligible index scan: the patient's prior eligible scans
/// strictly within the lookback window, times re-expressed as hours before
/// the index scan. Expects MIP-filtered scans. When two scans share an
/// acquisition time only the later one by scan_id enters a prefix, keeping
/// entry times strictly increasing.
pub fn build_sequences(
    scans: &[ScanRecord],
    events: &[EventRecord],
    layout: &LabelLayout,
) -> Vec<LabeledSequence> {
    let mut by_patient: BTreeMap<&str, Vec<&ScanRecord>> = BTreeMap::new();
    for s in scans {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    let mut out = Vec::with_capacity(scans.len());
    for (pid, mut plist) in by_patient {
        plist.sort_by(|a, b| {
            a.acquired_time
                .partial_cmp(&b.acquired_time)
                .unwrap()
                .then_with(|| a.scan_id.cmp(&b.scan_id))
        });
        for (i, index_scan) in plist.iter().enumerate() {
            let t_final = index_scan.acquired_time;
            let mut entries: Vec<SequenceEntry> = Vec::new();
            for prior in &plist[..i] {
                let back = t_final - prior.acquired_time;
                if back <= 0.0 || back >= SEQUENCE_CUTOFF_HOURS {
                    continue;
                }
                // Same-timestamp duplicate: the sort put the later scan_id
                // last, so replacing keeps exactly one per timestamp.
                if let Some(last) = entries.last() {
                    if last.scan.acquired_time == prior.acquired_time {
                        entries.pop();
                    }
                }
                entries.push(SequenceEntry {
                    scan: (*prior).clone(),
                    hours_before_final: back,
                });
            }
            entries.push(SequenceEntry {
                scan: (*index_scan).clone(),
                hours_before_final: 0.0,
            });
            let labeled = window_labels(index_scan, events, layout);
            out.push(LabeledSequence {
                patient_id: pid.to_string(),
                entries,
                labels: labeled.labels,
                mask: labeled.mask,
            });
        }
    }
    out
}

/// Shuffle unique patients and carve off the trailing fraction as the held
/// out test group. `fractions` = (trainval, test), summing to 1.
pub fn patient_split<R: Rng>(
    patients: &[String],
    rng: &mut R,
    fractions: (f64, f64),
) -> Result<(Vec<String>, Vec<String>)> {
    let (ftr, fte) = fractions;
    if !(ftr >= 0.0 && fte >= 0.0 && (ftr + fte - 1.0).abs() < 1e-9) {
        return Err(Error::contract(format!(
            "split fractions ({ftr}, {fte}) must be nonnegative and sum to 1"
        )));
    }
    let mut unique: Vec<String> = {
        let set: HashSet<&String> = patients.iter().collect();
        let mut v: Vec<String> = set.into_iter().cloned().collect();
        v.sort();
        v
    };
    unique.shuffle(rng);
    let n_test = ((unique.len() as f64) * fte).round() as usize;
    let n_test = n_test.min(unique.len());
    let test = unique.split_off(unique.len() - n_test);
    Ok((unique, test))
}

/// Deal shuffled positive and negative patients round-robin across k folds:
/// fold sizes differ by at most one and per-fold positive counts differ by
/// at most one.
pub fn stratified_kfold<R: Rng>(
    patients: &[(String, bool)],
    k: usize,
    rng: &mut R,
) -> Result<Vec<Vec<String>>> {
    if k < 2 {
        return Err(Error::contract(format!("k={k} folds, need at least 2")));
    }
    if patients.len() < k {
        return Err(Error::invalid(format!(
            "{} patients cannot fill {} folds",
            patients.len(),
            k
        )));
    }
    let mut pos: Vec<&str> = patients.iter().filter(|(_, y)| *y).map(|(p, _)| p.as_str()).collect();
    let mut neg: Vec<&str> = patients.iter().filter(|(_, y)| !*y).map(|(p, _)| p.as_str()).collect();
    pos.sort();
    neg.sort();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut folds: Vec<Vec<String>> = vec![Vec::new(); k];
    for (i, p) in pos.iter().enumerate() {
        folds[i % k].push(p.to_string());
    }
    for (j, p) in neg.iter().enumerate() {
        folds[(pos.len() + j) % k].push(p.to_string());
    }
    Ok(folds)
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub image_size: usize,
    pub scans_min: usize,
    pub scans_max: usize,
    /// Baseline opacity amplitude multiplier a0.
    pub base_amplitude: f64,
    /// Per-scan-rank amplitude growth: a = a0 * s * (1 + trend * rank) + noise.
    /// Zero keeps amplitude flat over a stay; positive values make sicker
    /// patients worsen visibly from scan to scan, so the progression slope
    /// itself carries severity information that a single image cannot.
    pub trend: f64,
    /// Std of the additive amplitude noise.
    pub amplitude_noise: f64,
    /// Std of per-pixel background texture noise.
    pub pixel_noise: f64,
    /// PGM maxval; 255 for 8-bit, 65535 for 16-bit.
    pub pgm_maxval: u16,
    /// Observation horizon for event draws, hours after the first scan.
    pub horizon_hours: f64,
    /// Base hazard rates per hour at severity 0, scaled by
    /// exp(hazard_severity * s). Mortality is the rarest.
    pub rate_icu: f64,
    pub rate_intubation: f64,
    pub rate_mortality: f64,
    pub rate_o2: f64,
    pub hazard_severity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            scans_min: 1,
            scans_max: 6,
            base_amplitude: 0.5,
            trend: 0.0,
            amplitude_noise: 0.03,
            pixel_noise: 0.02,
            pgm_maxval: 255,
            horizon_hours: 336.0,
            rate_icu: 1.0e-4,
            rate_intubation: 6.0e-5,
            rate_mortality: 2.5e-5,
            rate_o2: 2.0e-4,
            hazard_severity: 6.0,
        }
    }
}

/// Generator ground truth, for calibration tests.
#[derive(Clone, Debug)]
pub struct PatientTruth {
    pub patient_id: String,
    pub severity: f64,
    pub scan_amplitudes: Vec<f64>,
}

pub struct SynthCohort {
    pub events: Vec<EventRecord>,
    pub scans: Vec<ScanRecord>,
    pub truth: Vec<PatientTruth>,
}

pub const FINDINGS_HEADER: [&str; 6] = [
    "scan_id",
    "high_amplitude",
    "upper_lobe",
    "left_lung",
    "wide_opacity",
    "multifocal",
];

pub const N_FINDINGS: usize = 5;

/// Generate a deterministic synthetic cohort under `out_dir`: PGM images in
/// images/, plus events.csv, scans.csv, and per-scan findings.csv (ground
/// truth image attributes for supervised pretraining).
///
/// Each patient draws severity s ~ U[0,1]; blob amplitude follows
/// a0 * s * (1 + trend * scan_rank) plus noise, and event times follow
/// exponential hazards whose rates grow with s.
pub fn synth_cohort(
    out_dir: &Path,
    n_patients: usize,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<SynthCohort> {
    if n_patients == 0 {
        return Err(Error::contract("n_patients must be at least 1"));
    }
    if cfg.image_size < 4 {
        return Err(Error::contract("image_size must be at least 4"));
    }
    if cfg.scans_min == 0 || cfg.scans_min > cfg.scans_max {
        return Err(Error::contract(format!(
            "scan count range [{}, {}] invalid",
            cfg.scans_min, cfg.scans_max
        )));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| io_error(e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp_noise = Normal::new(0.0, cfg.amplitude_noise.max(1e-12)).expect("positive std");
    let mut events = Vec::new();
    let mut scans = Vec::new();
    let mut truth = Vec::with_capacity(n_patients);
    let mut findings_rows: Vec<[String; 6]> = Vec::new();

    for p in 0..n_patients {
        let pid = format!("P{p:05}");
        let severity: f64 = rng.random();
        let n_scans = rng.random_range(cfg.scans_min..=cfg.scans_max);
        let t0: f64 = rng.random_range(0.0..500.0);
        let mut scan_times = vec![t0];
        for _ in 1..n_scans {
            let gap: f64 = rng.random_range(12.0..72.0);
            scan_times.push(scan_times.last().unwrap() + gap);
        }

        // Event draws are exponential from the first scan; the hazard grows
        // with severity so sicker patients deteriorate sooner.
        let boost = (cfg.hazard_severity * severity).exp();
        let mut patient_events: Vec<EventRecord> = Vec::new();
        for (ty, base) in [
            (EventType::Icu, cfg.rate_icu),
            (EventType::Intubation, cfg.rate_intubation),
            (EventType::Mortality, cfg.rate_mortality),
            (EventType::O2Gt6l, cfg.rate_o2),
        ] {
            let lambda = base * boost;
            let u: f64 = rng.random();
            let dt = -(1.0 - u).ln() / lambda;
            if dt <= cfg.horizon_hours {
                patient_events.push(EventRecord {
                    patient_id: pid.clone(),
                    event_type: ty,
                    event_time: t0 + dt,
                });
            }
        }
        if let Some(tm) = patient_events
            .iter()
            .find(|e| e.event_type == EventType::Mortality)
            .map(|e| e.event_time)
        {
            // Nothing happens after death; ties at the instant are kept.
            patient_events.retain(|e| e.event_time <= tm);
            scan_times.retain(|&t| t < tm);
        }

        let mut amplitudes = Vec::with_capacity(scan_times.len());
        for (rank, &t) in scan_times.iter().enumerate() {
            let scan_id = format!("{pid}_S{rank}");
            let image_rel = format!("images/{scan_id}.pgm");
            let amp = (cfg.base_amplitude * severity * (1.0 + cfg.trend * rank as f64)
                + amp_noise.sample(&mut rng))
            .clamp(0.0, 2.0);
            amplitudes.push(amp);
            let (img, marks) = render_scan(cfg, amp, &mut rng);
            write_pgm(&images_dir.join(format!("{scan_id}.pgm")), &img, cfg.pgm_maxval)?;
            findings_rows.push([
                scan_id.clone(),
                ((amp > cfg.base_amplitude * 0.5) as u8).to_string(),
                (marks.upper as u8).to_string(),
                (marks.left as u8).to_string(),
                (marks.wide as u8).to_string(),
                (marks.multifocal as u8).to_string(),
            ]);
            scans.push(ScanRecord {
                patient_id: pid.clone(),
                scan_id,
                acquired_time: t,
                location: if rank == 0 { Location::Ed } else { Location::Inpatient },
                image_path: image_rel,
            });
        }
        events.extend(patient_events);
        truth.push(PatientTruth {
            patient_id: pid,
            severity,
            scan_amplitudes: amplitudes,
        });
    }

    write_events(&out_dir.join("events.csv"), &events)?;
    write_scans(&out_dir.join("scans.csv"), &scans)?;
    let mut w = csv::Writer::from_path(out_dir.join("findings.csv"))
        .map_err(|e| io_error(e))?;
    w.write_record(FINDINGS_HEADER).map_err(|e| io_error(e))?;
    for row in &findings_rows {
        w.write_record(row).map_err(|e| io_error(e))?;
    }
    w.flush().map_err(|e| io_error(e))?;

    Ok(SynthCohort {
        events,
        scans,
        truth,
    })
}

struct BlobMarks {
    upper: bool,
    left: bool,
    wide: bool,
    multifocal: bool,
}

fn render_scan<R: Rng>(cfg: &SynthConfig, amplitude: f64, rng: &mut R) -> (Image, BlobMarks) {
    let n = cfg.image_size;
    let nf = n as f64;
    let texture = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("positive std");
    let mut px = vec![0.0f32; n * n];
    for y in 0..n {
        for x in 0..n {
            let ramp = 0.22 + 0.10 * (y as f64 / nf) + 0.05 * (x as f64 / nf);
            px[y * n + x] = (ramp + texture.sample(rng)).max(0.0) as f32;
        }
    }
    let n_blobs = rng.random_range(2..=4usize);
    let mut marks = BlobMarks {
        upper: false,
        left: false,
        wide: false,
        multifocal: n_blobs >= 3,
    };
    let mut sigma_sum = 0.0;
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.15 * nf..0.85 * nf);
        let cx = rng.random_range(0.15 * nf..0.85 * nf);
        let sigma = rng.random_range(nf / 12.0..nf / 6.0);
        sigma_sum += sigma;
        if cy < nf / 2.0 {
            marks.upper = true;
        }
        if cx < nf / 2.0 {
            marks.left = true;
        }
        let inv2s2 = 1.0 / (2.0 * sigma * sigma);
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                px[y * n + x] += (amplitude * (-d2 * inv2s2).exp()) as f32;
            }
        }
    }
    marks.wide = sigma_sum / n_blobs as f64 > nf / 8.0;
    for v in &mut px {
        *v = v.max(0.0);
    }
    (Image::new(n, n, px).expect("rendered pixels valid"), marks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scan(pid: &str, sid: &str, t: f64, loc: Location) -> ScanRecord {
        ScanRecord {
            patient_id: pid.into(),
            scan_id: sid.into(),
            acquired_time: t,
            location: loc,
            image_path: format!("images/{sid}.pgm"),
        }
    }

    fn event(pid: &str, ty: EventType, t: f64) -> EventRecord {
        EventRecord {
            patient_id: pid.into(),
            event_type: ty,
            event_time: t,
        }
    }

    #[test]
    fn layout_indexing_and_names() {
        let sip = LabelLayout::adverse();
        assert_eq!(sip.count(), 20);
        assert_eq!(sip.index(LabelEvent::Icu, Window::H24), Some(0));
        assert_eq!(sip.index(LabelEvent::AnyAdverse, Window::H96), Some(18));
        assert_eq!(sip.names()[18], "any_adverse@96h");
        let orp = LabelLayout::oxygen();
        assert_eq!(orp.count(), 5);
        assert_eq!(orp.names()[4], "oxygen_gt_6l@any");
        assert_eq!(orp.index(LabelEvent::Icu, Window::H24), None);
    }

    #[test]
    fn labels_for_event_30h_out() {
        let layout = LabelLayout::adverse();
        let s = scan("p1", "s1", 100.0, Location::Ed);
        let evs = [event("p1", EventType::Icu, 130.0)];
        let ex = window_labels(&s, &evs, &layout);
        let icu: Vec<f32> = (0..5).map(|w| ex.labels[w]).collect();
        assert_eq!(icu, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        let any: Vec<f32> = (15..20).map(|w| ex.labels[w]).collect();
        assert_eq!(any, vec![0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(ex.mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn labels_no_events_all_zero() {
        let layout = LabelLayout::adverse();
        let s = scan("p1", "s1", 0.0, Location::Ed);
        let ex = window_labels(&s, &[], &layout);
        assert!(ex.labels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn labels_icu_10h_mortality_90h() {
        let layout = LabelLayout::adverse();
        let s = scan("p1", "s1", 0.0, Location::Ed);
        let evs = [
            event("p1", EventType::Icu, 10.0),
            event("p1", EventType::Mortality, 90.0),
        ];
        let ex = window_labels(&s, &evs, &layout);
        let get = |e, w| ex.labels[layout.index(e, w).unwrap()];
        for w in Window::ALL {
            assert_eq!(get(LabelEvent::AnyAdverse, w), 1.0);
        }
        let mort: Vec<f32> = Window::ALL
            .iter()
            .map(|&w| get(LabelEvent::Mortality, w))
            .collect();
        assert_eq!(mort, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn event_at_scan_instant_is_prior_history() {
        let layout = LabelLayout::adverse();
        let s = scan("p1", "s1", 50.0, Location::Ed);
        let evs = [event("p1", EventType::Icu, 50.0)];
        let ex = window_labels(&s, &evs, &layout);
        assert!(ex.labels.iter().all(|&v| v == 0.0));
        assert!(apply_task_filter(&[s], &evs, Task::Sip).is_empty());
    }

    #[test]
    fn censoring_masks_unobserved_zero_windows() {
        let layout = LabelLayout::adverse();
        let s = scan("p1", "s1", 0.0, Location::Ed);
        let evs = [event("p1", EventType::Icu, 30.0)];
        // Follow-up ends at 50h: 24h/48h windows fully observed, longer
        // windows only defined where the event already fired.
        let ex = window_labels_censored(&s, &evs, &layout, Some(50.0));
        let idx = |e, w| layout.index(e, w).unwrap();
        assert_eq!(ex.mask[idx(LabelEvent::Icu, Window::H24)], 1.0);
        assert_eq!(ex.labels[idx(LabelEvent::Icu, Window::H48)], 1.0);
        assert_eq!(ex.mask[idx(LabelEvent::Icu, Window::H96)], 1.0);
        assert_eq!(ex.mask[idx(LabelEvent::Mortality, Window::H24)], 1.0);
        assert_eq!(ex.mask[idx(LabelEvent::Mortality, Window::H96)], 0.0);
        assert_eq!(ex.mask[idx(LabelEvent::Mortality, Window::Any)], 0.0);
    }

    #[test]
    fn task_filters_follow_the_three_rules() {
        let scans = vec![
            scan("p1", "s1", 0.0, Location::Ed),
            scan("p1", "s2", 48.0, Location::Inpatient),
            scan("p1", "s3", 120.0, Location::Ed),
            scan("p2", "s4", 10.0, Location::Ed),
            scan("p2", "s5", 20.0, Location::Inpatient),
        ];
        let evs = [event("p1", EventType::Icu, 100.0)];

        let ids = |v: &[ScanRecord]| v.iter().map(|s| s.scan_id.clone()).collect::<Vec<_>>();

        // s3 is an ED scan after p1's ICU transfer: SIP/MIP exclude, ORP keeps.
        let sip = apply_task_filter(&scans, &evs, Task::Sip);
        assert_eq!(ids(&sip), vec!["s1", "s4"]);
        let orp = apply_task_filter(&scans, &evs, Task::Orp);
        assert_eq!(ids(&orp), vec!["s1", "s3", "s4"]);
        // s2 inpatient before the event: MIP only. p2 has no events.
        let mip = apply_task_filter(&scans, &evs, Task::Mip);
        assert_eq!(ids(&mip), vec!["s1", "s2", "s4", "s5"]);
    }

    #[test]
    fn sequences_respect_the_lookback_cutoff() {
        let layout = LabelLayout::adverse();
        let scans = vec![
            scan("p1", "s1", 0.0, Location::Ed),
            scan("p1", "s2", 330.0, Location::Inpatient),
            scan("p1", "s3", 380.0, Location::Inpatient),
        ];
        let seqs = build_sequences(&scans, &[], &layout);
        assert_eq!(seqs.len(), 3);
        let last = &seqs[2];
        assert_eq!(last.entries.len(), 2);
        assert_eq!(last.entries[0].scan.scan_id, "s2");
        assert!((last.entries[0].hours_before_final - 50.0).abs() < 1e-9);
        assert_eq!(last.entries[1].hours_before_final, 0.0);
        // Exactly 360h back is excluded (strict).
        let scans2 = vec![
            scan("p2", "a", 0.0, Location::Ed),
            scan("p2", "b", 360.0, Location::Inpatient),
        ];
        let seqs2 = build_sequences(&scans2, &[], &layout);
        assert_eq!(seqs2[1].entries.len(), 1);
    }

    #[test]
    fn sequences_one_per_scan_times_strictly_increase() {
        let layout = LabelLayout::adverse();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut scans = Vec::new();
        for p in 0..20 {
            let mut t = 0.0;
            for s in 0..rng.random_range(1..=6usize) {
                t += rng.random_range(1.0..200.0);
                scans.push(scan(
                    &format!("p{p}"),
                    &format!("p{p}s{s}"),
                    t,
                    if s == 0 { Location::Ed } else { Location::Inpatient },
                ));
            }
        }
        let seqs = build_sequences(&scans, &[], &layout);
        assert_eq!(seqs.len(), scans.len());
        for sq in &seqs {
            assert_eq!(sq.entries.last().unwrap().hours_before_final, 0.0);
            for pair in sq.entries.windows(2) {
                assert!(pair[0].scan.acquired_time < pair[1].scan.acquired_time);
                assert!(pair[0].hours_before_final > pair[1].hours_before_final);
                assert!(pair[0].hours_before_final < SEQUENCE_CUTOFF_HOURS);
            }
        }
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let patients: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (trainval, test) = patient_split(&patients, &mut rng, (0.88, 0.12)).unwrap();
        assert_eq!(test.len(), 12);
        assert_eq!(trainval.len(), 88);
        let t: HashSet<&String> = trainval.iter().collect();
        assert!(test.iter().all(|p| !t.contains(p)));
        assert!(patient_split(&patients, &mut rng, (0.7, 0.2)).is_err());
    }

    #[test]
    fn kfold_sizes_and_disjointness() {
        let patients: Vec<(String, bool)> =
            (0..100).map(|i| (format!("p{i}"), i % 4 == 0)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let folds = stratified_kfold(&patients, 5, &mut rng).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = HashSet::new();
        for f in &folds {
            assert_eq!(f.len(), 20);
            for p in f {
                assert!(seen.insert(p.clone()), "{p} appears twice");
            }
        }
        assert_eq!(seen.len(), 100);
        let few: Vec<(String, bool)> = (0..3).map(|i| (format!("p{i}"), false)).collect();
        assert!(stratified_kfold(&few, 5, &mut rng).is_err());
        assert!(stratified_kfold(&patients, 1, &mut rng).is_err());
    }

    #[test]
    fn kfold_stratification_within_two_percent() {
        let patients: Vec<(String, bool)> =
            (0..1000).map(|i| (format!("p{i}"), i % 10 < 3)).collect();
        let global = 0.3;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let folds = stratified_kfold(&patients, 5, &mut rng).unwrap();
            let lookup: HashMap<&str, bool> =
                patients.iter().map(|(p, y)| (p.as_str(), *y)).collect();
            for f in &folds {
                let pos = f.iter().filter(|p| lookup[p.as_str()]).count();
                let rate = pos as f64 / f.len() as f64;
                assert!((rate - global).abs() <= 0.02, "fold rate {rate}");
            }
        }
    }

    #[test]
    fn ingest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let events = vec![
            event("p1", EventType::Icu, 10.5),
            event("p1", EventType::Mortality, 90.25),
            event("p2", EventType::O2Gt6l, 3.0),
        ];
        let scans = vec![
            scan("p1", "s1", 0.0, Location::Ed),
            scan("p2", "s2", 1.5, Location::Inpatient),
        ];
        let ep = dir.path().join("events.csv");
        let sp = dir.path().join("scans.csv");
        write_events(&ep, &events).unwrap();
        write_scans(&sp, &scans).unwrap();
        let cohort = ingest(&ep, &sp).unwrap();
        assert_eq!(cohort.events, events);
        assert_eq!(cohort.scans, scans);
        assert!(cohort.warnings.is_empty());

        // Empty events file is valid.
        write_events(&ep, &[]).unwrap();
        let empty = ingest(&ep, &sp).unwrap();
        assert!(empty.events.is_empty());

        // Non-numeric time names the offending row (header is line 1).
        std::fs::write(
            &ep,
            "patient_id,event_type,event_time_hours\np1,icu,ten\n",
        )
        .unwrap();
        match read_events(&ep) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        // Duplicate scan ids are an integrity error.
        let dup = vec![
            scan("p1", "s1", 0.0, Location::Ed),
            scan("p1", "s1", 5.0, Location::Ed),
        ];
        write_scans(&sp, &dup).unwrap();
        assert!(matches!(read_scans(&sp), Err(Error::Integrity(_))));
    }

    #[test]
    fn ingest_rejects_broken_mortality_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let ep = dir.path().join("events.csv");
        write_events(
            &ep,
            &[
                event("p1", EventType::Mortality, 10.0),
                event("p1", EventType::Mortality, 20.0),
            ],
        )
        .unwrap();
        assert!(matches!(read_events(&ep), Err(Error::Integrity(_))));
        write_events(
            &ep,
            &[
                event("p1", EventType::Mortality, 10.0),
                event("p1", EventType::Icu, 20.0),
            ],
        )
        .unwrap();
        assert!(matches!(read_events(&ep), Err(Error::Integrity(_))));
    }

    #[test]
    fn synth_is_deterministic_and_well_formed() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 16,
            ..Default::default()
        };
        let c1 = synth_cohort(d1.path(), 30, &cfg, 7).unwrap();
        let _ = synth_cohort(d2.path(), 30, &cfg, 7).unwrap();
        for name in ["events.csv", "scans.csv", "findings.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical seeds");
        }
        let img = c1.scans[0].image_path.as_str();
        let a = std::fs::read(d1.path().join(img)).unwrap();
        let b = std::fs::read(d2.path().join(img)).unwrap();
        assert_eq!(a, b);

        // Different seed differs.
        let d3 = tempfile::tempdir().unwrap();
        let _ = synth_cohort(d3.path(), 30, &cfg, 8).unwrap();
        let c = std::fs::read(d3.path().join("events.csv")).unwrap();
        let a = std::fs::read(d1.path().join("events.csv")).unwrap();
        assert_ne!(a, c);

        // Ingest accepts its own output.
        let cohort = ingest(&d1.path().join("events.csv"), &d1.path().join("scans.csv")).unwrap();
        assert_eq!(cohort.scans.len(), c1.scans.len());
        assert!(cohort.warnings.is_empty());
    }

    #[test]
    fn synth_severity_tracks_amplitude() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 8,
            ..Default::default()
        };
        let c = synth_cohort(dir.path(), 1000, &cfg, 11).unwrap();
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for t in &c.truth {
            xs.push(t.severity);
            ys.push(t.scan_amplitudes.iter().sum::<f64>() / t.scan_amplitudes.len() as f64);
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..xs.len() {
            cov += (xs[i] - mx) * (ys[i] - my);
            vx += (xs[i] - mx).powi(2);
            vy += (ys[i] - my).powi(2);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        assert!(corr > 0.9, "severity/amplitude correlation {corr}");
    }

    #[test]
    fn synth_cohort_satisfies_module_invariants() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            image_size: 8,
            ..Default::default()
        };
        let c = synth_cohort(dir.path(), 200, &cfg, 13).unwrap();
        let layout = LabelLayout::adverse();

        // Label monotonicity across windows for every scan.
        let mut window_counts = [0usize; 5];
        for s in &c.scans {
            let ex = window_labels(s, &c.events, &layout);
            for e in 0..layout.events.len() {
                for w in 1..5 {
                    assert!(ex.labels[e * 5 + w - 1] <= ex.labels[e * 5 + w]);
                }
            }
            let any_idx = layout.index(LabelEvent::AnyAdverse, Window::H24).unwrap();
            for w in 0..5 {
                window_counts[w] += ex.labels[any_idx + w] as usize;
            }
        }
        // Count-versus-window curve is nondecreasing.
        for w in 1..5 {
            assert!(window_counts[w - 1] <= window_counts[w]);
        }

        // SIP scans are a subset of ORP scans (both ED-based).
        let sip = apply_task_filter(&c.scans, &c.events, Task::Sip);
        let orp = apply_task_filter(&c.scans, &c.events, Task::Orp);
        let orp_ids: HashSet<&str> = orp.iter().map(|s| s.scan_id.as_str()).collect();
        assert!(sip.iter().all(|s| orp_ids.contains(s.scan_id.as_str())));

        // One sequence per MIP-eligible scan.
        let mip = apply_task_filter(&c.scans, &c.events, Task::Mip);
        let seqs = build_sequences(&mip, &c.events, &layout);
        assert_eq!(seqs.len(), mip.len());

        // Mortality is the rarest event.
        let count = |ty| c.events.iter().filter(|e| e.event_type == ty).count();
        let mort = count(EventType::Mortality);
        assert!(mort <= count(EventType::Icu));
        assert!(mort <= count(EventType::Intubation));
        assert!(mort <= count(EventType::O2Gt6l));
        assert!(mort > 0, "horizon should produce some mortality events");

        // No scan at or after its patient's mortality.
        for s in &c.scans {
            for e in &c.events {
                if e.patient_id == s.patient_id && e.event_type == EventType::Mortality {
                    assert!(s.acquired_time < e.event_time);
                }
            }
        }
    }
}

//! Mergeable demographic tallies and the tables built from them.
//!
//! `AggregateState` is a commutative monoid under [`AggregateState::merge`]:
//! shard-local states built over disjoint image partitions combine into
//! exactly the state a single sequential pass would produce. All counting is
//! integer; percentages are rounded only when a table is rendered.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::Hierarchy;
use crate::manifest::{ImageRecord, Manifest};
use crate::protocol::{AgeGroup, FaceAnnotation, Gender, ProtocolError};
use crate::store::AnnotationRecord;

#[derive(Debug, Error, PartialEq)]
pub enum AggregateError {
    #[error("synset {0} is not part of the audited manifest")]
    UnknownSynset(String),
    #[error("image {image_id} in synset {wnid} is not part of the audited manifest")]
    UnknownImage { image_id: String, wnid: String },
    #[error("no annotated faces to report on")]
    EmptyAudit,
    #[error(transparent)]
    Invalid(#[from] ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub age_group: AgeGroup,
    pub gender: Gender,
}

impl SubgroupKey {
    pub fn new(age_group: AgeGroup, gender: Gender) -> Self {
        Self { age_group, gender }
    }

    pub fn all() -> impl Iterator<Item = SubgroupKey> {
        AgeGroup::ALL
            .into_iter()
            .flat_map(|a| Gender::ALL.into_iter().map(move |g| SubgroupKey::new(a, g)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynsetTally {
    pub n_images: u64,
    pub n_detected_images: u64,
    pub n_faces: u64,
    pub n_male: u64,
    pub n_female: u64,
}

impl SynsetTally {
    fn add(&mut self, o: &SynsetTally) {
        self.n_images += o.n_images;
        self.n_detected_images += o.n_detected_images;
        self.n_faces += o.n_faces;
        self.n_male += o.n_male;
        self.n_female += o.n_female;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregateState {
    /// `counts[age_group][gender]`
    counts: [[u64; 2]; 5],
    per_synset: BTreeMap<String, SynsetTally>,
}

impl AggregateState {
    pub fn new() -> Self {
        Self::default()
    }

    /// State with every present image of `manifest` registered.
    pub fn for_manifest(manifest: &Manifest) -> Self {
        let mut s = Self::new();
        for img in manifest.records().iter().filter(|r| r.is_present()) {
            s.register_image(img);
        }
        s
    }

    /// Count an image toward its synset's class size.
    pub fn register_image(&mut self, img: &ImageRecord) {
        self.per_synset.entry(img.synset_wnid.clone()).or_default().n_images += 1;
    }

    /// Count a registered image as having at least one gated detection.
    pub fn mark_detected(&mut self, img: &ImageRecord) -> Result<(), AggregateError> {
        self.tally_mut(&img.synset_wnid)?.n_detected_images += 1;
        Ok(())
    }

    /// Add one gated face: bumps exactly one subgroup cell and its synset tally.
    pub fn accumulate(&mut self, ann: &FaceAnnotation, img: &ImageRecord) -> Result<(), AggregateError> {
        let tally = self.tally_mut(&img.synset_wnid)?;
        tally.n_faces += 1;
        match ann.gender_label {
            Gender::Male => tally.n_male += 1,
            Gender::Female => tally.n_female += 1,
        }
        self.counts[ann.age_group.index()][ann.gender_label.index()] += 1;
        Ok(())
    }

    /// Register an image and add all of its gated faces.
    pub fn observe_image(&mut self, img: &ImageRecord, faces: &[FaceAnnotation]) -> Result<(), AggregateError> {
        self.register_image(img);
        if !faces.is_empty() {
            self.mark_detected(img)?;
        }
        faces.iter().try_for_each(|f| self.accumulate(f, img))
    }

    fn tally_mut(&mut self, wnid: &str) -> Result<&mut SynsetTally, AggregateError> {
        self.per_synset
            .get_mut(wnid)
            .ok_or_else(|| AggregateError::UnknownSynset(wnid.to_string()))
    }

    /// Build the audit state from stored annotation records. Records below
    /// `min_conf` are ignored; every record must name a manifest image.
    pub fn from_records(
        manifest: &Manifest,
        records: &[AnnotationRecord],
        min_conf: f64,
    ) -> Result<Self, AggregateError> {
        let mut state = Self::for_manifest(manifest);
        let present: BTreeMap<(&str, &str), &ImageRecord> = manifest
            .records()
            .iter()
            .filter(|r| r.is_present())
            .map(|r| ((r.image_id.as_str(), r.synset_wnid.as_str()), r))
            .collect();
        let mut detected = BTreeSet::new();
        for rec in records.iter().filter(|r| r.confidence >= min_conf) {
            if !state.per_synset.contains_key(&rec.synset_wnid) {
                return Err(AggregateError::UnknownSynset(rec.synset_wnid.clone()));
            }
            let key = (rec.image_id.as_str(), rec.synset_wnid.as_str());
            let img = *present.get(&key).ok_or_else(|| AggregateError::UnknownImage {
                image_id: rec.image_id.clone(),
                wnid: rec.synset_wnid.clone(),
            })?;
            if detected.insert(key) {
                state.mark_detected(img)?;
            }
            state.accumulate(&rec.to_annotation()?, img)?;
        }
        Ok(state)
    }

    /// Pointwise sum.
    pub fn merge(&self, other: &AggregateState) -> AggregateState {
        let mut out = self.clone();
        out.merge_from(other);
        out
    }

    pub fn merge_from(&mut self, other: &AggregateState) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
        for (wnid, t) in &other.per_synset {
            self.per_synset.entry(wnid.clone()).or_default().add(t);
        }
    }

    pub fn count(&self, key: SubgroupKey) -> u64 {
        self.counts[key.age_group.index()][key.gender.index()]
    }

    pub fn total_faces(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn synset(&self, wnid: &str) -> Option<&SynsetTally> {
        self.per_synset.get(wnid)
    }

    pub fn synsets(&self) -> impl Iterator<Item = (&str, &SynsetTally)> {
        self.per_synset.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Check the internal consistency invariants.
    pub fn check_invariants(&self) -> bool {
        let per_synset_faces: u64 = self.per_synset.values().map(|t| t.n_faces).sum();
        self.per_synset
            .values()
            .all(|t| t.n_male + t.n_female == t.n_faces && t.n_detected_images <= t.n_images)
            && per_synset_faces == self.total_faces()
    }

    /// Age-group x gender percentages of all faces, with All margins.
    pub fn top_level_table(&self) -> Result<PercentTable, AggregateError> {
        let total = self.total_faces();
        if total == 0 {
            return Err(AggregateError::EmptyAudit);
        }
        let mut counts = [[0u64; 3]; 6];
        for (a, row) in self.counts.iter().enumerate() {
            counts[a][0] = row[0];
            counts[a][1] = row[1];
            counts[a][2] = row[0] + row[1];
        }
        for c in 0..3 {
            counts[5][c] = (0..5).map(|a| counts[a][c]).sum();
        }
        Ok(PercentTable { counts, total })
    }
}

/// A percentage with two decimals, stored exactly in hundredths of a percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Percent(pub u32);

impl Percent {
    /// `100 * num / den`, rounded half-up to two decimals.
    pub fn of(num: u64, den: u64) -> Percent {
        assert!(den > 0, "percentage of an empty total");
        let (n, d) = (u128::from(num), u128::from(den));
        Percent(((20_000 * n + d) / (2 * d)) as u32)
    }

    pub fn hundredths(self) -> u32 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.0) / 100.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:02}", self.0 / 100, self.0 % 100)
    }
}

/// Rows: the five age groups then All. Columns: Male, Female, All.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PercentTable {
    pub counts: [[u64; 3]; 6],
    pub total: u64,
}

impl PercentTable {
    pub const ROW_LABELS: [&'static str; 6] = ["0-14", "15-29", "30-44", "45-59", "60+", "All"];
    pub const COL_LABELS: [&'static str; 3] = ["Male", "Female", "All"];
    pub const ALL: usize = 5;

    pub fn cell(&self, row: usize, col: usize) -> Percent {
        Percent::of(self.counts[row][col], self.total)
    }

    pub fn get(&self, age: Option<AgeGroup>, gender: Option<Gender>) -> Percent {
        let row = age.map_or(Self::ALL, AgeGroup::index);
        let col = gender.map_or(2, Gender::index);
        self.cell(row, col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingFilters {
    pub min_images: u64,
    /// Minimum fraction of images with a gated detection, in parts per million.
    min_det_rate_ppm: u64,
}

impl RankingFilters {
    pub fn new(min_images: u64, min_det_rate: f64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&min_det_rate) {
            return Err(format!("detection rate {min_det_rate} outside [0, 1]"));
        }
        Ok(Self {
            min_images,
            min_det_rate_ppm: (min_det_rate * 1e6).round() as u64,
        })
    }

    pub fn min_det_rate(&self) -> f64 {
        self.min_det_rate_ppm as f64 / 1e6
    }

    pub fn admits(&self, t: &SynsetTally) -> bool {
        t.n_faces > 0
            && t.n_images >= self.min_images
            && u128::from(t.n_detected_images) * 1_000_000 >= u128::from(self.min_det_rate_ppm) * u128::from(t.n_images)
    }
}

impl Default for RankingFilters {
    fn default() -> Self {
        Self::new(20, 0.15).expect("valid defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SynsetRankRow {
    pub wnid: String,
    pub label: String,
    pub pct_male: Percent,
    pub pct_female: Percent,
    pub n_faces: u64,
    pub n_images: u64,
    pub n_detected_images: u64,
}

/// Synsets passing the size and detection-rate filters, ranked by the share
/// of faces labeled male (first list) and female (second list), descending;
/// ties go to the lexicographically smaller wnid.
pub fn synset_gender_ranking(
    state: &AggregateState,
    hierarchy: Option<&Hierarchy>,
    filters: &RankingFilters,
) -> (Vec<SynsetRankRow>, Vec<SynsetRankRow>) {
    let eligible: Vec<(&str, &SynsetTally)> = state.synsets().filter(|(_, t)| filters.admits(t)).collect();

    let rank = |share: fn(&SynsetTally) -> u64| {
        let mut rows = eligible.clone();
        // Exact rational comparison of share / n_faces.
        rows.sort_by(|(wa, a), (wb, b)| {
            let lhs = u128::from(share(a)) * u128::from(b.n_faces);
            let rhs = u128::from(share(b)) * u128::from(a.n_faces);
            rhs.cmp(&lhs).then_with(|| wa.cmp(wb))
        });
        rows.into_iter()
            .map(|(wnid, t)| SynsetRankRow {
                wnid: wnid.to_string(),
                label: hierarchy
                    .and_then(|h| h.get(wnid))
                    .map_or_else(|| wnid.to_string(), |s| s.label().to_string()),
                pct_male: Percent::of(t.n_male, t.n_faces),
                pct_female: Percent::of(t.n_female, t.n_faces),
                n_faces: t.n_faces,
                n_images: t.n_images,
                n_detected_images: t.n_detected_images,
            })
            .collect::<Vec<_>>()
    };
    (rank(|t| t.n_male), rank(|t| t.n_female))
}

impl PartialOrd for SynsetRankRow {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SynsetRankRow {
    fn cmp(&self, other: &Self) -> Ordering {
        self.wnid.cmp(&other.wnid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{BoundingBox, FaceDetection, GenderScore};
    use proptest::prelude::*;

    fn face(age: f64, female: bool) -> FaceAnnotation {
        let det = FaceDetection::new("img", BoundingBox::new(0.0, 0.0, 5.0, 5.0), 0.95).unwrap();
        let score = GenderScore::new(if female { 0.9 } else { 0.1 }).unwrap();
        FaceAnnotation::from_parts(det, age, score, "t").unwrap()
    }

    fn img(wnid: &str) -> ImageRecord {
        ImageRecord::new("img", wnid, "u")
    }

    fn registered(wnid: &str) -> AggregateState {
        let mut s = AggregateState::new();
        s.register_image(&img(wnid));
        s
    }

    #[test]
    fn single_face() {
        let mut s = registered("n1");
        s.accumulate(&face(20.0, false), &img("n1")).unwrap();
        assert_eq!(s.count(SubgroupKey::new(AgeGroup::Young, Gender::Male)), 1);
        assert_eq!(s.total_faces(), 1);
        assert!(s.check_invariants());
    }

    #[test]
    fn four_face_table() {
        let mut s = registered("n1");
        for f in [face(20.0, false), face(25.0, false), face(33.0, true), face(70.0, true)] {
            s.accumulate(&f, &img("n1")).unwrap();
        }
        let t = s.top_level_table().unwrap();
        assert_eq!(t.get(Some(AgeGroup::Young), Some(Gender::Male)).to_string(), "50.00");
        assert_eq!(t.get(Some(AgeGroup::Adult), Some(Gender::Female)).to_string(), "25.00");
        assert_eq!(t.get(Some(AgeGroup::Senior), Some(Gender::Female)).to_string(), "25.00");
        assert_eq!(t.get(None, Some(Gender::Male)).to_string(), "50.00");
        assert_eq!(t.get(Some(AgeGroup::Child), None).to_string(), "0.00");
        assert_eq!(t.get(None, None).to_string(), "100.00");
    }

    #[test]
    fn single_female_senior_table() {
        let mut s = registered("n1");
        s.accumulate(&face(60.0, true), &img("n1")).unwrap();
        let t = s.top_level_table().unwrap();
        for r in 0..5 {
            for c in 0..2 {
                let expect = if r == 4 && c == 1 { "100.00" } else { "0.00" };
                assert_eq!(t.cell(r, c).to_string(), expect);
            }
        }
    }

    #[test]
    fn unknown_synset_and_empty_audit() {
        let mut s = registered("n1");
        assert_eq!(
            s.accumulate(&face(20.0, true), &img("n2")),
            Err(AggregateError::UnknownSynset("n2".into()))
        );
        assert_eq!(s.top_level_table(), Err(AggregateError::EmptyAudit));
    }

    #[test]
    fn percent_rounding_half_up() {
        assert_eq!(Percent::of(1, 3).to_string(), "33.33");
        assert_eq!(Percent::of(2, 3).to_string(), "66.67");
        assert_eq!(Percent::of(1, 8).to_string(), "12.50");
        // 1/16000 = 0.00625% -> 0.01
        assert_eq!(Percent::of(1, 16_000).to_string(), "0.01");
        // 1/40000 = 0.0025% -> 0.00
        assert_eq!(Percent::of(1, 40_000).to_string(), "0.00");
        // exactly 0.005% rounds up
        assert_eq!(Percent::of(1, 20_000).to_string(), "0.01");
    }

    fn synset_with(n_images: u64, n_detected: u64, male: u64, female: u64) -> SynsetTally {
        SynsetTally {
            n_images,
            n_detected_images: n_detected,
            n_faces: male + female,
            n_male: male,
            n_female: female,
        }
    }

    fn state_of(tallies: &[(&str, SynsetTally)]) -> AggregateState {
        let mut s = AggregateState::new();
        for (w, t) in tallies {
            s.per_synset.insert(w.to_string(), *t);
        }
        s
    }

    #[test]
    fn ranking_filters() {
        let s = state_of(&[
            ("n19", synset_with(19, 19, 10, 0)),
            ("n20", synset_with(20, 10, 9, 1)),
            ("n14pct", synset_with(100, 14, 14, 0)),
            ("n15pct", synset_with(100, 15, 0, 15)),
        ]);
        let (male, female) = synset_gender_ranking(&s, None, &RankingFilters::default());
        let ids: Vec<&str> = male.iter().map(|r| r.wnid.as_str()).collect();
        assert_eq!(ids, ["n20", "n15pct"]);
        assert_eq!(male[0].pct_male.to_string(), "90.00");
        assert_eq!(male[0].pct_female.to_string(), "10.00");
        assert_eq!(female[0].wnid, "n15pct");
    }

    #[test]
    fn ranking_ties_break_on_wnid() {
        let s = state_of(&[
            ("nb", synset_with(20, 20, 1, 1)),
            ("na", synset_with(20, 20, 2, 2)),
        ]);
        let (male, female) = synset_gender_ranking(&s, None, &RankingFilters::default());
        assert_eq!(male[0].wnid, "na");
        assert_eq!(female[0].wnid, "na");
    }

    #[test]
    fn detection_rate_boundary_in_ppm() {
        let f = RankingFilters::new(1, 0.15).unwrap();
        assert!(f.admits(&synset_with(1000, 150, 1, 0)));
        assert!(!f.admits(&synset_with(1000, 149, 1, 0)));
        assert!(RankingFilters::new(1, 1.5).is_err());
    }

    fn arb_state() -> impl Strategy<Value = AggregateState> {
        (
            prop::array::uniform5(prop::array::uniform2(0u64..1000)),
            prop::collection::btree_map("n[0-9]{2}", (0u64..50, 0u64..50, 0u64..50, 0u64..50), 0..6),
        )
            .prop_map(|(counts, syn)| AggregateState {
                counts,
                per_synset: syn
                    .into_iter()
                    .map(|(w, (i, d, m, f))| (w, synset_with(i, d, m, f)))
                    .collect(),
            })
    }

    proptest! {
        #[test]
        fn merge_monoid(a in arb_state(), b in arb_state(), c in arb_state()) {
            prop_assert_eq!(a.merge(&b), b.merge(&a));
            prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
            prop_assert_eq!(a.merge(&AggregateState::new()), a.clone());
        }

        #[test]
        fn table_cells_sum_to_hundred(a in arb_state()) {
            prop_assume!(a.total_faces() > 0);
            let t = a.top_level_table().unwrap();
            let cells: i64 = (0..5).flat_map(|r| (0..2).map(move |c| (r, c))).map(|(r, c)| i64::from(t.cell(r, c).0)).sum();
            let all_col: i64 = (0..5).map(|r| i64::from(t.cell(r, 2).0)).sum();
            // Half-up rounding leaves at most half a hundredth per cell.
            prop_assert!((cells - 10_000).abs() <= 5);
            prop_assert!((all_col - 10_000).abs() <= 2);
            prop_assert_eq!(t.cell(5, 2).0, 10_000);
        }

        #[test]
        fn ranking_is_permutation_invariant(a in arb_state()) {
            let mut rev = AggregateState::new();
            for (w, t) in a.per_synset.iter().rev() {
                rev.per_synset.insert(w.clone(), *t);
            }
            let f = RankingFilters::new(0, 0.0).unwrap();
            prop_assert_eq!(synset_gender_ranking(&a, None, &f), synset_gender_ranking(&rev, None, &f));
            for row in synset_gender_ranking(&a, None, &f).0 {
                let sum = i64::from(row.pct_male.0 + row.pct_female.0);
                prop_assert!((sum - 10_000).abs() <= 1);
            }
        }
    }
}

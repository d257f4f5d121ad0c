//! Identity split, probe/gallery assignment and split manifests.
//!
//! Manifests are UTF-8 text, one record per line with four tab-separated
//! fields (`path`, `label` or empty, `domain`, `role`). Header lines start
//! with `#` and carry the dataset name, the seed and per-role counts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &str = "# csri-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Auxiliary,
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Probe,
    GalleryMatch,
    GalleryDistractor,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Auxiliary => "auxiliary",
            Domain::Native => "native",
        }
    }
}

impl Role {
    pub const ALL: [Role; 4] = [
        Role::Train,
        Role::Probe,
        Role::GalleryMatch,
        Role::GalleryDistractor,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Probe => "probe",
            Role::GalleryMatch => "gallery_match",
            Role::GalleryDistractor => "gallery_distractor",
        }
    }

    pub fn is_gallery(self) -> bool {
        matches!(self, Role::GalleryMatch | Role::GalleryDistractor)
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "auxiliary" => Ok(Domain::Auxiliary),
            "native" => Ok(Domain::Native),
            _ => Err(format!("unknown domain {s:?}")),
        }
    }
}

impl FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

/// One face image and its place in the protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub image_path: String,
    pub identity: Option<u32>,
    pub domain: Domain,
    pub role: Role,
}

impl FaceRecord {
    pub fn new(image_path: impl Into<String>, identity: Option<u32>, domain: Domain, role: Role) -> Self {
        FaceRecord {
            image_path: image_path.into(),
            identity,
            domain,
            role,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.image_path.is_empty() || self.image_path.contains(['\t', '\n', '\r']) {
            return Err(format!("invalid image path {:?}", self.image_path));
        }
        match (self.role, self.identity) {
            (Role::GalleryDistractor, Some(id)) => Err(format!(
                "distractor {} carries label {id}",
                self.image_path
            )),
            (Role::GalleryDistractor, None) => Ok(()),
            (role, None) => Err(format!(
                "{role} record {} has no identity label",
                self.image_path
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RoleCounts {
    pub train: usize,
    pub probe: usize,
    pub gallery_match: usize,
    pub gallery_distractor: usize,
}

impl RoleCounts {
    pub fn get(&self, role: Role) -> usize {
        match role {
            Role::Train => self.train,
            Role::Probe => self.probe,
            Role::GalleryMatch => self.gallery_match,
            Role::GalleryDistractor => self.gallery_distractor,
        }
    }

    fn get_mut(&mut self, role: Role) -> &mut usize {
        match role {
            Role::Train => &mut self.train,
            Role::Probe => &mut self.probe,
            Role::GalleryMatch => &mut self.gallery_match,
            Role::GalleryDistractor => &mut self.gallery_distractor,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.probe + self.gallery_match + self.gallery_distractor
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub dataset: String,
    pub seed: u64,
    pub records: Vec<FaceRecord>,
}

impl SplitManifest {
    /// Builds a manifest and checks every protocol invariant.
    pub fn new(dataset: impl Into<String>, seed: u64, records: Vec<FaceRecord>) -> Result<Self> {
        let m = SplitManifest {
            dataset: dataset.into(),
            seed,
            records,
        };
        m.validate().map_err(Error::Protocol)?;
        Ok(m)
    }

    pub fn counts(&self) -> RoleCounts {
        let mut counts = RoleCounts::default();
        for r in &self.records {
            *counts.get_mut(r.role) += 1;
        }
        counts
    }

    pub fn with_role(&self, role: Role) -> impl Iterator<Item = &FaceRecord> {
        self.records.iter().filter(move |r| r.role == role)
    }

    pub fn identities(&self, role: Role) -> BTreeSet<u32> {
        self.with_role(role).filter_map(|r| r.identity).collect()
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.dataset.is_empty() || self.dataset.contains(['\n', '\r']) {
            return Err(format!("invalid dataset name {:?}", self.dataset));
        }
        for r in &self.records {
            r.check()?;
        }
        for domain in [Domain::Auxiliary, Domain::Native] {
            let of = |roles: &[Role]| -> BTreeSet<u32> {
                self.records
                    .iter()
                    .filter(|r| r.domain == domain && roles.contains(&r.role))
                    .filter_map(|r| r.identity)
                    .collect()
            };
            let train = of(&[Role::Train]);
            let test = of(&[Role::Probe, Role::GalleryMatch]);
            if let Some(id) = train.intersection(&test).next() {
                return Err(format!(
                    "identity {id} appears in both train and test ({domain})"
                ));
            }
            let gallery = of(&[Role::GalleryMatch]);
            if let Some(id) = of(&[Role::Probe]).difference(&gallery).next() {
                return Err(format!("probe identity {id} has no gallery match ({domain})"));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let counts = self.counts();
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("# dataset: {}\n", self.dataset));
        out.push_str(&format!("# seed: {}\n", self.seed));
        for role in Role::ALL {
            out.push_str(&format!("# count {}: {}\n", role, counts.get(role)));
        }
        out.push_str(&format!("# count total: {}\n", counts.total()));
        for r in &self.records {
            let label = r.identity.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{}\t{}\t{}\t{}\n", r.image_path, label, r.domain, r.role));
        }
        out
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: source.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(1, format!("missing header {MAGIC:?}"))),
        }
        let mut dataset = None;
        let mut seed = None;
        let mut declared: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        let mut records = Vec::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                let (key, value) = rest
                    .split_once(':')
                    .ok_or_else(|| err(lineno, format!("malformed header line {line:?}")))?;
                let value = value.trim();
                match key.trim() {
                    "dataset" => dataset = Some(value.to_string()),
                    "seed" => {
                        seed = Some(value.parse::<u64>().map_err(|e| err(lineno, format!("bad seed: {e}")))?)
                    }
                    k if k.starts_with("count ") => {
                        let n = value
                            .parse::<usize>()
                            .map_err(|e| err(lineno, format!("bad count: {e}")))?;
                        declared.insert(k["count ".len()..].to_string(), (n, lineno));
                    }
                    other => return Err(err(lineno, format!("unknown header key {other:?}"))),
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(err(lineno, format!("expected 4 tab-separated fields, found {}", fields.len())));
            }
            let identity = if fields[1].is_empty() {
                None
            } else {
                Some(
                    fields[1]
                        .parse::<u32>()
                        .map_err(|e| err(lineno, format!("bad label {:?}: {e}", fields[1])))?,
                )
            };
            let domain = fields[2].parse::<Domain>().map_err(|e| err(lineno, e))?;
            let role = fields[3].parse::<Role>().map_err(|e| err(lineno, e))?;
            let record = FaceRecord::new(fields[0], identity, domain, role);
            record.check().map_err(|e| err(lineno, e))?;
            records.push(record);
        }
        let manifest = SplitManifest {
            dataset: dataset.ok_or_else(|| err(1, "missing dataset header".into()))?,
            seed: seed.ok_or_else(|| err(1, "missing seed header".into()))?,
            records,
        };
        let counts = manifest.counts();
        for (key, (n, lineno)) in &declared {
            let actual = if key == "total" {
                counts.total()
            } else {
                let role = key.parse::<Role>().map_err(|e| err(*lineno, e))?;
                counts.get(role)
            };
            if actual != *n {
                return Err(err(*lineno, format!("count {key} declares {n} but {actual} records found")));
            }
        }
        manifest
            .validate()
            .map_err(|e| err(0, format!("invariant violated: {e}")))?;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Halves a label set into disjoint train and test identities.
///
/// An odd identity goes to train. Both halves come back sorted.
pub fn split_identities(identities: &[u32], seed: u64) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut ids: Vec<u32> = identities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if ids.len() < 2 {
        return Err(Error::Protocol(format!(
            "need at least 2 identities to split, got {}",
            ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ids.len().div_ceil(2);
    let mut test = ids.split_off(n_train);
    ids.sort_unstable();
    test.sort_unstable();
    Ok((ids, test))
}

/// Assigns each test identity's images to probe and gallery, and appends
/// every distractor to the gallery.
///
/// For an identity with `n` images, `floor(n/2)` become probes and the rest
/// gallery matches, so every probe has at least one true match.
pub fn build_probe_gallery(
    dataset: &str,
    test_records: &[FaceRecord],
    distractors: &[FaceRecord],
    seed: u64,
) -> Result<SplitManifest> {
    let mut by_identity: BTreeMap<(Domain, u32), Vec<&FaceRecord>> = BTreeMap::new();
    for r in test_records {
        let id = r.identity.ok_or_else(|| {
            Error::Protocol(format!("test record {} has no identity", r.image_path))
        })?;
        by_identity.entry((r.domain, id)).or_default().push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(test_records.len() + distractors.len());
    for ((_, id), mut group) in by_identity {
        if group.len() < 2 {
            return Err(Error::Protocol(format!(
                "test identity {id} has {} image(s); at least 2 are required",
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let n_probe = group.len() / 2;
        for (i, r) in group.into_iter().enumerate() {
            let role = if i < n_probe { Role::Probe } else { Role::GalleryMatch };
            records.push(FaceRecord { role, ..r.clone() });
        }
    }
    for d in distractors {
        if let Some(id) = d.identity {
            return Err(Error::Protocol(format!(
                "distractor {} carries label {id}",
                d.image_path
            )));
        }
        records.push(FaceRecord {
            role: Role::GalleryDistractor,
            ..d.clone()
        });
    }
    SplitManifest::new(dataset, seed, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(path: &str, id: Option<u32>, role: Role) -> FaceRecord {
        FaceRecord::new(path, id, Domain::Native, role)
    }

    #[test]
    fn split_counts_follow_half_rule() {
        let ids: Vec<u32> = (0..5139).collect();
        let (tr, te) = split_identities(&ids, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (2570, 2569));
        let ids: Vec<u32> = (0..41).collect();
        let (tr, te) = split_identities(&ids, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (21, 20));
    }

    #[test]
    fn split_is_deterministic_and_rejects_tiny_sets() {
        let ids: Vec<u32> = (100..140).collect();
        assert_eq!(split_identities(&ids, 9).unwrap(), split_identities(&ids, 9).unwrap());
        assert!(split_identities(&[3], 0).is_err());
        assert!(split_identities(&[3, 3], 0).is_err());
    }

    #[test]
    fn five_images_give_two_probes_three_gallery() {
        let recs: Vec<_> = (0..5).map(|i| rec(&format!("a{i}.png"), Some(7), Role::Train)).collect();
        let m = build_probe_gallery("t", &recs, &[], 3).unwrap();
        let c = m.counts();
        assert_eq!((c.probe, c.gallery_match, c.gallery_distractor), (2, 3, 0));
    }

    #[test]
    fn single_image_identity_is_named() {
        let recs = vec![
            rec("a.png", Some(1), Role::Train),
            rec("b.png", Some(1), Role::Train),
            rec("c.png", Some(42), Role::Train),
        ];
        let e = build_probe_gallery("t", &recs, &[], 0).unwrap_err();
        assert!(e.to_string().contains("identity 42"), "{e}");
    }

    #[test]
    fn tinyface_scale_partition_counts() {
        // 2,569 test identities and 8,171 labelled test images. 715 identities
        // with an odd image count account for gallery - probe = 4,443 - 3,728.
        let mut recs = Vec::new();
        for id in 0..2569u32 {
            let n = match id {
                0..715 => 3,
                715..1410 => 2,
                _ => 4,
            };
            for k in 0..n {
                recs.push(rec(&format!("{id}/{k}"), Some(id), Role::Train));
            }
        }
        assert_eq!(recs.len(), 8171);
        let distractors: Vec<_> = (0..153_428)
            .map(|i| rec(&format!("d{i}"), None, Role::GalleryDistractor))
            .collect();
        let m = build_probe_gallery("tinyface", &recs, &distractors, 0).unwrap();
        let c = m.counts();
        assert_eq!(c.probe, 3728);
        assert_eq!(c.gallery_match, 4443);
        assert_eq!(c.gallery_distractor, 153_428);
        assert_eq!(m.identities(Role::Probe).len(), 2569);
    }

    #[test]
    fn manifest_rejects_labelled_distractor() {
        let text = format!("{MAGIC}\n# dataset: x\n# seed: 1\nd.png\t5\tnative\tgallery_distractor\n");
        let e = SplitManifest::parse(&text, "m.tsv").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 4, .. }), "{e}");
    }

    #[test]
    fn manifest_reports_line_numbers() {
        let text = format!("{MAGIC}\n# dataset: x\n# seed: 1\na.png\t1\tnative\ttrain\nb.png\t1\tnative\n");
        match SplitManifest::parse(&text, "m.tsv").unwrap_err() {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 5);
                assert_eq!(path, "m.tsv");
            }
            e => panic!("{e}"),
        }
        let bad_count = format!("{MAGIC}\n# dataset: x\n# seed: 1\n# count train: 2\na.png\t1\tnative\ttrain\n");
        assert!(matches!(
            SplitManifest::parse(&bad_count, "m").unwrap_err(),
            Error::Parse { line: 4, .. }
        ));
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = SplitManifest::new("empty", 0, vec![]).unwrap();
        let back = SplitManifest::parse(&m.to_text(), "e").unwrap();
        assert_eq!(back, m);
        assert_eq!(back.counts().total(), 0);
    }

    #[test]
    fn rejects_train_test_overlap() {
        let recs = vec![
            rec("a", Some(1), Role::Train),
            rec("b", Some(1), Role::Probe),
            rec("c", Some(1), Role::GalleryMatch),
        ];
        assert!(SplitManifest::new("x", 0, recs).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m").join("split.tsv");
        let recs = vec![
            rec("a", Some(1), Role::Train),
            rec("b", Some(2), Role::Probe),
            rec("c", Some(2), Role::GalleryMatch),
            rec("d", None, Role::GalleryDistractor),
        ];
        let m = SplitManifest::new("x", 5, recs).unwrap();
        m.write(&path).unwrap();
        assert_eq!(SplitManifest::load(&path).unwrap(), m);
        assert!(matches!(
            SplitManifest::load(&dir.path().join("nope")),
            Err(Error::MissingArtifact(_))
        ));
    }

    fn arb_manifest() -> impl Strategy<Value = SplitManifest> {
        (
            prop::collection::vec((1usize..5, any::<bool>()), 2..12),
            0usize..6,
            any::<u64>(),
        )
            .prop_map(|(groups, n_distractors, seed)| {
                let mut train = Vec::new();
                let mut test = Vec::new();
                for (id, (n, is_test)) in groups.into_iter().enumerate() {
                    for k in 0..n.max(2) {
                        let domain = if is_test || k % 2 == 0 { Domain::Native } else { Domain::Auxiliary };
                        let r = FaceRecord::new(format!("img/{id}/{k}.png"), Some(id as u32), domain, Role::Train);
                        if is_test {
                            test.push(r);
                        } else {
                            train.push(r);
                        }
                    }
                }
                let d: Vec<_> = (0..n_distractors)
                    .map(|i| FaceRecord::new(format!("d/{i}.png"), None, Domain::Native, Role::GalleryDistractor))
                    .collect();
                let m = build_probe_gallery("prop", &test, &d, seed).unwrap();
                let mut records = train;
                records.extend(m.records);
                SplitManifest::new("prop", seed, records).unwrap()
            })
    }

    proptest! {
        #[test]
        fn manifest_text_round_trips(m in arb_manifest()) {
            let back = SplitManifest::parse(&m.to_text(), "p").unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn split_halves_are_disjoint(ids in prop::collection::btree_set(0u32..10_000, 2..200), seed in any::<u64>()) {
            let ids: Vec<u32> = ids.into_iter().collect();
            let (tr, te) = split_identities(&ids, seed).unwrap();
            let a: BTreeSet<_> = tr.iter().collect();
            prop_assert!(te.iter().all(|t| !a.contains(t)));
            prop_assert_eq!(tr.len() + te.len(), ids.len());
            prop_assert_eq!(tr.len(), ids.len().div_ceil(2));
        }

        #[test]
        fn every_probe_has_a_gallery_match(sizes in prop::collection::vec(2usize..9, 1..15), seed in any::<u64>()) {
            let mut recs = Vec::new();
            for (id, n) in sizes.iter().enumerate() {
                for k in 0..*n {
                    recs.push(rec(&format!("{id}/{k}"), Some(id as u32), Role::Train));
                }
            }
            let m = build_probe_gallery("p", &recs, &[], seed).unwrap();
            let gallery = m.identities(Role::GalleryMatch);
            prop_assert!(m.identities(Role::Probe).iter().all(|id| gallery.contains(id)));
            let c = m.counts();
            prop_assert_eq!(c.probe, sizes.iter().map(|n| n / 2).sum::<usize>());
        }
    }
}

//! Config-driven orchestration: prepare, train, eval and compare.
//!
//! Workspace layout:
//!
//! ```text
//! manifests/split.tsv          every record with its domain and role
//! images/aux/<id>/*.png        auxiliary HR faces (pairs are built on load)
//! images/native/<id>/*.png     native LR faces
//! images/native/distractors/   unlabeled native LR faces
//! checkpoints/<variant>/       stage1.ckpt, stage2.ckpt, losses.csv
//! reports/<variant>/           report.json, cmc.csv, pr.csv
//! reports/comparison.{txt,csv}
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::degrade::{degrade_native, make_lr_hr_pair, DegradationConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, read_report, write_report, EvalReport, ReportMeta, Truth, DEFAULT_K};
use crate::image::{load_image, save_image, Image};
use crate::model::{CsriModel, ModelConfig};
use crate::protocol::{build_probe_gallery, split_identities, Domain, FaceRecord, Role, SplitManifest};
use crate::resample::resize_clipped;
use crate::synth::Corpus;
use crate::trainer::{
    extract_features, finish_variant, start_variant, write_loss_csv, AuxData, NativeData, TrainConfig, Variant,
    VariantRun,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Labeled corpus: `auxiliary/<id>/*`, `native/<id>/*`, `distractors/*`.
    pub corpus: PathBuf,
    pub workspace: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "corpus".into(),
            workspace: "workspace".into(),
        }
    }
}

/// Synthetic pair construction for the auxiliary domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AuxiliaryConfig {
    pub lr_height: usize,
    pub lr_width: usize,
}

impl Default for AuxiliaryConfig {
    fn default() -> Self {
        AuxiliaryConfig {
            lr_height: 16,
            lr_width: 16,
        }
    }
}

impl AuxiliaryConfig {
    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig {
            lr_height: self.lr_height,
            lr_width: self.lr_width,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            variants: vec![Variant::IndependentSrFr, Variant::JointSrFr, Variant::Csri],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: String,
    /// Protocol seed: identity split and probe/gallery assignment.
    pub seed: u64,
    pub paths: Paths,
    pub auxiliary: AuxiliaryConfig,
    pub native: DegradationConfig,
    /// Class counts of the heads are set from the prepared data.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub compare: CompareConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sr: Some(Default::default()),
            fr: Default::default(),
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "faces".into(),
            seed: 0,
            paths: Paths::default(),
            auxiliary: AuxiliaryConfig::default(),
            native: DegradationConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            compare: CompareConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Loads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.workspace] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.native.validate()?;
        self.auxiliary.degradation().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be positive".into()));
        }
        Ok(())
    }

    /// Short SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn hr_size(&self) -> (usize, usize) {
        (self.model.fr.input_height, self.model.fr.input_width)
    }

    pub fn channels(&self) -> usize {
        self.model.fr.input_channels
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.workspace.join("manifests").join("split.tsv")
    }

    pub fn checkpoint_dir(&self, variant: Variant) -> PathBuf {
        self.paths.workspace.join("checkpoints").join(variant.as_str())
    }

    pub fn report_dir(&self, variant: Variant) -> PathBuf {
        self.paths.workspace.join("reports").join(variant.as_str())
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^ (z >> 33)
}

fn list_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(dir.to_path_buf()),
        _ => Error::io(dir, e),
    })?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "bmp" | "tif" | "tiff" | "pnm" | "pgm")
    )
}

/// `(identity, file)` pairs from `<dir>/<numeric id>/<image>`.
fn labeled_files(dir: &Path) -> Result<Vec<(u32, PathBuf)>> {
    let mut out = Vec::new();
    for sub in list_dir(dir)? {
        if !sub.is_dir() {
            continue;
        }
        let name = sub.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let id: u32 = name.parse().map_err(|_| {
            Error::InvalidInput(format!("identity directory {} is not a non-negative integer", sub.display()))
        })?;
        for f in list_dir(&sub)?.into_iter().filter(|f| is_image(f)) {
            out.push((id, f));
        }
    }
    Ok(out)
}

fn rel_path(domain: &str, id: Option<u32>, file: &Path) -> String {
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
    let folder = id.map_or_else(|| "distractors".to_string(), |i| i.to_string());
    format!("images/{domain}/{folder}/{stem}.png")
}

/// Builds the workspace images and the split manifest from the corpus.
pub fn cmd_prepare(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    cfg.validate()?;
    let corpus = &cfg.paths.corpus;
    if !corpus.is_dir() {
        return Err(Error::MissingArtifact(corpus.clone()));
    }
    let ws = &cfg.paths.workspace;
    let (h, w) = cfg.hr_size();
    let c = cfg.channels();
    let load_hr = |p: &Path| -> Result<Image<f32>> { resize_clipped(&load_image(p, c)?, h, w) };

    let aux_files = labeled_files(&corpus.join("auxiliary"))?;
    let native_files = labeled_files(&corpus.join("native"))?;
    let distractor_dir = corpus.join("distractors");
    let distractor_files: Vec<PathBuf> = if distractor_dir.exists() {
        list_dir(&distractor_dir)?.into_iter().filter(|f| is_image(f)).collect()
    } else {
        Vec::new()
    };
    if aux_files.is_empty() {
        return Err(Error::InvalidInput(format!("no auxiliary images under {}", corpus.display())));
    }

    let mut records = Vec::new();
    for (id, file) in &aux_files {
        let rel = rel_path("aux", Some(*id), file);
        save_image(&load_hr(file)?, &ws.join(&rel))?;
        records.push(FaceRecord::new(rel, Some(*id), Domain::Auxiliary, Role::Train));
    }

    let native_ids: Vec<u32> = native_files.iter().map(|(id, _)| *id).collect();
    let (train_ids, _) = split_identities(&native_ids, cfg.seed)?;
    let mut test_records = Vec::new();
    let mut index = 0u64;
    let mut degrade = |file: &Path, rel: &str| -> Result<()> {
        let lr = degrade_native(&load_hr(file)?, &cfg.native.with_seed(mix_seed(cfg.native.seed, index)))?;
        index += 1;
        save_image(&lr, &ws.join(rel))
    };
    for (id, file) in &native_files {
        let rel = rel_path("native", Some(*id), file);
        degrade(file, &rel)?;
        let rec = FaceRecord::new(rel, Some(*id), Domain::Native, Role::Train);
        if train_ids.binary_search(id).is_ok() {
            records.push(rec);
        } else {
            test_records.push(rec);
        }
    }
    let mut distractors = Vec::new();
    for file in &distractor_files {
        let rel = rel_path("native", None, file);
        degrade(file, &rel)?;
        distractors.push(FaceRecord::new(rel, None, Domain::Native, Role::GalleryDistractor));
    }
    let test = build_probe_gallery(&cfg.dataset, &test_records, &distractors, cfg.seed)?;
    records.extend(test.records);
    let manifest = SplitManifest::new(&cfg.dataset, cfg.seed, records)?;
    manifest.write(&cfg.manifest_path())?;
    log::info!(
        "prepared {} records ({} native train / {} native test identities)",
        manifest.records.len(),
        train_ids.len(),
        manifest.identities(Role::Probe).len()
    );
    Ok(manifest)
}

/// Training and evaluation data assembled from prepared or in-memory images.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub aux: AuxData<f32>,
    pub native_train: NativeData<f32>,
    /// Native LR faces, not yet upsampled.
    pub probes: Vec<Image<f32>>,
    pub gallery: Vec<Image<f32>>,
    pub truth: Truth,
}

impl Benchmark {
    /// `aux_hr` are HR faces at the network input size; native faces are LR.
    pub fn assemble(
        aux_hr: &[(u32, Image<f32>)],
        aux_cfg: &AuxiliaryConfig,
        native_train: &[(u32, Image<f32>)],
        probes: Vec<(u32, Image<f32>)>,
        gallery: Vec<(Option<u32>, Image<f32>)>,
        input: (usize, usize),
    ) -> Result<Self> {
        let deg = aux_cfg.degradation();
        let pairs = aux_hr
            .iter()
            .map(|(id, hr)| make_lr_hr_pair(hr, &deg, *id))
            .collect::<Result<Vec<_>>>()?;
        let (imgs, labels): (Vec<_>, Vec<_>) = native_train.iter().map(|(l, i)| (i.clone(), *l)).unzip();
        let native_train = NativeData::from_lr(&imgs, &labels, input.0, input.1)?;
        let (probe_labels, probes) = probes.into_iter().unzip();
        let (gallery_labels, gallery) = gallery.into_iter().unzip();
        Ok(Benchmark {
            aux: AuxData::new(pairs),
            native_train,
            probes,
            gallery,
            truth: Truth {
                probe_labels,
                gallery_labels,
            },
        })
    }

    pub fn load(cfg: &ExperimentConfig, manifest: &SplitManifest) -> Result<Self> {
        let ws = &cfg.paths.workspace;
        let c = cfg.channels();
        let load = |r: &FaceRecord| load_image(&ws.join(&r.image_path), c);
        let pick = |domain: Domain, role: Role| manifest.records.iter().filter(move |r| r.domain == domain && r.role == role);
        let labeled = |domain, role| -> Result<Vec<(u32, Image<f32>)>> {
            pick(domain, role)
                .map(|r| Ok((r.identity.expect("labeled role"), load(r)?)))
                .collect()
        };
        let aux = labeled(Domain::Auxiliary, Role::Train)?;
        let (h, w) = cfg.hr_size();
        if let Some((_, img)) = aux.iter().find(|(_, i)| i.dim() != (c, h, w)) {
            return Err(Error::Shape(format!(
                "auxiliary image {:?} does not match the network input {:?}; re-run prepare",
                img.dim(),
                (c, h, w)
            )));
        }
        let native_train = labeled(Domain::Native, Role::Train)?;
        let probes = labeled(Domain::Native, Role::Probe)?;
        let gallery = manifest
            .records
            .iter()
            .filter(|r| r.domain == Domain::Native && r.role.is_gallery())
            .map(|r| Ok((r.identity, load(r)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::assemble(&aux, &cfg.auxiliary, &native_train, probes, gallery, (h, w))
    }

    /// Applies the prepare protocol to an in-memory corpus whose images are
    /// already at the network input size.
    pub fn from_corpus(corpus: &Corpus, cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.hr_size();
        let native_ids: Vec<u32> = corpus.native.iter().map(|(id, _)| *id).collect();
        let (train_ids, _) = split_identities(&native_ids, cfg.seed)?;
        let mut index = 0u64;
        let mut degrade = |hr: &Image<f32>| -> Result<Image<f32>> {
            let lr = degrade_native(hr, &cfg.native.with_seed(mix_seed(cfg.native.seed, index)));
            index += 1;
            lr
        };
        let mut lr = Vec::new();
        let mut train = Vec::new();
        let mut test_records = Vec::new();
        for (id, img) in &corpus.native {
            let key = lr.len();
            lr.push(degrade(img)?);
            if train_ids.binary_search(id).is_ok() {
                train.push((*id, lr[key].clone()));
            } else {
                test_records.push(FaceRecord::new(key.to_string(), Some(*id), Domain::Native, Role::Train));
            }
        }
        let mut distractors = Vec::new();
        for img in &corpus.distractors {
            distractors.push(FaceRecord::new(lr.len().to_string(), None, Domain::Native, Role::GalleryDistractor));
            lr.push(degrade(img)?);
        }
        let test = build_probe_gallery(&cfg.dataset, &test_records, &distractors, cfg.seed)?;
        let img = |r: &FaceRecord| lr[r.image_path.parse::<usize>().expect("index key")].clone();
        let probes = test
            .with_role(Role::Probe)
            .map(|r| (r.identity.expect("probe label"), img(r)))
            .collect();
        let gallery = test
            .records
            .iter()
            .filter(|r| r.role.is_gallery())
            .map(|r| (r.identity, img(r)))
            .collect();
        Self::assemble(&corpus.auxiliary, &cfg.auxiliary, &train, probes, gallery, (h, w))
    }

    /// Head sizes taken from the data.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        m.fr.synthetic_classes = self.aux.num_classes().max(1);
        m.fr.native_classes = self.native_train.num_classes().max(1);
        m
    }

    pub fn evaluate(&self, model: &CsriModel<f32>, k: usize, meta: &ReportMeta) -> Result<EvalReport> {
        let p = extract_features(&self.probes, model)?;
        let g = extract_features(&self.gallery, model)?;
        evaluate(&p, &g, &self.truth, k, meta)
    }
}

/// Trains several variants; `joint_sr_fr` and `csri` share their identical
/// first stage.
pub fn train_variants(
    variants: &[Variant],
    base: &ModelConfig,
    bench: &Benchmark,
    cfg: &TrainConfig,
) -> Result<Vec<VariantRun<f32>>> {
    let mut shared: Option<(crate::trainer::TrainState<f32>, Vec<_>)> = None;
    let mut runs = Vec::new();
    for &variant in variants {
        let mut log = Vec::new();
        let joint_like = matches!(variant, Variant::JointSrFr | Variant::Csri);
        let stage1 = match (&shared, joint_like) {
            (Some((s, l)), true) => {
                log = l.clone();
                s.clone()
            }
            _ => {
                let s = start_variant(variant, base, &bench.aux, cfg, &mut log)?;
                if joint_like {
                    shared = Some((s.clone(), log.clone()));
                }
                s
            }
        };
        let last = finish_variant(variant, &stage1, &bench.aux, &bench.native_train, cfg, &mut log)?;
        runs.push(VariantRun {
            variant,
            stage1,
            last,
            log,
        });
    }
    Ok(runs)
}

fn load_manifest(cfg: &ExperimentConfig) -> Result<SplitManifest> {
    SplitManifest::load(&cfg.manifest_path())
}

/// Trains one variant and writes `stage1.ckpt`, `stage2.ckpt` and `losses.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, variant: Variant) -> Result<VariantRun<f32>> {
    cfg.validate()?;
    let manifest = load_manifest(cfg)?;
    let bench = Benchmark::load(cfg, &manifest)?;
    let base = bench.model_config(&cfg.model);
    let mut train = cfg.train.clone();
    train.variant = variant;
    let run = train_variants(&[variant], &base, &bench, &train)?.remove(0);
    let dir = cfg.checkpoint_dir(variant);
    let hash = cfg.hash();
    for (stage, state) in [(1, &run.stage1), (2, &run.last)] {
        let meta = CheckpointMeta {
            config_hash: hash.clone(),
            variant,
            stage,
        };
        save_checkpoint(&dir.join(format!("stage{stage}.ckpt")), state, &meta)?;
    }
    write_loss_csv(&run.log, &dir.join("losses.csv"))?;
    log::info!("trained {variant}: {} steps", run.log.len());
    Ok(run)
}

/// Evaluates a checkpoint (default: the variant's final one) on the test split.
pub fn cmd_eval(cfg: &ExperimentConfig, variant: Variant, checkpoint: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let path = checkpoint.map_or_else(|| cfg.checkpoint_dir(variant).join("stage2.ckpt"), Path::to_path_buf);
    let (meta, state) = load_checkpoint::<f32>(&path)?;
    let manifest = load_manifest(cfg)?;
    let bench = Benchmark::load(cfg, &manifest)?;
    let report = bench.evaluate(
        &state.model,
        cfg.eval.k,
        &ReportMeta {
            seed: cfg.seed,
            config_hash: meta.config_hash,
            variant: meta.variant.to_string(),
        },
    )?;
    write_report(&report, &cfg.report_dir(meta.variant))?;
    Ok(report)
}

/// Full-scale reference rank-1 values for the compared variants.
pub fn reference_rank1(variant: Variant) -> Option<f64> {
    match variant {
        Variant::IndependentSrFr => Some(26.0),
        Variant::JointSrFr => Some(36.1),
        Variant::Csri => Some(44.8),
        Variant::FrOnly => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub rank1: f64,
    pub rank20: f64,
    pub rank50: f64,
    pub map: f64,
}

/// Per-variant rows (percent) followed by the highlighted pairwise deltas.
pub fn comparison_rows(reports: &BTreeMap<Variant, EvalReport>, order: &[Variant]) -> Vec<ComparisonRow> {
    let pct = |r: &EvalReport| [r.rank1 * 100.0, r.rank20 * 100.0, r.rank50 * 100.0, r.map * 100.0];
    let mut rows: Vec<ComparisonRow> = order
        .iter()
        .filter_map(|v| reports.get(v).map(|r| (v, pct(r))))
        .map(|(v, [a, b, c, d])| ComparisonRow {
            label: v.to_string(),
            rank1: a,
            rank20: b,
            rank50: c,
            map: d,
        })
        .collect();
    for (hi, lo) in [(Variant::JointSrFr, Variant::IndependentSrFr), (Variant::Csri, Variant::JointSrFr)] {
        let find = |v: Variant| rows.iter().find(|r| r.label == v.as_str()).cloned();
        if let (Some(a), Some(b)) = (find(hi), find(lo)) {
            rows.push(ComparisonRow {
                label: format!("{hi} - {lo}"),
                rank1: a.rank1 - b.rank1,
                rank20: a.rank20 - b.rank20,
                rank50: a.rank50 - b.rank50,
                map: a.map - b.map,
            });
        }
    }
    rows
}

/// Writes `reports/comparison.txt` and `reports/comparison.csv`.
pub fn cmd_compare(cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let mut reports = BTreeMap::new();
    for &v in &cfg.compare.variants {
        let path = cfg.report_dir(v).join("report.json");
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        reports.insert(v, read_report(&path)?);
    }
    let rows = comparison_rows(&reports, &cfg.compare.variants);
    let dir = cfg.paths.workspace.join("reports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let mut text = String::new();
    let _ = writeln!(text, "config {}", cfg.hash());
    let _ = writeln!(text, "{:<36} {:>8} {:>8} {:>8} {:>8}", "variant", "rank1", "rank20", "rank50", "mAP");
    for r in &rows {
        let _ = writeln!(
            text,
            "{:<36} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
            r.label, r.rank1, r.rank20, r.rank50, r.map
        );
    }
    let _ = writeln!(text, "\nreference rank-1 on the full-scale native benchmark:");
    for &v in &cfg.compare.variants {
        if let Some(r) = reference_rank1(v) {
            let _ = writeln!(text, "{:<36} {:>8.1}", v.as_str(), r);
        }
    }
    let path = dir.join("comparison.txt");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;

    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    w.write_record(["variant", "rank1", "rank20", "rank50", "map"])
        .map_err(|e| Error::io(&path, e.into()))?;
    for r in &rows {
        w.write_record([
            r.label.clone(),
            r.rank1.to_string(),
            r.rank20.to_string(),
            r.rank50.to_string(),
            r.map.to_string(),
        ])
        .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.lambda_sr = 12.288;
        cfg.compare.variants = vec![Variant::FrOnly, Variant::Csri];
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        cfg.seed = 1;
        assert_ne!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ExperimentConfig::from_toml("sede = 3"), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("[train]\nvariant = \"semi\"").is_err());
    }

    #[test]
    fn deltas_are_differences_of_rows() {
        let rep = |r1: f64| EvalReport {
            rank1: r1,
            rank20: 0.5,
            rank50: 0.75,
            map: r1 / 2.0,
            cmc: vec![r1],
            average_precisions: vec![],
            k: 1,
            probe_count: 1,
            gallery_size: 1,
            distractor_count: 0,
            seed: 0,
            config_hash: String::new(),
            variant: String::new(),
            pr: vec![],
        };
        let mut m = BTreeMap::new();
        m.insert(Variant::IndependentSrFr, rep(0.26));
        m.insert(Variant::JointSrFr, rep(0.361));
        m.insert(Variant::Csri, rep(0.448));
        let order = [Variant::IndependentSrFr, Variant::JointSrFr, Variant::Csri];
        let rows = comparison_rows(&m, &order);
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[3].rank1, rows[1].rank1 - rows[0].rank1);
        assert_eq!(rows[4].map, rows[2].map - rows[1].map);
        assert_eq!(rows[3].label, "joint_sr_fr - independent_sr_fr");
    }

    #[test]
    fn reference_deltas() {
        let d = |a, b| reference_rank1(a).unwrap() - reference_rank1(b).unwrap();
        assert!((d(Variant::JointSrFr, Variant::IndependentSrFr) - 10.1).abs() < 1e-9);
        assert!((d(Variant::Csri, Variant::JointSrFr) - 8.7).abs() < 1e-9);
    }
}

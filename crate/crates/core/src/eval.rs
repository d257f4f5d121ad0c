//! 1:N identification: Euclidean ranking, CMC, per-probe average precision
//! and mAP.

use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reported rank cut-off unless configured otherwise.
pub const DEFAULT_K: usize = 50;

/// One probe's gallery ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedRow {
    /// Gallery indices, nearest first; ties in ascending index order.
    pub order: Vec<usize>,
    /// Distances aligned with `order`.
    pub distances: Vec<f64>,
}

pub fn euclidean<F: Scalar>(a: &Array1<F>, b: &Array1<F>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub fn rank_gallery<F: Scalar>(probe: &Array1<F>, gallery: &[Array1<F>]) -> Result<RankedRow> {
    if gallery.is_empty() {
        return Err(Error::InvalidInput("gallery is empty".into()));
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != probe.len()) {
        return Err(Error::Shape(format!(
            "probe has dimension {} but a gallery item has {}",
            probe.len(),
            g.len()
        )));
    }
    let dist: Vec<f64> = gallery.iter().map(|g| euclidean(probe, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    // stable sort keeps index order among equal distances
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    let distances = order.iter().map(|&i| dist[i]).collect();
    Ok(RankedRow { order, distances })
}

/// Identity labels of probes and gallery items; distractors carry `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub probe_labels: Vec<u32>,
    pub gallery_labels: Vec<Option<u32>>,
}

impl Truth {
    pub fn is_match(&self, probe: usize, gallery: usize) -> bool {
        self.gallery_labels[gallery] == Some(self.probe_labels[probe])
    }

    pub fn distractor_count(&self) -> usize {
        self.gallery_labels.iter().filter(|l| l.is_none()).count()
    }
}

/// 1-based positions of the true matches in a ranking.
fn hit_ranks(row: &RankedRow, truth: &Truth, probe: usize) -> Result<Vec<usize>> {
    let hits: Vec<usize> = row
        .order
        .iter()
        .enumerate()
        .filter(|(_, &g)| truth.is_match(probe, g))
        .map(|(pos, _)| pos + 1)
        .collect();
    if hits.is_empty() {
        return Err(Error::Protocol(format!(
            "probe {probe} (identity {}) has no true match in the gallery",
            truth.probe_labels[probe]
        )));
    }
    Ok(hits)
}

/// `cmc[k-1]` is the fraction of probes whose best true match ranks `<= k`.
/// `k` beyond the gallery size is truncated with a warning.
pub fn cmc_curve(rankings: &[RankedRow], truth: &Truth, k: usize) -> Result<Vec<f64>> {
    if rankings.len() != truth.probe_labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} rankings for {} probes",
            rankings.len(),
            truth.probe_labels.len()
        )));
    }
    if rankings.is_empty() {
        return Err(Error::InvalidInput("no probes".into()));
    }
    let gallery = rankings[0].order.len();
    let k = effective_k(k, gallery)?;
    let mut first_hit = vec![0usize; k + 1];
    for (p, row) in rankings.iter().enumerate() {
        let best = hit_ranks(row, truth, p)?[0];
        if best <= k {
            first_hit[best] += 1;
        }
    }
    let n = rankings.len() as f64;
    let mut acc = 0usize;
    Ok((1..=k)
        .map(|r| {
            acc += first_hit[r];
            acc as f64 / n
        })
        .collect())
}

fn effective_k(k: usize, gallery: usize) -> Result<usize> {
    if k == 0 {
        return Err(Error::InvalidInput("K must be at least 1".into()));
    }
    if k > gallery {
        log::warn!("K={k} exceeds the gallery size {gallery}; truncating the CMC curve at {gallery}");
        return Ok(gallery);
    }
    Ok(k)
}

/// Non-interpolated AP: the mean of precision@k over the true-match positions.
pub fn average_precision(row: &RankedRow, truth: &Truth, probe: usize) -> Result<f64> {
    let hits = hit_ranks(row, truth, probe)?;
    let sum: f64 = hits
        .iter()
        .enumerate()
        .map(|(i, &pos)| (i + 1) as f64 / pos as f64)
        .sum();
    Ok(sum / hits.len() as f64)
}

/// `(recall, precision)` at each true-match position of one probe.
pub fn pr_points(row: &RankedRow, truth: &Truth, probe: usize) -> Result<Vec<PrPoint>> {
    let hits = hit_ranks(row, truth, probe)?;
    let r = hits.len() as f64;
    Ok(hits
        .iter()
        .enumerate()
        .map(|(i, &pos)| PrPoint {
            probe,
            rank: pos,
            recall: (i + 1) as f64 / r,
            precision: (i + 1) as f64 / pos as f64,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub probe: usize,
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank20: f64,
    pub rank50: f64,
    pub map: f64,
    /// Match rate at ranks 1..=k.
    pub cmc: Vec<f64>,
    pub average_precisions: Vec<f64>,
    pub k: usize,
    pub probe_count: usize,
    pub gallery_size: usize,
    pub distractor_count: usize,
    pub seed: u64,
    pub config_hash: String,
    pub variant: String,
    #[serde(skip)]
    pub pr: Vec<PrPoint>,
}

impl EvalReport {
    /// CMC value at rank `r`; ranks past the curve take its final value.
    pub fn rank(&self, r: usize) -> f64 {
        cmc_at(&self.cmc, r)
    }
}

fn cmc_at(cmc: &[f64], r: usize) -> f64 {
    cmc[r.clamp(1, cmc.len()) - 1]
}

/// Provenance stamped into a report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportMeta {
    pub seed: u64,
    pub config_hash: String,
    pub variant: String,
}

pub fn evaluate<F: Scalar>(
    probes: &[Array1<F>],
    gallery: &[Array1<F>],
    truth: &Truth,
    k: usize,
    meta: &ReportMeta,
) -> Result<EvalReport> {
    if probes.len() != truth.probe_labels.len() || gallery.len() != truth.gallery_labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} probes / {} gallery embeddings but truth lists {} / {}",
            probes.len(),
            gallery.len(),
            truth.probe_labels.len(),
            truth.gallery_labels.len()
        )));
    }
    let rankings = probes
        .iter()
        .map(|p| rank_gallery(p, gallery))
        .collect::<Result<Vec<_>>>()?;
    let cmc = cmc_curve(&rankings, truth, k)?;
    let mut aps = Vec::with_capacity(probes.len());
    let mut pr = Vec::new();
    for (p, row) in rankings.iter().enumerate() {
        aps.push(average_precision(row, truth, p)?);
        pr.extend(pr_points(row, truth, p)?);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(EvalReport {
        rank1: cmc_at(&cmc, 1),
        rank20: cmc_at(&cmc, 20),
        rank50: cmc_at(&cmc, 50),
        map,
        k: cmc.len(),
        cmc,
        average_precisions: aps,
        probe_count: probes.len(),
        gallery_size: gallery.len(),
        distractor_count: truth.distractor_count(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        variant: meta.variant.clone(),
        pr,
    })
}

/// Writes `report.json`, `cmc.csv` and `pr.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    let path = dir.join("report.json");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

    let path = dir.join("cmc.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    w.write_record(["rank", "match_rate"]).map_err(|e| Error::io(&path, e.into()))?;
    for (i, v) in report.cmc.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])
            .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("pr.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::io(&path, e.into()))?;
    for p in &report.pr {
        w.serialize(p).map_err(|e| Error::io(&path, e.into()))?;
    }
    if report.pr.is_empty() {
        w.write_record(["probe", "rank", "recall", "precision"])
            .map_err(|e| Error::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

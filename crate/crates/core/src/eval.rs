//! Probe-gallery identification and attribute accuracy.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{AttributeLabels, Dataset, RangeTag, Sample, SilhouetteSequence, SmplSequence};
use crate::error::{Error, Result};
use crate::model::{ComboGait, Inference};
use crate::numerics::Tensor;

pub const MAX_RANK: usize = 10;

pub const REPORT_HEADER: [&str; 15] = [
    "scope", "rank1", "rank2", "rank3", "rank4", "rank5", "rank6", "rank7", "rank8", "rank9", "rank10", "accu_age",
    "accu_bmi", "accu_sex", "n_probes",
];

/// Sequences per forward pass during extraction.
const EXTRACT_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub subject_id: String,
    pub embedding: Vec<f32>,
}

fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Zero-based position of the first same-identity gallery entry when the
/// gallery is sorted by distance, ties kept in insertion order.
fn first_hit(probe: &GalleryEntry, gallery: &[GalleryEntry]) -> usize {
    let d: Vec<f64> = gallery.iter().map(|g| squared_distance(&probe.embedding, &g.embedding)).collect();
    let (m, dm) = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| g.subject_id == probe.subject_id)
        .map(|(j, _)| (j, d[j]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("probe identity checked against gallery");
    d.iter()
        .enumerate()
        .filter(|&(j, &dj)| dj < dm || (dj == dm && j < m))
        .count()
}

/// Rank-1..`maxrank` identification rates in percent.
pub fn cmc(probes: &[GalleryEntry], gallery: &[GalleryEntry], maxrank: usize) -> Result<Vec<f64>> {
    if gallery.is_empty() {
        return Err(Error::Protocol("gallery is empty".into()));
    }
    if probes.is_empty() {
        return Err(Error::Protocol("no probes".into()));
    }
    if maxrank == 0 {
        return Err(Error::validation("maxrank must be positive"));
    }
    let dim = gallery[0].embedding.len();
    for e in gallery.iter().chain(probes) {
        if e.embedding.len() != dim {
            return Err(Error::data(format!(
                "embedding of {} has length {}, expected {dim}",
                e.subject_id,
                e.embedding.len()
            )));
        }
        if e.embedding.iter().any(|x| !x.is_finite()) {
            return Err(Error::data(format!("non-finite embedding for {}", e.subject_id)));
        }
    }
    let mut missing: Vec<&str> = probes
        .iter()
        .map(|p| p.subject_id.as_str())
        .filter(|id| !gallery.iter().any(|g| g.subject_id == *id))
        .collect();
    if !missing.is_empty() {
        let mut seen = std::collections::HashSet::new();
        missing.retain(|id| seen.insert(*id));
        return Err(Error::Protocol(format!("probe identities absent from gallery: {}", missing.join(", "))));
    }
    let mut hits = vec![0usize; maxrank];
    for p in probes {
        let pos = first_hit(p, gallery);
        for h in hits.iter_mut().skip(pos) {
            *h += 1;
        }
    }
    Ok(hits.into_iter().map(|h| 100.0 * h as f64 / probes.len() as f64).collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttributeAccuracy {
    pub age: f64,
    pub bmi: f64,
    pub sex: f64,
}

/// Percent of exact class matches per task.
pub fn attribute_accuracy(preds: &[AttributeLabels], labels: &[AttributeLabels]) -> Result<AttributeAccuracy> {
    if preds.len() != labels.len() {
        return Err(Error::data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::data("attribute accuracy of an empty set"));
    }
    let n = preds.len() as f64;
    let pct = |f: fn(&AttributeLabels) -> usize| {
        100.0 * preds.iter().zip(labels).filter(|(p, l)| f(p) == f(l)).count() as f64 / n
    };
    Ok(AttributeAccuracy {
        age: pct(|l| l.age),
        bmi: pct(|l| l.bmi),
        sex: pct(|l| l.sex),
    })
}

/// Eval-mode embedding and attribute predictions for one sequence pair.
pub fn extract_embedding(model: &mut ComboGait<f32>, sil: &SilhouetteSequence, smpl: &SmplSequence) -> Result<Inference> {
    if sil.frames() != smpl.frames() {
        return Err(Error::data(format!(
            "{} silhouette frames but {} SMPL frames",
            sil.frames(),
            smpl.frames()
        )));
    }
    let x = Tensor::new(
        &[1, sil.frames(), sil.height(), sil.width()],
        sil.pixels().iter().map(|&p| p as f32).collect(),
    )?;
    let y = Tensor::new(&[1, smpl.frames(), smpl.dim()], smpl.values().to_vec())?;
    Ok(model.infer_batch(&x, &y)?.remove(0))
}

/// Full-length inference over every sample; consecutive samples of equal
/// length share a forward pass.
pub fn infer_dataset(model: &mut ComboGait<f32>, ds: &Dataset) -> Result<Vec<Inference>> {
    let mut out = Vec::with_capacity(ds.len());
    let mut i = 0;
    while i < ds.len() {
        let frames = ds.samples[i].sil.frames();
        let mut j = i + 1;
        while j < ds.len() && j - i < EXTRACT_BATCH && ds.samples[j].sil.frames() == frames {
            j += 1;
        }
        let idx: Vec<usize> = (i..j).collect();
        let batch = ds.batch(&idx, &vec![0; idx.len()], frames);
        out.extend(model.infer_batch(&batch.sil, &batch.smpl)?);
        i = j;
    }
    Ok(out)
}

/// How a manifest is divided into gallery and probes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// First sequence of each subject is the gallery, the rest are probes.
    FirstAsGallery,
    /// First `train`-split sequence of each subject is the gallery; every
    /// row outside the `train` split is a probe.
    TrainGallery,
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(Protocol::FirstAsGallery),
            "train-gallery" => Ok(Protocol::TrainGallery),
            _ => Err(Error::validation(format!("unknown protocol {s:?} (first, train-gallery)"))),
        }
    }

    /// `(gallery, probes)` sample indices.
    pub fn partition(self, samples: &[Sample]) -> (Vec<usize>, Vec<usize>) {
        let mut seen = std::collections::HashSet::new();
        let mut gallery = Vec::new();
        let mut probes = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            let eligible = match self {
                Protocol::FirstAsGallery => true,
                Protocol::TrainGallery => s.row.split == "train",
            };
            if eligible && seen.insert(s.subject) {
                gallery.push(i);
            } else if self == Protocol::FirstAsGallery || s.row.split != "train" {
                probes.push(i);
            }
        }
        (gallery, probes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    /// `all` or a range tag.
    pub scope: String,
    pub cmc: Vec<f64>,
    pub accuracy: AttributeAccuracy,
    pub n_probes: usize,
}

/// The overall row followed by one row per non-empty range group.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn overall(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn range(&self, tag: RangeTag) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.scope == tag.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut s = REPORT_HEADER.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.scope);
            for v in &r.cmc {
                let _ = write!(s, ",{v:.4}");
            }
            let a = r.accuracy;
            let _ = writeln!(s, ",{:.4},{:.4},{:.4},{}", a.age, a.bmi, a.sex, r.n_probes);
        }
        s
    }
}

/// A probe with its embedding, predictions, truth, and range group.
#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub entry: GalleryEntry,
    pub predicted: AttributeLabels,
    pub truth: AttributeLabels,
    pub range: RangeTag,
}

fn report_row(scope: &str, probes: &[&ProbeResult], gallery: &[GalleryEntry]) -> Result<ReportRow> {
    let entries: Vec<GalleryEntry> = probes.iter().map(|p| p.entry.clone()).collect();
    let preds: Vec<AttributeLabels> = probes.iter().map(|p| p.predicted).collect();
    let truth: Vec<AttributeLabels> = probes.iter().map(|p| p.truth).collect();
    Ok(ReportRow {
        scope: scope.into(),
        cmc: cmc(&entries, gallery, MAX_RANK)?,
        accuracy: attribute_accuracy(&preds, &truth)?,
        n_probes: probes.len(),
    })
}

/// CMC and attribute accuracy over all probes, then per range tag in
/// close-to-far order. Empty range groups are skipped.
pub fn per_range_report(probes: &[ProbeResult], gallery: &[GalleryEntry]) -> Result<EvalReport> {
    let all: Vec<&ProbeResult> = probes.iter().collect();
    let mut rows = vec![report_row("all", &all, gallery)?];
    for tag in RangeTag::ALL {
        let group: Vec<&ProbeResult> = probes.iter().filter(|p| p.range == tag).collect();
        if group.is_empty() {
            log::warn!("no probes at range {}; row omitted", tag.as_str());
            continue;
        }
        rows.push(report_row(tag.as_str(), &group, gallery)?);
    }
    Ok(EvalReport { rows })
}

fn predicted(inf: &Inference) -> AttributeLabels {
    AttributeLabels {
        age: inf.age,
        sex: inf.sex,
        bmi: inf.bmi,
    }
}

fn probe_results(ds: &Dataset, infs: &[Inference], idx: &[usize]) -> Vec<ProbeResult> {
    idx.iter()
        .map(|&i| ProbeResult {
            entry: GalleryEntry {
                subject_id: ds.samples[i].row.subject_id.clone(),
                embedding: infs[i].embedding.clone(),
            },
            predicted: predicted(&infs[i]),
            truth: ds.samples[i].labels,
            range: ds.samples[i].row.range_tag,
        })
        .collect()
}

fn entries(ds: &Dataset, infs: &[Inference], idx: &[usize]) -> Vec<GalleryEntry> {
    idx.iter()
        .map(|&i| GalleryEntry {
            subject_id: ds.samples[i].row.subject_id.clone(),
            embedding: infs[i].embedding.clone(),
        })
        .collect()
}

/// Splits one loaded dataset by `protocol` and reports on it.
pub fn evaluate_dataset(model: &mut ComboGait<f32>, ds: &Dataset, protocol: Protocol) -> Result<EvalReport> {
    let infs = infer_dataset(model, ds)?;
    let (g, p) = protocol.partition(&ds.samples);
    per_range_report(&probe_results(ds, &infs, &p), &entries(ds, &infs, &g))
}

/// Every row of `probes` matched against every row of `gallery`.
pub fn evaluate_against(model: &mut ComboGait<f32>, probes: &Dataset, gallery: &Dataset) -> Result<EvalReport> {
    let pi = infer_dataset(model, probes)?;
    let gi = infer_dataset(model, gallery)?;
    let all_p: Vec<usize> = (0..probes.len()).collect();
    let all_g: Vec<usize> = (0..gallery.len()).collect();
    per_range_report(&probe_results(probes, &pi, &all_p), &entries(gallery, &gi, &all_g))
}

/// Loads `manifest` (and `gallery`, when given) and evaluates.
pub fn evaluate(
    model: &mut ComboGait<f32>,
    manifest: &Path,
    gallery: Option<&Path>,
    protocol: Protocol,
) -> Result<EvalReport> {
    let ds = Dataset::load(manifest, |_| true)?;
    match gallery {
        Some(g) => {
            let gds = Dataset::load(g, |_| true)?;
            evaluate_against(model, &ds, &gds)
        }
        None => evaluate_dataset(model, &ds, protocol),
    }
}

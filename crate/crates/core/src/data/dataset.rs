//! On-disk synthetic datasets and P×K batch sampling.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use super::formats::{SilhouetteSequence, SmplSequence, SMPL_DIM};
use super::labels::AttributeLabels;
use super::manifest::{Manifest, ManifestRow, RangeTag};
use super::synth::{generate_subject, render_sequence, sequence_rng, RenderOptions};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub seed: u64,
    pub subjects: usize,
    pub seqs_per_subject: usize,
    pub frames: usize,
    /// Trailing subjects whose sequences all go to the `test` split.
    pub test_subjects: usize,
    /// Trailing sequences of each training subject put in the `probe` split.
    pub probe_seqs: usize,
    /// Assigned to sequences cyclically.
    pub ranges: Vec<RangeTag>,
    /// Walking directions in degrees, assigned to sequences cyclically.
    pub views_deg: Vec<u32>,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            subjects: 4,
            seqs_per_subject: 4,
            frames: 30,
            test_subjects: 0,
            probe_seqs: 0,
            ranges: vec![RangeTag::Close],
            views_deg: vec![0, 30],
        }
    }
}

/// Renders every subject's sequences into `out` and writes `manifest.csv`.
pub fn generate_dataset(opts: &GenerateOptions, out: &Path) -> Result<Manifest> {
    if opts.subjects == 0 || opts.seqs_per_subject == 0 || opts.frames == 0 {
        return Err(Error::validation("generate needs positive subjects, sequences, frames"));
    }
    if opts.ranges.is_empty() || opts.views_deg.is_empty() {
        return Err(Error::validation("generate needs at least one range and one view"));
    }
    std::fs::create_dir_all(out.join("sil"))?;
    std::fs::create_dir_all(out.join("smpl"))?;
    let mut rows = Vec::with_capacity(opts.subjects * opts.seqs_per_subject);
    for s in 0..opts.subjects {
        let (meta, sig) = generate_subject(opts.seed, s);
        let test_subject = s + opts.test_subjects >= opts.subjects;
        for q in 0..opts.seqs_per_subject {
            let range = opts.ranges[(s + q) % opts.ranges.len()];
            let view = opts.views_deg[q % opts.views_deg.len()];
            let ro = RenderOptions {
                frames: opts.frames,
                view_angle: (view as f64).to_radians(),
                noise: range.noise(),
            };
            let (sil, smpl) = render_sequence(&sig, &ro, &mut sequence_rng(opts.seed, s, q));
            let sil_rel = format!("sil/{}_{q:02}.cgsl", meta.subject_id);
            let smpl_rel = format!("smpl/{}_{q:02}.cgsm", meta.subject_id);
            sil.write(&out.join(&sil_rel))?;
            smpl.write(&out.join(&smpl_rel))?;
            let split = if test_subject {
                "test"
            } else if q + opts.probe_seqs >= opts.seqs_per_subject {
                "probe"
            } else {
                "train"
            };
            rows.push(ManifestRow {
                subject_id: meta.subject_id.clone(),
                sequence_path: sil_rel,
                smpl_path: smpl_rel,
                split: split.into(),
                age: meta.age,
                sex: meta.sex,
                height_in: meta.height_in,
                weight_lb: meta.weight_lb,
                bmi: meta.bmi,
                view_tag: format!("{view:03}"),
                range_tag: range,
            });
        }
    }
    let manifest = Manifest { rows };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub row: ManifestRow,
    /// Index into `Dataset::subjects`.
    pub subject: usize,
    pub labels: AttributeLabels,
    pub sil: SilhouetteSequence,
    pub smpl: SmplSequence,
}

/// Loaded sequences with subjects indexed in first-appearance order.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub subjects: Vec<String>,
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

impl Dataset {
    /// Loads the rows of `manifest_path` accepted by `keep`.
    pub fn load(manifest_path: &Path, keep: impl Fn(&ManifestRow) -> bool) -> Result<Self> {
        let manifest = Manifest::read(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        Self::from_manifest(&manifest, root, keep)
    }

    pub fn from_manifest(manifest: &Manifest, root: &Path, keep: impl Fn(&ManifestRow) -> bool) -> Result<Self> {
        let mut ds = Dataset::default();
        for row in manifest.rows.iter().filter(|r| keep(r)) {
            let sil = SilhouetteSequence::read(&resolve(root, &row.sequence_path))?;
            let smpl = SmplSequence::read(&resolve(root, &row.smpl_path))?;
            ds.push(row.clone(), sil, smpl)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, row: ManifestRow, sil: SilhouetteSequence, smpl: SmplSequence) -> Result<()> {
        if sil.frames() != smpl.frames() {
            return Err(Error::data(format!(
                "{}: {} silhouette frames but {} SMPL frames",
                row.sequence_path,
                sil.frames(),
                smpl.frames()
            )));
        }
        if smpl.dim() != SMPL_DIM {
            return Err(Error::data(format!("{}: SMPL dimension {}", row.smpl_path, smpl.dim())));
        }
        if let Some(first) = self.samples.first() {
            if (first.sil.height(), first.sil.width()) != (sil.height(), sil.width()) {
                return Err(Error::data(format!("{}: frame size differs from the dataset", row.sequence_path)));
            }
        }
        let labels = row.meta().labels().map_err(|e| Error::Label(format!("{}: {e}", row.subject_id)))?;
        let subject = match self.subjects.iter().position(|s| *s == row.subject_id) {
            Some(i) => i,
            None => {
                self.subjects.push(row.subject_id.clone());
                self.subjects.len() - 1
            }
        };
        self.samples.push(Sample {
            row,
            subject,
            labels,
            sil,
            smpl,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by subject index.
    pub fn by_subject(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.subjects.len()];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.subject].push(i);
        }
        groups
    }

    /// `frames` consecutive frames of sample `i` from `start`, wrapping.
    pub fn window(&self, i: usize, start: usize, frames: usize) -> (Vec<f32>, Vec<f32>) {
        let s = &self.samples[i];
        let n = s.sil.frames();
        let mut sil = Vec::with_capacity(frames * s.sil.height() * s.sil.width());
        let mut smpl = Vec::with_capacity(frames * SMPL_DIM);
        for k in 0..frames {
            let t = (start + k) % n;
            sil.extend(s.sil.frame(t).iter().map(|&p| p as f32));
            smpl.extend_from_slice(s.smpl.frame(t));
        }
        (sil, smpl)
    }

    /// Stacks whole windows of `indices` into `(B,T,H,W)` and `(B,T,82)`.
    pub fn batch(&self, indices: &[usize], starts: &[usize], frames: usize) -> Batch {
        let first = &self.samples[indices[0]].sil;
        let (h, w) = (first.height(), first.width());
        let mut sil = Vec::new();
        let mut smpl = Vec::new();
        for (&i, &st) in indices.iter().zip(starts) {
            let (a, b) = self.window(i, st, frames);
            sil.extend(a);
            smpl.extend(b);
        }
        let b = indices.len();
        Batch {
            sil: Tensor::new(&[b, frames, h, w], sil).expect("batch geometry"),
            smpl: Tensor::new(&[b, frames, SMPL_DIM], smpl).expect("batch geometry"),
            ids: indices.iter().map(|&i| self.samples[i].subject).collect(),
            labels: indices.iter().map(|&i| self.samples[i].labels).collect(),
            samples: indices.to_vec(),
        }
    }

    /// P subjects without replacement, K sequences each (with replacement
    /// when a subject has fewer), random wrap-around windows of `frames`.
    pub fn sample_batch(&self, p: usize, k: usize, frames: usize, rng: &mut impl Rng) -> Result<Batch> {
        let groups = self.by_subject();
        if groups.len() < p {
            return Err(Error::data(format!("batch needs {p} subjects, dataset has {}", groups.len())));
        }
        let mut subjects: Vec<usize> = (0..groups.len()).collect();
        subjects.shuffle(rng);
        subjects.truncate(p);
        let mut indices = Vec::with_capacity(p * k);
        for &s in &subjects {
            let g = &groups[s];
            if g.len() >= k {
                indices.extend(g.choose_multiple(rng, k).copied());
            } else {
                indices.extend((0..k).map(|_| *g.choose(rng).expect("nonempty group")));
            }
        }
        let starts: Vec<usize> = indices
            .iter()
            .map(|&i| rng.random_range(0..self.samples[i].sil.frames()))
            .collect();
        Ok(self.batch(&indices, &starts, frames))
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub sil: Tensor<f32>,
    pub smpl: Tensor<f32>,
    /// Subject index per row.
    pub ids: Vec<usize>,
    pub labels: Vec<AttributeLabels>,
    pub samples: Vec<usize>,
}

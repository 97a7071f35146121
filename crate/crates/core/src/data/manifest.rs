//! Sequence manifest CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::labels::{Sex, SubjectMeta};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: [&str; 11] = [
    "subject_id",
    "sequence_path",
    "smpl_path",
    "split",
    "age",
    "sex",
    "height_in",
    "weight_lb",
    "bmi",
    "view_tag",
    "range_tag",
];

/// Capture distance bucket; the order of `ALL` is the report row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RangeTag {
    #[serde(rename = "close")]
    Close,
    #[serde(rename = "100m")]
    M100,
    #[serde(rename = "200m")]
    M200,
    #[serde(rename = "400m")]
    M400,
    #[serde(rename = "500m")]
    M500,
    #[serde(rename = "600m")]
    M600,
    #[serde(rename = "1000m")]
    M1000,
}

impl RangeTag {
    pub const ALL: [RangeTag; 7] = [
        RangeTag::Close,
        RangeTag::M100,
        RangeTag::M200,
        RangeTag::M400,
        RangeTag::M500,
        RangeTag::M600,
        RangeTag::M1000,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RangeTag::Close => "close",
            RangeTag::M100 => "100m",
            RangeTag::M200 => "200m",
            RangeTag::M400 => "400m",
            RangeTag::M500 => "500m",
            RangeTag::M600 => "600m",
            RangeTag::M1000 => "1000m",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown range tag {s:?}")))
    }

    pub fn meters(self) -> f64 {
        match self {
            RangeTag::Close => 10.0,
            RangeTag::M100 => 100.0,
            RangeTag::M200 => 200.0,
            RangeTag::M400 => 400.0,
            RangeTag::M500 => 500.0,
            RangeTag::M600 => 600.0,
            RangeTag::M1000 => 1000.0,
        }
    }

    /// Mask pixel-flip probability used by the generator.
    pub fn noise(self) -> f64 {
        match self {
            RangeTag::Close => 0.0,
            r => 0.1 * r.meters() / 1000.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub subject_id: String,
    /// Relative to the manifest's directory unless absolute.
    pub sequence_path: String,
    pub smpl_path: String,
    pub split: String,
    pub age: f64,
    pub sex: Sex,
    pub height_in: f64,
    pub weight_lb: f64,
    pub bmi: f64,
    pub view_tag: String,
    pub range_tag: RangeTag,
}

impl ManifestRow {
    pub fn meta(&self) -> SubjectMeta {
        SubjectMeta {
            subject_id: self.subject_id.clone(),
            age: self.age,
            sex: self.sex,
            height_in: self.height_in,
            weight_lb: self.weight_lb,
            bmi: self.bmi,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().ne(MANIFEST_HEADER.iter().copied()) {
            return Err(Error::validation(format!(
                "manifest header {:?} does not match {:?}",
                header.iter().collect::<Vec<_>>(),
                MANIFEST_HEADER
            )));
        }
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn to_writer(&self, w: impl std::io::Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        if self.rows.is_empty() {
            wtr.write_record(MANIFEST_HEADER)?;
        }
        for row in &self.rows {
            wtr.serialize(row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        Ok(std::fs::write(path, buf)?)
    }

    /// Distinct subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.subject_id.as_str()))
            .map(|r| r.subject_id.as_str())
            .collect()
    }

    /// Distinct subjects per split, splits in first-appearance order.
    pub fn split_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, std::collections::HashSet<&str>)> = Vec::new();
        for r in &self.rows {
            match out.iter_mut().find(|(s, _)| *s == r.split) {
                Some((_, set)) => {
                    set.insert(&r.subject_id);
                }
                None => out.push((r.split.clone(), [r.subject_id.as_str()].into())),
            }
        }
        out.into_iter().map(|(s, set)| (s, set.len())).collect()
    }
}

//! Subject metadata and the class bins used as attribute targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const AGE_RANGE: (f64, f64) = (18.0, 85.0);
pub const HEIGHT_RANGE_IN: (f64, f64) = (52.0, 81.0);
pub const WEIGHT_RANGE_LB: (f64, f64) = (93.0, 438.0);
pub const BMI_RANGE: (f64, f64) = (14.23, 68.65);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn class(self) -> usize {
        match self {
            Sex::Female => 0,
            Sex::Male => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "female" => Ok(Sex::Female),
            "male" => Ok(Sex::Male),
            _ => Err(Error::validation(format!("unknown sex {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMeta {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub height_in: f64,
    pub weight_lb: f64,
    pub bmi: f64,
}

impl SubjectMeta {
    pub fn labels(&self) -> Result<AttributeLabels> {
        Ok(AttributeLabels {
            age: bin_age(self.age)?,
            sex: self.sex.class(),
            bmi: bin_bmi(self.bmi)?,
        })
    }
}

/// Class targets `(age, sex, bmi)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AttributeLabels {
    pub age: usize,
    pub sex: usize,
    pub bmi: usize,
}

/// BMI from inches and pounds.
pub fn bmi_from_imperial(weight_lb: f64, height_in: f64) -> f64 {
    703.0 * weight_lb / (height_in * height_in)
}

/// Left-closed 20-year bins anchored at 0; everything from 80 up is class 4.
pub fn bin_age(age: f64) -> Result<usize> {
    if !(age >= 0.0) || !age.is_finite() {
        return Err(Error::validation(format!("age must be a nonnegative number, got {age}")));
    }
    Ok(((age / 20.0).floor() as usize).min(4))
}

/// Underweight / healthy / overweight / obese at 18.5, 25, 30.
pub fn bin_bmi(bmi: f64) -> Result<usize> {
    if !(bmi > 0.0) || !bmi.is_finite() {
        return Err(Error::validation(format!("bmi must be positive, got {bmi}")));
    }
    Ok(match bmi {
        b if b < 18.5 => 0,
        b if b < 25.0 => 1,
        b if b < 30.0 => 2,
        _ => 3,
    })
}

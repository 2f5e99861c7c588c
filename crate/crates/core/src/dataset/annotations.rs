use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Malignancy {
    Benign,
    Malignant,
}

impl Malignancy {
    pub fn index(self) -> usize {
        match self {
            Self::Benign => 0,
            Self::Malignant => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Benign),
            1 => Some(Self::Malignant),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Benign => "benign",
            Self::Malignant => "malignant",
        }
    }

    /// Median radiologist score convention: 4 and 5 are malignant, 1 and 2
    /// benign, 3 is indeterminate.
    pub fn from_median_score(score: f64) -> Option<Self> {
        if score >= 4.0 {
            Some(Self::Malignant)
        } else if score <= 2.0 {
            Some(Self::Benign)
        } else {
            None
        }
    }
}

/// One annotated nodule. `center` is in world millimetres, `(z, y, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleAnnotation {
    pub series_id: String,
    pub center: [f64; 3],
    pub diameter: f64,
    pub malignancy: Option<Malignancy>,
}

impl NoduleAnnotation {
    pub fn radius(&self) -> f64 {
        0.5 * self.diameter
    }
}

const REQUIRED: [&str; 5] = ["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm"];

fn parse_label(s: &str) -> Option<Option<Malignancy>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "" => Some(None),
        "benign" | "0" => Some(Some(Malignancy::Benign)),
        "malignant" | "1" => Some(Some(Malignancy::Malignant)),
        _ => None,
    }
}

/// Parse a LUNA16-style annotations CSV. Optional columns: `malignancy`
/// (`benign`/`malignant`/`0`/`1`) or `malignancy_score` (median rating 1-5).
pub fn parse_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let idx: Vec<usize> = REQUIRED.iter().map(|n| col(n).ok_or_else(|| Error::MissingColumn(n.to_string()))).collect::<Result<_>>()?;
    let label_col = col("malignancy");
    let score_col = col("malignancy_score");

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize| -> Result<f64> {
            let s = field(c);
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::AnnotationRow { row, message: format!("`{s}` in column {} is not a number", headers.get(c).unwrap_or("?")) })
        };
        let (x, y, z, d) = (num(idx[1])?, num(idx[2])?, num(idx[3])?, num(idx[4])?);
        if d <= 0.0 {
            return Err(Error::AnnotationRow { row, message: format!("diameter must be positive, got {d}") });
        }
        let mut malignancy = None;
        if let Some(c) = label_col {
            malignancy = parse_label(field(c)).ok_or_else(|| Error::AnnotationRow { row, message: format!("unknown malignancy `{}`", field(c)) })?;
        }
        if let Some(c) = score_col {
            if !field(c).is_empty() {
                malignancy = Malignancy::from_median_score(num(c)?);
            }
        }
        out.push(NoduleAnnotation { series_id: field(idx[0]).to_string(), center: [z, y, x], diameter: d, malignancy });
    }
    Ok(out)
}

/// Write annotations with a `malignancy` column, coordinates as `x, y, z`.
pub fn write_annotations(path: &Path, annotations: &[NoduleAnnotation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["seriesuid", "coordX", "coordY", "coordZ", "diameter_mm", "malignancy"])?;
    for a in annotations {
        let [z, y, x] = a.center;
        w.write_record([
            a.series_id.clone(),
            x.to_string(),
            y.to_string(),
            z.to_string(),
            a.diameter.to_string(),
            a.malignancy.map_or(String::new(), |m| m.as_str().to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

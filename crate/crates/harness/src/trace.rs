//! Cluster-style CSV traces → instances.
//!
//! Expected schema: a header row naming at least a value column and a class
//! column. Class cells hold one or more 1-based class indices separated by
//! `;`, `|` or spaces. An optional units column holds the number of units a
//! row requests; it is rounded up and the row is split into that many unit
//! requests. Raw values are mapped by `v = offset + scale · raw` and then
//! clamped into `[1, min θ over the row's classes]`.

use std::io::Read;

use omcs::{Agent, Instance, LabelSet, ProblemParams};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceColumns {
    pub value: String,
    pub class: String,
    #[serde(default)]
    pub units: Option<String>,
}

impl Default for TraceColumns {
    fn default() -> Self {
        TraceColumns {
            value: "value".into(),
            class: "class".into(),
            units: None,
        }
    }
}

/// Affine value map `offset + scale · raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueMap {
    pub scale: f64,
    pub offset: f64,
}

impl Default for ValueMap {
    fn default() -> Self {
        ValueMap {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows: usize,
    pub agents: usize,
    pub clamped: usize,
    /// Rows that were split into more than one unit request.
    pub split: usize,
    /// Rows dropped under `skip_bad`, with 1-based data-row indices.
    pub skipped: Vec<(usize, String)>,
}

pub fn ingest_trace<R: Read>(
    reader: R,
    columns: &TraceColumns,
    map: ValueMap,
    params: &ProblemParams,
    skip_bad: bool,
) -> Result<(Instance, IngestReport)> {
    params.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut report = IngestReport::default();
    let mut agents = Vec::new();
    if rdr.headers()?.is_empty() {
        return Ok((Instance::new(params.clone(), agents)?, report));
    }
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Config(format!("trace has no column `{name}`")))
    };
    let vcol = find(&columns.value)?;
    let ccol = find(&columns.class)?;
    let ucol = columns.units.as_deref().map(find).transpose()?;
    let mut bad = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        report.rows += 1;
        let rec = rec?;
        match parse_row(&rec, vcol, ccol, ucol, params) {
            Ok((raw, labels, units)) => {
                let cap = params.value_cap(labels);
                let v = map.offset + map.scale * raw;
                let clamped = v.clamp(1.0, cap);
                if clamped != v {
                    report.clamped += 1;
                }
                if units > 1 {
                    report.split += 1;
                }
                agents.extend(std::iter::repeat_n(Agent::new(clamped, labels), units));
            }
            Err(reason) => bad.push((row, reason)),
        }
    }
    if !bad.is_empty() {
        if !skip_bad {
            return Err(HarnessError::BadRows(bad));
        }
        report.skipped = bad;
    }
    report.agents = agents.len();
    Ok((Instance::new(params.clone(), agents)?, report))
}

fn parse_row(
    rec: &csv::StringRecord,
    vcol: usize,
    ccol: usize,
    ucol: Option<usize>,
    params: &ProblemParams,
) -> std::result::Result<(f64, LabelSet, usize), String> {
    let cell = |c: usize| rec.get(c).ok_or_else(|| format!("missing column {}", c + 1));
    let raw: f64 = cell(vcol)?
        .parse()
        .map_err(|_| format!("value `{}` is not a number", cell(vcol).unwrap_or("")))?;
    if !raw.is_finite() {
        return Err("value is not finite".into());
    }
    let mut classes = Vec::new();
    for tok in cell(ccol)?
        .split(|c: char| c == ';' || c == '|' || c.is_whitespace())
        .filter(|t| !t.is_empty())
    {
        let j: usize = tok.parse().map_err(|_| format!("class `{tok}` is not an index"))?;
        if j == 0 || j > params.num_classes {
            return Err(format!("class {j} outside 1..={}", params.num_classes));
        }
        classes.push(j - 1);
    }
    if classes.is_empty() {
        return Err("no class label".into());
    }
    let units = match ucol {
        None => 1,
        Some(c) => {
            let u: f64 = cell(c)?
                .parse()
                .map_err(|_| "units is not a number".to_string())?;
            if !(u > 0.0) || !u.is_finite() {
                return Err(format!("units {u} must be positive"));
            }
            u.ceil() as usize
        }
    };
    Ok((raw, LabelSet::from_classes(classes), units))
}

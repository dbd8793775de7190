//! CSV stream ingestion.
//!
//! The input format is one labeled example per line:
//!
//! ```text
//! groups,label[,point_prediction]
//! 0;3,0.75
//! ,1.0,0.5
//! ```
//!
//! `groups` is a semicolon-separated list of integer group ids and may be
//! empty (an example belonging to no group is legal and updates nothing);
//! `label` is a decimal in [0, 1]; the optional third column carries a point
//! prediction in [0, 1] for the residual-wrapper path. Malformed rows are
//! rejected with their 1-based line number; the header is line 1.

use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use multivalid_core::GroupId;

use crate::HarnessError;

/// One parsed stream row.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamRow {
    pub group_ids: Vec<GroupId>,
    pub label: f64,
    pub point_prediction: Option<f64>,
}

/// Reads and validates a whole stream file.
pub fn load_stream(path: &Path) -> Result<Vec<StreamRow>, HarnessError> {
    parse_stream(File::open(path)?)
}

/// [`load_stream`] over any reader.
pub fn parse_stream<R: Read>(reader: R) -> Result<Vec<StreamRow>, HarnessError> {
    let mut lines = BufReader::new(reader).lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(HarnessError::Parse { line: 1, reason: "missing header".to_string() })
        }
    };
    let has_point = match header.trim() {
        "groups,label" => false,
        "groups,label,point_prediction" => true,
        other => {
            return Err(HarnessError::Parse {
                line: 1,
                reason: format!(
                    "header `{other}` is not `groups,label` or `groups,label,point_prediction`"
                ),
            })
        }
    };

    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expected = if has_point { 3 } else { 2 };
        if fields.len() != expected {
            return Err(HarnessError::Parse {
                line: line_no,
                reason: format!("expected {expected} fields, found {}", fields.len()),
            });
        }

        let mut group_ids: Vec<GroupId> = Vec::new();
        let groups_field = fields[0].trim();
        if !groups_field.is_empty() {
            for part in groups_field.split(';') {
                let id = part.trim().parse::<GroupId>().map_err(|e| HarnessError::Parse {
                    line: line_no,
                    reason: format!("group id `{part}`: {e}"),
                })?;
                group_ids.push(id);
            }
        }
        group_ids.sort_unstable();
        group_ids.dedup();

        let label = parse_unit_value(fields[1], "label", line_no)?;
        let point_prediction = if has_point {
            Some(parse_unit_value(fields[2], "point_prediction", line_no)?)
        } else {
            None
        };
        rows.push(StreamRow { group_ids, label, point_prediction });
    }
    Ok(rows)
}

fn parse_unit_value(field: &str, name: &str, line_no: usize) -> Result<f64, HarnessError> {
    let value = field.trim().parse::<f64>().map_err(|e| HarnessError::Parse {
        line: line_no,
        reason: format!("{name} `{field}`: {e}"),
    })?;
    if !(0.0..=1.0).contains(&value) || value.is_nan() {
        return Err(HarnessError::Parse {
            line: line_no,
            reason: format!("{name} {value} is outside [0, 1]"),
        });
    }
    Ok(value)
}

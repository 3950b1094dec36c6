use std::fmt::Write as _;
use std::path::Path;

use super::{write_atomic, FormatError};
use crate::model::{SourceId, SourceParams};

pub const CATALOG_HEADER: &str =
    "source_id,alpha_rad,delta_rad,parallax_mas,pm_alpha_star_masyr,pm_delta_masyr,rv_kms,epoch";

/// Values are written with Rust's shortest round-trip formatting, so a
/// catalog reads back bitwise.
pub fn write_catalog(path: &Path, rows: &[(SourceId, SourceParams)]) -> Result<(), FormatError> {
    let mut out = String::with_capacity(rows.len() * 160);
    out.push_str(CATALOG_HEADER);
    out.push('\n');
    for (id, s) in rows {
        writeln!(
            out,
            "{id},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            s.alpha, s.delta, s.parallax, s.pm_alpha_star, s.pm_delta, s.radial_velocity, s.epoch
        )
        .expect("write to string");
    }
    write_atomic(path, out.as_bytes())?;
    Ok(())
}

pub fn read_catalog(path: &Path) -> Result<Vec<(SourceId, SourceParams)>, FormatError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CATALOG_HEADER) {
        return Err(FormatError::Catalog {
            line: 1,
            detail: "missing or unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| FormatError::Catalog {
            line: line_no,
            detail,
        };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(bad(format!("{} fields, expected 8", fields.len())));
        }
        let id: SourceId = fields[0]
            .parse()
            .map_err(|e| bad(format!("source_id: {e}")))?;
        let mut v = [0.0; 7];
        for (k, x) in v.iter_mut().enumerate() {
            *x = fields[k + 1]
                .parse()
                .map_err(|e| bad(format!("column {}: {e}", k + 2)))?;
        }
        let s = SourceParams {
            alpha: v[0],
            delta: v[1],
            parallax: v[2],
            pm_alpha_star: v[3],
            pm_delta: v[4],
            radial_velocity: v[5],
            epoch: v[6],
        };
        if !s.is_finite() {
            return Err(bad("non-finite value".into()));
        }
        rows.push((id, s));
    }
    Ok(rows)
}

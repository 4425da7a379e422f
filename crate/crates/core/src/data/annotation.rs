//! ICDAR-style detection annotations: `x1,y1,x2,y2,x3,y3,x4,y4,transcription`.

use crate::error::{Error, Result};
use crate::masks::TextPolygon;

/// Transcription marking a do-not-care region.
pub const IGNORE_SENTINEL: &str = "###";

fn unquote(field: &str, line: usize) -> Result<String> {
    let t = field.trim();
    if let Some(inner) = t.strip_prefix('"') {
        let inner = inner.strip_suffix('"').ok_or_else(|| Error::Parse {
            line,
            msg: "unterminated quoted transcription".into(),
        })?;
        return Ok(inner.replace("\"\"", "\""));
    }
    if t.contains(',') {
        return Err(Error::Parse {
            line,
            msg: "wrong coordinate count (expected 8 values before the transcription)".into(),
        });
    }
    Ok(t.to_string())
}

/// Parses one annotation file. Blank lines are skipped; a leading BOM is
/// tolerated.
pub fn parse_detection_file(text: &str) -> Result<Vec<TextPolygon>> {
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut polys = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.splitn(9, ',').collect();
        if fields.len() < 8 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("wrong coordinate count: {} fields", fields.len()),
            });
        }
        let mut coords = [0.0; 8];
        for (c, f) in coords.iter_mut().zip(&fields[..8]) {
            *c = f.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("non-numeric coordinate {:?}", f.trim()),
            })?;
        }
        let transcription = match fields.get(8) {
            Some(t) => unquote(t, line_no)?,
            None => String::new(),
        };
        let vertices = coords.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        polys.push(TextPolygon {
            vertices,
            ignore: transcription == IGNORE_SENTINEL,
        });
    }
    Ok(polys)
}

/// Serializes quads in the same line format. Non-quads are rejected.
pub fn format_detection_file(polys: &[TextPolygon], transcriptions: &[&str]) -> Result<String> {
    let mut out = String::new();
    for (i, p) in polys.iter().enumerate() {
        if p.vertices.len() != 4 {
            return Err(Error::InvalidShape(format!(
                "annotation lines hold quads, polygon {i} has {} vertices",
                p.vertices.len()
            )));
        }
        for &(x, y) in &p.vertices {
            out.push_str(&format!("{x},{y},"));
        }
        let text = if p.ignore {
            IGNORE_SENTINEL
        } else {
            transcriptions.get(i).copied().unwrap_or("text")
        };
        if text.contains(',') || text.contains('"') {
            out.push_str(&format!("\"{}\"", text.replace('"', "\"\"")));
        } else {
            out.push_str(text);
        }
        out.push('\n');
    }
    Ok(out)
}

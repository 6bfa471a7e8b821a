use std::path::Path;

use super::{io_err, DataError, Difficulty, Label, ObjectClass};
use crate::geometry::OrientedBox;

/// One line per box: `class x_c y_c w h theta [difficulty]`.
pub fn format_labels(labels: &[Label]) -> String {
    let mut s = String::new();
    for l in labels {
        let b = &l.bbox;
        s.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6} {:.6}",
            l.class.name(),
            b.x,
            b.y,
            b.w,
            b.h,
            b.theta
        ));
        if let Some(d) = l.difficulty {
            s.push(' ');
            s.push_str(d.name());
        }
        s.push('\n');
    }
    s
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<Label>, DataError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |detail: String| DataError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            detail,
        };
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 6 && tok.len() != 7 {
            return Err(err(format!("expected 6 or 7 fields, got {}", tok.len())));
        }
        let class = ObjectClass::parse(tok[0]).ok_or_else(|| err(format!("unknown class `{}`", tok[0])))?;
        let names = ["x", "y", "w", "h", "theta"];
        let mut v = [0.0; 5];
        for (k, name) in names.iter().enumerate() {
            v[k] = tok[k + 1]
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("bad {name} `{}`", tok[k + 1])))?;
        }
        let bbox = OrientedBox::new(v[0], v[1], v[2], v[3], v[4]).map_err(|e| err(e.to_string()))?;
        let difficulty = match tok.get(6) {
            None => None,
            Some(t) => Some(Difficulty::parse(t).ok_or_else(|| err(format!("unknown difficulty `{t}`")))?),
        };
        out.push(Label {
            class,
            bbox,
            difficulty,
        });
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<Label>, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_labels(&text, path)
}

pub fn write_labels(path: &Path, labels: &[Label]) -> Result<(), DataError> {
    std::fs::write(path, format_labels(labels)).map_err(io_err(path))
}

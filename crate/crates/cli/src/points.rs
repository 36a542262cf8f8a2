//! Point-set input for `gm-solve`: plain CSV, one point per row, the last
//! column is the weight. Blank lines and lines starting with `#` are skipped.

use std::fmt;

use rfa_core::PointSet;

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ParseError {}

pub fn parse_point_set(text: &str) -> Result<PointSet, ParseError> {
    let mut points = Vec::new();
    let mut weights = Vec::new();
    let mut lines = Vec::new();
    let mut width = None;

    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| ParseError { line, message };
        let mut row = Vec::new();
        for (col, field) in trimmed.split(',').enumerate() {
            let field = field.trim();
            let v: f64 = field
                .parse()
                .map_err(|_| err(format!("column {}: {field:?} is not a number", col + 1)))?;
            if !v.is_finite() {
                return Err(err(format!("column {}: value must be finite", col + 1)));
            }
            row.push(v);
        }
        if row.len() < 2 {
            return Err(err("need at least one coordinate and a weight".into()));
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(err(format!("expected {w} columns, found {}", row.len())));
            }
            _ => {}
        }
        let weight = row.pop().unwrap();
        if weight <= 0.0 {
            return Err(err(format!("weight must be positive, got {weight}")));
        }
        points.push(row);
        weights.push(weight);
        lines.push(line);
    }

    if points.is_empty() {
        return Err(ParseError {
            line: 0,
            message: "no points in input".into(),
        });
    }
    PointSet::new(points, weights).map_err(|e| ParseError {
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_skips_comments() {
        let set = parse_point_set("# x,y,w\n0,0,1\n\n1, 2 ,0.5\n").unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.points()[1], vec![1.0, 2.0]);
        // weights are normalized by the point set
        assert!((set.weights()[0] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reports_line_numbers() {
        let e = parse_point_set("0,1\n1,x\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.to_string().contains("column 2"));

        let e = parse_point_set("0,1,1\n\n1,1\n").unwrap_err();
        assert_eq!(e.to_string(), "line 3: expected 3 columns, found 2");

        let e = parse_point_set("0,0\n").unwrap_err();
        assert!(e.to_string().contains("weight must be positive"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert_eq!(parse_point_set("# nothing\n").unwrap_err().line, 0);
    }
}

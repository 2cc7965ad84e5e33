//! MatrixMarket (`.mtx`) reader producing dense row-major matrices.
//!
//! Supports `coordinate` and `array` storage, `real`/`integer`/`pattern`
//! fields (pattern entries read as 1) and `general`/`symmetric`/`skew-symmetric`
//! layouts. Comment lines starting with `%` are skipped.

use std::fs;
use std::path::Path;

use super::{Matrix, ProblemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Storage {
    Coordinate,
    Array,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Real,
    Pattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Symmetry {
    General,
    Symmetric,
    SkewSymmetric,
}

fn parse_err(line: usize, msg: impl Into<String>) -> ProblemError {
    ProblemError::Parse { line, msg: msg.into() }
}

pub fn read_matrix_market(path: impl AsRef<Path>) -> Result<Matrix<f64>, ProblemError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ProblemError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    parse_matrix_market(&text)
}

pub fn parse_matrix_market(text: &str) -> Result<Matrix<f64>, ProblemError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (lno, banner) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let words: Vec<String> = banner.split_whitespace().map(str::to_ascii_lowercase).collect();
    if words.len() != 5 || words[0] != "%%matrixmarket" || words[1] != "matrix" {
        return Err(parse_err(lno, "missing '%%MatrixMarket matrix' banner"));
    }
    let storage = match words[2].as_str() {
        "coordinate" => Storage::Coordinate,
        "array" => Storage::Array,
        other => return Err(parse_err(lno, format!("unknown storage '{other}'"))),
    };
    let field = match words[3].as_str() {
        "real" | "double" | "integer" => Field::Real,
        "pattern" if storage == Storage::Coordinate => Field::Pattern,
        other => return Err(ProblemError::UnsupportedField(other.to_string())),
    };
    let symmetry = match words[4].as_str() {
        "general" => Symmetry::General,
        "symmetric" => Symmetry::Symmetric,
        "skew-symmetric" => Symmetry::SkewSymmetric,
        other => return Err(ProblemError::UnsupportedField(other.to_string())),
    };

    let mut body = lines.filter(|(_, l)| {
        let t = l.trim_start();
        !t.is_empty() && !t.starts_with('%')
    });

    let (lno, size_line) = body.next().ok_or_else(|| parse_err(lno, "missing size line"))?;
    let dims: Vec<usize> = size_line
        .split_whitespace()
        .map(|w| {
            w.parse::<usize>()
                .map_err(|_| parse_err(lno, format!("bad size field '{w}'")))
        })
        .collect::<Result<_, _>>()?;
    let expected_fields = if storage == Storage::Coordinate { 3 } else { 2 };
    if dims.len() != expected_fields {
        return Err(parse_err(lno, format!("size line needs {expected_fields} integers")));
    }
    let (rows, cols) = (dims[0], dims[1]);
    if rows == 0 || cols == 0 {
        return Err(parse_err(lno, "matrix has a zero dimension"));
    }
    if symmetry != Symmetry::General && rows != cols {
        return Err(parse_err(lno, "symmetric storage requires a square matrix"));
    }

    let mut m = Matrix::zeros(rows, cols);
    let mut last_line = lno;
    match storage {
        Storage::Coordinate => {
            let nnz = dims[2];
            let mut seen = 0usize;
            for (lno, line) in body {
                last_line = lno;
                if seen == nnz {
                    return Err(parse_err(lno, format!("more than the declared {nnz} entries")));
                }
                let w: Vec<&str> = line.split_whitespace().collect();
                let want = if field == Field::Pattern { 2 } else { 3 };
                if w.len() != want {
                    return Err(parse_err(lno, format!("expected {want} fields, found {}", w.len())));
                }
                let i = parse_index(w[0], rows, lno)?;
                let j = parse_index(w[1], cols, lno)?;
                let v = if field == Field::Pattern {
                    1.0
                } else {
                    parse_value(w[2], lno)?
                };
                place(&mut m, symmetry, i, j, v);
                seen += 1;
            }
            if seen != nnz {
                return Err(parse_err(last_line, format!("declared {nnz} entries, found {seen}")));
            }
        }
        Storage::Array => {
            // column-major; symmetric variants store the lower triangle only
            let slots: Vec<(usize, usize)> = (0..cols)
                .flat_map(|j| (0..rows).map(move |i| (i, j)))
                .filter(|&(i, j)| match symmetry {
                    Symmetry::General => true,
                    Symmetry::Symmetric => i >= j,
                    Symmetry::SkewSymmetric => i > j,
                })
                .collect();
            let mut it = slots.iter();
            for (lno, line) in body {
                last_line = lno;
                let w: Vec<&str> = line.split_whitespace().collect();
                if w.len() != 1 {
                    return Err(parse_err(lno, format!("expected 1 field, found {}", w.len())));
                }
                let &(i, j) = it
                    .next()
                    .ok_or_else(|| parse_err(lno, format!("more than the expected {} entries", slots.len())))?;
                place(&mut m, symmetry, i, j, parse_value(w[0], lno)?);
            }
            if it.next().is_some() {
                return Err(parse_err(last_line, format!("expected {} entries", slots.len())));
            }
        }
    }
    Ok(m)
}

fn parse_index(w: &str, bound: usize, line: usize) -> Result<usize, ProblemError> {
    let i: usize = w.parse().map_err(|_| parse_err(line, format!("bad index '{w}'")))?;
    if i == 0 || i > bound {
        return Err(parse_err(line, format!("index {i} outside 1..={bound}")));
    }
    Ok(i - 1)
}

fn parse_value(w: &str, line: usize) -> Result<f64, ProblemError> {
    let v: f64 = w.parse().map_err(|_| parse_err(line, format!("bad value '{w}'")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value '{w}'")));
    }
    Ok(v)
}

fn place(m: &mut Matrix<f64>, symmetry: Symmetry, i: usize, j: usize, v: f64) {
    *m.get_mut(i, j) += v;
    if i != j {
        match symmetry {
            Symmetry::General => {}
            Symmetry::Symmetric => *m.get_mut(j, i) += v,
            Symmetry::SkewSymmetric => *m.get_mut(j, i) -= v,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_in_array_format() {
        let m = parse_matrix_market("%%MatrixMarket matrix array real general\n% c\n2 2\n1\n0\n0\n1\n").unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 2));
        assert_eq!(m.as_slice(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn coordinate_general_and_symmetric() {
        let g = parse_matrix_market("%%MatrixMarket matrix coordinate real general\n3 2 3\n1 1 2.5\n3 2 -1\n2 1 4e0\n")
            .unwrap();
        assert_eq!(g.as_slice(), &[2.5, 0.0, 4.0, 0.0, 0.0, -1.0]);
        let s = parse_matrix_market("%%MatrixMarket matrix coordinate real symmetric\n2 2 2\n1 1 1\n2 1 3\n").unwrap();
        assert_eq!(s.as_slice(), &[1.0, 3.0, 3.0, 0.0]);
        let a = parse_matrix_market("%%MatrixMarket matrix array real symmetric\n2 2\n1\n2\n3\n").unwrap();
        assert_eq!(a.as_slice(), &[1.0, 2.0, 2.0, 3.0]);
    }

    #[test]
    fn pattern_entries_are_ones() {
        let p = parse_matrix_market("%%MatrixMarket matrix coordinate pattern general\n2 2 2\n1 2\n2 1\n").unwrap();
        assert_eq!(p.as_slice(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn malformed_inputs() {
        let e =
            parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 3\n1 1 1\n2 2 1\n").unwrap_err();
        assert!(matches!(e, ProblemError::Parse { line: 4, .. }), "{e:?}");
        let e =
            parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 1\n2 2 1\n").unwrap_err();
        assert!(matches!(e, ProblemError::Parse { line: 4, .. }), "{e:?}");
        let e = parse_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n3 1 1\n").unwrap_err();
        assert!(matches!(e, ProblemError::Parse { line: 3, .. }), "{e:?}");
        let e = parse_matrix_market("%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n").unwrap_err();
        assert!(matches!(e, ProblemError::Parse { .. }), "{e:?}");
        let e = parse_matrix_market("%%MatrixMarket matrix coordinate complex general\n1 1 1\n1 1 1 0\n").unwrap_err();
        assert!(matches!(e, ProblemError::UnsupportedField(_)), "{e:?}");
        assert!(parse_matrix_market("matrix\n").is_err());
        let e = parse_matrix_market("%%MatrixMarket matrix coordinate real general\n1 1 1\n1 1 x\n").unwrap_err();
        assert!(matches!(e, ProblemError::Parse { line: 3, .. }), "{e:?}");
    }
}

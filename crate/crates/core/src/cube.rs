//! Iridas/Adobe `.cube` text format for 3D LUTs.
//!
//! Data lines list output colors with the red input index varying fastest,
//! then green, then blue. Only the unit input domain is supported.

use std::io::{BufRead, Write};

use crate::lut::Lut3D;
use crate::{Error, Result};

/// Writes `lut` with six fractional digits per value.
pub fn write_cube<W: Write>(mut out: W, lut: &Lut3D<f32>, title: &str) -> Result<()> {
    let d = lut.dim();
    let e = lut.entries();
    let n = d * d * d;
    let title = title.replace('"', "'");
    writeln!(out, "TITLE \"{title}\"")?;
    writeln!(out, "LUT_3D_SIZE {d}")?;
    writeln!(out, "DOMAIN_MIN 0 0 0")?;
    writeln!(out, "DOMAIN_MAX 1 1 1")?;
    for b in 0..d {
        for g in 0..d {
            for r in 0..d {
                let idx = (r * d + g) * d + b;
                writeln!(out, "{:.6} {:.6} {:.6}", e[idx], e[n + idx], e[2 * n + idx])?;
            }
        }
    }
    Ok(())
}

pub fn cube_string(lut: &Lut3D<f32>, title: &str) -> String {
    let mut buf = Vec::new();
    write_cube(&mut buf, lut, title).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("cube output is ASCII")
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::CubeParse {
        line,
        message: message.into(),
    }
}

fn parse_reals(tokens: &[&str], line: usize) -> Result<Vec<f32>> {
    tokens
        .iter()
        .map(|t| {
            t.parse::<f32>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(line, format!("non-numeric token `{t}`")))
        })
        .collect()
}

/// Parses a 3D `.cube` file. Comments (`#`) and blank lines are skipped.
pub fn read_cube<R: BufRead>(reader: R) -> Result<Lut3D<f32>> {
    let mut size: Option<usize> = None;
    let mut rows: Vec<[f32; 3]> = Vec::new();
    let mut last_line = 0;

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            "TITLE" => continue,
            "LUT_3D_SIZE" => {
                if tokens.len() != 2 {
                    return Err(parse_err(lineno, "LUT_3D_SIZE takes one value"));
                }
                let d: usize = tokens[1]
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("non-numeric token `{}`", tokens[1])))?;
                if d < 2 {
                    return Err(parse_err(lineno, format!("LUT_3D_SIZE {d} is below 2")));
                }
                if !rows.is_empty() {
                    return Err(parse_err(lineno, "LUT_3D_SIZE after data lines"));
                }
                size = Some(d);
            }
            "DOMAIN_MIN" | "DOMAIN_MAX" => {
                if tokens.len() != 4 {
                    return Err(parse_err(lineno, format!("{} takes three values", tokens[0])));
                }
                let want = if tokens[0] == "DOMAIN_MIN" { 0.0 } else { 1.0 };
                let vals = parse_reals(&tokens[1..], lineno)?;
                if vals.iter().any(|&v| v != want) {
                    return Err(parse_err(lineno, "only the unit input domain is supported"));
                }
            }
            "LUT_1D_SIZE" => return Err(parse_err(lineno, "1D LUTs are not supported")),
            t if t.starts_with(|c: char| c.is_ascii_alphabetic()) => {
                return Err(parse_err(lineno, format!("unrecognized keyword `{t}`")));
            }
            _ => {
                if tokens.len() != 3 {
                    return Err(parse_err(
                        lineno,
                        format!("data line needs 3 values, found {}", tokens.len()),
                    ));
                }
                if size.is_none() {
                    return Err(parse_err(lineno, "data line before LUT_3D_SIZE"));
                }
                let v = parse_reals(&tokens, lineno)?;
                rows.push([v[0], v[1], v[2]]);
            }
        }
    }

    let d = size.ok_or_else(|| parse_err(last_line.max(1), "missing LUT_3D_SIZE"))?;
    let n = d * d * d;
    if rows.len() != n {
        return Err(parse_err(
            last_line,
            format!(
                "LUT_3D_SIZE {d} needs {n} data lines, found {} ({} {})",
                rows.len(),
                n.abs_diff(rows.len()),
                if rows.len() < n { "missing" } else { "extra" }
            ),
        ));
    }
    let mut entries = vec![0.0f32; 3 * n];
    let mut it = rows.into_iter();
    for b in 0..d {
        for g in 0..d {
            for r in 0..d {
                let [vr, vg, vb] = it.next().expect("row count checked");
                let idx = (r * d + g) * d + b;
                entries[idx] = vr;
                entries[n + idx] = vg;
                entries[2 * n + idx] = vb;
            }
        }
    }
    Lut3D::from_entries(d, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lut::Rgb;

    #[test]
    fn identity_dim2_text() {
        let text = cube_string(&Lut3D::identity(2).unwrap(), "identity");
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "TITLE \"identity\"");
        assert_eq!(lines[1], "LUT_3D_SIZE 2");
        assert_eq!(lines[2], "DOMAIN_MIN 0 0 0");
        assert_eq!(lines[3], "DOMAIN_MAX 1 1 1");
        assert_eq!(lines.len(), 4 + 8);
        assert_eq!(lines[4], "0.000000 0.000000 0.000000");
        assert_eq!(lines[5], "1.000000 0.000000 0.000000");
        assert_eq!(lines[11], "1.000000 1.000000 1.000000");
    }

    #[test]
    fn tolerates_comments_and_blank_lines() {
        let text = "# header\n\nTITLE \"x\"\nLUT_3D_SIZE 2 # trailing\n\n0 0 0\n1 0 0\n0 1 0\n1 1 0\n# mid\n0 0 1\n1 0 1\n0 1 1\n1 1 1\n";
        let lut = read_cube(text.as_bytes()).unwrap();
        assert_eq!(lut, Lut3D::identity(2).unwrap());
    }

    #[test]
    fn short_file_reports_shortfall() {
        let mut text = cube_string(&Lut3D::identity(2).unwrap(), "t");
        let cut = text.trim_end().rfind('\n').unwrap();
        text.truncate(cut + 1);
        let err = read_cube(text.as_bytes()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("needs 8 data lines, found 7"), "{msg}");
        assert!(msg.contains("1 missing"), "{msg}");
    }

    #[test]
    fn missing_size_is_an_error() {
        let err = read_cube("0 0 0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::CubeParse { line: 1, .. }));
        let err = read_cube("TITLE \"a\"\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("missing LUT_3D_SIZE"));
    }

    #[test]
    fn non_numeric_token_names_line() {
        let text = "LUT_3D_SIZE 2\n0 0 0\n1 0 0\n0 x 0\n";
        match read_cube(text.as_bytes()).unwrap_err() {
            Error::CubeParse { line, message } => {
                assert_eq!(line, 4);
                assert!(message.contains("`x`"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn channel_order_is_red_fastest() {
        let mut lut = Lut3D::identity(2).unwrap();
        lut.set_entry(1, 0, 0, Rgb::new(0.25, 0.5, 0.75));
        let text = cube_string(&lut, "t");
        assert_eq!(text.lines().nth(5).unwrap(), "0.250000 0.500000 0.750000");
    }
}

use crate::error::PtsError;
use crate::geometry::{Point, Shape, NUM_LANDMARKS};

fn number(line: usize, token: &str) -> Result<f64, PtsError> {
    token
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| PtsError::BadNumber {
            line,
            token: token.to_string(),
        })
}

/// Parses a 68-point landmark file:
///
/// ```text
/// version: 1
/// n_points: 68
/// {
/// x y
/// ...
/// }
/// ```
///
/// Blank lines, CR/LF endings and repeated spaces are accepted.
pub fn parse_pts(text: &str) -> Result<Shape, PtsError> {
    let lines: Vec<(usize, &str)> = text
        .split('\n')
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .collect();
    let eof = lines.last().map_or(1, |(n, _)| n + 1);
    let mut lines = lines.into_iter();

    let header = |item: Option<(usize, &str)>, key: &str, expected: &'static str| match item {
        Some((n, l)) => match l.split_once(':') {
            Some((k, v)) if k.trim() == key => Ok((n, v.trim().to_string())),
            _ => Err(PtsError::BadHeader { line: n, expected }),
        },
        None => Err(PtsError::BadHeader { line: 1, expected }),
    };
    let (vn, version) = header(lines.next(), "version", "version: 1")?;
    number(vn, &version)?;
    let (cn, count) = header(lines.next(), "n_points", "n_points: 68")?;
    let declared = count.parse::<usize>().map_err(|_| PtsError::BadNumber {
        line: cn,
        token: count.clone(),
    })?;
    if declared != NUM_LANDMARKS {
        return Err(PtsError::WrongCount {
            line: cn,
            found: declared,
        });
    }
    match lines.next() {
        Some((_, "{")) => {}
        Some((n, _)) => return Err(PtsError::MissingBrace { line: n, brace: '{' }),
        None => return Err(PtsError::MissingBrace { line: cn + 1, brace: '{' }),
    }
    let mut points = Vec::with_capacity(NUM_LANDMARKS);
    while points.len() < NUM_LANDMARKS {
        let Some((n, l)) = lines.next() else {
            return Err(PtsError::MissingBrace { line: eof, brace: '}' });
        };
        if l == "}" {
            return Err(PtsError::WrongCount {
                line: n,
                found: points.len(),
            });
        }
        let tokens: Vec<&str> = l.split_whitespace().collect();
        if tokens.len() != 2 {
            if let Some(bad) = tokens.iter().find(|t| t.parse::<f64>().is_err()) {
                return Err(PtsError::BadNumber {
                    line: n,
                    token: bad.to_string(),
                });
            }
            return Err(PtsError::BadPoint { line: n });
        }
        points.push(Point::new(number(n, tokens[0])?, number(n, tokens[1])?));
    }
    match lines.next() {
        Some((_, "}")) => {}
        Some((n, _)) => return Err(PtsError::MissingBrace { line: n, brace: '}' }),
        None => return Err(PtsError::MissingBrace { line: eof, brace: '}' }),
    }
    if let Some((n, _)) = lines.next() {
        return Err(PtsError::TrailingContent { line: n });
    }
    Ok(Shape::new(points).expect("68 finite points"))
}

/// Writes `shape` in the landmark format. Coordinates use the shortest
/// representation that parses back to the same value.
pub fn format_pts(shape: &Shape) -> String {
    let mut s = format!("version: 1\nn_points: {NUM_LANDMARKS}\n{{\n");
    for p in shape.points() {
        s.push_str(&format!("{} {}\n", p.x, p.y));
    }
    s.push_str("}\n");
    s
}
